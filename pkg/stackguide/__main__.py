import argparse
import dataclasses
import logging
from pathlib import Path
import statistics
import sys
from typing import Dict, List, Optional, Type

from filelock import FileLock
import numpy as np

from stackguide.baseline import BaselineConfig
from stackguide.conf import C, RunConfig, default_data_dir, from_dict, load_conf
from stackguide.error import ConfigError, GuideError, InvalidCount
from stackguide.evaluate import (
    BaselineEvaluator, evaluate_baseline, evaluate_learned, evaluate_trajectories, inference_times, write_overlays
)
from stackguide.logger import logger
from stackguide.net import NetConfig, load_weights, save_weights
from stackguide.raster import load_stack
from stackguide.report import (
    EvalConfig, EvalReport, compute_metrics, format_table, format_verdicts, load_report, merge_reports,
    provenance, text_table, write_report
)
from stackguide.scene import SceneConfig, write_stack
from stackguide.synth import SamplerConfig, generate_dataset, load_manifest, load_sample_image
from stackguide.train import TrainConfig, TrainingSet, train
from stackguide.trajectory import (
    TrajectoryConfig, simulate_trajectories, split_trajectories, trajectory_samples, write_trajectory
)
from stackguide.utils import dump_json, hash_file

__GUIDE__ = '\u001b[31;1m(+)\u001b[0m'

# configure loguru
logger.remove()
logger.add(sys.stderr, level='INFO', format='<green>[{time:YYYY-MM-DD HH:mm:ss}]</green> <level>{message}</level>')

RECIPES = {
    'weak': [('A', 'base')],
    'strong': [('A', 'base'), ('A_snow', 'snow'), ('B', 'base'), ('B_snow', 'snow')],
}


def _build(run: RunConfig, name: str, cls: Type[C]) -> C:
    """section dataclass; seed and threads default to the run's values"""
    section = run.section(name)
    fields = {f.name for f in dataclasses.fields(cls)}
    if 'seed' in fields:
        section.setdefault('seed', run.seed)
    if 'threads' in fields:
        section.setdefault('threads', run.threads)
    return from_dict(cls, section, name)


def _out_dir(run: RunConfig, command: str) -> Path:
    return run.out or default_data_dir() / command


def _arg_path(path: Optional[str]) -> Optional[Path]:
    """command line paths are relative to the working directory"""
    return Path(path).absolute() if path else None


def _stack_path(run: RunConfig, stack: Optional[str]) -> Path:
    if stack:
        return Path(stack).absolute()
    path = run.section('stack').get('path', None)
    if path is None:
        raise ConfigError('no stack manifest, use --stack or stack.path')
    return run.resolve_path(path)


def _write_run(run: RunConfig, out: Path, **inputs: Optional[Path]):
    """the resolved config beside the outputs, plus hashes of every input"""
    dump_json({
        'config': run.dict(),
        'config_hash': run.hash,
        'inputs': dict((k, {'path': str(v), 'hash': hash_file(v)}) for k, v in sorted(inputs.items()) if v),
    }, out / 'config.json')


def cmd_scene(run: RunConfig, out: Path, recipe: str):
    section = run.section('scene')
    images = [tuple(i) for i in section.pop('images', None) or RECIPES[recipe]]
    section.setdefault('seed', run.seed)
    cfg = from_dict(SceneConfig, section, 'scene')
    write_stack(cfg, images, out)
    _write_run(run, out)


def cmd_ingest(run: RunConfig, out: Optional[Path], stack_path: Path) -> Dict:
    stack_conf = run.section('stack')
    stack, target = load_stack(stack_path, radiometry=stack_conf.get('radiometry', None))
    rows, images = [], []
    for img in stack:
        u, v = target.pixel(img.image_id)
        stats = {'id': img.image_id, 'mode': img.mode_tag, 'width': img.width, 'height': img.height,
                 'target_px': [u, v], 'min': float(img.pixels.min()), 'mean': float(img.pixels.mean()),
                 'max': float(img.pixels.max()), 'degenerate_range': img.degenerate_range}
        images.append(stats)
        rows.append([img.image_id, img.mode_tag or '-', f'{img.width}x{img.height}', f'({u:.1f}, {v:.1f})',
                     f'{stats["min"]:.3f}', f'{stats["mean"]:.3f}', f'{stats["max"]:.3f}'])
    print(text_table(['image', 'mode', 'size', 'target', 'min', 'mean', 'max'], rows))
    summary = {'stack': str(stack_path), 'target': {'world_position': list(target.world_position)},
               'images': images}
    if out is not None:
        dump_json(summary, out / 'stack_summary.json')
        _write_run(run, out, stack=stack_path)
    logger.opt(colors=True).info(f'stack of <c>{len(stack)}</c> images is valid')
    return summary


def cmd_generate(run: RunConfig, out: Path, stack_path: Path, quiet: bool):
    stack, target = load_stack(stack_path, radiometry=run.section('stack').get('radiometry', None))
    sampler = _build(run, 'sampler', SamplerConfig)
    dataset = run.section('dataset')
    unknown = sorted(set(dataset) - {'r_train', 'r_test', 'train_images', 'test_images'})
    if unknown:
        raise ConfigError(f'dataset: unknown keys {unknown}')
    split_images = dict((split, dataset[f'{split}_images']) for split in ('train', 'test')
                        if dataset.get(f'{split}_images'))
    generate_dataset(stack, target, sampler, int(dataset.get('r_train', 2000)), int(dataset.get('r_test', 200)),
                     run.seed, out_dir=out, split_images=split_images or None, threads=run.threads,
                     stack_ref=str(stack_path), quiet=quiet)
    _write_run(run, out, stack=stack_path)


def cmd_train(run: RunConfig, out: Path, manifest_path: Path, weights_path: Optional[Path], quiet: bool):
    manifest = load_manifest(manifest_path)
    net_cfg = from_dict(NetConfig, run.section('net'), 'net')
    start = load_weights(weights_path) if weights_path else None
    w = train(manifest, net_cfg, _build(run, 'train', TrainConfig), weights=start,
              loss_curve=out / 'loss.tsv', quiet=quiet)
    save_weights(w, out / 'weights.bin')
    _write_run(run, out, manifest=manifest_path, weights=weights_path)


def _timing(weights, images: List[np.ndarray], frames: int) -> Dict:
    if not images:
        return {}
    times = inference_times(weights, [images[i % len(images)] for i in range(frames)])
    median = statistics.median(times)
    logger.opt(colors=True).info(f'median inference <c>{median * 1000:.1f}ms</c> per frame over {frames} frames')
    return {'frames': frames, 'median_ms': median * 1000, 'max_ms': max(times) * 1000}


def cmd_eval(run: RunConfig, out: Path, manifest_path: Path, weights_path: Optional[Path],
             stack_path: Optional[Path], methods: Optional[List[str]], quiet: bool) -> EvalReport:
    section = run.section('eval')
    if methods:
        section['methods'] = methods
    cfg = from_dict(EvalConfig, section, 'eval')
    manifest = load_manifest(manifest_path)
    results = []

    if 'learned' in cfg.methods:
        if weights_path is None:
            raise ConfigError('the learned method needs --weights')
        weights = load_weights(weights_path)
        results += evaluate_learned(manifest, weights, cfg.split, run.threads, quiet)
        samples = manifest.split(cfg.split)
        if cfg.overlays > 0:
            write_overlays(manifest, weights, out / 'overlays', cfg.overlays, cfg.split)
        if cfg.timing_frames > 0:
            images = [load_sample_image(manifest, s) for s in samples[:cfg.timing_frames]]
            dump_json(_timing(weights, images, cfg.timing_frames), out / 'timing.json')

    if 'baseline' in cfg.methods:
        if stack_path is None:
            raise ConfigError('the baseline needs the stack, use --stack or stack.path')
        stack, target = load_stack(stack_path, radiometry=run.section('stack').get('radiometry', None))
        results += evaluate_baseline(manifest, stack, target, _build(run, 'baseline', BaselineConfig),
                                     split=cfg.split, threads=run.threads, quiet=quiet)

    report = compute_metrics(results, cfg.threshold)
    report.provenance = provenance(run.dict(), manifest=manifest_path, weights=weights_path, stack=stack_path)
    dump_json([r.dict() for r in results], out / 'frames.json')
    write_report(report, out / 'report.json')
    print(format_table(report))
    _write_run(run, out, manifest=manifest_path, weights=weights_path, stack=stack_path)
    return report


def cmd_trajectory(run: RunConfig, out: Path, stack_path: Path, weights_path: Optional[Path],
                   methods: Optional[List[str]], quiet: bool) -> EvalReport:
    section = run.section('eval')
    if methods:
        section['methods'] = methods
    cfg = from_dict(EvalConfig, section, 'eval')
    tcfg = _build(run, 'trajectory', TrajectoryConfig)
    stack, target = load_stack(stack_path, radiometry=run.section('stack').get('radiometry', None))

    trajectories = simulate_trajectories(tcfg, stack, target, run.threads)
    train_idx, test_idx = split_trajectories(len(trajectories), tcfg.train_fraction)
    for i in test_idx:
        write_trajectory(out / 'trajectories' / f'trajectory{i}.tsv', trajectories[i], target)

    weights = None
    if 'learned' in cfg.methods:
        if weights_path is not None:
            weights = load_weights(weights_path)
        else:
            net_cfg = from_dict(NetConfig, run.section('net'), 'net')
            if net_cfg.input_size != tcfg.view_size:
                raise ConfigError(f'net.input_size {net_cfg.input_size} != trajectory.view_size {tcfg.view_size}')
            samples = trajectory_samples([trajectories[i] for i in train_idx], stack, target, 'train',
                                         threads=run.threads)
            if not samples:
                raise InvalidCount('no training frames')
            data = TrainingSet(samples, np.stack([s.image.astype(np.float32) for s in samples]))
            weights = train(data, net_cfg, _build(run, 'train', TrainConfig), loss_curve=out / 'loss.tsv',
                            quiet=quiet)
            save_weights(weights, out / 'weights.bin')

    baseline = None
    if 'baseline' in cfg.methods:
        baseline = BaselineEvaluator(stack, target, _build(run, 'baseline', BaselineConfig))

    results, verdicts = evaluate_trajectories([trajectories[i] for i in test_idx], stack, target, cfg,
                                              weights, baseline, run.threads, quiet)
    report = compute_metrics(results, cfg.threshold)
    report.trajectories = verdicts
    report.provenance = provenance(run.dict(), stack=stack_path, weights=weights_path)
    dump_json([r.dict() for r in results], out / 'frames.json')
    write_report(report, out / 'report.json')
    print(format_table(report))
    print()
    print(format_verdicts(report))
    _write_run(run, out, stack=stack_path, weights=weights_path)
    return report


def cmd_report(files: List[Path], out: Optional[Path]) -> EvalReport:
    report = merge_reports([load_report(f) for f in files])
    print(format_table(report))
    if report.trajectories:
        print()
        print(format_verdicts(report))
    if out is not None:
        write_report(report, out / 'report.json')
    return report


def main(argv: Optional[List[str]] = None):
    # disable stack dump on ctrl+c
    logging.getLogger("concurrent.futures").addFilter(lambda record: False)

    class MainParser(argparse.ArgumentParser):

        def error(self, message):
            self.print_help()
            sys.stderr.write('\nerror: %s\n' % message)
            sys.exit(2)

    # guide ... [-c config] [-o out] [--seed n] [--threads n] [-p key=value]
    run_parser = argparse.ArgumentParser(add_help=False)
    run_parser.add_argument(
        '-c', '--config', help='JSON or YAML run config'
    )
    run_parser.add_argument(
        '-o', '--out', help='the output folder (default: $GUIDE_DATA_DIR/<command>)'
    )
    run_parser.add_argument(
        '--seed', type=int, help='global seed'
    )
    run_parser.add_argument(
        '--threads', type=int, help='worker threads, 1 is bitwise deterministic'
    )
    run_parser.add_argument(
        '-p', '--prop', action='append', default=[], help='override a config value (e.g. sampler.zoom_max=4)'
    )
    run_parser.add_argument(
        '-v', '--verbose', action='store_true', help='debug logging'
    )
    run_parser.add_argument(
        '-q', '--quiet', action='store_true', help='no progress bars'
    )

    # guide
    guide_parser = MainParser('guide')
    subparsers = guide_parser.add_subparsers(
        title='command', dest='command'
    )

    # guide scene
    scene_parser = subparsers.add_parser(
        'scene', parents=[run_parser], help='write a procedural reference stack'  # type: ignore
    )
    scene_parser.add_argument(
        '-r', '--recipe', choices=sorted(RECIPES), default='weak', help='stack images (default: %(default)s)'
    )

    # guide ingest
    ingest_parser = subparsers.add_parser(
        'ingest', parents=[run_parser], help='validate a stack manifest'  # type: ignore
    )
    ingest_parser.add_argument(
        'stack', nargs='?', help='stack manifest'
    )

    # guide generate
    generate_parser = subparsers.add_parser(
        'generate', parents=[run_parser], help='sample a dataset of views'  # type: ignore
    )
    generate_parser.add_argument(
        '-s', '--stack', help='stack manifest'
    )

    # guide train
    train_parser = subparsers.add_parser(
        'train', parents=[run_parser], help='train the network'  # type: ignore
    )
    train_parser.add_argument(
        'manifest', help='dataset manifest'
    )
    train_parser.add_argument(
        '-w', '--weights', help='start weights'
    )

    # guide eval / guide baseline
    eval_parser = subparsers.add_parser(
        'eval', parents=[run_parser], help='evaluate on a dataset split'  # type: ignore
    )
    baseline_parser = subparsers.add_parser(
        'baseline', parents=[run_parser], help='evaluate the registration baseline only'  # type: ignore
    )
    for parser in (eval_parser, baseline_parser):
        parser.add_argument(
            'manifest', help='dataset manifest'
        )
        parser.add_argument(
            '-s', '--stack', help='stack manifest, needed by the baseline'
        )
    eval_parser.add_argument(
        '-w', '--weights', help='trained weights'
    )
    eval_parser.add_argument(
        '-m', '--methods', nargs='+', choices=['learned', 'baseline'], help='methods (default: eval.methods)'
    )

    # guide trajectory
    trajectory_parser = subparsers.add_parser(
        'trajectory', parents=[run_parser], help='simulate, train and judge trajectories'  # type: ignore
    )
    trajectory_parser.add_argument(
        '-s', '--stack', help='stack manifest'
    )
    trajectory_parser.add_argument(
        '-w', '--weights', help='trained weights, otherwise train on the training trajectories'
    )
    trajectory_parser.add_argument(
        '-m', '--methods', nargs='+', choices=['learned', 'baseline'], help='methods (default: eval.methods)'
    )

    # guide report
    report_parser = subparsers.add_parser(
        'report', help='merge reports and print their tables'  # type: ignore
    )
    report_parser.add_argument(
        'reports', nargs='+', help='report files'
    )
    report_parser.add_argument(
        '-o', '--out', help='write the merged report here'
    )

    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        guide_parser.print_help()
        return

    args = guide_parser.parse_args(argv)
    if getattr(args, 'verbose', False):
        logger.remove()
        logger.add(sys.stderr, level='DEBUG',
                   format='<green>[{time:YYYY-MM-DD HH:mm:ss}]</green> <level>{message}</level>')

    try:
        if args.command == 'report':
            cmd_report([Path(f) for f in args.reports], Path(args.out) if args.out else None)
            return

        run = load_conf(args.config, args.prop, seed=args.seed, threads=args.threads,
                        out=str(_arg_path(args.out)) if args.out else None)
        # ingest only writes a summary when asked to
        out = _out_dir(run, args.command) if args.command != 'ingest' or run.out else None
        logger.info(f'{__GUIDE__} {args.command} (config {run.hash})')

        if out is None:
            cmd_ingest(run, None, _stack_path(run, args.stack))
            return

        out.mkdir(parents=True, exist_ok=True)
        with FileLock(str(out / '.lock')):
            if args.command == 'scene':
                cmd_scene(run, out, args.recipe)
            elif args.command == 'ingest':
                cmd_ingest(run, out, _stack_path(run, args.stack))
            elif args.command == 'generate':
                cmd_generate(run, out, _stack_path(run, args.stack), args.quiet)
            elif args.command == 'train':
                cmd_train(run, out, _arg_path(args.manifest), _arg_path(args.weights), args.quiet)
            elif args.command in ('eval', 'baseline'):
                stack = _stack_path(run, args.stack) if args.stack or run.section('stack').get('path') else None
                methods = ['baseline'] if args.command == 'baseline' else args.methods
                cmd_eval(run, out, _arg_path(args.manifest), _arg_path(getattr(args, 'weights', None)), stack, methods,
                         args.quiet)
            elif args.command == 'trajectory':
                cmd_trajectory(run, out, _stack_path(run, args.stack), _arg_path(args.weights), args.methods,
                               args.quiet)
        logger.info(f'{args.command} done, outputs in {out}')
    except GuideError as e:
        logger.error(f'{type(e).__name__}: {e}')
        sys.exit(e.exit_code)
    except KeyboardInterrupt:
        # fail silently
        pass


if __name__ == "__main__":

    main()
