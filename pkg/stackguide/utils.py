import concurrent.futures as cf
import os
from pathlib import Path
import sys
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, TypeVar, Union

import murmurhash
import orjson
from tqdm import tqdm

T = TypeVar('T')
R = TypeVar('R')


def sorted_dict(d: Dict):
    return dict(sorted(d.items(), key=lambda i: i[0]))


def copy_props(source: Optional[Dict], target: Dict, prefixes: Optional[List[str]] = None, overwrite=True):
    """copy dotted props (e.g. "sampler.zoom_max") into a nested dict"""
    if source:
        assert isinstance(source, dict), f'expect dict and not {type(source)}'
        assert isinstance(target, dict), f'expect dict and not {type(target)}'
        # [foo, bar] -> foo.bar.
        prefix = '.'.join(prefixes) + '.' if prefixes else None
        for k, v in source.items():
            if prefix:
                if not k.startswith(prefix):
                    continue
                k = k[len(prefix):]
            node = target
            *parents, leaf = k.split('.')
            for p in parents:
                if not isinstance(node.get(p), dict):
                    node[p] = dict()
                node = node[p]
            if overwrite or leaf not in node:
                node[leaf] = v


def hash32(dump: Union[bytes, str]) -> str:
    """Creates a 32-bit hash from bytes or string"""
    return format(murmurhash.hash(dump) & (1 << 32)-1, 'x')


def seed32(name: str) -> int:
    """Maps a name to a stable 32-bit integer (e.g. for rng stream keys)"""
    return murmurhash.hash(name) & (1 << 32)-1


def hash_file(path: Union[Path, str]) -> str:
    with open(path, 'rb') as f:
        return hash32(f.read())


def humantime(t: float) -> str:
    """Formats time into a compact human readable format

    Parameters
    ----------
    t : float
        number of seconds
    """
    times = {}
    units = {'d': 86400, 'h': 3600, 'm': 60, 's': 1}
    for unit, seconds in units.items():
        if t // seconds > 0:
            times[unit] = int(t//seconds)
            t -= t//seconds * seconds
    if not times:
        if int(t * 1000) > 0:
            times['ms'] = int(t * 1000)
        else:
            return '0s'
    return ''.join(f'{v}{u}' for u, v in times.items())


def expand_path(path: Union[Path, str]) -> Path:
    return Path(os.path.expandvars(os.path.expanduser(str(path))))


def dumps_json(obj: Any) -> bytes:
    return orjson.dumps(obj, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)


def dump_json(obj: Any, path: Union[Path, str]):
    write_bytes(dumps_json(obj), path)


def load_json(path: Union[Path, str]) -> Any:
    with open(path, 'rb') as f:
        return orjson.loads(f.read())


def write_bytes(data: bytes, path: Union[Path, str]):
    """write to a temporary sibling first, then rename into place"""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    temp_file = path.with_name(path.name + '.tmp')
    with open(temp_file, 'wb') as f:
        f.write(data)
    temp_file.replace(path)


def readlines(path, skip_rows=0):
    path = expand_path(path)
    with open(path, mode='r', encoding='utf-8') as f:
        for i, line in enumerate(f):
            if i >= skip_rows:
                yield line.rstrip()


def writelines(lines: Iterable[str], path):
    write_bytes(''.join(f'{line}\n' for line in lines).encode('utf-8'), expand_path(path))


def wrap_tqdm(name: str, iterable: Iterable[T], total: Optional[int] = None, quiet: bool = False) -> Iterator[T]:
    disable = quiet or not sys.stderr.isatty()
    return (i for i in tqdm(iterable, desc=name, total=total, unit_scale=True, leave=False, disable=disable))


def pool_map(func: Callable[[T], R], items: Iterable[T], threads: int = 1) -> Iterator[R]:
    """
    Map ``func`` over ``items`` and yield the results in input order.

    With ``threads == 1`` everything runs inline, otherwise a thread pool
    is used. Ordering never depends on completion order, so reductions over
    the results stay deterministic.
    """
    if threads <= 1:
        for item in items:
            yield func(item)
        return

    pool = cf.ThreadPoolExecutor(max_workers=threads)
    try:
        futures = [pool.submit(func, item) for item in items]
        for f in futures:
            yield f.result()
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
