from stackguide.baseline import BaselineConfig, Registrar, register_and_project
from stackguide.conf import RunConfig, load_conf
from stackguide.error import GuideError
from stackguide.net import NetConfig, ModelWeights, forward, init_weights, load_weights, predict_target, save_weights
from stackguide.raster import GeoImage, TargetAnnotation, load_geo_image, load_stack
from stackguide.report import EvalReport, compute_metrics, format_table, render_overlay
from stackguide.synth import SamplerConfig, ViewTransform, generate_dataset, project_target, sample_view, warp
from stackguide.train import TrainConfig, train
from stackguide.trajectory import TrajectoryConfig, judge_trajectory, simulate_trajectory

__all__ = [
    'BaselineConfig', 'EvalReport', 'GeoImage', 'GuideError', 'ModelWeights', 'NetConfig', 'Registrar', 'RunConfig',
    'SamplerConfig', 'TargetAnnotation', 'TrainConfig', 'TrajectoryConfig', 'ViewTransform',
    'compute_metrics', 'forward', 'format_table', 'generate_dataset', 'init_weights', 'judge_trajectory',
    'load_conf', 'load_geo_image', 'load_stack', 'load_weights', 'predict_target', 'project_target',
    'register_and_project', 'render_overlay', 'sample_view', 'save_weights', 'simulate_trajectory', 'train', 'warp',
]
