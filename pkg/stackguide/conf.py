import configparser
import copy
import dataclasses
import json
import math
import os
from pathlib import Path
import re
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union

import simpleeval

from stackguide.error import ConfigError
from stackguide.utils import copy_props, dumps_json, expand_path, hash32, sorted_dict

C = TypeVar('C')

SECTIONS = ('stack', 'scene', 'sampler', 'dataset', 'net', 'train', 'baseline', 'trajectory', 'eval')

_MATH_NAMES = {'pi': math.pi, 'tau': math.tau, 'e': math.e, 'inf': math.inf}
_MATH_FUNCS = dict((k, getattr(math, k)) for k in (
    'radians', 'degrees', 'sqrt', 'log', 'log2', 'exp', 'sin', 'cos', 'tan', 'floor', 'ceil'))
_MATH_FUNCS.update(abs=abs, min=min, max=max, round=round, int=int, float=float)


class Rewrite:

    def discard_item(self, k, v: Any, depth: int, parent=None):
        return False

    def rewrite(self, v: Any) -> Any:
        return self._rewrite(None, v, depth=0)

    def _rewrite(self, k: Optional[str], v: Any, depth: int):
        if isinstance(v, str):
            return self.rewrite_str(k, v, depth)
        elif isinstance(v, (list, tuple)):
            return [self._rewrite(k, v_, depth+1) for v_ in v]
        elif isinstance(v, dict):
            return self.rewrite_dict(k, self._rewrite_dict(k, v, depth), depth)
        else:
            return v

    def rewrite_str(self, k, v: str, depth: int):
        return v

    def rewrite_dict(self, k, v: Dict, depth: int):
        return v

    def _rewrite_dict(self, k, v: Dict, depth: int):
        new_dict = dict()
        for k_, v_ in v.items():
            if self.discard_item(k_, v_, depth+1, v):
                continue
            new_dict[k_] = self._rewrite(k_, v_, depth+1)
        return new_dict


class RewriteRunConf(Rewrite):
    """Create usable config: drop comments, evaluate expressions, expand paths"""

    def discard_item(self, k, v, depth, parent):
        # discard comments and the props section
        return k.startswith('#') or (depth == 1 and k == '_props')

    def rewrite_str(self, k, v, depth):
        # escaped literals
        if v.startswith('==') or v.startswith('$$'):
            return v[1:]
        # "=radians(10)"
        if v.startswith('='):
            return evaluate(v[1:], k)
        # environment variables (fail if not exists) and home directory
        if v.startswith('$'):
            m = re.match(r'^\$[\w]+', v)
            if m:
                name = m.group()[1:]
                if name not in os.environ:
                    raise ConfigError(f'{k}="{v}": environment variable {name} not set')
                return os.environ[name] + v[len(m.group()):]
        if v.startswith('~'):
            return os.path.expanduser(v)
        return v


class RewriteHashConf(Rewrite):
    """Create hashable config"""

    def discard_item(self, k, v, depth, parent):
        # discard comments and internal args
        return k.startswith('#') or k.startswith('_')

    def rewrite_dict(self, k, v, depth):
        # sort_keys = True
        return sorted_dict(v)


def evaluate(expr: str, key: Optional[str] = None) -> Any:
    try:
        return simpleeval.EvalWithCompoundTypes(names=dict(_MATH_NAMES), functions=dict(_MATH_FUNCS)).eval(expr)
    except Exception as e:
        raise ConfigError(f'{key}="={expr}" cannot be evaluated ({e!r})') from e


def parse_prop(prop: str) -> Tuple[str, Any]:
    """parse ``key=value`` where value is read as JSON, falling back to a string"""
    if '=' not in prop:
        raise ConfigError(f'invalid prop (expect key=value): {prop}')
    key, value = prop.split('=', 1)
    try:
        return key.strip(), json.loads(value)
    except ValueError:
        return key.strip(), value


def from_dict(cls: Type[C], conf: Optional[Dict], section: Optional[str] = None) -> C:
    """build a config dataclass, rejecting unknown keys"""
    conf = dict(conf or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(k for k in conf if k not in names)
    if unknown:
        raise ConfigError(f'{section or cls.__name__}: unknown keys {unknown}')
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    for k, v in conf.items():
        # lists from JSON become tuples where the dataclass expects them
        if isinstance(v, list) and 'Tuple' in str(types[k]):
            conf[k] = tuple(v)
    try:
        return cls(**conf)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'{section or cls.__name__}: {e}') from e


def to_dict(obj) -> Dict:
    return dataclasses.asdict(obj)


def settings() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.read([os.path.expanduser(ini_file) for ini_file in (
        '.guideconfig', '~/.guideconfig', '~/.config/guide/config')])
    return parser


def default_data_dir() -> Path:
    data_dir = os.environ.get('GUIDE_DATA_DIR')
    if data_dir is None:
        data_dir = settings().get('guide', 'data_dir', fallback='.')
    return expand_path(data_dir)


def load_conf_file(file: Union[Path, str]) -> Dict:
    conf_file = expand_path(file)
    if not conf_file.is_file():
        raise ConfigError(f'Config not found: {file}')
    with open(conf_file, 'r') as f:
        if conf_file.suffix.lower() in ('.yml', '.yaml'):
            try:
                import yaml
            except ImportError:
                raise ImportError(
                    "PyYAML not installed: "
                    "pip install pyyaml")
            conf = yaml.safe_load(f)
        else:
            conf = json.load(f)
    if not isinstance(conf, dict):
        raise ConfigError(f'{conf_file.name}: conf must be dict and not {type(conf)}')
    return conf


class RunConfig:
    """Resolved run configuration: all sections plus seed, threads and paths"""

    def __init__(self, conf: Dict, base_dir: Optional[Path] = None):
        self._conf = conf
        self.base_dir = base_dir or Path.cwd()

    @property
    def seed(self) -> int:
        return int(self._conf.get('seed', 0))

    @property
    def threads(self) -> int:
        return max(1, int(self._conf.get('threads', 1)))

    @property
    def out(self) -> Optional[Path]:
        out = self._conf.get('out', None)
        return self.resolve_path(out) if out else None

    @property
    def hash(self) -> str:
        return hash32(dumps_json(RewriteHashConf().rewrite(self._conf)))

    def section(self, name: str) -> Dict:
        return copy.deepcopy(self._conf.get(name, None) or dict())

    def build(self, name: str, cls: Type[C]) -> C:
        return from_dict(cls, self.section(name), name)

    def resolve_path(self, path: Union[Path, str]) -> Path:
        path = expand_path(path)
        return path if path.is_absolute() else self.base_dir / path

    def dict(self) -> Dict:
        return copy.deepcopy(self._conf)

    def __add__(self, props: Dict) -> 'RunConfig':
        """a copy with dotted props applied on top"""
        conf = copy.deepcopy(self._conf)
        copy_props(RewriteRunConf().rewrite(props), conf)
        return RunConfig(conf, self.base_dir)


def load_conf(conf: Union[Path, str, Dict, None] = None,
              props: Optional[Union[Dict, List[str]]] = None,
              **overrides) -> RunConfig:
    """load run config from file or dict

    Parameters
    ----------
    conf : Union[Path, str, Dict], optional
        a JSON configuration file or dictionary
    props : Dict or list of "key=value", optional
        dotted properties overriding configuration values
    overrides : optional
        top-level values (seed, threads, out) that win over everything else

    Returns
    -------
    RunConfig
        the resolved configuration
    """
    base_dir = None
    if conf is None:
        raw: Dict = dict()
    elif isinstance(conf, dict):
        raw = copy.deepcopy(conf)
    else:
        raw = load_conf_file(conf)
        base_dir = expand_path(conf).absolute().parent

    for name in raw:
        if name.startswith('#') or name.startswith('_'):
            continue
        if name not in SECTIONS and name not in ('seed', 'threads', 'out'):
            raise ConfigError(f'unknown config section: {name}')

    # merge dotted props: file props first, then explicit props, then overrides
    merged = dict(raw.get('_props', None) or {})
    if isinstance(props, list):
        props = dict(parse_prop(p) for p in props)
    merged.update(props or {})
    merged.update((k, v) for k, v in overrides.items() if v is not None)

    return RunConfig(RewriteRunConf().rewrite(raw), base_dir) + merged
