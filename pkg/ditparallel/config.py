"""
Run configuration
-----------------

One YAML mapping per run, one section per record type:

    model:          ModelSpec       layers, hidden_size, heads, param_count, ...
    workload:       WorkloadSpec    seq_len, diffusion_steps, warmup_steps, step_size
    cluster:        ClusterSpec     device_count, device_flops, link_bandwidth, ...
    plan:           ParallelPlan    strategy, cfg_degree, degree, ulysses_degree, ring_degree, patches
    compute_model:  ComputeModel    alpha, beta, per_message_overhead, update_flops_per_element
    execute:        ExecuteSpec     seed, workers, patches, strategy, threshold, compare, ...

Keys are the dataclass field names. Unknown sections and keys are rejected. A missing section
is taken from the built-in reference configuration (a desk-sized toy job), a missing optional
key from the dataclass default.
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import yaml
from yaml import YAMLError

from .exceptions import ValidationError
from .execute.factories import EXECUTABLE
from .execute.generic import RUNNERS
from .model import ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec
from .simulate import ComputeModel

__all__ = ['ExecuteSpec', 'RunConfig', 'SECTIONS', 'default_config', 'load_config', 'loads_config',
           'dump_config', 'config_from_dict', 'config_to_dict', 'apply_overrides', 'read_config_dict']

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExecuteSpec:
    seed: int = 0
    workers: int = 4
    patches: Optional[int] = None       # None: one per worker
    strategy: str = 'pipefusion'
    threshold: float = 0.05
    compare: bool = False
    auto_warmup: bool = False
    runner: str = 'threaded'

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError('execute.seed shall be a non-negative integer, got %r' % (self.seed,))
        if isinstance(self.workers, bool) or not isinstance(self.workers, int) or self.workers < 1:
            raise ValidationError('execute.workers shall be a positive integer, got %r' % (self.workers,))
        if self.patches is not None and (isinstance(self.patches, bool) or not isinstance(self.patches, int)
                                         or self.patches < 1):
            raise ValidationError('execute.patches shall be a positive integer, got %r' % (self.patches,))
        if Strategy.parse(self.strategy) not in EXECUTABLE:
            raise ValidationError('execute.strategy shall be one of %s, got %r'
                                  % (', '.join(s.value for s in EXECUTABLE), self.strategy))
        object.__setattr__(self, 'strategy', Strategy.parse(self.strategy).value)
        if not self.threshold >= 0:
            raise ValidationError('execute.threshold shall be non-negative, got %r' % (self.threshold,))
        if self.runner not in RUNNERS:
            raise ValidationError('execute.runner shall be one of %s, got %r' % (', '.join(RUNNERS), self.runner))

    @property
    def effective_patches(self):
        # type: () -> int
        return self.patches or self.workers


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    workload: WorkloadSpec
    cluster: ClusterSpec
    plan: ParallelPlan
    compute_model: ComputeModel
    execute: ExecuteSpec


SECTIONS = {
    'model': ModelSpec,
    'workload': WorkloadSpec,
    'cluster': ClusterSpec,
    'plan': ParallelPlan,
    'compute_model': ComputeModel,
    'execute': ExecuteSpec,
}

_REFERENCE = {
    'model': {'layers': 4, 'hidden_size': 32, 'heads': 4, 'param_count': 49152},
    'workload': {'seq_len': 64, 'diffusion_steps': 20, 'warmup_steps': 0},
    'cluster': {'device_count': 4, 'device_flops': 1.0e12, 'link_bandwidth': 1.0e10},
    'plan': {'strategy': 'pipefusion', 'patches': 4},
    'compute_model': {},
    'execute': {},
}


def _coerce(section, field, value):
    # YAML 1.1 reads 1e12 (no dot) as a string
    if isinstance(value, str) and field.type in (float, Optional[float]):
        try:
            return float(value)
        except ValueError:
            raise ValidationError('%s.%s shall be a number, got %r' % (section, field.name, value))
    return value


def _build_section(section, values):
    cls = SECTIONS[section]
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ValidationError('section %r shall be a mapping, got %r' % (section, values))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in fields:
            raise ValidationError('unknown key %r in section %r (expected one of %s)'
                                  % (key, section, ', '.join(sorted(fields))))
    missing = [name for name, f in fields.items()
               if name not in values and f.default is dataclasses.MISSING]
    if missing:
        raise ValidationError('section %r is missing %s' % (section, ', '.join(missing)))
    try:
        return cls(**{key: _coerce(section, fields[key], value) for key, value in values.items()})
    except TypeError as e:
        raise ValidationError('section %r: %s' % (section, e))


def config_from_dict(raw):
    # type: (Optional[dict]) -> RunConfig
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError('a configuration shall be a mapping of sections, got %s' % type(raw).__name__)
    for section in raw:
        if section not in SECTIONS:
            raise ValidationError('unknown section %r (expected one of %s)' % (section, ', '.join(SECTIONS)))
    built = {section: _build_section(section, raw[section] if section in raw else _REFERENCE[section])
             for section in SECTIONS}
    return RunConfig(**built)


def config_to_dict(config):
    # type: (RunConfig) -> dict
    raw = {}
    for section in SECTIONS:
        values = dataclasses.asdict(getattr(config, section))
        if section == 'plan':
            values['strategy'] = config.plan.strategy.value
        raw[section] = values
    return raw


def default_config():
    # type: () -> RunConfig
    return config_from_dict(None)


def read_config_dict(text, source='<string>'):
    # type: (str, str) -> dict
    try:
        raw = yaml.safe_load(text)
    except YAMLError as e:
        raise ValidationError('failed to parse YAML config %s: %s' % (source, e))
    return raw if raw is not None else {}


def _parse_value(text, item):
    try:
        return yaml.safe_load(text)
    except YAMLError as e:
        raise ValidationError('cannot parse the value of override %r: %s' % (item, e))


def apply_overrides(raw, overrides):
    # type: (dict, Iterable[str]) -> dict
    """
    Apply `section.key=value` assignments (value in YAML syntax) on top of a raw config mapping.
    Sections left out of `raw` start from the reference configuration.
    """
    if not isinstance(raw, dict):
        raise ValidationError('a configuration shall be a mapping of sections, got %s' % type(raw).__name__)
    merged = {section: dict(values) if isinstance(values, dict) else values for section, values in raw.items()}
    for item in overrides:
        target, sep, text = item.partition('=')
        section, dot, key = target.strip().partition('.')
        if not sep or not dot or not key:
            raise ValidationError('override shall look like section.key=value, got %r' % (item,))
        if section not in SECTIONS:
            raise ValidationError('unknown section %r in override %r' % (section, item))
        if section not in merged:
            merged[section] = dict(_REFERENCE[section])
        elif merged[section] is None:
            merged[section] = {}
        elif not isinstance(merged[section], dict):
            raise ValidationError('section %r shall be a mapping, got %r' % (section, merged[section]))
        merged[section][key] = _parse_value(text, item)
    return merged


def loads_config(text, overrides=()):
    # type: (str, Iterable[str]) -> RunConfig
    return config_from_dict(apply_overrides(read_config_dict(text), overrides))


def load_config(path, overrides=()):
    # type: (Optional[str], Iterable[str]) -> RunConfig
    """
    :param path: YAML file, or None for the reference configuration
    """
    if path is None:
        raw = {}
    else:
        try:
            with open(path, 'r') as f:
                text = f.read()
        except OSError as e:
            raise ValidationError('cannot read config %s: %s' % (path, e))
        raw = read_config_dict(text, path)
    config = config_from_dict(apply_overrides(raw, overrides))
    logger.debug('loaded config %s: %s on %d devices', path or '<reference>', config.plan.name,
                 config.cluster.device_count)
    return config


def dump_config(config):
    # type: (RunConfig) -> str
    return yaml.safe_dump(config_to_dict(config), sort_keys=False, default_flow_style=False)
