"""
Static description of a Diffusion Transformer inference job
------------------------------------------------------------

A job is three immutable records and a plan:

    ModelSpec     the network: depth L, hidden size hs, head count, parameter count P
    WorkloadSpec  the request: latent tokens p, diffusion steps S, warmup steps W
    ClusterSpec   the hardware: N devices with uniform all-pairs links
    ParallelPlan  how the N devices are used: one strategy per CFG group, 1 or 2 groups

Element counts (P, p) are kept apart from element width so the same model can be
costed at any precision.
"""
import enum
import math
from dataclasses import dataclass
from typing import Optional

from .exceptions import ValidationError
from .utils import ValidationResult

__all__ = ['Strategy', 'ModelSpec', 'WorkloadSpec', 'ClusterSpec', 'ParallelPlan',
           'tokens_from_resolution', 'validate_plan', 'check_plan', 'strategy_degree']

BYTES_PER_ELEMENT = (1, 2, 4, 8)


class Strategy(enum.Enum):
    TENSOR_PARALLEL = 'tp'
    SP_ULYSSES = 'sp-ulysses'
    SP_RING = 'sp-ring'
    USP = 'usp'
    DISTRIFUSION = 'distrifusion'
    PIPEFUSION = 'pipefusion'

    @classmethod
    def parse(cls, value):
        # type: (object) -> Strategy
        if isinstance(value, Strategy):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValidationError('Unknown strategy: %r (expected one of %s)'
                                  % (value, ', '.join(s.value for s in cls)))


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValidationError('%s shall be a positive integer, got %r' % (name, value))


def _non_negative_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ValidationError('%s shall be a non-negative integer, got %r' % (name, value))


def _positive_real(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0 or math.isnan(value):
        raise ValidationError('%s shall be strictly positive, got %r' % (name, value))


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    hidden_size: int
    heads: int
    param_count: int
    latent_channels: int = 4
    mlp_ratio: float = 4
    bytes_per_element: int = 2

    def __post_init__(self):
        _positive_int('layers', self.layers)
        _positive_int('hidden_size', self.hidden_size)
        _positive_int('heads', self.heads)
        _non_negative_int('param_count', self.param_count)
        _positive_int('latent_channels', self.latent_channels)
        _positive_real('mlp_ratio', self.mlp_ratio)
        if self.hidden_size % self.heads:
            raise ValidationError('hidden_size %d is not divisible by heads %d' % (self.hidden_size, self.heads))
        if self.bytes_per_element not in BYTES_PER_ELEMENT:
            raise ValidationError('bytes_per_element shall be one of %s, got %r'
                                  % (BYTES_PER_ELEMENT, self.bytes_per_element))

    @property
    def head_dim(self):
        # type: () -> int
        return self.hidden_size // self.heads


@dataclass(frozen=True)
class WorkloadSpec:
    seq_len: int
    diffusion_steps: int
    warmup_steps: int = 0
    step_size: float = 0.05

    def __post_init__(self):
        _positive_int('seq_len', self.seq_len)
        _positive_int('diffusion_steps', self.diffusion_steps)
        _non_negative_int('warmup_steps', self.warmup_steps)
        _positive_real('step_size', self.step_size)
        if self.warmup_steps > self.diffusion_steps:
            raise ValidationError('warmup_steps (%d) exceeds diffusion_steps (%d)'
                                  % (self.warmup_steps, self.diffusion_steps))


@dataclass(frozen=True)
class ClusterSpec:
    device_count: int
    device_flops: float
    link_bandwidth: float
    link_latency: float = 0.0
    device_memory: Optional[float] = None

    def __post_init__(self):
        _positive_int('device_count', self.device_count)
        _positive_real('device_flops', self.device_flops)
        _positive_real('link_bandwidth', self.link_bandwidth)
        if not self.link_latency >= 0:
            raise ValidationError('link_latency shall be non-negative, got %r' % (self.link_latency,))
        if self.device_memory is not None:
            _positive_real('device_memory', self.device_memory)


@dataclass(frozen=True)
class ParallelPlan:
    """
    `degree` is the per CFG group device count; left unset it is derived from the cluster.
    `ulysses_degree` and `ring_degree` are only meaningful for USP, `patches` only for PipeFusion.
    """
    strategy: Strategy
    cfg_degree: int = 1
    degree: Optional[int] = None
    ulysses_degree: Optional[int] = None
    ring_degree: Optional[int] = None
    patches: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'strategy', Strategy.parse(self.strategy))
        if self.cfg_degree not in (1, 2):
            raise ValidationError('cfg_degree shall be 1 or 2, got %r' % (self.cfg_degree,))
        if self.degree is not None:
            _non_negative_int('degree', self.degree)

    @classmethod
    def usp(cls, ulysses_degree, ring_degree, cfg_degree=1):
        # type: (int, int, int) -> ParallelPlan
        return cls(Strategy.USP, cfg_degree=cfg_degree,
                   ulysses_degree=ulysses_degree, ring_degree=ring_degree)

    @classmethod
    def pipefusion(cls, patches, cfg_degree=1, degree=None):
        # type: (int, int, Optional[int]) -> ParallelPlan
        return cls(Strategy.PIPEFUSION, cfg_degree=cfg_degree, degree=degree, patches=patches)

    @property
    def name(self):
        # type: () -> str
        """
        Stable human readable label, e.g. 'usp(u=2,r=4)' or 'pipefusion(M=4)+cfg2'.
        """
        label = self.strategy.value
        if self.strategy is Strategy.USP:
            label += '(u=%s,r=%s)' % (self.ulysses_degree, self.ring_degree)
        elif self.strategy is Strategy.PIPEFUSION:
            label += '(M=%s)' % (self.patches,)
        if self.cfg_degree > 1:
            label += '+cfg%d' % self.cfg_degree
        return label


def tokens_from_resolution(height_px, width_px, vae_factor=8, patchify=1):
    # type: (int, int, int, int) -> int
    """
    Number of latent tokens p for an image: one token per `patchify` x `patchify` block of latent pixels.
    """
    for name, value in (('height_px', height_px), ('width_px', width_px),
                        ('vae_factor', vae_factor), ('patchify', patchify)):
        _positive_int(name, value)
    cell = vae_factor * patchify
    for name, value in (('height_px', height_px), ('width_px', width_px)):
        if value % cell:
            raise ValidationError('%s=%d is not divisible by vae_factor*patchify=%d' % (name, value, cell))
    return (height_px // cell) * (width_px // cell)


def strategy_degree(plan, cluster):
    # type: (ParallelPlan, ClusterSpec) -> int
    """
    Devices in one CFG group. Raises ValidationError when the plan does not fit the cluster.
    """
    check_plan(plan, cluster)
    return cluster.device_count // plan.cfg_degree


def validate_plan(plan, cluster):
    # type: (ParallelPlan, ClusterSpec) -> ValidationResult
    errors = []
    n_devices = cluster.device_count
    if n_devices % plan.cfg_degree:
        errors.append('device_count %d is not divisible by cfg_degree %d' % (n_devices, plan.cfg_degree))
        return ValidationResult(errors)
    group = n_devices // plan.cfg_degree
    degree = plan.degree if plan.degree is not None else group
    if plan.strategy is Strategy.USP:
        u, r = plan.ulysses_degree, plan.ring_degree
        if not u or not r:
            errors.append('USP needs ulysses_degree and ring_degree >= 1, got u=%r r=%r' % (u, r))
        else:
            if plan.degree is not None and plan.degree != u * r:
                errors.append('USP degree %d does not match u*r=%d' % (plan.degree, u * r))
            degree = u * r
    if plan.strategy is Strategy.PIPEFUSION and not plan.patches:
        errors.append('PipeFusion needs patches M >= 1, got %r' % (plan.patches,))
    if degree == 0:
        errors.append('strategy degree shall be >= 1')
    elif plan.cfg_degree * degree != n_devices:
        errors.append('degree mismatch: cfg_degree %d x %s degree %d = %d, but the cluster has %d devices'
                      % (plan.cfg_degree, plan.strategy.value, degree, plan.cfg_degree * degree, n_devices))
    return ValidationResult(errors)


def check_plan(plan, cluster):
    # type: (ParallelPlan, ClusterSpec) -> None
    validate_plan(plan, cluster).raise_for_errors()
