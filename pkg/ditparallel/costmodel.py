"""
Analytic communication and memory costs of one diffusion step
-------------------------------------------------------------

All figures are per device per diffusion step. The unit of activation traffic is p x hs
elements, one full-sequence hidden state:

    Method          Communication       Overlap   Params   KV buffers
    TensorParallel  4 p hs L            no        P/N      2 p hs L / N
    DistriFusion    2 p hs L            yes       P        2 p hs L
    SP-Ring         2 p hs L            yes       P        2 p hs L / N
    SP-Ulysses      4/N p hs L          no        P        2 p hs L / N
    PipeFusion      2 p hs              yes       P/N      2 p hs L / N

`approx` mode drops the collective algobw factors; `exact` mode applies them:
AllReduce 2(n-1)/n, AllGather (n-1)/n, AllToAll 1. Fractional element counts round up.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence

from .exceptions import ValidationError
from .model import ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec, check_plan
from .utils import ceil_fraction, factor_pairs

__all__ = ['APPROX', 'EXACT', 'CommReport', 'MemoryReport', 'StrategyRow',
           'comm_cost', 'memory_cost', 'crossover_parallel_degree', 'compare_strategies',
           'default_candidates', 'cfg_exchange_elements']

logger = logging.getLogger(__name__)

APPROX = 'approx'
EXACT = 'exact'
MODES = (APPROX, EXACT)

OVERLAPPABLE = {
    Strategy.TENSOR_PARALLEL: False,
    Strategy.SP_ULYSSES: False,
    Strategy.SP_RING: True,
    Strategy.DISTRIFUSION: True,
    Strategy.PIPEFUSION: True,
}


@dataclass(frozen=True)
class CommReport:
    strategy: str
    elements_total: int
    bytes_total: int
    per_layer_elements: int
    overlappable: bool
    mode: str
    cfg_elements: int = 0


@dataclass(frozen=True)
class MemoryReport:
    strategy: str
    param_elements: int
    kv_buffer_elements: int
    unit_kv: int

    def total_bytes(self, model):
        # type: (ModelSpec) -> int
        return (self.param_elements + self.kv_buffer_elements) * model.bytes_per_element

    def fits(self, model, cluster):
        # type: (ModelSpec, ClusterSpec) -> Optional[bool]
        """
        :return: None when the cluster does not declare device memory.
        """
        if cluster.device_memory is None:
            return None
        return self.total_bytes(model) <= cluster.device_memory


@dataclass(frozen=True)
class StrategyRow:
    plan: ParallelPlan
    comm: CommReport
    memory: MemoryReport

    @property
    def strategy(self):
        # type: () -> str
        return self.plan.name

    def as_dict(self):
        # type: () -> dict
        return {
            'strategy': self.strategy,
            'elements_total': self.comm.elements_total,
            'bytes_total': self.comm.bytes_total,
            'overlappable': self.comm.overlappable,
            'param_elements': self.memory.param_elements,
            'kv_buffer_elements': self.memory.kv_buffer_elements,
        }


def _group_degree(plan, n_devices):
    # type: (ParallelPlan, int) -> int
    if plan.degree is not None:
        return plan.degree
    if plan.strategy is Strategy.USP and plan.ulysses_degree and plan.ring_degree:
        return plan.ulysses_degree * plan.ring_degree
    return n_devices // plan.cfg_degree


def _algobw(n, exact):
    # type: (int, bool) -> Fraction
    """
    (n-1)/n in exact mode, 1 in approx mode. Shared by AllReduce, AllGather and the ring.
    """
    return Fraction(n - 1, n) if exact else Fraction(1)


def _strategy_elements(plan, n, p, hs, layers, exact):
    # type: (ParallelPlan, int, int, int, int, bool) -> Fraction
    unit = Fraction(p * hs)
    strategy = plan.strategy
    if n == 1:
        return Fraction(0)
    if strategy is Strategy.TENSOR_PARALLEL:
        # two AllReduces per layer, each 2(n-1)/n of the hidden state
        return 4 * unit * layers * _algobw(n, exact)
    if strategy is Strategy.DISTRIFUSION:
        return 2 * unit * layers * _algobw(n, exact)
    if strategy is Strategy.SP_RING:
        return 2 * unit * layers * _algobw(n, exact)
    if strategy is Strategy.SP_ULYSSES:
        return Fraction(4, n) * unit * layers
    if strategy is Strategy.USP:
        u, r = plan.ulysses_degree, plan.ring_degree
        elements = Fraction(0)
        if u > 1:
            elements += Fraction(4, u) * Fraction(1, r) * unit * layers
        if r > 1:
            elements += 2 * Fraction(p, u) * hs * layers * _algobw(r, exact)
        return elements
    if strategy is Strategy.PIPEFUSION:
        return 2 * unit
    raise ValidationError('Unsupported strategy: %s' % strategy)


def cfg_exchange_elements(plan, model, workload):
    # type: (ParallelPlan, ModelSpec, WorkloadSpec) -> int
    """
    Latent exchanged between the conditional and unconditional groups once per diffusion step.
    """
    if plan.cfg_degree < 2:
        return 0
    return workload.seq_len * model.latent_channels


def comm_cost(plan, model, workload, mode=APPROX, n_devices=None):
    # type: (ParallelPlan, ModelSpec, WorkloadSpec, str, Optional[int]) -> CommReport
    """
    Activation traffic one device sends during one diffusion step.

    :param n_devices: cluster size; defaults to cfg_degree x the plan's explicit degree
    """
    if mode not in MODES:
        raise ValidationError('mode shall be one of %s, got %r' % (', '.join(MODES), mode))
    if n_devices is None:
        if plan.degree is None and plan.strategy is not Strategy.USP:
            raise ValidationError('comm_cost needs n_devices when the plan has no explicit degree')
        n_devices = plan.cfg_degree * _group_degree(plan, 0)
    n = _group_degree(plan, n_devices)
    if n < 1 or plan.cfg_degree * n != n_devices:
        raise ValidationError('plan %s does not fit %d devices' % (plan.name, n_devices))
    exact = mode == EXACT
    elements = ceil_fraction(_strategy_elements(plan, n, workload.seq_len, model.hidden_size,
                                                model.layers, exact))
    cfg = cfg_exchange_elements(plan, model, workload)
    total = elements + cfg
    if plan.strategy is Strategy.USP:
        overlappable = plan.ulysses_degree == 1
    else:
        overlappable = OVERLAPPABLE[plan.strategy]
    return CommReport(
        strategy=plan.name,
        elements_total=total,
        bytes_total=total * model.bytes_per_element,
        per_layer_elements=ceil_fraction(Fraction(elements, model.layers)),
        overlappable=overlappable,
        mode=mode,
        cfg_elements=cfg,
    )


def memory_cost(plan, model, workload, n_devices=None):
    # type: (ParallelPlan, ModelSpec, WorkloadSpec, Optional[int]) -> MemoryReport
    if n_devices is None:
        n_devices = plan.cfg_degree * _group_degree(plan, 0)
    n = _group_degree(plan, n_devices)
    if n < 1:
        raise ValidationError('plan %s does not fit %d devices' % (plan.name, n_devices))
    unit_kv = 2 * workload.seq_len * model.hidden_size
    full_kv = unit_kv * model.layers
    if plan.strategy in (Strategy.TENSOR_PARALLEL, Strategy.PIPEFUSION):
        params = ceil_fraction(Fraction(model.param_count, n))
    else:
        params = model.param_count
    if plan.strategy is Strategy.DISTRIFUSION:
        kv = full_kv
    else:
        kv = ceil_fraction(Fraction(full_kv, n))
    return MemoryReport(strategy=plan.name, param_elements=params,
                        kv_buffer_elements=kv, unit_kv=unit_kv)


def crossover_parallel_degree(model):
    # type: (ModelSpec) -> int
    """
    PipeFusion moves strictly fewer elements than every other method while N < 2L.
    """
    return 2 * model.layers


def default_candidates(cluster, cfg_degree=1, patches=None):
    # type: (ClusterSpec, int, Optional[int]) -> List[ParallelPlan]
    """
    One plan per method for the cluster, plus every USP mesh with both degrees above one.
    """
    n = cluster.device_count // cfg_degree
    plans = [
        ParallelPlan(Strategy.TENSOR_PARALLEL, cfg_degree=cfg_degree),
        ParallelPlan(Strategy.SP_ULYSSES, cfg_degree=cfg_degree),
        ParallelPlan(Strategy.SP_RING, cfg_degree=cfg_degree),
    ]
    for u, r in factor_pairs(n):
        if u > 1 and r > 1:
            plans.append(ParallelPlan.usp(u, r, cfg_degree=cfg_degree))
    plans.append(ParallelPlan(Strategy.DISTRIFUSION, cfg_degree=cfg_degree))
    plans.append(ParallelPlan.pipefusion(patches or n, cfg_degree=cfg_degree))
    return plans


def compare_strategies(model, workload, cluster, plans, mode=APPROX):
    # type: (ModelSpec, WorkloadSpec, ClusterSpec, Sequence[ParallelPlan], str) -> List[StrategyRow]
    """
    Cost every candidate and rank by traffic, then KV memory, then name.
    """
    if not plans:
        raise ValidationError('compare_strategies needs at least one candidate plan')
    rows = []
    for plan in plans:
        check_plan(plan, cluster)
        comm = comm_cost(plan, model, workload, mode, n_devices=cluster.device_count)
        memory = memory_cost(plan, model, workload, n_devices=cluster.device_count)
        if memory.fits(model, cluster) is False:
            logger.warning('%s needs %d bytes per device, more than the %d available',
                           plan.name, memory.total_bytes(model), cluster.device_memory)
        rows.append(StrategyRow(plan, comm, memory))
    rows.sort(key=lambda row: (row.comm.elements_total, row.memory.kv_buffer_elements, row.strategy))
    return rows
