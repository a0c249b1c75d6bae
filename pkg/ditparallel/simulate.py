"""
Discrete-event timelines for DiT parallel inference
---------------------------------------------------

Every device owns two streams, `compute` and `comm`. An event starts when its stream is free
and its inputs are ready; nothing is preempted. Durations come from a FLOP surrogate
(ComputeModel) and the uniform link model of ClusterSpec:

    compute  = FLOPs / device_flops
    message  = link_latency + per_message_overhead + bytes / link_bandwidth

Methods that cannot overlap (TensorParallel, SP-Ulysses, USP with an Ulysses group) wait for
each layer's collective before the next layer. SP-Ring overlaps a layer's ring traffic with the
same layer's compute. DistriFusion sends K/V asynchronously and only needs them one step later.
PipeFusion hands patch activations to the next stage through asynchronous P2P, following the
slot grid of `ditparallel.schedule`.

CFG parallel runs two identical groups on disjoint devices and exchanges the latent once per
diffusion step.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .costmodel import EXACT, cfg_exchange_elements, comm_cost
from .exceptions import ValidationError
from .model import ClusterSpec, ModelSpec, ParallelPlan, Strategy, WorkloadSpec, check_plan
from .schedule import STEADY, bubble_count, build_pipefusion_schedule, patch_glyph
from .utils import factor_pairs, partition_sizes, patch_bounds

__all__ = ['ComputeModel', 'Event', 'Timeline', 'simulate', 'simulate_cfg', 'comm_share',
           'sweep_patch_number', 'sweep_warmup', 'sweep_devices', 'best_usp_plan',
           'PatchSweepRow', 'WarmupSweepRow', 'DeviceSweepRow', 'COMPUTE', 'COMM', 'SYNC',
           'timeline_gantt']

logger = logging.getLogger(__name__)

COMPUTE = 'compute'
COMM = 'comm'
SYNC = 'sync'


@dataclass(frozen=True)
class ComputeModel:
    """
    FLOP surrogate of one transformer layer:

        attention    alpha * q_tokens * kv_tokens * hs
        projections  beta * q_tokens * hs^2,  beta defaults to 8 + 4 * mlp_ratio

    The sampler update costs `update_flops_per_element` per latent element.
    """
    alpha: float = 4.0
    beta: Optional[float] = None
    per_message_overhead: float = 50e-6
    update_flops_per_element: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0 or (self.beta is not None and not self.beta > 0):
            raise ValidationError('alpha and beta shall be strictly positive')
        if not self.per_message_overhead >= 0 or not self.update_flops_per_element >= 0:
            raise ValidationError('per_message_overhead and update_flops_per_element shall be non-negative')

    def beta_for(self, mlp_ratio):
        # type: (float) -> float
        return self.beta if self.beta is not None else 8.0 + 4.0 * mlp_ratio

    def attention_flops(self, q_tokens, kv_tokens, hs):
        # type: (int, int, int) -> float
        return self.alpha * q_tokens * kv_tokens * hs

    def projection_flops(self, tokens, hs, mlp_ratio):
        # type: (int, int, float) -> float
        return self.beta_for(mlp_ratio) * tokens * hs * hs

    def layer_flops(self, q_tokens, kv_tokens, hs, mlp_ratio):
        # type: (int, int, int, float) -> float
        return self.attention_flops(q_tokens, kv_tokens, hs) + self.projection_flops(q_tokens, hs, mlp_ratio)

    def update_flops(self, elements):
        # type: (float) -> float
        return self.update_flops_per_element * elements


@dataclass(frozen=True)
class Event:
    device: int
    stream: str
    label: str
    start_s: float
    duration_s: float
    patch: Optional[int] = None
    timestep: Optional[int] = None

    @property
    def end_s(self):
        # type: () -> float
        return self.start_s + self.duration_s

    def sort_key(self):
        return self.start_s, self.device, self.stream, self.label


@dataclass(frozen=True)
class Timeline:
    strategy: str
    n_devices: int
    events: Tuple[Event, ...]
    stall_s: Tuple[float, ...]

    @property
    def makespan_s(self):
        # type: () -> float
        return max((e.end_s for e in self.events), default=0.0)

    def compute_time(self, device):
        # type: (int) -> float
        return sum(e.duration_s for e in self.events if e.device == device and e.stream == COMPUTE)

    def comm_events(self):
        # type: () -> List[Event]
        return [e for e in self.events if e.stream != COMPUTE]

    @property
    def busy_fractions(self):
        # type: () -> Tuple[float, ...]
        makespan = self.makespan_s
        if makespan <= 0:
            return tuple(0.0 for _ in range(self.n_devices))
        return tuple(self.compute_time(d) / makespan for d in range(self.n_devices))

    def to_trace(self):
        # type: () -> List[dict]
        """
        Event array for trace viewers; times in microseconds.
        """
        return [{'name': e.label, 'device': e.device, 'stream': e.stream,
                 'start_us': e.start_s * 1e6, 'dur_us': e.duration_s * 1e6,
                 'patch': e.patch, 'timestep': e.timestep} for e in self.events]


class _TimelineBuilder(object):

    def __init__(self, n_devices):
        # type: (int) -> None
        self.n_devices = n_devices
        self.events = []  # type: List[Event]
        self.free = {}  # type: Dict[Tuple[int, str], float]
        self.stall = [0.0] * n_devices

    def add(self, device, stream, label, duration, ready=0.0, patch=None, timestep=None, count_stall=False):
        # type: (int, str, str, float, float, Optional[int], Optional[int], bool) -> Event
        free = self.free.get((device, stream), 0.0)
        start = max(free, ready)
        if count_stall and ready > free:
            self.stall[device] += ready - free
        event = Event(device, stream, label, start, duration, patch, timestep)
        self.events.append(event)
        self.free[(device, stream)] = event.end_s
        return event

    def build(self, strategy):
        # type: (str) -> Timeline
        events = tuple(sorted(self.events, key=Event.sort_key))
        return Timeline(strategy, self.n_devices, events, tuple(self.stall))


class StrategySimulator(object):
    """
    Abstract simulator of one CFG group of `n` devices.
    """
    STRATEGY = None  # type: Optional[Strategy]

    def __init__(self, plan, model, workload, cluster, compute_model, mode=EXACT):
        # type: (ParallelPlan, ModelSpec, WorkloadSpec, ClusterSpec, ComputeModel, str) -> None
        self.plan = plan
        self.model = model
        self.workload = workload
        self.cluster = cluster
        self.compute_model = compute_model
        self.n = cluster.device_count
        self.comm = comm_cost(plan, model, workload, mode, n_devices=cluster.device_count)
        self._check_constraints()

    def _check_constraints(self):
        # type: () -> None
        pass

    @property
    def strategy_bytes(self):
        # type: () -> float
        """
        Bytes one device sends per diffusion step, CFG exchange excluded.
        """
        return (self.comm.elements_total - self.comm.cfg_elements) * self.model.bytes_per_element

    def seconds(self, flops):
        # type: (float) -> float
        return flops / self.cluster.device_flops

    def message_time(self, size_bytes):
        # type: (float) -> float
        return (self.cluster.link_latency + self.compute_model.per_message_overhead
                + size_bytes / self.cluster.link_bandwidth)

    def layer_time(self, q_tokens, kv_tokens):
        # type: (int, int) -> float
        return self.seconds(self.compute_model.layer_flops(q_tokens, kv_tokens, self.model.hidden_size,
                                                           self.model.mlp_ratio))

    def update_time(self, tokens):
        # type: (float) -> float
        return self.seconds(self.compute_model.update_flops(tokens * self.model.latent_channels))

    def run(self):
        # type: () -> Timeline
        builder = _TimelineBuilder(self.n)
        self._run(builder)
        return builder.build(self.plan.name)

    def _run(self, builder):
        # type: (_TimelineBuilder) -> None
        raise NotImplementedError()


class LayerwiseSimulator(StrategySimulator):
    """
    Each device computes 1/n of every layer, layer after layer, and exchanges data per layer.
    Subclasses choose how the exchange overlaps with compute.
    """
    OVERLAP = 'none'  # 'none' | 'layer' | 'async'
    UPDATE_SHARE = True  # each device updates only its 1/n of the latent

    def _check_constraints(self):
        # type: () -> None
        if self.n > 1 and self.model.heads % self._head_split() != 0:
            raise ValidationError('%s over %d devices needs heads (%d) divisible by %d'
                                  % (self.plan.name, self.n, self.model.heads, self._head_split()))

    def _head_split(self):
        # type: () -> int
        return 1

    def _overlap(self):
        # type: () -> str
        return self.OVERLAP

    def _run(self, builder):
        # type: (_TimelineBuilder) -> None
        p = self.workload.seq_len
        S, W, L = self.workload.diffusion_steps, self.workload.warmup_steps, self.model.layers
        compute = self.layer_time(p, p) / self.n
        layer_bytes = self.strategy_bytes / L
        comm = self.message_time(layer_bytes) if layer_bytes > 0 else None
        update = self.update_time(p / float(self.n) if self.UPDATE_SHARE else p)
        overlap = self._overlap()
        for device in range(self.n):
            ready = 0.0
            kv_arrival = {}  # layer -> arrival of the previous step's asynchronous K/V
            first_steady = True
            for s in range(S):
                t = S - 1 - s
                synchronous = overlap == 'async' and s < W
                for layer in range(L):
                    label = 'layer%d/t%d' % (layer, t)
                    if overlap == 'async' and not synchronous:
                        event = builder.add(device, COMPUTE, label, compute, max(ready, kv_arrival.get(layer, 0.0)),
                                            timestep=t, count_stall=not first_steady)
                        first_steady = False
                        ready = event.end_s
                        if comm is not None and t > 0:
                            sent = builder.add(device, COMM, 'kv/' + label, comm, event.end_s, timestep=t)
                            kv_arrival[layer] = sent.end_s
                    elif overlap == 'layer':
                        event = builder.add(device, COMPUTE, label, compute, ready, timestep=t)
                        ready = event.end_s
                        if comm is not None:
                            sent = builder.add(device, COMM, 'ring/' + label, comm, event.start_s, timestep=t)
                            ready = max(ready, sent.end_s)
                    else:
                        event = builder.add(device, COMPUTE, label, compute, ready, timestep=t)
                        ready = event.end_s
                        if comm is not None:
                            sent = builder.add(device, COMM, 'collective/' + label, comm, ready, timestep=t)
                            ready = sent.end_s
                if update > 0:
                    ready = builder.add(device, COMPUTE, 'update/t%d' % t, update, ready, timestep=t).end_s


class TensorParallelSimulator(LayerwiseSimulator):
    STRATEGY = Strategy.TENSOR_PARALLEL
    OVERLAP = 'none'
    UPDATE_SHARE = False

    def _head_split(self):
        return self.n


class UlyssesSimulator(LayerwiseSimulator):
    STRATEGY = Strategy.SP_ULYSSES
    OVERLAP = 'none'

    def _head_split(self):
        return self.n


class RingSimulator(LayerwiseSimulator):
    STRATEGY = Strategy.SP_RING
    OVERLAP = 'layer'


class USPSimulator(LayerwiseSimulator):
    STRATEGY = Strategy.USP

    def _head_split(self):
        return self.plan.ulysses_degree

    def _overlap(self):
        return 'layer' if self.plan.ulysses_degree == 1 else 'none'


class DistriFusionSimulator(LayerwiseSimulator):
    STRATEGY = Strategy.DISTRIFUSION
    OVERLAP = 'async'


class PipeFusionSimulator(StrategySimulator):
    """
    Stage d owns a contiguous block of layers; patches flow stage to stage, the last stage
    applies the sampler update and hands the patch back to stage 0.
    """
    STRATEGY = Strategy.PIPEFUSION

    def _check_constraints(self):
        # type: () -> None
        if self.n > self.model.layers:
            raise ValidationError('PipeFusion over %d devices needs at least as many layers, got %d'
                                  % (self.n, self.model.layers))

    def schedule(self):
        return build_pipefusion_schedule(self.n, self.plan.patches, self.workload.diffusion_steps,
                                         self.workload.warmup_steps)

    def _run(self, builder):
        # type: (_TimelineBuilder) -> None
        n, M = self.n, self.plan.patches
        p = self.workload.seq_len
        S, W = self.workload.diffusion_steps, self.workload.warmup_steps
        stage_layers = partition_sizes(self.model.layers, n)
        rows = [stop - start for start, stop in patch_bounds(p, M)]
        step_bytes = self.strategy_bytes

        def send(device, label, size_bytes, ready, patch, t):
            if n == 1:
                return ready
            return builder.add(device, COMM, label, self.message_time(size_bytes), ready, patch, t).end_s

        # ---[ Warmup: stages one after another on the whole sequence ]----
        arrival = {}  # (stage, timestep, patch or None) -> time the input is available
        for w in range(W):
            t = S - 1 - w
            for d in range(n):
                ready = arrival.get((d, t, None), 0.0)
                duration = stage_layers[d] * self.layer_time(p, p)
                if d == n - 1:
                    duration += self.update_time(p)
                event = builder.add(d, COMPUTE, 'warmup/stage%d/t%d' % (d, t), duration, ready, timestep=t)
                nxt = (d + 1) % n
                if nxt == 0 and t == 0:
                    continue
                key = (nxt, t if nxt else t - 1, None)
                arrival[key] = send(d, 'send/stage%d/t%d' % (d, t), step_bytes, event.end_s, None, t)

        # ---[ Steady: follow the slot grid ]----
        started = set()
        for m in sorted(self.schedule().work(), key=lambda m: (m.slot, m.device)):
            if m.kind != STEADY:
                continue
            d, j, t = m.device, m.patch, m.timestep
            ready = arrival.get((d, t, j), arrival.get((d, t, None), 0.0))
            duration = stage_layers[d] * self.layer_time(rows[j], p)
            if d == n - 1:
                duration += self.update_time(rows[j])
            event = builder.add(d, COMPUTE, 'stage%d/P%d/t%d' % (d, j, t), duration, ready,
                                patch=j, timestep=t, count_stall=d in started)
            started.add(d)
            nxt = (d + 1) % n
            if nxt == 0 and t == 0:
                continue
            key = (nxt, t if nxt else t - 1, j)
            arrival[key] = send(d, 'send/P%d/t%d' % (j, t), step_bytes * rows[j] / float(p), event.end_s, j, t)


__simulators = {cls.STRATEGY: cls for cls in (
    TensorParallelSimulator, UlyssesSimulator, RingSimulator, USPSimulator,
    DistriFusionSimulator, PipeFusionSimulator)}


def _group_simulator(plan, model, workload, cluster, compute_model, mode):
    # type: (ParallelPlan, ModelSpec, WorkloadSpec, ClusterSpec, ComputeModel, str) -> StrategySimulator
    group = replace(cluster, device_count=cluster.device_count // plan.cfg_degree)
    group_plan = replace(plan, cfg_degree=1, degree=None)
    return __simulators[plan.strategy](group_plan, model, workload, group, compute_model, mode)


def simulate(plan, model, workload, cluster, compute_model=None, mode=EXACT):
    # type: (ParallelPlan, ModelSpec, WorkloadSpec, ClusterSpec, Optional[ComputeModel], str) -> Timeline
    compute_model = compute_model or ComputeModel()
    check_plan(plan, cluster)
    if plan.cfg_degree == 2:
        return simulate_cfg(plan, model, workload, cluster, compute_model, mode)
    timeline = _group_simulator(plan, model, workload, cluster, compute_model, mode).run()
    logger.debug('%s on %d devices: makespan %.6f s', plan.name, cluster.device_count, timeline.makespan_s)
    return timeline


def simulate_cfg(plan, model, workload, cluster, compute_model=None, mode=EXACT, exchange_elements=None):
    # type: (ParallelPlan, ModelSpec, WorkloadSpec, ClusterSpec, Optional[ComputeModel], str, Optional[int]) -> Timeline
    """
    Conditional and unconditional branches on two device groups, latent exchanged every step.

    The exchange is additive, not a barrier: events of step s are shifted by s exchange times, so
    makespan = group makespan + S * exchange, and a pipelined plan may start step s+1 before the
    step s exchange event ends.
    """
    compute_model = compute_model or ComputeModel()
    if plan.cfg_degree != 2:
        raise ValidationError('simulate_cfg needs cfg_degree=2, got %d' % plan.cfg_degree)
    if cluster.device_count % 2:
        raise ValidationError('CFG parallel needs an even device count, got %d' % cluster.device_count)
    check_plan(plan, cluster)
    simulator = _group_simulator(plan, model, workload, cluster, compute_model, mode)
    group = simulator.run()
    n = simulator.n
    S = workload.diffusion_steps
    if exchange_elements is None:
        exchange_elements = cfg_exchange_elements(plan, model, workload)
    exchange = 0.0
    if exchange_elements > 0:
        exchange = simulator.message_time(exchange_elements * model.bytes_per_element)

    step_end = [0.0] * S
    for e in group.events:
        s = S - 1 - e.timestep
        step_end[s] = max(step_end[s], e.end_s)
    for s in range(1, S):
        step_end[s] = max(step_end[s], step_end[s - 1])

    events = []
    for g in range(2):
        for e in group.events:
            shift = (S - 1 - e.timestep) * exchange
            events.append(replace(e, device=e.device + g * n, start_s=e.start_s + shift))
        if exchange > 0:
            for s in range(S):
                events.append(Event(g * n, SYNC, 'cfg-exchange/t%d' % (S - 1 - s),
                                    step_end[s] + s * exchange, exchange, None, S - 1 - s))
    stall = group.stall_s + group.stall_s
    return Timeline(plan.name, 2 * n, tuple(sorted(events, key=Event.sort_key)), stall)


def comm_share(parallel_makespan_s, single_device_latency_s, n_devices):
    # type: (float, float, int) -> float
    """
    Fraction of the parallel latency not explained by perfect 1/N scaling of the single-device run.
    """
    if not parallel_makespan_s > 0:
        raise ValidationError('parallel makespan shall be positive, got %r' % (parallel_makespan_s,))
    if n_devices < 1:
        raise ValidationError('device count shall be positive, got %r' % (n_devices,))
    return (parallel_makespan_s - single_device_latency_s / float(n_devices)) / parallel_makespan_s


# ---[ Sweeps ]----

@dataclass(frozen=True)
class PatchSweepRow:
    patches: int
    makespan_s: float
    bubbles: int


@dataclass(frozen=True)
class WarmupSweepRow:
    warmup: int
    makespan_s: float
    relative_increase: float


@dataclass(frozen=True)
class DeviceSweepRow:
    devices: int
    strategy: str
    makespan_s: Optional[float]
    speedup: Optional[float]
    note: str = ''


def sweep_patch_number(model, workload, cluster, compute_model, patch_values, mode=EXACT):
    # type: (ModelSpec, WorkloadSpec, ClusterSpec, Optional[ComputeModel], Sequence[int], str) -> List[PatchSweepRow]
    if not patch_values:
        raise ValidationError('sweep_patch_number needs at least one patch count')
    rows = []
    for patches in patch_values:
        plan = ParallelPlan.pipefusion(patches)
        timeline = simulate(plan, model, workload, cluster, compute_model, mode)
        schedule = build_pipefusion_schedule(cluster.device_count, patches, workload.diffusion_steps,
                                             workload.warmup_steps)
        rows.append(PatchSweepRow(patches, timeline.makespan_s, bubble_count(schedule).total))
    return rows


def sweep_warmup(model, workload, cluster, compute_model, warmup_values, plan=None, mode=EXACT):
    # type: (ModelSpec, WorkloadSpec, ClusterSpec, Optional[ComputeModel], Sequence[int], Optional[ParallelPlan], str) -> List[WarmupSweepRow]
    if not warmup_values:
        raise ValidationError('sweep_warmup needs at least one warmup value')
    plan = plan or ParallelPlan.pipefusion(cluster.device_count)

    def makespan(warmup):
        return simulate(plan, model, replace(workload, warmup_steps=warmup), cluster,
                        compute_model, mode).makespan_s

    baseline = makespan(0)
    rows = []
    for warmup in warmup_values:
        value = makespan(warmup)
        rows.append(WarmupSweepRow(warmup, value, value / baseline - 1.0))
    return rows


def best_usp_plan(model, workload, cluster, compute_model=None, mode=EXACT, cfg_degree=1):
    # type: (ModelSpec, WorkloadSpec, ClusterSpec, Optional[ComputeModel], str, int) -> ParallelPlan
    """
    Ulysses x Ring mesh with the lowest simulated makespan; ties go to the larger Ulysses degree.
    """
    best = None
    for r, u in factor_pairs(cluster.device_count // cfg_degree):
        plan = ParallelPlan.usp(u, r, cfg_degree=cfg_degree)
        try:
            makespan = simulate(plan, model, workload, cluster, compute_model, mode).makespan_s
        except ValidationError as e:
            logger.debug('skipping %s: %s', plan.name, e)
            continue
        if best is None or makespan < best[0]:
            best = (makespan, plan)
    if best is None:
        raise ValidationError('no USP mesh fits %d devices with %d heads' % (cluster.device_count, model.heads))
    return best[1]


def _plan_for(strategy, model, workload, cluster, compute_model, mode):
    # type: (Strategy, ModelSpec, WorkloadSpec, ClusterSpec, ComputeModel, str) -> ParallelPlan
    if strategy is Strategy.USP:
        return best_usp_plan(model, workload, cluster, compute_model, mode)
    if strategy is Strategy.PIPEFUSION:
        return ParallelPlan.pipefusion(cluster.device_count)
    return ParallelPlan(strategy)


def sweep_devices(model, workload, cluster, compute_model, device_values, strategies, mode=EXACT):
    # type: (ModelSpec, WorkloadSpec, ClusterSpec, Optional[ComputeModel], Sequence[int], Sequence[object], str) -> List[DeviceSweepRow]
    """
    Speedup over one device for every (N, strategy); combinations that do not fit become note rows.
    """
    if not device_values or not strategies:
        raise ValidationError('sweep_devices needs device counts and strategies')
    single = simulate(ParallelPlan(Strategy.TENSOR_PARALLEL), model, workload,
                      replace(cluster, device_count=1), compute_model, mode).makespan_s
    rows = []
    for n_devices in device_values:
        scaled = replace(cluster, device_count=n_devices)
        for strategy in strategies:
            strategy = Strategy.parse(strategy)
            try:
                plan = _plan_for(strategy, model, workload, scaled, compute_model, mode)
                makespan = simulate(plan, model, workload, scaled, compute_model, mode).makespan_s
            except ValidationError as e:
                logger.warning('skipping %s on %d devices: %s', strategy.value, n_devices, e)
                rows.append(DeviceSweepRow(n_devices, strategy.value, None, None, 'skipped: %s' % e))
                continue
            rows.append(DeviceSweepRow(n_devices, plan.name, makespan, single / makespan))
    return rows


def timeline_gantt(timeline, resolution_s):
    # type: (Timeline, float) -> str
    """
    Bucketed Gantt chart: per device a compute row (patch glyph, '*' for whole-sequence work,
    '.' idle) and a comm row ('~' busy).
    """
    if not resolution_s > 0:
        raise ValidationError('resolution shall be positive')
    buckets = int(timeline.makespan_s / resolution_s) + 1
    width = len('d%d~' % max(timeline.n_devices - 1, 0))
    lines = []
    for device in range(timeline.n_devices):
        compute = ['.'] * buckets
        comm = [' '] * buckets
        for e in timeline.events:
            if e.device != device:
                continue
            first = int(e.start_s / resolution_s)
            last = max(first, int(e.end_s / resolution_s - 1e-12))
            for b in range(first, min(last, buckets - 1) + 1):
                if e.stream == COMPUTE:
                    compute[b] = patch_glyph(e.patch) if e.patch is not None else '*'
                else:
                    comm[b] = '~'
        lines.append(('d%d' % device).ljust(width) + ' ' + ''.join(compute))
        lines.append(('d%d~' % device).ljust(width) + ' ' + ''.join(comm).rstrip())
    return '\n'.join(lines) + '\n'
