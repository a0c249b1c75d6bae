"""
Patch-level pipeline grids
--------------------------

A schedule is a grid of micro-steps: at every slot each device either processes one patch of
one diffusion timestep through its stage or idles (a bubble).

PipeFusion splits L layers into N stages and the latent into M patches. After W synchronous
warmup steps, where stages run one after the other on the whole sequence, patches circulate
through the stages. Device d works on patch (k - d) mod M at steady slot k. A stage never waits
for the other patches of the current timestep: it attends to whatever the KV buffer holds,
which is the previous timestep's data for patches not yet recomputed.

Timesteps count down from S-1 to 0; slots count up. A producer hands its activation to the
consumer one slot later (asynchronous P2P), so every dependency edge goes strictly forward
in slot order.

DistriFusion is expressed on the same grid: one slot per timestep, device d owns patch d.
"""
import graphlib
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

from .exceptions import ScheduleError, ValidationError
from .utils import ValidationResult

__all__ = ['WARMUP', 'STEADY', 'BUBBLE', 'PIPEFUSION', 'DISTRIFUSION', 'MicroStep', 'Schedule',
           'BubbleReport', 'build_pipefusion_schedule', 'build_distrifusion_schedule',
           'effective_compute_ratio', 'measured_compute_ratio', 'bubble_count',
           'validate_dependencies', 'gantt', 'patch_glyph']

WARMUP = 'warmup'
STEADY = 'steady'
BUBBLE = 'bubble'

PIPEFUSION = 'pipefusion'
DISTRIFUSION = 'distrifusion'

GLYPHS = '0123456789abcdefghijklmnopqrstuvwxyz'

Key = Tuple[int, int, int]  # (patch, timestep, stage)


@dataclass(frozen=True)
class MicroStep:
    device: int
    slot: int
    patch: Optional[int]
    timestep: Optional[int]
    kind: str
    stage: Optional[int] = None

    @property
    def key(self):
        # type: () -> Key
        return self.patch, self.timestep, self.stage

    @property
    def is_bubble(self):
        # type: () -> bool
        return self.kind == BUBBLE


@dataclass(frozen=True)
class Schedule:
    strategy: str
    n_devices: int
    n_patches: int
    steps: int
    warmup: int
    micro_steps: Tuple[MicroStep, ...]
    dependencies: Tuple[Tuple[Key, Key], ...]

    @property
    def length(self):
        # type: () -> int
        return max((m.slot for m in self.micro_steps), default=-1) + 1

    @property
    def steady_start(self):
        # type: () -> int
        """
        First slot after the warmup segment.
        """
        warm = [m.slot for m in self.micro_steps if m.kind == WARMUP]
        return max(warm) + 1 if warm else 0

    def work(self):
        # type: () -> Iterator[MicroStep]
        return (m for m in self.micro_steps if not m.is_bubble)

    def row(self, device):
        # type: (int) -> List[MicroStep]
        return sorted((m for m in self.micro_steps if m.device == device), key=lambda m: m.slot)

    def at(self, slot):
        # type: (int) -> List[MicroStep]
        return sorted((m for m in self.micro_steps if m.slot == slot), key=lambda m: m.device)

    def lookup(self):
        # type: () -> Dict[Key, MicroStep]
        return {m.key: m for m in self.work()}

    def to_events(self):
        # type: () -> List[dict]
        return [{'device': m.device, 'slot': m.slot, 'patch': m.patch,
                 'timestep': m.timestep, 'kind': m.kind}
                for m in sorted(self.micro_steps, key=lambda m: (m.slot, m.device))]


@dataclass(frozen=True)
class BubbleReport:
    per_device: Tuple[int, ...]
    startup: Tuple[int, ...]
    wait: Tuple[int, ...]
    warmup_idle: Tuple[int, ...]

    @property
    def total(self):
        # type: () -> int
        return sum(self.per_device)


def _check_dimensions(n_devices, n_patches, steps, warmup):
    for name, value in (('devices', n_devices), ('patches', n_patches), ('steps', steps)):
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ValidationError('%s shall be a positive integer, got %r' % (name, value))
    if isinstance(warmup, bool) or not isinstance(warmup, int) or warmup < 0:
        raise ValidationError('warmup shall be a non-negative integer, got %r' % (warmup,))
    if warmup > steps:
        raise ScheduleError('warmup steps (%d) exceed diffusion steps (%d)' % (warmup, steps))


def _fill_bubbles(work, n_devices):
    # type: (List[MicroStep], int) -> Tuple[MicroStep, ...]
    length = max((m.slot for m in work), default=-1) + 1
    taken = {(m.device, m.slot) for m in work}
    cells = list(work)
    for device in range(n_devices):
        for slot in range(length):
            if (device, slot) not in taken:
                cells.append(MicroStep(device, slot, None, None, BUBBLE))
    return tuple(sorted(cells, key=lambda m: (m.slot, m.device)))


def build_pipefusion_schedule(n_devices, n_patches, steps, warmup=0):
    # type: (int, int, int, int) -> Schedule
    """
    Warmup occupies W * N * M slots with one stage active at a time. The first steady micro-step
    of device 0 takes the slot right after the last warmup slot; every later one starts as soon
    as its device is free and its producer's slot has passed.
    """
    _check_dimensions(n_devices, n_patches, steps, warmup)
    N, M, S, W = n_devices, n_patches, steps, warmup
    work = []
    deps = []
    slot_of = {}  # type: Dict[Key, int]

    # ---[ Warmup: stages in turn, whole sequence, one device active per slot ]----
    for w in range(W):
        t = S - 1 - w
        for d in range(N):
            for j in range(M):
                slot = w * N * M + d * M + j
                work.append(MicroStep(d, slot, j, t, WARMUP, d))
                slot_of[(j, t, d)] = slot
                if d > 0:
                    deps.extend(((k, t, d - 1), (j, t, d)) for k in range(M))
                elif w > 0:
                    deps.extend(((k, t + 1, N - 1), (j, t, d)) for k in range(M))

    # ---[ Steady: patches circulate; FIFO by (timestep desc, patch asc) ]----
    base = W * N * M
    device_free = [base] * N
    for s in range(S - W):
        t = S - 1 - W - s
        for j in range(M):
            for d in range(N):
                earliest = device_free[d]
                if d > 0:
                    producer = (j, t, d - 1)
                elif t + 1 <= S - 1:
                    producer = (j, t + 1, N - 1)
                else:
                    producer = None
                if producer is not None:
                    earliest = max(earliest, slot_of[producer] + 1)
                    deps.append((producer, (j, t, d)))
                work.append(MicroStep(d, earliest, j, t, STEADY, d))
                slot_of[(j, t, d)] = earliest
                device_free[d] = earliest + 1

    return Schedule(PIPEFUSION, N, M, S, W, _fill_bubbles(work, N), tuple(deps))


def build_distrifusion_schedule(n_devices, steps, warmup=0):
    # type: (int, int, int) -> Schedule
    """
    Every device computes its own shard through all layers each step; remote K/V arrive one step late.
    """
    _check_dimensions(n_devices, n_devices, steps, warmup)
    N, S, W = n_devices, steps, warmup
    work = []
    deps = []
    for s in range(S):
        t = S - 1 - s
        kind = WARMUP if s < W else STEADY
        for d in range(N):
            work.append(MicroStep(d, s, d, t, kind, 0))
            if s > 0:
                deps.extend(((k, t + 1, 0), (d, t, 0)) for k in range(N))
    return Schedule(DISTRIFUSION, N, N, S, W, _fill_bubbles(work, N), tuple(deps))


def effective_compute_ratio(n_devices, n_patches, steps):
    # type: (int, int, int) -> float
    """
    Share of pipeline slots doing useful work: M*S / (M*S + N - 1).
    """
    useful = n_patches * steps
    return useful / float(useful + n_devices - 1)


def measured_compute_ratio(schedule, device=0):
    # type: (Schedule, int) -> float
    """
    Same ratio read off a built grid: busy steady slots of `device` over the steady segment length.
    """
    start = schedule.steady_start
    span = schedule.length - start
    if span <= 0:
        return 1.0
    busy = sum(1 for m in schedule.work() if m.device == device and m.slot >= start)
    return busy / float(span)


def bubble_count(schedule):
    # type: (Schedule) -> BubbleReport
    start = schedule.steady_start
    startup, wait, warmup_idle = [], [], []
    for device in range(schedule.n_devices):
        row = schedule.row(device)
        warmup_idle.append(sum(1 for m in row if m.slot < start and m.is_bubble))
        steady = [m for m in row if m.slot >= start]
        busy = [i for i, m in enumerate(steady) if not m.is_bubble]
        if not busy:
            startup.append(len(steady))
            wait.append(0)
            continue
        first, last = busy[0], busy[-1]
        startup.append(first + (len(steady) - 1 - last))
        wait.append(sum(1 for m in steady[first:last + 1] if m.is_bubble))
    per_device = tuple(a + b for a, b in zip(startup, wait))
    return BubbleReport(per_device, tuple(startup), tuple(wait), tuple(warmup_idle))


def _expected_keys(schedule):
    if schedule.strategy == DISTRIFUSION:
        return {(d, t, 0) for d in range(schedule.n_devices) for t in range(schedule.steps)}
    return {(j, t, d) for j in range(schedule.n_patches)
            for t in range(schedule.steps) for d in range(schedule.n_devices)}


def validate_dependencies(schedule):
    # type: (Schedule) -> ValidationResult
    """
    Acyclic edges, exactly-once coverage of (patch, timestep, stage), no consumer before its producer.
    """
    errors = []
    occupied = set()
    seen = {}  # type: Dict[Key, MicroStep]
    for m in schedule.micro_steps:
        if m.is_bubble != (m.patch is None):
            errors.append('micro-step at device %d slot %d: kind %s does not match patch %r'
                          % (m.device, m.slot, m.kind, m.patch))
        if (m.device, m.slot) in occupied:
            errors.append('device %d has two micro-steps at slot %d' % (m.device, m.slot))
        occupied.add((m.device, m.slot))
        if m.is_bubble:
            continue
        if m.key in seen:
            errors.append('triple (patch, timestep, stage)=%r computed twice' % (m.key,))
        seen[m.key] = m

    for key in sorted(_expected_keys(schedule) - set(seen)):
        errors.append('triple (patch, timestep, stage)=%r never computed' % (key,))

    graph = {}  # type: Dict[Key, set]
    for producer, consumer in schedule.dependencies:
        graph.setdefault(consumer, set()).add(producer)
        if producer not in seen or consumer not in seen:
            errors.append('edge %r -> %r refers to a missing micro-step' % (producer, consumer))
            continue
        if seen[producer].slot >= seen[consumer].slot:
            errors.append('triple %r at slot %d consumes %r produced at slot %d'
                          % (consumer, seen[consumer].slot, producer, seen[producer].slot))
    try:
        tuple(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as e:
        errors.append('dependency cycle through %r' % (e.args[1],))
    return ValidationResult(errors)


def patch_glyph(patch):
    # type: (Optional[int]) -> str
    if patch is None:
        return '.'
    return GLYPHS[patch] if patch < len(GLYPHS) else '#'


def gantt(schedule):
    # type: (Schedule) -> str
    """
    ASCII Gantt chart: one row per device, one glyph per slot (patch index, '.' for bubbles).
    With warmup a leading 'w' row marks the warmup slots.
    """
    lines = []
    width = len('d%d' % max(schedule.n_devices - 1, 0))
    if schedule.warmup:
        start = schedule.steady_start
        lines.append('w'.ljust(width) + ' ' + ''.join('w' if s < start else ' '
                                                     for s in range(schedule.length)).rstrip())
    for device in range(schedule.n_devices):
        glyphs = ''.join(patch_glyph(m.patch) for m in schedule.row(device))
        lines.append(('d%d' % device).ljust(width) + ' ' + glyphs)
    return '\n'.join(lines) + '\n'
