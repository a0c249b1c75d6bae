"""
Age of the K/V activations a device attends to.

Age 0 means the patch was recomputed for the observer's current timestep, age 1 means the
buffer still holds the previous timestep's data. Warmup steps are synchronous and read only
fresh data.

PipeFusion: a device working on patch j of timestep t has already recomputed patches 0..j of t,
so its fresh area grows from 1/M to 1 within a timestep. DistriFusion: a device only ever has
its own shard fresh, a constant 1/N.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .schedule import DISTRIFUSION, STEADY, WARMUP, Schedule

__all__ = ['FreshnessMap', 'FreshPoint', 'freshness_map', 'fresh_area_series', 'mean_staleness',
           'heat_strip', 'FRESH_GLYPH', 'STALE_GLYPH']

FRESH_GLYPH = '#'
STALE_GLYPH = ':'


@dataclass(frozen=True)
class FreshPoint:
    slot: int
    device: int
    timestep: int
    kind: str
    fraction: float


@dataclass(frozen=True)
class FreshnessMap:
    strategy: str
    n_patches: int
    # (slot, device) -> ages indexed by patch, for every active observer
    entries: Dict[Tuple[int, int], Tuple[int, ...]]
    # (slot, device) -> (timestep, kind) of the observer's own micro-step
    observers: Dict[Tuple[int, int], Tuple[int, str]]

    def observer(self, slot):
        # type: (int) -> Optional[int]
        """
        Default viewpoint of a slot: the active device on the newest timestep, lowest index first.
        """
        active = [(timestep, device) for (s, device), (timestep, _) in self.observers.items() if s == slot]
        if not active:
            return None
        return min(active)[1]

    def at(self, slot, device=None):
        # type: (int, Optional[int]) -> Dict[int, int]
        """
        patch -> age as seen from `device` (default observer when omitted) at `slot`.
        """
        if device is None:
            device = self.observer(slot)
        ages = self.entries.get((slot, device))
        if ages is None:
            return {}
        return dict(enumerate(ages))

    def max_age(self, kind=None):
        # type: (Optional[str]) -> int
        ages = [age for key, row in self.entries.items()
                if kind is None or self.observers[key][1] == kind for age in row]
        return max(ages, default=0)

    def rows(self):
        # type: () -> List[Tuple[int, int, int, int]]
        """
        (slot, device, patch, age) in slot, device, patch order.
        """
        return [(slot, device, patch, age)
                for (slot, device), ages in sorted(self.entries.items())
                for patch, age in enumerate(ages)]


def freshness_map(schedule):
    # type: (Schedule) -> FreshnessMap
    entries = {}
    observers = {}
    n_patches = schedule.n_patches
    for device in range(schedule.n_devices):
        recomputed = {}  # timestep -> patches this device has recomputed for it
        for m in schedule.row(device):
            if m.is_bubble:
                continue
            done = recomputed.setdefault(m.timestep, set())
            done.add(m.patch)
            if m.kind == WARMUP:
                ages = (0,) * n_patches
            elif schedule.strategy == DISTRIFUSION:
                ages = tuple(0 if patch == m.patch else 1 for patch in range(n_patches))
            else:
                ages = tuple(0 if patch in done else 1 for patch in range(n_patches))
            entries[(m.slot, device)] = ages
            observers[(m.slot, device)] = (m.timestep, m.kind)
    return FreshnessMap(schedule.strategy, n_patches, entries, observers)


def fresh_area_series(schedule, device=0, steady_only=False):
    # type: (Schedule, int, bool) -> List[FreshPoint]
    """
    Fresh share of the KV buffer each time `device` computes.
    """
    fmap = freshness_map(schedule)
    points = []
    for (slot, observer), ages in sorted(fmap.entries.items()):
        if observer != device:
            continue
        timestep, kind = fmap.observers[(slot, observer)]
        if steady_only and kind != STEADY:
            continue
        fresh = sum(1 for age in ages if age == 0)
        points.append(FreshPoint(slot, observer, timestep, kind, fresh / float(len(ages))))
    return points


def mean_staleness(schedule):
    # type: (Schedule) -> float
    """
    Average age over every (active observer slot, patch) entry.
    """
    fmap = freshness_map(schedule)
    ages = [age for row in fmap.entries.values() for age in row]
    if not ages:
        return 0.0
    return sum(ages) / float(len(ages))


def heat_strip(schedule, device=0):
    # type: (Schedule, int) -> str
    """
    One line per timestep as seen by `device`: a block of M glyphs per computed patch,
    '#' fresh and ':' stale.
    """
    fmap = freshness_map(schedule)
    lines = []
    current = None
    blocks = []
    for (slot, observer), ages in sorted(fmap.entries.items()):
        if observer != device:
            continue
        timestep = fmap.observers[(slot, observer)][0]
        if timestep != current and blocks:
            lines.append('T%-4d %s' % (current, ' '.join(blocks)))
            blocks = []
        current = timestep
        blocks.append(''.join(FRESH_GLYPH if age == 0 else STALE_GLYPH for age in ages))
    if blocks:
        lines.append('T%-4d %s' % (current, ' '.join(blocks)))
    return '\n'.join(lines) + ('\n' if lines else '')
