"""
PipeFusion over message-passing workers.

Worker d owns layers [d*L/N, (d+1)*L/N) and a KV buffer of the full sequence for them. Stage 0
also owns the latent x. Warmup steps push the whole sequence through the stages one after the
other. In steady steps patches circulate: stage 0 adds the condition to x's rows of patch j,
every stage writes fresh K/V for patch j and attends over the whole buffer, the last stage
returns eps(j, t) to stage 0, which applies it just before feeding patch j of step t-1.

Each patch travels the ring as a single token, so at most M messages are in flight.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..schedule import STEADY, WARMUP
from ..utils import patch_bounds
from .channel import ACTIVATION, NOISE, Message, Network
from .generic import ExecutionResult, Worker, check_divisible, check_steps, gather_reads, run_workers
from .toy import (KVCache, LatentState, ToyDiT, check_finite, divergence, layer_apply, layer_kv,
                  serial_reference)

__all__ = ['PipeFusionWorker', 'run_pipefusion']

logger = logging.getLogger(__name__)


class PipeFusionWorker(Worker):

    def __init__(self, device, network, toy, n_devices, bounds, steps, warmup, step_size,
                 x_init=None, keep_trajectory=False):
        # type: (int, Network, ToyDiT, int, Sequence[Tuple[int, int]], int, int, float, Optional[LatentState], bool) -> None
        super(PipeFusionWorker, self).__init__(device, network)
        per_stage = toy.depth // n_devices
        self.toy = toy
        self.n_devices = n_devices
        self.layer_ids = list(range(device * per_stage, (device + 1) * per_stage))
        self.bounds = list(bounds)
        self.steps = steps
        self.warmup = warmup
        self.step_size = step_size
        seq_len = self.bounds[-1][1]
        self.cache = KVCache(self.layer_ids, seq_len, toy.hidden_size, self.bounds, steps)
        self.x = None  # type: Optional[np.ndarray]
        self.trajectory = []  # type: List[LatentState]
        self.keep_trajectory = keep_trajectory
        if device == 0:
            if x_init is None:
                raise ValueError('stage 0 needs the initial latent')
            self.x = np.array(x_init.x, dtype=np.float64)
            if keep_trajectory:
                self.trajectory.append(x_init)

    @property
    def is_first(self):
        # type: () -> bool
        return self.device == 0

    @property
    def is_last(self):
        # type: () -> bool
        return self.device == self.n_devices - 1

    @property
    def n_patches(self):
        # type: () -> int
        return len(self.bounds)

    def _rows(self, patch):
        # type: (Optional[int]) -> slice
        if patch is None:
            return slice(None)
        start, stop = self.bounds[patch]
        return slice(start, stop)

    def _stage(self, h, timestep, patch, kind):
        # type: (np.ndarray, int, Optional[int], str) -> np.ndarray
        for index, layer_id in enumerate(self.layer_ids):
            layer = self.toy.layers[layer_id]
            k, v = layer_kv(layer, h)
            if patch is None:
                self.cache.write_all(layer_id, k, v, timestep)
            else:
                self.cache.write(layer_id, patch, k, v, timestep)
            keys, values = self.cache.read(layer_id, timestep)
            if index == 0:
                self.record(timestep, patch, kind, self.cache.ages(layer_id, timestep))
            h = layer_apply(layer, h, keys, values, self.toy.heads)
            check_finite(h, layer_id, timestep)
        return h

    def _apply_noise(self, eps, timestep, patch):
        # type: (np.ndarray, int, Optional[int]) -> None
        rows = self._rows(patch)
        self.x[rows] = self.x[rows] - self.step_size * eps
        if self.keep_trajectory and (patch is None or patch == self.n_patches - 1):
            self.trajectory.append(LatentState(self.x.copy(), timestep))

    def _pass_on(self, h, timestep, patch):
        if self.is_last:
            if self.is_first:
                self._apply_noise(h, timestep, patch)
            else:
                yield from self.send(0, Message(NOISE, self.device, timestep, patch, payload=h))
        else:
            yield from self.send(self.device + 1, Message(ACTIVATION, self.device, timestep, patch, payload=h))

    def _micro_step(self, timestep, patch, kind):
        if self.is_first:
            h = self.x[self._rows(patch)] + self.toy.condition_bias
        else:
            message = yield from self.receive(self.device - 1, ACTIVATION, timestep, patch)
            h = message.payload
        h = self._stage(h, timestep, patch, kind)
        yield from self._pass_on(h, timestep, patch)

    def _collect_noise(self, timestep, patch):
        if self.is_first and not self.is_last:
            message = yield from self.receive(self.n_devices - 1, NOISE, timestep, patch)
            self._apply_noise(message.payload, timestep, patch)

    def program(self):
        S, W = self.steps, self.warmup
        for s in range(S):
            t = S - 1 - s
            if s < W:
                yield from self._micro_step(t, None, WARMUP)
                yield from self._collect_noise(t, None)
                continue
            for j in range(self.n_patches):
                if s > W:
                    yield from self._collect_noise(t + 1, j)
                yield from self._micro_step(t, j, STEADY)
        if W < S:
            for j in range(self.n_patches):
                yield from self._collect_noise(0, j)


def run_pipefusion(toy, x_init, steps, workers, patches, warmup, step_size, runner='threaded',
                   reference=None, shuffle_seed=None, keep_trajectory=False, timeout_s=None):
    # type: (ToyDiT, LatentState, int, int, int, int, float, str, Optional[LatentState], Optional[int], bool, Optional[float]) -> ExecutionResult
    """
    :param reference: final state to measure divergence against; the serial loop is run when omitted
    """
    check_divisible('layers', toy.depth, workers, 'workers')
    check_divisible('seq_len', x_init.shape[0], patches, 'patches')
    check_steps(steps, warmup)
    network = Network(workers, patches + 1)
    bounds = patch_bounds(x_init.shape[0], patches)
    pool = [PipeFusionWorker(d, network, toy, workers, bounds, steps, warmup, step_size,
                             x_init if d == 0 else None, keep_trajectory)
            for d in range(workers)]
    logger.debug('pipefusion: %d workers, %d patches, %d steps (%d warmup)', workers, patches, steps, warmup)
    elapsed = run_workers(pool, network, runner, shuffle_seed, timeout_s)
    final = LatentState(pool[0].x, 0)
    if reference is None:
        reference = serial_reference(toy, x_init, steps, step_size, keep_trajectory=False).final
    return ExecutionResult(
        strategy='pipefusion',
        final=final,
        reads=gather_reads(pool),
        workers=workers,
        patches=patches,
        warmup=warmup,
        steps=steps,
        wall_time_s=elapsed,
        divergence=divergence(final, reference),
        trajectory=tuple(pool[0].trajectory),
    )
