"""
DistriFusion over message-passing workers.

Every worker holds all L layers, one contiguous shard of the latent and a K/V buffer of the
whole sequence. Warmup steps all-gather each layer's K/V before attending (synchronous patch
parallelism). In steady steps a worker attends with its own fresh K/V and its peers' K/V from
the previous step; its own K/V go out after each layer and land in the peers' buffers at the
start of the next step.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..schedule import STEADY, WARMUP
from ..utils import patch_bounds
from .channel import KV, Message, Network
from .generic import ExecutionResult, Worker, check_divisible, check_steps, gather_reads, run_workers
from .toy import (KVCache, LatentState, ToyDiT, check_finite, divergence, layer_apply, layer_kv,
                  serial_reference)

__all__ = ['DistriFusionWorker', 'run_distrifusion']

logger = logging.getLogger(__name__)


class DistriFusionWorker(Worker):

    def __init__(self, device, network, toy, bounds, steps, warmup, step_size, x_init, keep_trajectory=False):
        # type: (int, Network, ToyDiT, Sequence[Tuple[int, int]], int, int, float, LatentState, bool) -> None
        super(DistriFusionWorker, self).__init__(device, network)
        self.toy = toy
        self.bounds = list(bounds)
        self.steps = steps
        self.warmup = warmup
        self.step_size = step_size
        self.peers = [d for d in range(len(self.bounds)) if d != device]
        start, stop = self.bounds[device]
        self.x = np.array(x_init.x[start:stop], dtype=np.float64)
        self.cache = KVCache(range(toy.depth), x_init.shape[0], toy.hidden_size, self.bounds, steps)
        self.keep_trajectory = keep_trajectory
        self.shards = []  # type: List[np.ndarray]

    def _exchange(self, layer_id, k, v, timestep):
        for peer in self.peers:
            yield from self.send(peer, Message(KV, self.device, timestep, layer=layer_id, payload=(k, v)))
        for peer in self.peers:
            message = yield from self.receive(peer, KV, timestep, layer=layer_id)
            self.cache.write(layer_id, peer, message.payload[0], message.payload[1], timestep)

    def _broadcast(self, layer_id, k, v, timestep):
        for peer in self.peers:
            yield from self.send(peer, Message(KV, self.device, timestep, layer=layer_id, payload=(k, v)))

    def _land_previous(self, timestep):
        # K/V the peers sent during the previous step
        for peer in self.peers:
            for layer_id in range(self.toy.depth):
                message = yield from self.receive(peer, KV, timestep + 1, layer=layer_id)
                self.cache.write(layer_id, peer, message.payload[0], message.payload[1], timestep + 1)

    def program(self):
        S, W = self.steps, self.warmup
        for s in range(S):
            t = S - 1 - s
            synchronous = s < W
            if s > W:
                yield from self._land_previous(t)
            h = self.x + self.toy.condition_bias
            for layer_id, layer in enumerate(self.toy.layers):
                k, v = layer_kv(layer, h)
                self.cache.write(layer_id, self.device, k, v, t)
                if synchronous:
                    yield from self._exchange(layer_id, k, v, t)
                keys, values = self.cache.read(layer_id, t)
                if layer_id == 0:
                    self.record(t, self.device, WARMUP if synchronous else STEADY, self.cache.ages(layer_id, t))
                h = layer_apply(layer, h, keys, values, self.toy.heads)
                check_finite(h, layer_id, t)
                if not synchronous and t > 0:
                    yield from self._broadcast(layer_id, k, v, t)
            self.x = self.x - self.step_size * h
            if self.keep_trajectory:
                self.shards.append(self.x)


def run_distrifusion(toy, x_init, steps, workers, warmup, step_size, runner='threaded',
                     reference=None, shuffle_seed=None, keep_trajectory=False, timeout_s=None):
    # type: (ToyDiT, LatentState, int, int, int, float, str, Optional[LatentState], Optional[int], bool, Optional[float]) -> ExecutionResult
    check_divisible('seq_len', x_init.shape[0], workers, 'workers')
    check_steps(steps, warmup)
    network = Network(workers, 2 * toy.depth + 1)
    bounds = patch_bounds(x_init.shape[0], workers)
    pool = [DistriFusionWorker(d, network, toy, bounds, steps, warmup, step_size, x_init, keep_trajectory)
            for d in range(workers)]
    logger.debug('distrifusion: %d workers, %d steps (%d warmup)', workers, steps, warmup)
    elapsed = run_workers(pool, network, runner, shuffle_seed, timeout_s)
    final = LatentState(np.concatenate([w.x for w in pool]), 0)
    trajectory = ()  # type: Tuple[LatentState, ...]
    if keep_trajectory:
        trajectory = (x_init,) + tuple(
            LatentState(np.concatenate([w.shards[s] for w in pool]), steps - 1 - s) for s in range(steps))
    if reference is None:
        reference = serial_reference(toy, x_init, steps, step_size, keep_trajectory=False).final
    return ExecutionResult(
        strategy='distrifusion',
        final=final,
        reads=gather_reads(pool),
        workers=workers,
        patches=workers,
        warmup=warmup,
        steps=steps,
        wall_time_s=elapsed,
        divergence=divergence(final, reference),
        trajectory=trajectory,
    )
