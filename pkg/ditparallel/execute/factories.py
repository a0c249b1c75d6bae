from typing import Dict, Optional

from ..exceptions import ValidationError
from ..model import Strategy
from .generic import ExecutionResult
from .patch import run_distrifusion
from .pipeline import run_pipefusion
from .toy import LatentState, ToyDiT, serial_reference

__all__ = ['execute', 'compare_executions', 'run_manifest', 'serial_manifest', 'EXECUTABLE']

EXECUTABLE = (Strategy.PIPEFUSION, Strategy.DISTRIFUSION)


def execute(strategy, toy, x_init, steps, workers, warmup, step_size, patches=None, runner='threaded',
            reference=None, shuffle_seed=None, keep_trajectory=False):
    # type: (object, ToyDiT, LatentState, int, int, int, float, Optional[int], str, Optional[LatentState], Optional[int], bool) -> ExecutionResult
    """
    Run one of the stale-activation strategies. PipeFusion uses `patches` (default: one per worker),
    DistriFusion always one shard per worker.
    """
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.PIPEFUSION:
        return run_pipefusion(toy, x_init, steps, workers, patches or workers, warmup, step_size, runner,
                              reference, shuffle_seed, keep_trajectory)
    if strategy is Strategy.DISTRIFUSION:
        if patches is not None and patches != workers:
            raise ValidationError('DistriFusion uses one patch per worker, got %d patches for %d workers'
                                  % (patches, workers))
        return run_distrifusion(toy, x_init, steps, workers, warmup, step_size, runner,
                                reference, shuffle_seed, keep_trajectory)
    raise ValidationError('Strategy %s cannot be executed, only %s'
                          % (strategy.value, ', '.join(s.value for s in EXECUTABLE)))


def compare_executions(toy, x_init, steps, workers, warmup, step_size, patches=None, runner='threaded'):
    # type: (ToyDiT, LatentState, int, int, int, float, Optional[int], str) -> Dict[str, ExecutionResult]
    """
    Serial loop plus both strategies on the same toy network and noise, each measured against the serial result.
    """
    reference = serial_reference(toy, x_init, steps, step_size, keep_trajectory=False).final
    return {s.value: execute(s, toy, x_init, steps, workers, warmup, step_size,
                             patches if s is Strategy.PIPEFUSION else None, runner, reference)
            for s in EXECUTABLE}


def run_manifest(result, toy, step_size, seed):
    # type: (ExecutionResult, ToyDiT, float, int) -> dict
    return {
        'seed': seed,
        'L': toy.depth,
        'hs': toy.hidden_size,
        'heads': toy.heads,
        'p': result.final.shape[0],
        'S': result.steps,
        'W': result.warmup,
        'N': result.workers,
        'M': result.patches,
        'strategy': result.strategy,
        'eta': step_size,
        'divergence': result.divergence,
        'fresh_reads': result.fresh_reads,
        'stale_reads': result.stale_reads,
        'max_age': result.max_age,
        'wall_time': result.wall_time_s,
    }


def serial_manifest(toy, seq_len, steps, step_size, seed):
    # type: (ToyDiT, int, int, float, int) -> dict
    """
    Manifest row of the single-device loop: every step synchronous, zero divergence by definition.
    """
    return {
        'seed': seed,
        'L': toy.depth,
        'hs': toy.hidden_size,
        'heads': toy.heads,
        'p': seq_len,
        'S': steps,
        'W': steps,
        'N': 1,
        'M': 1,
        'strategy': 'serial',
        'eta': step_size,
        'divergence': 0.0,
        'fresh_reads': None,
        'stale_reads': None,
        'max_age': 0,
        'wall_time': None,
    }
