"""
Workers and the two ways of running them.

A worker is written once, as a generator that yields `Receive` and `Send` requests. The
threaded runner gives every worker its own thread and serves requests with blocking channel
calls. The cooperative runner drives all generators from one thread, advancing each worker
until it would block; it is the reference interpreter the threaded runs are checked against.
Both see the same per-pair FIFO order, so outputs do not depend on interleaving.
"""
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Generator, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ChannelClosedError, ProtocolError, ValidationError
from .channel import Channel, Message, Network
from .toy import LatentState

__all__ = ['Receive', 'Send', 'KVRead', 'ExecutionResult', 'Worker',
           'run_threaded', 'run_cooperative', 'run_workers', 'gather_reads',
           'check_divisible', 'check_steps', 'RUNNERS']

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Receive:
    channel: Channel


@dataclass(frozen=True, eq=False)
class Send:
    channel: Channel
    message: Message


@dataclass(frozen=True)
class KVRead:
    """
    Buffer state seen by one micro-step (first layer of the worker's block).
    """
    device: int
    timestep: int
    patch: Optional[int]
    kind: str
    fresh: int
    total: int
    max_age: int

    @property
    def fraction(self):
        # type: () -> float
        return self.fresh / float(self.total)


@dataclass(frozen=True, eq=False)
class ExecutionResult:
    strategy: str
    final: LatentState
    reads: Tuple[KVRead, ...]
    workers: int
    patches: int
    warmup: int
    steps: int
    wall_time_s: float
    divergence: Optional[float] = None
    trajectory: Tuple[LatentState, ...] = field(default=())

    @property
    def fresh_reads(self):
        # type: () -> int
        return sum(r.fresh for r in self.reads)

    @property
    def stale_reads(self):
        # type: () -> int
        return sum(r.total - r.fresh for r in self.reads)

    @property
    def max_age(self):
        # type: () -> int
        return max((r.max_age for r in self.reads), default=0)

    def fresh_fractions(self, device, kind=None):
        # type: (int, Optional[str]) -> List[float]
        return [r.fraction for r in self.reads if r.device == device and (kind is None or r.kind == kind)]


Program = Generator[object, Optional[Message], None]


class Worker(object):
    """
    Abstract simulated device. Subclasses implement `program()` with `yield from self.receive(...)`
    and `yield from self.send(...)`.
    """

    def __init__(self, device, network):
        # type: (int, Network) -> None
        self.device = device
        self.network = network
        self.reads = []  # type: List[KVRead]

    @property
    def name(self):
        # type: () -> str
        return '%s-%d' % (type(self).__name__, self.device)

    def receive(self, source, kind, timestep, patch=None, layer=None):
        """
        Next message from `source`; the protocol fixes exactly what it shall be.
        """
        channel = self.network.channel(source, self.device)
        message = yield Receive(channel)
        expected = (kind, timestep, patch, layer)
        if message.tag() != expected:
            raise ProtocolError('%s expected %r on %s, got %r' % (self.name, expected, channel.name, message))
        return message

    def send(self, target, message):
        yield Send(self.network.channel(self.device, target), message)

    def record(self, timestep, patch, kind, ages):
        # type: (int, Optional[int], str, Sequence[int]) -> None
        fresh = sum(1 for age in ages if age == 0)
        self.reads.append(KVRead(self.device, timestep, patch, kind, fresh, len(ages), max(ages)))

    def program(self):
        # type: () -> Program
        raise NotImplementedError()


# ---[ Threaded runner ]----

def _drive(worker, failures, lock):
    # type: (Worker, List[Tuple[int, BaseException]], threading.Lock) -> None
    logger.debug('%s started', worker.name)
    program = worker.program()
    try:
        request = next(program)
        while True:
            if isinstance(request, Receive):
                request = program.send(request.channel.get())
            else:
                request.channel.put(request.message)
                request = program.send(None)
    except StopIteration:
        logger.debug('%s finished', worker.name)
    except BaseException as e:
        with lock:
            if not failures:
                logger.error('%s failed: %s', worker.name, e)
            failures.append((worker.device, e))
        worker.network.abort()


def _first_cause(failures):
    # type: (List[Tuple[int, BaseException]]) -> BaseException
    """
    The error that started a failed run; channel closures are what the other workers saw afterwards.
    """
    for _, error in failures:
        if not isinstance(error, ChannelClosedError):
            return error
    return failures[0][1]


def run_threaded(workers, network, timeout_s=None):
    # type: (Sequence[Worker], Network, Optional[float]) -> None
    """
    One thread per worker. A run still going after `timeout_s` is aborted as a deadlock.
    """
    failures = []  # type: List[Tuple[int, BaseException]]
    lock = threading.Lock()
    threads = [threading.Thread(target=_drive, args=(w, failures, lock), name=w.name, daemon=True)
               for w in workers]
    for thread in threads:
        thread.start()
    deadline = None if timeout_s is None else time.monotonic() + timeout_s
    for thread in threads:
        thread.join(None if deadline is None else max(0.0, deadline - time.monotonic()))
    if any(thread.is_alive() for thread in threads):
        network.abort()
        for thread in threads:
            thread.join()
        raise ProtocolError('workers still running after %.1f s, aborted' % timeout_s)
    if failures:
        raise _first_cause(failures)


# ---[ Cooperative runner ]----

class _Coroutine(object):

    def __init__(self, worker):
        # type: (Worker) -> None
        self.worker = worker
        self.program = worker.program()
        self.request = None
        self.done = False
        self._started = False

    def advance(self):
        # type: () -> bool
        """
        Run until the worker would block or finishes. :return: True when anything happened.
        """
        progressed = False
        try:
            if not self._started:
                self._started = True
                self.request = next(self.program)
                progressed = True
            while True:
                if isinstance(self.request, Receive):
                    message = self.request.channel.try_get()
                    if message is None:
                        return progressed
                    self.request = self.program.send(message)
                else:
                    if not self.request.channel.try_put(self.request.message):
                        return progressed
                    self.request = self.program.send(None)
                progressed = True
        except StopIteration:
            self.done = True
            return True

    def describe(self):
        # type: () -> str
        if isinstance(self.request, Receive):
            return '%s waiting on %s' % (self.worker.name, self.request.channel.name)
        return '%s blocked sending on %s' % (self.worker.name, self.request.channel.name)


def run_cooperative(workers, network, shuffle_seed=None):
    # type: (Sequence[Worker], Network, Optional[int]) -> None
    """
    Single-threaded interpreter of the worker protocol. With `shuffle_seed` the visiting order
    is reshuffled every round, which exercises other legal interleavings deterministically.
    """
    coroutines = [_Coroutine(w) for w in workers]
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    while True:
        active = [c for c in coroutines if not c.done]
        if not active:
            return
        if rng is not None:
            active = [active[i] for i in rng.permutation(len(active))]
        progressed = False
        for coroutine in active:
            progressed = coroutine.advance() or progressed
        if not progressed:
            blocked = '; '.join(c.describe() for c in coroutines if not c.done)
            raise ProtocolError('deadlock: %s' % blocked)


RUNNERS = ('threaded', 'cooperative')


def run_workers(workers, network, runner='threaded', shuffle_seed=None, timeout_s=None):
    # type: (Sequence[Worker], Network, str, Optional[int], Optional[float]) -> float
    """
    Run the protocol to completion and check that no message was left undelivered.

    :return: wall time in seconds
    """
    if runner not in RUNNERS:
        raise ValidationError('runner shall be one of %s, got %r' % (', '.join(sorted(RUNNERS)), runner))
    started = time.perf_counter()
    if runner == 'cooperative':
        run_cooperative(workers, network, shuffle_seed)
    else:
        run_threaded(workers, network, timeout_s)
    elapsed = time.perf_counter() - started
    leftover = network.pending()
    if leftover:
        raise ProtocolError('messages left undelivered: %s'
                            % ', '.join('%s=%d' % item for item in sorted(leftover.items())))
    return elapsed


def gather_reads(workers):
    # type: (Sequence[Worker]) -> Tuple[KVRead, ...]
    return tuple(read for w in workers for read in w.reads)


def check_divisible(name, total, parts, what):
    # type: (str, int, int, str) -> None
    if parts < 1:
        raise ValidationError('%s shall be a positive integer, got %r' % (what, parts))
    if total % parts:
        raise ValidationError('%s (%d) is not divisible by %s (%d)' % (name, total, what, parts))


def check_steps(steps, warmup):
    # type: (int, int) -> None
    if steps < 1:
        raise ValidationError('steps shall be positive, got %r' % (steps,))
    if not 0 <= warmup <= steps:
        raise ValidationError('warmup steps (%d) shall be between 0 and steps (%d)' % (warmup, steps))
