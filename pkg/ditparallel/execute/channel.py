import logging
import queue
import threading
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

from ..exceptions import ChannelClosedError, ValidationError

__all__ = ['ACTIVATION', 'NOISE', 'KV', 'Message', 'Channel', 'Network']

logger = logging.getLogger(__name__)

ACTIVATION = 'activation'
NOISE = 'eps'
KV = 'kv'


@dataclass(frozen=True, eq=False)
class Message:
    kind: str
    sender: int
    timestep: int
    patch: Optional[int] = None         # None: whole sequence
    layer: Optional[int] = None
    payload: Any = None

    def tag(self):
        # type: () -> Tuple[str, int, Optional[int], Optional[int]]
        return self.kind, self.timestep, self.patch, self.layer

    def __repr__(self):
        return 'Message(%s from %d, t=%d, patch=%r, layer=%r)' % (
            self.kind, self.sender, self.timestep, self.patch, self.layer)


class Channel(object):
    """
    Bounded FIFO from one worker to another. Blocking calls poll the run's abort flag so that a
    failure anywhere unblocks everyone.
    """
    POLL_INTERVAL = 0.05

    def __init__(self, source, target, capacity, abort):
        # type: (int, int, int, threading.Event) -> None
        if capacity < 1:
            raise ValidationError('channel capacity shall be positive, got %r' % (capacity,))
        self.source = source
        self.target = target
        self.capacity = capacity
        self._queue = queue.Queue(maxsize=capacity)
        self._abort = abort

    @property
    def name(self):
        # type: () -> str
        return '%d->%d' % (self.source, self.target)

    def _check_open(self):
        if self._abort.is_set():
            raise ChannelClosedError('channel %s closed mid-run' % self.name)

    def put(self, message):
        # type: (Message) -> None
        while True:
            self._check_open()
            try:
                self._queue.put(message, timeout=self.POLL_INTERVAL)
                return
            except queue.Full:
                continue

    def get(self):
        # type: () -> Message
        while True:
            self._check_open()
            try:
                return self._queue.get(timeout=self.POLL_INTERVAL)
            except queue.Empty:
                continue

    def try_put(self, message):
        # type: (Message) -> bool
        self._check_open()
        try:
            self._queue.put_nowait(message)
        except queue.Full:
            return False
        return True

    def try_get(self):
        # type: () -> Optional[Message]
        self._check_open()
        try:
            return self._queue.get_nowait()
        except queue.Empty:
            return None

    def __len__(self):
        return self._queue.qsize()


class Network(object):
    """
    One channel per ordered (source, target) worker pair, all sharing one abort flag.
    """

    def __init__(self, n_workers, capacity):
        # type: (int, int) -> None
        self.n_workers = n_workers
        self.capacity = capacity
        self._abort = threading.Event()
        self._channels = {(s, t): Channel(s, t, capacity, self._abort)
                          for s in range(n_workers) for t in range(n_workers) if s != t}

    def channel(self, source, target):
        # type: (int, int) -> Channel
        try:
            return self._channels[(source, target)]
        except KeyError:
            raise ValidationError('no channel %d->%d among %d workers' % (source, target, self.n_workers))

    def abort(self):
        # type: () -> None
        self._abort.set()

    @property
    def aborted(self):
        # type: () -> bool
        return self._abort.is_set()

    def pending(self):
        # type: () -> Dict[str, int]
        """
        Undelivered message count per non-empty channel.
        """
        return {c.name: len(c) for c in self._channels.values() if len(c)}
