"""
In-process rank transport

A stand-in for the subset of MPI the framework needs: buffered non-blocking sends,
posted receives matched FIFO per (source, destination, tag) channel, a test-some
completion primitive, a barrier and a few pickled collectives. All ranks of a World
live in one process; every call is thread-safe.

Matching rule:
    The k-th receive posted on channel (src, dst, tag) matches the k-th send posted on
    the same channel. Nothing is ordered across channels.

Scheduling perturbation:
    With ``max_delay > 0`` every send gets a random delivery time drawn from a seeded
    generator. Receives complete only once that time has passed, which reorders
    arrivals across channels without ever breaking per-channel FIFO.
"""
from __future__ import annotations
import math
import pickle
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from ..errors import TransportError

# Collective operations use negative tags so they never match point-to-point traffic
_COLLECTIVE_TAG_BASE = -1


@dataclass
class _Message:
    payload: bytes
    deliver_at: float


@dataclass
class _Channel:
    messages: List[Optional[_Message]] = field(default_factory=list)
    recv_posted: int = 0
    consumed: int = 0


class MessageHandle:
    """
    A posted send or receive.

    Sends complete at post time (the payload is buffered). A receive completes once its
    matching message exists and its delivery time has passed; ``payload`` is then set.
    """

    __slots__ = ("peer", "channel_tag", "payload", "state", "kind", "_key", "_seq", "_reported")

    def __init__(self, kind: str, peer: int, tag: int, key: Tuple[int, int, int], seq: int):
        self.kind = kind
        self.peer = peer
        self.channel_tag = tag
        self.payload: Optional[bytes] = None
        self.state = "pending"
        self._key = key
        self._seq = seq
        self._reported = False

    @property
    def complete(self) -> bool:
        return self.state == "complete"

    def __repr__(self) -> str:
        return f"MessageHandle({self.kind}, peer={self.peer}, tag={self.channel_tag}, {self.state})"


class World:
    """Shared message space of P in-process ranks"""

    def __init__(self, size: int, seed: Optional[int] = None, max_delay: float = 0.0):
        if size < 1:
            raise ValueError(f"World size must be >= 1, got {size}")
        self.size = size
        self.max_delay = max(0.0, float(max_delay))
        self._rng = random.Random(seed)
        self._cond = threading.Condition()
        self._channels: Dict[Tuple[int, int, int], _Channel] = {}
        self._barrier = threading.Barrier(size)
        self._closed = False
        self._error: Optional[BaseException] = None

    def endpoint(self, rank: int) -> "Communicator":
        if not 0 <= rank < self.size:
            raise ValueError(f"Rank {rank} outside [0, {self.size})")
        return Communicator(self, rank)

    def abort(self, error: BaseException) -> None:
        """Fail every pending and future operation; called when a rank dies"""
        with self._cond:
            if self._error is None:
                self._error = error
            self._closed = True
            self._cond.notify_all()
        self._barrier.abort()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- internals -------------------------------------------------------

    def _check_open(self) -> None:
        if self._error is not None:
            raise TransportError(f"Transport aborted: {self._error!r}")
        if self._closed:
            raise TransportError("Transport closed")

    def _channel(self, key: Tuple[int, int, int]) -> _Channel:
        ch = self._channels.get(key)
        if ch is None:
            ch = _Channel()
            self._channels[key] = ch
        return ch

    def _post_send(self, src: int, dst: int, tag: int, payload: bytes) -> MessageHandle:
        if not 0 <= dst < self.size:
            raise TransportError(f"Invalid peer {dst}")
        data = bytes(payload)
        with self._cond:
            self._check_open()
            key = (src, dst, tag)
            delay = self._rng.uniform(0.0, self.max_delay) if self.max_delay > 0 else 0.0
            ch = self._channel(key)
            ch.messages.append(_Message(data, time.monotonic() + delay))
            handle = MessageHandle("send", dst, tag, key, len(ch.messages) - 1)
            handle.state = "complete"
            self._cond.notify_all()
        return handle

    def _post_recv(self, src: int, dst: int, tag: int) -> MessageHandle:
        if not 0 <= src < self.size:
            raise TransportError(f"Invalid peer {src}")
        with self._cond:
            self._check_open()
            key = (src, dst, tag)
            ch = self._channel(key)
            seq = ch.recv_posted
            ch.recv_posted += 1
        return MessageHandle("recv", src, tag, key, seq)

    def _try_complete(self, handle: MessageHandle, now: float) -> bool:
        """Caller holds the condition lock"""
        if handle.state == "complete":
            return True
        ch = self._channels[handle._key]
        if handle._seq >= len(ch.messages):
            return False
        msg = ch.messages[handle._seq]
        if msg is None or msg.deliver_at > now:
            return False
        handle.payload = msg.payload
        handle.state = "complete"
        ch.messages[handle._seq] = None
        ch.consumed += 1
        if ch.consumed == ch.recv_posted == len(ch.messages):
            # fully drained; a later post on the same key starts a fresh channel
            del self._channels[handle._key]
        return True

    def _test_some(self, handles: Sequence[MessageHandle]) -> List[int]:
        done: List[int] = []
        with self._cond:
            if self._error is not None:
                raise TransportError(f"Transport aborted: {self._error!r}")
            now = time.monotonic()
            for i, h in enumerate(handles):
                if h._reported:
                    continue
                if self._try_complete(h, now):
                    h._reported = True
                    done.append(i)
        return done

    def _wait_progress(self, timeout: float) -> None:
        with self._cond:
            if self._error is not None:
                raise TransportError(f"Transport aborted: {self._error!r}")
            self._cond.wait(timeout)


class Communicator:
    """
    Rank-local view of a World.

    Point-to-point:
        post_send / post_recv / test_some / wait_all

    Collectives (every rank must call them in the same order):
        barrier / allgather / bcast / alltoall / allreduce_fsum / allreduce_max
    """

    # Polling interval while waiting; bounded so delayed deliveries are noticed
    POLL_INTERVAL = 0.0005

    def __init__(self, world: World, rank: int):
        self.world = world
        self.rank = rank
        self.size = world.size
        self._collective_seq = 0

    # -- point-to-point ----------------------------------------------------

    def post_send(self, peer: int, tag: int, payload: bytes) -> MessageHandle:
        """Buffered non-blocking send; the handle is complete on return"""
        return self.world._post_send(self.rank, peer, tag, payload)

    def post_recv(self, peer: int, tag: int) -> MessageHandle:
        """Non-blocking receive matched FIFO on (peer, self, tag)"""
        return self.world._post_recv(peer, self.rank, tag)

    def test_some(self, handles: Sequence[MessageHandle]) -> List[int]:
        """
        Indices of handles that completed since they were last reported.

        Non-blocking. Every handle is reported exactly once over repeated calls.
        """
        return self.world._test_some(handles)

    def wait_progress(self) -> None:
        """Block briefly until something may have changed"""
        self.world._wait_progress(self.POLL_INTERVAL)

    def wait_all(self, handles: Sequence[MessageHandle]) -> None:
        pending = sum(1 for h in handles if not h._reported)
        while pending:
            pending -= len(self.test_some(handles))
            if pending:
                self.wait_progress()

    # -- collectives ---------------------------------------------------------

    def barrier(self) -> None:
        """Return once every rank has entered"""
        try:
            self.world._barrier.wait()
        except threading.BrokenBarrierError as exc:
            raise TransportError("Barrier broken by an aborted rank") from exc

    def _next_tag(self) -> int:
        self._collective_seq += 1
        return _COLLECTIVE_TAG_BASE - self._collective_seq

    def allgather(self, obj: Any) -> List[Any]:
        """Every rank receives the list of every rank's object, in rank order"""
        tag = self._next_tag()
        payload = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
        recvs = [self.post_recv(q, tag) for q in range(self.size) if q != self.rank]
        for q in range(self.size):
            if q != self.rank:
                self.post_send(q, tag, payload)
        self.wait_all(recvs)
        out: List[Any] = []
        it = iter(recvs)
        for q in range(self.size):
            out.append(obj if q == self.rank else pickle.loads(next(it).payload))
        return out

    def bcast(self, obj: Any, root: int = 0) -> Any:
        tag = self._next_tag()
        if self.rank == root:
            payload = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
            for q in range(self.size):
                if q != root:
                    self.post_send(q, tag, payload)
            return obj
        h = self.post_recv(root, tag)
        self.wait_all([h])
        return pickle.loads(h.payload)

    def alltoall(self, objs: Sequence[Any]) -> List[Any]:
        """objs[q] goes to rank q; returns what every rank sent to this one"""
        if len(objs) != self.size:
            raise ValueError(f"alltoall needs {self.size} items, got {len(objs)}")
        tag = self._next_tag()
        recvs = {q: self.post_recv(q, tag) for q in range(self.size) if q != self.rank}
        for q in range(self.size):
            if q != self.rank:
                self.post_send(q, tag, pickle.dumps(objs[q], protocol=pickle.HIGHEST_PROTOCOL))
        self.wait_all(list(recvs.values()))
        return [objs[q] if q == self.rank else pickle.loads(recvs[q].payload) for q in range(self.size)]

    def allreduce_fsum(self, partials: Dict[int, float]) -> float:
        """
        Correctly rounded global sum of per-key partials (keys are global cube ids).

        math.fsum is exact up to the final rounding, so the result does not depend on
        how keys are spread over ranks.
        """
        gathered = self.allgather(partials)
        values: List[float] = []
        for part in gathered:
            values.extend(part.values())
        return math.fsum(values)

    def allreduce_max(self, value: float) -> float:
        return max(self.allgather(float(value)))

    def allreduce_min(self, value: float) -> float:
        return min(self.allgather(float(value)))


def log_channel_stats(world: World) -> None:
    """Debug dump of unmatched messages (a leak means a missing receive)"""
    with world._cond:
        leftovers = {
            key: sum(1 for m in ch.messages if m is not None)
            for key, ch in world._channels.items()
        }
    leaks = {k: v for k, v in leftovers.items() if v}
    if leaks:
        logger.debug("transport unmatched messages: {}", leaks)
