"""Bounded FIFO channels between adjacent stage workers."""

import queue
import time
from dataclasses import dataclass

import numpy as np

ACTIVATION = "activation"
GRADIENT = "gradient"


class PipelineError(RuntimeError):
    pass


class ChannelClosed(PipelineError):
    pass


class ScheduleDeadlock(PipelineError):
    pass


class ChannelOrderError(PipelineError):
    """A message arrived out of the order the receiving stage expects."""


@dataclass
class PipelineMessage:
    kind: str
    t: int
    j: int
    payload: np.ndarray

    @property
    def micro(self):
        return (self.t, self.j)


class Channel:
    """One directed edge. ``kind`` fixes which messages it may carry."""

    def __init__(self, kind, src, dst, capacity):
        if kind == ACTIVATION and dst != src + 1:
            raise ValueError("activations flow from rank k to k+1 only")
        if kind == GRADIENT and dst != src - 1:
            raise ValueError("gradients flow from rank k to k-1 only")
        self.kind, self.src, self.dst = kind, src, dst
        self.capacity = capacity
        self._q = queue.Queue(maxsize=capacity)
        self.closed = False
        self.sent = 0
        self.max_depth = 0

    def __repr__(self):
        return f"Channel({self.kind}, {self.src}->{self.dst}, depth={self._q.qsize()}/{self.capacity})"

    def __len__(self):
        return self._q.qsize()

    def has_room(self):
        return self._q.qsize() < self.capacity

    def close(self):
        self.closed = True

    def send(self, msg, timeout=None):
        if msg.kind != self.kind:
            raise PipelineError(f"{msg.kind} message on {self.kind} channel")
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self.closed:
                raise ChannelClosed(f"{self!r} closed while sending {msg.micro}")
            try:
                self._q.put(msg, timeout=0.02)
                break
            except queue.Full:
                if deadline is not None and time.monotonic() > deadline:
                    raise ScheduleDeadlock(f"{self!r} stayed full; cannot send {msg.micro}") from None
        self.sent += 1
        self.max_depth = max(self.max_depth, self._q.qsize())

    def recv(self, expected, timeout=None):
        """Pop the next message, which must belong to micro-batch ``expected``."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                msg = self._q.get(timeout=0.02)
                break
            except queue.Empty:
                if self.closed:
                    raise ChannelClosed(f"{self!r} closed while waiting for {expected}") from None
                if deadline is not None and time.monotonic() > deadline:
                    raise ScheduleDeadlock(f"{self!r} empty; waited for {expected}") from None
        if msg.micro != tuple(expected):
            raise ChannelOrderError(f"{self!r} delivered {msg.micro}, expected {tuple(expected)}")
        return msg
