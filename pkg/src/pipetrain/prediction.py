"""Weight prediction for asynchronous pipeline schedules.

For each mini-batch and pass, the first micro-batch to arrive on a stage (the
bellwether, micro index 1) computes how many updates the weights will undergo
before the round trip completes, extrapolates the weights that far along the
moment-based update direction, and leaves the result in a per-stage cache. The
remaining T-1 micro-batches of that mini-batch read the cached copy, so the whole
mini-batch runs one pass under one weight version.
"""

from dataclasses import dataclass
from fractions import Fraction
from math import floor

from .optim import delta_w

FORWARD = "forward"
BACKWARD = "backward"
PASSES = (FORWARD, BACKWARD)


class ScheduleViolation(RuntimeError):
    """A stage saw micro-batches in an order its schedule forbids."""


@dataclass(frozen=True)
class PredictionContext:
    size: int
    rank: int
    T: int
    lr: float
    pass_: str = FORWARD

    def __post_init__(self):
        if not 0 <= self.rank < self.size:
            raise ValueError(f"rank {self.rank} outside [0, {self.size})")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.pass_ not in PASSES:
            raise ValueError(f"pass must be one of {PASSES}")


def round_half_away(x):
    """Round a Fraction (or number) to the nearest integer, ties away from zero."""
    x = Fraction(x)
    r = floor(abs(x) + Fraction(1, 2))
    return r if x >= 0 else -r


def version_difference(ctx):
    """Updates expected between this pass and the end of the mini-batch's round trip.

    Forward: round((size + T - rank/2 - 2) / T), with rank/2 kept fractional.
    Backward: round((T + floor(rank/2) - 1) / T). Evaluated exactly in rationals;
    negative results clamp to 0.
    """
    if ctx.pass_ == FORWARD:
        num = ctx.size + ctx.T - Fraction(ctx.rank, 2) - 2
    else:
        num = ctx.T + ctx.rank // 2 - 1
    return max(0, round_half_away(Fraction(num) / ctx.T))


def predict_weights(weights, s, lr, moments):
    """W_hat = W - s * lr * dW, where dW comes from the moment state."""
    if s < 0:
        raise ValueError("version difference must be >= 0")
    if s == 0:
        return list(weights)
    return [w - (s * lr) * d for w, d in zip(weights, delta_w(moments))]


def spectrain_predict(weights, s, lr, momentum_buffer):
    """W_hat = W - s * lr * (smoothed gradient), the momentum-SGD extrapolation."""
    if s < 0:
        raise ValueError("version difference must be >= 0")
    if s == 0 or momentum_buffer is None:
        return list(weights)
    return [w - (s * lr) * b for w, b in zip(weights, momentum_buffer)]


class PredictionCache:
    """Predicted weights per (mini-batch, pass), written once and read T-1 times."""

    def __init__(self, T):
        self.T = int(T)
        self._entries = {}
        self.computations = {}  # (t, pass) -> number of predictions made
        self.reads = {}  # (t, pass) -> number of cache hits

    def __len__(self):
        return len(self._entries)

    def write(self, t, pass_, weights):
        key = (t, pass_)
        if key in self.computations:
            raise ScheduleViolation(f"prediction for mini-batch {t} ({pass_}) computed twice")
        self.computations[key] = 1
        self.reads[key] = 0
        if self.T > 1:
            self._entries[key] = weights
        return weights

    def read(self, t, pass_):
        key = (t, pass_)
        try:
            weights = self._entries[key]
        except KeyError:
            raise ScheduleViolation(
                f"no cached prediction for mini-batch {t} ({pass_}); bellwether has not run") from None
        self.reads[key] += 1
        if self.reads[key] == self.T - 1:
            del self._entries[key]
        return weights


def bellwether_step(cache, t, j, pass_, predict):
    """Weights micro-batch (t, j) should use for ``pass_``.

    The bellwether (j == 1) calls ``predict()`` and stores the result; every
    other micro-batch of mini-batch t reads it back.
    """
    if j == 1:
        return cache.write(t, pass_, predict())
    return cache.read(t, pass_)
