"""Discrete-event timing model of the pipeline schedules.

``simulate`` lays out every stage's action list on a time axis, starting each
action as early as its stage and its data dependency allow. Utilization, weight
version lineage and steady-phase throughput are all read off the resulting
:class:`Timeline`; the runtime emits the same structure from its own event log so
both sides are measured identically.
"""

import csv
import io
from dataclasses import dataclass, field

from .runtime.schedule import ASYNC_SCHEDULES, schedule_table


@dataclass
class CostModel:
    forward: list
    backward: list
    transfer: list = field(default_factory=list)

    def __post_init__(self):
        K = len(self.forward)
        if len(self.backward) != K:
            raise ValueError("need one backward cost per stage")
        if not self.transfer:
            self.transfer = [0.0] * max(K - 1, 0)
        if len(self.transfer) != max(K - 1, 0):
            raise ValueError("need one transfer cost per edge")
        if min(self.forward + self.backward + self.transfer, default=0.0) < 0:
            raise ValueError("costs must be >= 0")

    @classmethod
    def uniform(cls, K, forward=1.0, backward=2.0, transfer=0.0):
        """Equal costs on every stage; backward defaults to twice the forward."""
        return cls([float(forward)] * K, [float(backward)] * K, [float(transfer)] * (K - 1))

    @property
    def size(self):
        return len(self.forward)

    def cost(self, rank, op):
        return self.forward[rank] if op == "F" else self.backward[rank]

    def scaled(self, factor):
        return CostModel([c * factor for c in self.forward], [c * factor for c in self.backward],
                         [c * factor for c in self.transfer])


@dataclass(frozen=True)
class Interval:
    stage: int
    start: float
    end: float
    op: str
    t: int
    j: int


@dataclass
class Timeline:
    kind: str
    K: int
    T: int
    M: int
    stages: list  # per-stage list of Interval, in execution order

    def __post_init__(self):
        for row in self.stages:
            for a, b in zip(row, row[1:]):
                if b.start < a.end:
                    raise ValueError(f"overlapping intervals on stage {a.stage}: {a} / {b}")

    @property
    def span(self):
        starts = [row[0].start for row in self.stages if row]
        ends = [row[-1].end for row in self.stages if row]
        if not ends:
            raise ValueError("empty timeline")
        return min(starts), max(ends)

    def find(self, stage, op, t, j):
        for iv in self.stages[stage]:
            if iv.op == op and iv.t == t and iv.j == j:
                return iv
        raise KeyError((stage, op, t, j))

    def update_times(self, stage):
        """End times of the backward passes that trigger weight updates on ``stage``."""
        return [iv.end for iv in self.stages[stage] if iv.op == "B" and iv.j == self.T]

    def to_csv(self, fh=None):
        own = fh is None
        fh = io.StringIO() if own else fh
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "start", "end", "action", "t", "j"])
        for row in self.stages:
            for iv in row:
                w.writerow([iv.stage, repr(iv.start), repr(iv.end), iv.op, iv.t, iv.j])
        return fh.getvalue() if own else None

    def gantt(self, resolution=None, width=100):
        """Text rendering: digits are forwards, letters backwards, '.' is idle.

        Cells are labelled by the global micro-batch number (forward: last digit;
        backward: a=1, b=2, ... wrapping after z).
        """
        t0, t1 = self.span
        if resolution is None:
            resolution = max((t1 - t0) / width, 1e-12)
        n = max(1, int(round((t1 - t0) / resolution)))
        lines = []
        for k, row in enumerate(self.stages):
            cells = ["."] * n
            for iv in row:
                g = (iv.t - 1) * self.T + iv.j
                ch = str(g % 10) if iv.op == "F" else chr(ord("a") + (g - 1) % 26)
                lo = int(round((iv.start - t0) / resolution))
                hi = max(lo + 1, int(round((iv.end - t0) / resolution)))
                for c in range(lo, min(hi, n)):
                    cells[c] = ch
            lines.append(f"S{k} |{''.join(cells)}|")
        return "\n".join(lines)


def simulate(kind, K, T, M, costs=None, require_steady=True):
    """Earliest-start timeline for ``M`` mini-batches of ``T`` micro-batches on ``K`` stages."""
    if require_steady and M < 2 * K:
        raise ValueError(f"need at least 2K = {2 * K} mini-batches, got {M}")
    costs = costs or CostModel.uniform(K)
    if costs.size != K:
        raise ValueError("cost model size does not match K")
    table = schedule_table(kind, K, T, M)
    idx = [0] * K
    free = [0.0] * K
    done = {}
    rows = [[] for _ in range(K)]
    remaining = sum(len(r) for r in table)
    while remaining:
        progressed = False
        for k in range(K):
            while idx[k] < len(table[k]):
                a = table[k][idx[k]]
                if a.op == "F":
                    dep = ("F", k - 1, a.t, a.j) if k > 0 else None
                    link = costs.transfer[k - 1] if k > 0 else 0.0
                else:
                    dep = ("B", k + 1, a.t, a.j) if k < K - 1 else None
                    link = costs.transfer[k] if k < K - 1 else 0.0
                if dep is not None and dep not in done:
                    break
                ready = done[dep] + link if dep is not None else 0.0
                start = max(free[k], ready)
                end = start + costs.cost(k, a.op)
                rows[k].append(Interval(k, start, end, a.op, a.t, a.j))
                done[(a.op, k, a.t, a.j)] = end
                free[k] = end
                idx[k] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            stuck = [str(table[k][idx[k]]) for k in range(K) if idx[k] < len(table[k])]
            raise RuntimeError(f"dependency cycle in {kind} table; blocked at {stuck}")
    return Timeline(kind, K, T, M, rows)


def first_update_complete(timeline):
    """Earliest time by which every stage has applied at least one weight update."""
    return max(timeline.update_times(k)[0] for k in range(timeline.K))


def steady_window(timeline):
    """Interval over which every stage is past warmup and not yet draining.

    Starts once every stage has updated once; ends when stage 0 starts the
    first forward of the final mini-batch. Falls back to the whole span when the
    run is too short to have such an interval (e.g. K=1 with two mini-batches).
    """
    start = first_update_complete(timeline)
    end = timeline.find(0, "F", timeline.M, 1).start
    if end <= start:
        return timeline.span
    return start, end


def _busy(row, lo, hi):
    return sum(max(0.0, min(iv.end, hi) - max(iv.start, lo)) for iv in row)


def utilization(timeline, steady_only=False):
    """Busy fraction per stage over the whole span or the steady window."""
    if not any(timeline.stages):
        raise ValueError("empty timeline")
    lo, hi = steady_window(timeline) if steady_only else timeline.span
    if hi <= lo:
        raise ValueError("timeline has zero length")
    return [_busy(row, lo, hi) / (hi - lo) for row in timeline.stages]


def bubble_fraction(timeline, steady_only=False):
    u = utilization(timeline, steady_only)
    return 1.0 - sum(u) / len(u)


def version_lineage(timeline):
    """Weight updates applied on each stage between a mini-batch's first forward and first backward.

    Returns ``{(t, stage): count}``. Updates fire at the end of B(t, T) on each
    stage; the count is taken in stage execution order so it does not depend on
    timing ties.
    """
    out = {}
    for k, row in enumerate(timeline.stages):
        applied = 0
        at_forward = {}
        for iv in row:
            if iv.op == "F" and iv.j == 1:
                at_forward[iv.t] = applied
            elif iv.op == "B":
                if iv.j == 1:
                    out[(iv.t, k)] = applied - at_forward[iv.t]
                if iv.j == timeline.T:
                    applied += 1
    return out


def steady_throughput(timeline, micro_size):
    """Samples per time unit from the first moment every stage has updated once.

    Counts micro-batches whose backward on stage 0 (the end of their round trip)
    finishes after that moment, through the end of the run. For the
    synchronous schedules this is the whole run minus the first mini-batch.
    """
    if timeline.M < 2 * timeline.K:
        raise ValueError(f"run too short for a steady phase: {timeline.M} mini-batches, K={timeline.K}")
    start = first_update_complete(timeline)
    _, end = timeline.span
    done = sum(1 for iv in timeline.stages[0] if iv.op == "B" and iv.end > start)
    if end <= start:
        raise ValueError("run too short for a steady phase")
    return done * micro_size / (end - start)


def analyze(kind, K, T, M=50, costs=None, micro_size=1):
    """Summary used by the CLI's analyze mode."""
    tl = simulate(kind, K, T, M, costs)
    steady = utilization(tl, steady_only=True)
    lineage = version_lineage(tl)
    return {
        "schedule": kind, "K": K, "T": T, "M": M,
        "steady_utilization": sum(steady) / K,
        "stage_utilization": steady,
        "overall_utilization": sum(utilization(tl)) / K,
        "throughput": steady_throughput(tl, micro_size),
        "max_staleness_stage0": max(v for (t, k), v in lineage.items() if k == 0),
        "asynchronous": kind in ASYNC_SCHEDULES,
        "timeline": tl,
    }
