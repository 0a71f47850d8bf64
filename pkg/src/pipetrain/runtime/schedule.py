"""Per-stage action orders for the five pipeline schedules."""

from typing import NamedTuple

SCHEDULES = ("naive", "gpipe", "pipedream", "spectrain", "xpipe")
SYNC_SCHEDULES = ("naive", "gpipe")
ASYNC_SCHEDULES = ("pipedream", "spectrain", "xpipe")


class Action(NamedTuple):
    op: str  # "F" or "B"
    t: int  # mini-batch index, 1-based
    j: int  # micro index within the mini-batch, 1..T

    def __str__(self):
        return f"{self.op}({self.t},{self.j})"


def check_schedule(kind):
    if kind not in SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}; choose from {SCHEDULES}")
    return kind


def micro_id(g, T):
    """Global 1-based micro-batch number -> (t, j)."""
    return (g - 1) // T + 1, (g - 1) % T + 1


def schedule_table(kind, K, T, num_minibatches):
    """Ordered actions for every stage.

    naive/gpipe flush the pipeline per mini-batch: all T forwards of mini-batch t,
    then its T backwards, before t+1 starts. The asynchronous schedules use
    one-forward-one-backward: rank k first runs K-k forwards, then alternates
    backward/forward across mini-batch boundaries, then drains.
    """
    check_schedule(kind)
    K, T, M = int(K), int(T), int(num_minibatches)
    if K < 1 or T < 1 or M < 1:
        raise ValueError("K, T and the number of mini-batches must all be >= 1")
    if kind == "naive" and T != 1:
        raise ValueError("the naive schedule does not split mini-batches (T must be 1)")

    if kind in SYNC_SCHEDULES:
        row = []
        for t in range(1, M + 1):
            row += [Action("F", t, j) for j in range(1, T + 1)]
            row += [Action("B", t, j) for j in range(1, T + 1)]
        return [list(row) for _ in range(K)]

    n = M * T
    table = []
    for rank in range(K):
        warm = min(K - rank, n)
        row = [Action("F", *micro_id(g, T)) for g in range(1, warm + 1)]
        for g in range(1, n + 1):
            row.append(Action("B", *micro_id(g, T)))
            if warm + g <= n:
                row.append(Action("F", *micro_id(warm + g, T)))
        table.append(row)
    return table
