"""Stage workers and the driver that runs them over bounded channels.

Two execution modes share the same schedule tables and worker code:

``lockstep``
    A single driver thread advances a global step barrier. In each step every
    stage whose next action has its input available runs it; messages produced
    in a step are delivered at the next one. Time is virtual: a step lasts as
    long as the slowest action in it, taken from the cost model.
``freerun``
    One thread per stage, each running its action list as fast as the channels
    allow, optionally sleeping for a simulated per-pass cost. Time is wall time.

A worker's numerics depend only on its own action order, so both modes produce
bit-identical weights.
"""

import hashlib
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .. import analyzer
from ..optim import OptimizerState, apply_update
from ..prediction import (BACKWARD, FORWARD, PredictionCache, PredictionContext, ScheduleViolation,
                          bellwether_step, predict_weights, spectrain_predict, version_difference)
from ..tensor import SoftmaxXent, as_tensor, softmax, softmax_xent_loss
from .channels import (ACTIVATION, GRADIENT, Channel, ChannelClosed, PipelineError, PipelineMessage,
                       ScheduleDeadlock)
from .schedule import check_schedule, schedule_table

log = logging.getLogger(__name__)

MODES = ("lockstep", "freerun")


@dataclass
class MicroBatch:
    t: int
    j: int
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def size(self):
        return len(self.labels)


def fingerprint(weights):
    h = hashlib.blake2b(digest_size=16)
    for w in weights:
        h.update(np.ascontiguousarray(w).tobytes())
    return h.hexdigest()


class StageWorker:
    """One pipeline stage: its layers, committed weights and optimizer state."""

    def __init__(self, rank, size, layers, schedule, T, optimizer, seed=1, prediction=True,
                 trace=False):
        self.rank, self.size = rank, size
        self.layers = layers
        self.schedule = check_schedule(schedule)
        self.T = int(T)
        self.optimizer = optimizer
        self.prediction = prediction
        self.trace = trace
        self.is_last = rank == size - 1
        if any(isinstance(layer, SoftmaxXent) for layer in layers[:-1]) or (
                self.is_last and not isinstance(layers[-1], SoftmaxXent)):
            raise ValueError("softmax_xent must be the final layer of the last stage")
        self._counts = [layer.n_weights for layer in layers]
        self.weights = [w for layer in layers for w in layer.weights]
        self.opt_state = OptimizerState.create(self.weights, optimizer, seed=[seed, rank])
        if schedule == "spectrain" and self.opt_state.momentum_buffer is None:
            raise ValueError("spectrain extrapolates along a momentum buffer; use momentum_sgd or rmsprop")
        self.lr = optimizer.lr
        self.version = 0
        self.reset_epoch()

    def reset_epoch(self):
        self.cache = PredictionCache(self.T)
        self.stash = {}
        self._accum = None
        self._accum_t = None
        self._accum_n = 0
        self._fwd_version = {}
        self.lineage = {}
        self.updates = 0
        self.losses = []
        self.correct = 0
        self.seen = 0
        self.weight_trace = {}
        self.in_flight = 0
        self.max_in_flight = 0
        self.max_live_cache = 0

    def _split(self, flat):
        out, i = [], 0
        for n in self._counts:
            out.append(flat[i:i + n])
            i += n
        return out

    def _commit(self, flat):
        self.weights = flat
        for layer, w in zip(self.layers, self._split(flat)):
            layer.weights = list(w)

    def resolve_weights(self, t, j, pass_):
        """The weight version micro-batch (t, j) runs ``pass_`` under on this stage."""
        kind = self.schedule
        if kind in ("naive", "gpipe"):
            return self.weights
        if kind == "pipedream":
            if pass_ == FORWARD and j == 1:
                if t in self.stash:
                    raise ScheduleViolation(f"stage {self.rank}: mini-batch {t} stashed twice")
                self.stash[t] = self.weights
            try:
                return self.stash[t]
            except KeyError:
                raise ScheduleViolation(f"stage {self.rank}: no stashed weights for mini-batch {t}") from None
        if kind == "spectrain":
            s = version_difference(PredictionContext(self.size, self.rank, 1, self.lr, pass_))
            predict = lambda: spectrain_predict(  # noqa: E731
                self.weights, s, self.lr, self.opt_state.momentum_buffer)
        else:
            s = 0
            if self.prediction:
                s = version_difference(PredictionContext(self.size, self.rank, self.T, self.lr, pass_))
            predict = lambda: predict_weights(self.weights, s, self.lr, self.opt_state.moments)  # noqa: E731
        return bellwether_step(self.cache, t, j, pass_, predict)

    def _record(self, t, j, pass_, weights):
        if self.trace:
            self.weight_trace.setdefault((t, pass_), []).append((j, fingerprint(weights)))

    def forward(self, t, j, x, labels=None):
        """Run this stage's layers on micro-batch (t, j); returns the activation or None on the last stage."""
        key = (t, j)
        if j == 1:
            self._fwd_version[t] = self.version
        W = self.resolve_weights(t, j, FORWARD)
        self._record(t, j, FORWARD, W)
        for layer, w in zip(self.layers, self._split(W)):
            if isinstance(layer, SoftmaxXent):
                self.losses.append(layer.loss(x, labels, key))
                self.correct += int(np.sum(np.argmax(x, axis=1) == labels))
                self.seen += len(labels)
                x = None
            else:
                x = layer.forward(x, key, w)
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)
        self.max_live_cache = max(self.max_live_cache, max(len(layer.cache) for layer in self.layers))
        return x

    def backward(self, t, j, grad=None):
        """Backpropagate micro-batch (t, j) through this stage; returns the input gradient."""
        key = (t, j)
        if j == 1:
            self.lineage[t] = self.version - self._fwd_version.pop(t)
        W = self.resolve_weights(t, j, BACKWARD)
        self._record(t, j, BACKWARD, W)
        per_layer = []
        g = grad
        for layer, w in reversed(list(zip(self.layers, self._split(W)))):
            g, wg = layer.backward(g, key, w)
            per_layer.append(wg)
        grads = [gw for wg in reversed(per_layer) for gw in wg]
        self.in_flight -= 1
        if self.schedule == "pipedream" and j == self.T:
            del self.stash[t]
        self.accumulate_and_update(grads, t, j)
        return g

    def accumulate_and_update(self, grads, t, j):
        """Add grad/T to the accumulator; on the T-th micro-batch apply the update. Returns True if it fired."""
        if self._accum_t is None:
            self._accum_t = t
            self._accum = [g / self.T for g in grads]
            self._accum_n = 1
        elif self._accum_t != t:
            raise ScheduleViolation(
                f"stage {self.rank}: gradient of mini-batch {t} arrived while {self._accum_t} is accumulating")
        else:
            self._accum = [a + g / self.T for a, g in zip(self._accum, grads)]
            self._accum_n += 1
        if j != self.T:
            return False
        if self._accum_n != self.T:
            raise ScheduleViolation(
                f"stage {self.rank}: update for mini-batch {t} with {self._accum_n}/{self.T} micro-gradients")
        self._commit(apply_update(self.weights, self._accum, self.optimizer, self.opt_state, self.lr))
        self._accum, self._accum_t, self._accum_n = None, None, 0
        self.version += 1
        self.updates += 1
        return True


@dataclass
class EpochRun:
    """Everything observed while running one epoch through the pipeline."""

    schedule: str
    mode: str
    K: int
    T: int
    M: int
    micro_size: int
    timeline: analyzer.Timeline
    wall_s: float
    losses: list
    correct: int
    seen: int
    updates: list
    lineage: list  # per stage: {t: updates between F(t,1) and B(t,1)}
    prediction_stats: list  # per stage: (computations, reads) dicts
    weight_trace: list
    max_live_cache: list
    max_in_flight: list
    channel_depth: dict = field(default_factory=dict)

    @property
    def train_loss(self):
        return float(np.mean(self.losses)) if self.losses else float("nan")

    @property
    def train_accuracy(self):
        return self.correct / self.seen if self.seen else float("nan")


def measure_throughput(run):
    """Steady-phase samples per second of an epoch run."""
    return analyzer.steady_throughput(run.timeline, run.micro_size)


class PipelineEngine:
    """K stage workers plus the channels between them.

    Workers keep their weights and optimizer state across epochs; channels and
    per-epoch bookkeeping are rebuilt for every :meth:`run_epoch`.
    """

    def __init__(self, model, plan, schedule="xpipe", T=1, optimizer=None, seed=1, prediction=True,
                 mode="lockstep", costs=None, capacity=None, timeout=30.0, trace=False):
        from ..optim import OptimizerConfig

        self.schedule = check_schedule(schedule)
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.K = plan.size
        self.T = int(T)
        if schedule == "naive" and self.T != 1:
            raise ValueError("the naive schedule runs whole mini-batches (T=1)")
        self.mode = mode
        self.optimizer = optimizer or OptimizerConfig()
        self.capacity = capacity or 2 * (self.K + self.T)
        self.timeout = timeout
        if costs is not None and costs.size != self.K:
            raise ValueError("cost model size does not match the stage count")
        if mode == "lockstep":
            costs = costs or analyzer.CostModel.uniform(self.K, 1e-3, 2e-3)
            if min(costs.forward + costs.backward) <= 0:
                raise ValueError("lockstep mode needs positive per-pass costs for its virtual clock")
        self.costs = costs
        layers = model.instantiate(seed)
        self.model = model
        self.plan = plan
        self.workers = [
            StageWorker(rank, self.K, [layers[i] for i in r], schedule, self.T, self.optimizer,
                        seed=seed, prediction=prediction, trace=trace)
            for rank, r in enumerate(plan)
        ]

    def set_lr(self, lr):
        for w in self.workers:
            w.lr = lr

    def committed_weights(self):
        return [list(w.weights) for w in self.workers]

    # -- epoch driver -------------------------------------------------------

    def _channels(self):
        act = {k: Channel(ACTIVATION, k, k + 1, self.capacity) for k in range(self.K - 1)}
        grad = {k: Channel(GRADIENT, k + 1, k, self.capacity) for k in range(self.K - 1)}
        return act, grad

    def _execute(self, k, a, mb, act, grad, send, recv_timeout, clock=None, pause=None):
        """Run one action; returns ``clock()`` sampled once the input is in hand and once the pass is done.

        ``pause`` (free-running mode) is called between computing and sending so a
        simulated pass cost delays the output, as a slower device would.
        """
        w = self.workers[k]
        if a.op == "F":
            if k == 0:
                x = mb.inputs
            else:
                x = act[k - 1].recv((a.t, a.j), timeout=recv_timeout).payload
            started = clock() if clock else None
            out = w.forward(a.t, a.j, x, labels=mb.labels if w.is_last else None)
            if pause:
                pause(k, a.op)
            ended = clock() if clock else None
            if k < self.K - 1:
                send(act[k], PipelineMessage(ACTIVATION, a.t, a.j, out))
        else:
            g = None if w.is_last else grad[k].recv((a.t, a.j), timeout=recv_timeout).payload
            started = clock() if clock else None
            dx = w.backward(a.t, a.j, g)
            if pause:
                pause(k, a.op)
            ended = clock() if clock else None
            if k > 0:
                send(grad[k - 1], PipelineMessage(GRADIENT, a.t, a.j, dx))
        return started, ended

    def run_epoch(self, microbatches, lr=None):
        microbatches = list(microbatches)
        if not microbatches or len(microbatches) % self.T:
            raise ValueError(f"need a positive multiple of T={self.T} micro-batches")
        M = len(microbatches) // self.T
        lookup = {}
        for i, mb in enumerate(microbatches):
            expect = (i // self.T + 1, i % self.T + 1)
            if (mb.t, mb.j) != expect:
                raise ValueError(f"micro-batch #{i} is {(mb.t, mb.j)}, expected {expect}")
            lookup[expect] = mb
        sizes = {mb.size for mb in microbatches}
        if len(sizes) != 1:
            raise ValueError("all micro-batches must have the same size")
        if lr is not None:
            self.set_lr(lr)
        for w in self.workers:
            w.reset_epoch()
        table = schedule_table(self.schedule, self.K, self.T, M)
        act, grad = self._channels()
        runner = self._run_lockstep if self.mode == "lockstep" else self._run_freerun
        rows, wall = runner(table, lookup, act, grad)
        timeline = analyzer.Timeline(self.schedule, self.K, self.T, M, rows)
        last = self.workers[-1]
        return EpochRun(
            schedule=self.schedule, mode=self.mode, K=self.K, T=self.T, M=M,
            micro_size=sizes.pop(), timeline=timeline, wall_s=wall,
            losses=list(last.losses), correct=last.correct, seen=last.seen,
            updates=[w.updates for w in self.workers],
            lineage=[dict(w.lineage) for w in self.workers],
            prediction_stats=[(dict(w.cache.computations), dict(w.cache.reads)) for w in self.workers],
            weight_trace=[dict(w.weight_trace) for w in self.workers],
            max_live_cache=[w.max_live_cache for w in self.workers],
            max_in_flight=[w.max_in_flight for w in self.workers],
            channel_depth={repr(c): c.max_depth for c in list(act.values()) + list(grad.values())},
        )

    def _ready(self, k, a, act, grad):
        if a.op == "F":
            if k > 0 and not len(act[k - 1]):
                return False
            return k == self.K - 1 or act[k].has_room()
        if k < self.K - 1 and not len(grad[k]):
            return False
        return k == 0 or grad[k - 1].has_room()

    def _run_lockstep(self, table, lookup, act, grad):
        idx = [0] * self.K
        rows = [[] for _ in range(self.K)]
        clock = 0.0
        while any(idx[k] < len(table[k]) for k in range(self.K)):
            ready = [k for k in range(self.K)
                     if idx[k] < len(table[k]) and self._ready(k, table[k][idx[k]], act, grad)]
            if not ready:
                pending = {k: str(table[k][idx[k]]) for k in range(self.K) if idx[k] < len(table[k])}
                raise ScheduleDeadlock(f"no stage can advance; pending {pending}; channels {act} {grad}")
            outbox = []
            step = 0.0
            for k in ready:
                a = table[k][idx[k]]
                self._execute(k, a, lookup[(a.t, a.j)], act, grad,
                              lambda ch, msg: outbox.append((ch, msg)), recv_timeout=0)
                cost = self.costs.cost(k, a.op)
                rows[k].append(analyzer.Interval(k, clock, clock + cost, a.op, a.t, a.j))
                step = max(step, cost)
                idx[k] += 1
            for ch, msg in outbox:
                ch.send(msg, timeout=0)
            clock += step
        return rows, clock

    def _run_freerun(self, table, lookup, act, grad):
        rows = [[] for _ in range(self.K)]
        errors = []
        channels = list(act.values()) + list(grad.values())
        t0 = time.perf_counter()

        def send(ch, msg):
            ch.send(msg, timeout=self.timeout)

        def pause(k, op):
            time.sleep(self.costs.cost(k, op))

        def loop(k):
            try:
                for a in table[k]:
                    start, end = self._execute(k, a, lookup[(a.t, a.j)], act, grad, send, self.timeout,
                                          clock=lambda: time.perf_counter() - t0,
                                          pause=pause if self.costs is not None else None)
                    rows[k].append(analyzer.Interval(k, start, end, a.op, a.t, a.j))
            except BaseException as exc:  # noqa: BLE001 - re-raised by the driver
                errors.append((k, exc))
                for ch in channels:
                    ch.close()

        threads = [threading.Thread(target=loop, args=(k,), name=f"stage-{k}", daemon=True)
                   for k in range(self.K)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        wall = time.perf_counter() - t0
        if errors:
            primary = [e for e in errors if not isinstance(e[1], ChannelClosed)] or errors
            k, exc = primary[0]
            log.error("stage %d failed: %s", k, exc)
            raise exc
        return rows, wall

    # -- inference ----------------------------------------------------------

    def logits(self, X, batch_size=1024):
        """Forward-only pass under committed weights; returns the pre-softmax scores."""
        X = as_tensor(X)
        out = []
        key = ("eval",)
        for lo in range(0, len(X), batch_size):
            x = X[lo:lo + batch_size]
            for w in self.workers:
                for layer in w.layers:
                    if isinstance(layer, SoftmaxXent):
                        break
                    x = layer.forward(x, key)
                    layer.cache.pop(key, None)
            out.append(x)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def evaluate(self, X, y):
        """(mean cross-entropy, top-1 accuracy) under committed weights."""
        z = self.logits(X)
        loss, _ = softmax_xent_loss(z, np.asarray(y))
        return loss, float(np.mean(np.argmax(z, axis=1) == y))


__all__ = ["MicroBatch", "StageWorker", "PipelineEngine", "EpochRun", "measure_throughput",
           "PipelineError", "ScheduleDeadlock", "ScheduleViolation", "fingerprint"]
