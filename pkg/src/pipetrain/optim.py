"""Per-stage optimizers plus the running moment estimates used for prediction.

Every update, whatever the training optimizer, also advances a
:class:`MomentState`: exponential averages of the gradient and of its square.
The prediction step reads its bias-corrected ratio through :func:`delta_w`.
The bias corrections divide by the constants ``1 - gamma`` and ``1 - lambda``
rather than Adam's step-dependent ``1 - beta**t``, and epsilon sits inside the
square root.
"""

from dataclasses import dataclass, field

import numpy as np

OPTIMIZER_KINDS = ("momentum_sgd", "rmsprop", "adam")
_ALIASES = {"momentum": "momentum_sgd", "sgd": "momentum_sgd"}


@dataclass
class OptimizerConfig:
    kind: str = "momentum_sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    alpha: float = 0.99  # rmsprop square-average decay

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind, self.kind)
        self.betas = tuple(float(b) for b in self.betas)
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZER_KINDS}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class MomentState:
    v: list
    m: list
    gamma: float = 0.9
    lam: float = 0.999
    epsilon: float = 1e-8
    updates: int = 0

    def copy(self):
        return MomentState([a.copy() for a in self.v], [a.copy() for a in self.m],
                           self.gamma, self.lam, self.epsilon, self.updates)


def init_moments(weights, seed, gamma=0.9, lam=0.999, epsilon=1e-8, scale=1e-4):
    """Moments with every element drawn independently from ``scale * U[0, 1)``."""
    rng = np.random.default_rng(seed)
    v = [scale * rng.random(w.shape) for w in weights]
    m = [scale * rng.random(w.shape) for w in weights]
    return MomentState(v, m, gamma, lam, epsilon)


def _check_shapes(tensors, grads):
    if len(tensors) != len(grads) or any(a.shape != g.shape for a, g in zip(tensors, grads)):
        raise ValueError("gradient shapes do not match the moment state")


def update_moments(state, grads):
    """Return a new state with v <- gamma*v + (1-gamma)*g and m <- lam*m + (1-lam)*g*g."""
    _check_shapes(state.v, grads)
    g1, l1 = 1.0 - state.gamma, 1.0 - state.lam
    v = [state.gamma * v + g1 * g for v, g in zip(state.v, grads)]
    m = [state.lam * m + l1 * (g * g) for m, g in zip(state.m, grads)]
    return MomentState(v, m, state.gamma, state.lam, state.epsilon, state.updates + 1)


def delta_w(state):
    out = []
    for v, m in zip(state.v, state.m):
        v_hat = v / (1.0 - state.gamma)
        m_hat = m / (1.0 - state.lam)
        out.append(v_hat / np.sqrt(m_hat + state.epsilon))
    return out


@dataclass
class OptimizerState:
    """Buffers owned by one stage: the optimizer's own plus the moment state."""

    moments: MomentState
    buffers: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, weights, config, seed, **moment_kwargs):
        state = cls(init_moments(weights, seed, **moment_kwargs))
        zeros = lambda: [np.zeros_like(w) for w in weights]  # noqa: E731
        if config.kind == "momentum_sgd":
            state.buffers["momentum_buffer"] = zeros()
        elif config.kind == "rmsprop":
            state.buffers["square_avg"] = zeros()
            state.buffers["momentum_buffer"] = zeros()
        else:
            state.buffers["exp_avg"] = zeros()
            state.buffers["exp_avg_sq"] = zeros()
        return state

    @property
    def momentum_buffer(self):
        return self.buffers.get("momentum_buffer")


def apply_update(weights, grads, config, state, lr=None):
    """One optimizer step on a stage; returns new weight arrays.

    ``grads`` is the mini-batch mean gradient. Weight decay is folded into the
    gradient before both the optimizer rule and the moment update. ``state`` is
    updated in place; the input weight arrays are left untouched so older
    references (stashes, caches) stay valid.
    """
    lr = config.lr if lr is None else lr
    if len(grads) != len(weights):
        raise ValueError("one gradient per weight tensor is required")
    if config.weight_decay:
        grads = [g + config.weight_decay * w for g, w in zip(grads, weights)]
    state.step += 1
    state.moments = update_moments(state.moments, grads)

    if config.kind == "momentum_sgd":
        bufs = state.buffers["momentum_buffer"]
        new = []
        for i, (w, g) in enumerate(zip(weights, grads)):
            bufs[i] = config.momentum * bufs[i] + g
            new.append(w - lr * bufs[i])
        return new

    if config.kind == "rmsprop":
        sq, bufs = state.buffers["square_avg"], state.buffers["momentum_buffer"]
        new = []
        for i, (w, g) in enumerate(zip(weights, grads)):
            sq[i] = config.alpha * sq[i] + (1.0 - config.alpha) * g * g
            step = g / (np.sqrt(sq[i]) + config.eps)
            if config.momentum:
                bufs[i] = config.momentum * bufs[i] + step
                step = bufs[i]
            new.append(w - lr * step)
        return new

    b1, b2 = config.betas
    m1, m2 = state.buffers["exp_avg"], state.buffers["exp_avg_sq"]
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    new = []
    for i, (w, g) in enumerate(zip(weights, grads)):
        m1[i] = b1 * m1[i] + (1.0 - b1) * g
        m2[i] = b2 * m2[i] + (1.0 - b2) * g * g
        new.append(w - (lr / bc1) * m1[i] / (np.sqrt(m2[i] / bc2) + config.eps))
    return new
