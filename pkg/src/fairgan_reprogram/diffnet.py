"""Small dense networks with explicit forward/backward passes.

Everything runs in float64. Networks are plain data (`MlpConfig`, `MlpParams`)
and every operation is a function over them, so frozen models can be shared
between training runs without copying.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "leaky_relu", "tanh")
LEAKY_SLOPE = 0.2
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax", "grouped")
GROUP_KINDS = ("softmax", "sigmoid", "identity")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of a dense network.

    ``groups`` is only read for the ``softmax`` and ``grouped`` output
    activations. For ``softmax`` it lists ``(start, stop)`` ranges that each
    get their own softmax (empty means one softmax over the whole output).
    For ``grouped`` each entry is ``(start, stop, kind)`` with kind one of
    softmax/sigmoid/identity. Either way the groups must tile the output.
    """

    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    groups: tuple[tuple, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"need >= 2 positive layer widths, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        if self.output_activation in ("softmax", "grouped"):
            _check_tiling(self.output_groups(), widths[-1])

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def output_groups(self) -> list[tuple[int, int, str]]:
        """Output ranges with their activation kind, tiling the output."""
        out = self.output_width
        if self.output_activation in ("identity", "sigmoid"):
            return [(0, out, self.output_activation)]
        if self.output_activation == "softmax":
            if not self.groups:
                return [(0, out, "softmax")]
            return [(int(g[0]), int(g[1]), "softmax") for g in self.groups]
        return [(int(g[0]), int(g[1]), str(g[2])) for g in self.groups]

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "groups": [list(g) for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        return cls(
            layer_widths=tuple(d["layer_widths"]),
            hidden_activation=d.get("hidden_activation", "relu"),
            output_activation=d.get("output_activation", "identity"),
            groups=tuple(tuple(g) for g in d.get("groups", ())),
        )


def _check_tiling(groups, width):
    pos = 0
    for start, stop, kind in groups:
        if kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {kind!r}")
        if start != pos or stop <= start:
            raise ValueError(f"output groups must tile [0, {width}), got {groups}")
        pos = stop
    if pos != width:
        raise ValueError(f"output groups must tile [0, {width}), got {groups}")


@dataclass
class MlpParams:
    """Weights (fan_in x fan_out) and biases per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Weights and biases interleaved per layer: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "MlpParams":
        return MlpParams([fn(w) for w in self.weights], [fn(b) for b in self.biases])

    def combine(self, other: "MlpParams", fn) -> "MlpParams":
        return MlpParams([fn(a, b) for a, b in zip(self.weights, other.weights)],
                         [fn(a, b) for a, b in zip(self.biases, other.biases)])

    def __add__(self, other: "MlpParams") -> "MlpParams":
        return self.combine(other, np.add)

    def scale(self, c: float) -> "MlpParams":
        return self.map(lambda a: a * c)

    def n_values(self) -> int:
        return sum(a.size for a in self.arrays())

    def digest(self) -> str:
        """SHA-256 over shapes and raw float64 bytes."""
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(repr(a.shape).encode())
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


# Gradients share the parameter layout.
Gradients = MlpParams


def init_params(config: MlpConfig, seed: int | np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_widths[:-1], config.layer_widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def check_params(config: MlpConfig, params: MlpParams) -> None:
    widths = config.layer_widths
    if len(params.weights) != len(widths) - 1 or len(params.biases) != len(widths) - 1:
        raise ValueError("parameter layer count does not match config")
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
            raise ValueError(f"layer {i}: shapes {w.shape}/{b.shape} do not match config")


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _apply_output(config: MlpConfig, logits: np.ndarray) -> np.ndarray:
    act = config.output_activation
    if act == "identity":
        return logits
    if act == "sigmoid":
        return _sigmoid(logits)
    out = np.empty_like(logits)
    for start, stop, kind in config.output_groups():
        block = logits[:, start:stop]
        if kind == "softmax":
            out[:, start:stop] = _softmax(block)
        elif kind == "sigmoid":
            out[:, start:stop] = _sigmoid(block)
        else:
            out[:, start:stop] = block
    return out


def _output_backward(config: MlpConfig, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the output activation."""
    act = config.output_activation
    if act == "identity":
        return grad
    if act == "sigmoid":
        return grad * out * (1.0 - out)
    res = np.empty_like(grad)
    for start, stop, kind in config.output_groups():
        p = out[:, start:stop]
        g = grad[:, start:stop]
        if kind == "softmax":
            res[:, start:stop] = p * (g - (p * g).sum(axis=1, keepdims=True))
        elif kind == "sigmoid":
            res[:, start:stop] = g * p * (1.0 - p)
        else:
            res[:, start:stop] = g
    return res


def forward(config: MlpConfig, params: MlpParams, batch: np.ndarray) -> list[np.ndarray]:
    """Return the activations of every layer; the last entry is the network output.

    ``acts[0]`` is the input batch itself.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_width:
        raise ValueError(f"batch shape {x.shape} does not match input width {config.input_width}")
    acts = [x]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = x @ w + b
        if i < n_layers - 1:
            x = _hidden(config.hidden_activation, z)
        else:
            x = _apply_output(config, z)
        acts.append(x)
    return acts


def _hidden(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    return np.tanh(z)


def predict(config: MlpConfig, params: MlpParams, batch: np.ndarray) -> np.ndarray:
    return forward(config, params, batch)[-1]


def backward(
    config: MlpConfig,
    params: MlpParams,
    acts: Sequence[np.ndarray],
    upstream_grad: np.ndarray,
) -> tuple[Gradients, np.ndarray]:
    """Reverse-mode pass for a scalar loss whose output gradient is ``upstream_grad``.

    Returns parameter gradients and the gradient with respect to the input batch.
    """
    out = acts[-1]
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != out.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
    n_layers = len(params.weights)
    dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    g = _output_backward(config, out, g)
    for i in range(n_layers - 1, -1, -1):
        a_in = acts[i]
        dws[i] = a_in.T @ g
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0:
            if config.hidden_activation == "relu":
                g = g * (a_in > 0)
            elif config.hidden_activation == "leaky_relu":
                g = g * np.where(a_in > 0, 1.0, LEAKY_SLOPE)
            else:
                g = g * (1.0 - a_in * a_in)
    return MlpParams(dws, dbs), g


# --------------------------------------------------------------------- losses


def cross_entropy(probabilities: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``targets``.

    The returned gradient is with respect to the probabilities; ``backward``
    carries it through the softmax. Target probabilities below 1e-12 are
    clamped.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    n = p.shape[0]
    rows = np.arange(n)
    pt = np.maximum(p[rows, t], PROB_CLAMP)
    loss = float(-np.log(pt).mean())
    grad = np.zeros_like(p)
    grad[rows, t] = -1.0 / (pt * n)
    return loss, grad


def cross_entropy_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Same loss as `cross_entropy`, with the gradient taken w.r.t. pre-softmax logits."""
    t = np.asarray(targets, dtype=np.int64)
    p = _softmax(np.asarray(logits, dtype=np.float64))
    n = p.shape[0]
    rows = np.arange(n)
    loss = float(-np.log(np.maximum(p[rows, t], PROB_CLAMP)).mean())
    grad = p.copy()
    grad[rows, t] -= 1.0
    return loss, grad / n


def bce(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy. ``labels`` may be soft targets in [0, 1]."""
    s = np.clip(np.asarray(scores, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), s.shape)
    loss = float(-(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)).mean())
    grad = (-(y / s) + (1.0 - y) / (1.0 - s)) / s.size
    return loss, grad


def l2_penalty(params: MlpParams, coefficient: float) -> tuple[float, Gradients]:
    """``coefficient * sum(w**2)`` over weight matrices; biases are not penalised."""
    if coefficient < 0:
        raise ValueError("l2 coefficient must be nonnegative")
    loss = coefficient * sum(float(np.sum(w * w)) for w in params.weights)
    grads = MlpParams([2.0 * coefficient * w for w in params.weights],
                      [np.zeros_like(b) for b in params.biases])
    return loss, grads


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    m: MlpParams
    v: MlpParams
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: Gradients, state: OptimizerState) -> tuple[MlpParams, OptimizerState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.combine(grads, lambda m_, g: b1 * m_ + (1.0 - b1) * g)
    v = state.v.combine(grads, lambda v_, g: b2 * v_ + (1.0 - b2) * (g * g))
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    step = params.combine(
        m.combine(v, lambda m_, v_: (m_ / bc1) / (np.sqrt(v_ / bc2) + state.eps)),
        lambda p, u: p - state.lr * u,
    )
    return step, OptimizerState(m, v, t, state.lr, b1, b2, state.eps)


class Adam:
    """Mutable convenience wrapper around `adam_step` for training loops."""

    def __init__(self, params: MlpParams, lr: float = 1e-3, **kw):
        self.params = params
        self.state = adam_init(params, lr, **kw)

    def step(self, grads: Gradients) -> MlpParams:
        self.params, self.state = adam_step(self.params, grads, self.state)
        return self.params


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: tuple = field(default=())


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    params: MlpParams,
    loss_fn: Callable[[MlpParams], tuple[float, Gradients]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradients with central finite differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. With ``max_entries`` set,
    a seeded random subset of parameter entries is checked.
    """
    _, analytic = loss_fn(params)
    arrays = params.arrays()
    grads = analytic.arrays()
    index = [(k, j) for k, a in enumerate(arrays) for j in range(a.size)]
    if max_entries is not None and max_entries < len(index):
        pick = np.random.default_rng(seed).choice(len(index), size=max_entries, replace=False)
        index = [index[i] for i in sorted(pick)]
    worst, worst_at = 0.0, ()
    for k, j in index:
        probe = params.copy()
        flat = probe.arrays()[k].reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        lp, _ = loss_fn(probe)
        flat[j] = orig - step
        lm, _ = loss_fn(probe)
        numeric = (lp - lm) / (2.0 * step)
        err = float(relative_error(grads[k].reshape(-1)[j], numeric))
        if err > worst:
            worst, worst_at = err, (k, j, float(grads[k].reshape(-1)[j]), numeric)
    return GradCheckReport(worst, worst < tolerance, len(index), worst_at)


def numeric_input_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a matrix."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        lp = fn(x)
        flat[j] = orig - step
        lm = fn(x)
        flat[j] = orig
        g[j] = (lp - lm) / (2.0 * step)
    return out


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "fairgan-reprogram/mlp/1"


def params_to_dict(config: MlpConfig, params: MlpParams) -> dict:
    layers = []
    for w, b in zip(params.weights, params.biases):
        layers.append({
            "weight": {"shape": list(w.shape), "values": w.reshape(-1).tolist()},
            "bias": {"shape": list(b.shape), "values": b.reshape(-1).tolist()},
        })
    return {"format": CHECKPOINT_FORMAT, "config": config.to_dict(), "layers": layers}


def params_from_dict(d: dict) -> tuple[MlpConfig, MlpParams]:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
    config = MlpConfig.from_dict(d["config"])
    weights, biases = [], []
    for layer in d["layers"]:
        w, b = layer["weight"], layer["bias"]
        weights.append(np.asarray(w["values"], dtype=np.float64).reshape(w["shape"]))
        biases.append(np.asarray(b["values"], dtype=np.float64).reshape(b["shape"]))
    params = MlpParams(weights, biases)
    check_params(config, params)
    return config, params
