"""Small fully-connected networks with hand-written backprop and Adam."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, TrainingDivergence

CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu", "identity")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    # derivative expressed through pre-activation z and activation a
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    final_layer_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("an MLP needs input, at least one hidden, and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        for a in (self.hidden_activation, self.output_activation):
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def shapes(self):
        out = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            out += [(a, b), (b,)]
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)


class Mlp:
    """An MLP whose weights live in one flat vector.

    ``layers`` holds ``(W, b)`` views into ``params``; ``W`` has shape
    ``(fan_in, fan_out)`` and inputs are row batches.
    """

    def __init__(self, spec: MlpSpec, params: np.ndarray | None = None):
        self.spec = spec
        self.params = np.zeros(spec.n_params) if params is None else np.array(params, dtype=float)
        if self.params.shape != (spec.n_params,):
            raise ContractViolation("parameter vector does not match the spec")
        self.layers = []
        off = 0
        shapes = spec.shapes
        for ws, bs in zip(shapes[0::2], shapes[1::2]):
            nw, nb = ws[0] * ws[1], bs[0]
            W = self.params[off:off + nw].reshape(ws)
            b = self.params[off + nw:off + nw + nb]
            self.layers.append((W, b))
            off += nw + nb

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        """Fan-in uniform init; the last layer is further scaled by ``final_layer_scale``."""
        net = cls(spec)
        last = len(net.layers) - 1
        for i, (W, b) in enumerate(net.layers):
            bound = 1.0 / np.sqrt(W.shape[0])
            if i == last:
                bound *= spec.final_layer_scale
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = rng.uniform(-bound, bound, b.shape)
        return net

    def copy(self) -> "Mlp":
        return Mlp(self.spec, self.params.copy())

    def load_from(self, other: "Mlp"):
        self.params[...] = other.params

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.n_in:
            raise ContractViolation(f"expected input width {self.spec.n_in}, got {x.shape[-1]}")
        return x

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        x = self._check(x)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = _act(self.spec.output_activation if i == last else self.spec.hidden_activation,
                     h @ W + b)
        return h[0] if squeeze else h

    def forward_cached(self, x):
        x = np.atleast_2d(self._check(x))
        cache = [x]
        h = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            z = h @ W + b
            h = _act(self.spec.output_activation if i == last else self.spec.hidden_activation, z)
            cache.append((z, h))
        return h, cache

    def backward(self, cache, grad_out):
        """Return (flat parameter gradient, input gradient) for upstream ``grad_out``."""
        grad = np.zeros_like(self.params)
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        x = cache[0]
        last = len(self.layers) - 1
        # walk the flat vector backwards
        off = self.params.size
        for i in range(last, -1, -1):
            W, b = self.layers[i]
            z, a = cache[i + 1]
            name = self.spec.output_activation if i == last else self.spec.hidden_activation
            g = g * _act_grad(name, z, a)
            h_in = cache[i][1] if i > 0 else x
            nw, nb = W.size, b.size
            grad[off - nb:off] = g.sum(axis=0)
            grad[off - nb - nw:off - nb] = (h_in.T @ g).ravel()
            off -= nw + nb
            g = g @ W.T
        return grad, g

    def gradient(self, x, grad_out):
        _, cache = self.forward_cached(x)
        return self.backward(cache, grad_out)


@dataclass
class Adam:
    """Adam over a flat parameter vector."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, params: np.ndarray, grad: np.ndarray):
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergence("non-finite gradient")
        if grad.shape != params.shape:
            raise ContractViolation("gradient shape does not match parameters")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def forward(params: np.ndarray, spec: MlpSpec, x):
    return Mlp(spec, params).forward(x)


def gradient(params: np.ndarray, spec: MlpSpec, x, grad_out):
    return Mlp(spec, params).gradient(x, grad_out)


def optimize_step(params: np.ndarray, grad: np.ndarray, opt: Adam) -> np.ndarray:
    """Functional wrapper: returns updated copy of ``params``; ``opt`` advances."""
    out = np.array(params, dtype=float)
    opt.step(out, grad)
    return out


# ---------------------------------------------------------------------------
# Checkpoints: one .npz holding a JSON header plus arrays keyed by name.


def save_checkpoint(path, nets: dict, optimizers: dict | None = None, extra: dict | None = None):
    """Write named networks (and optional Adam states) to ``path`` (.npz).

    The ``header`` entry is JSON: format version, each network's spec, each
    optimizer's scalar state, and caller ``extra`` metadata.
    """
    optimizers = optimizers or {}
    header = {
        "version": CHECKPOINT_VERSION,
        "nets": {k: asdict(n.spec) for k, n in nets.items()},
        "optimizers": {k: o.state() for k, o in optimizers.items()},
        "extra": extra or {},
    }
    arrays = {f"net/{k}": n.params for k, n in nets.items()}
    for k, o in optimizers.items():
        if o.m is not None:
            arrays[f"opt/{k}/m"] = o.m
            arrays[f"opt/{k}/v"] = o.v
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(nets, optimizers, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for k, spec in header["nets"].items():
            nets[k] = Mlp(MlpSpec(**spec), data[f"net/{k}"])
        opts = {}
        for k, st in header["optimizers"].items():
            opt = Adam(**st)
            if f"opt/{k}/m" in data:
                opt.m = data[f"opt/{k}/m"].copy()
                opt.v = data[f"opt/{k}/v"].copy()
            opts[k] = opt
    return nets, opts, header["extra"]
