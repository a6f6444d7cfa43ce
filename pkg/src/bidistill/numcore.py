"""Dense numeric kernel: layers with explicit backward passes, loss primitives,
SGD with momentum, a counter-based RNG and a finite-difference gradient checker.

Everything runs in float64.  Arrays are plain ``numpy.ndarray`` objects; rows are
instances (patches or a single pooled vector) and columns are features.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import kernels

EPS = 1e-12


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# random streams


def _substream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Seeded counter-based generator with named, independent substreams.

    Backed by Philox, whose output depends only on (key, counter), so a draw
    sequence is reproducible on every platform numpy supports.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        self.gen = np.random.Generator(np.random.Philox(key=_substream_key(seed, name)))

    def substream(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"gradient shape {self.grad.shape} != value shape {self.value.shape}")


class ParamStore:
    """Ordered name -> Param mapping.  Sub-stores share the Param objects."""

    def __init__(self, items=None):
        self._items: OrderedDict[str, Param] = OrderedDict()
        for name, p in (items or []):
            self.add(name, p)

    def add(self, name: str, p: Param) -> Param:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._items[name] = p
        return p

    def new(self, name: str, value, trainable: bool = True) -> Param:
        return self.add(name, Param(np.array(value, dtype=np.float64), trainable=trainable))

    def __getitem__(self, name: str) -> Param:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self) -> list[str]:
        return list(self._items)

    def subset(self, names) -> "ParamStore":
        return ParamStore((n, self._items[n]) for n in names)

    def prefixed(self, prefix: str) -> "ParamStore":
        return ParamStore((n, p) for n, p in self._items.items() if n.startswith(prefix))

    @staticmethod
    def merge(*stores: "ParamStore") -> "ParamStore":
        out = ParamStore()
        for s in stores:
            for n, p in s.items():
                out.add(n, p)
        return out

    def zero_grad(self):
        for p in self._items.values():
            p.grad.fill(0.0)

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, p in self._items.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._items.items()}

    def load(self, values: dict[str, np.ndarray]):
        for n, p in self._items.items():
            v = values[n]
            if v.shape != p.value.shape:
                raise DimensionError(f"{n}: stored shape {v.shape} != parameter shape {p.value.shape}")
            p.value[...] = v


def glorot(rng: RngStream, n_in: int, n_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


# ---------------------------------------------------------------------------
# layer primitives


def _check_inner(x, w):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {w.shape}")


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_inner(x, w)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
    return x @ w + b


def linear_backward(x, w, gy, gw=None, gb=None):
    """Return dL/dx; accumulate dL/dW into ``gw`` and dL/db into ``gb`` when given."""
    if gw is not None:
        gw += x.T @ gy
    if gb is not None:
        gb += gy.sum(axis=0)
    return gy @ w.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # y is the relu output
    return gy * (y > 0.0)


def softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, gp: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """dL/dlogits given p = softmax(logits / tau) and dL/dp."""
    return p * (gp - (gp * p).sum(axis=-1, keepdims=True)) / tau


class Linear:
    """Fully connected layer whose weights live in a ParamStore."""

    def __init__(self, params: ParamStore, name: str, n_in: int, n_out: int, rng: RngStream | None):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        w = glorot(rng.substream(name), n_in, n_out) if rng is not None else np.zeros((n_in, n_out))
        self.w = params.new(f"{name}.w", w)
        self.b = params.new(f"{name}.b", np.zeros(n_out))

    def __call__(self, x):
        return linear_forward(x, self.w.value, self.b.value)

    def backward(self, x, gy, accumulate: bool = True):
        if accumulate:
            return linear_backward(x, self.w.value, gy, self.w.grad, self.b.grad)
        return linear_backward(x, self.w.value, gy)


class MLP:
    """Stack of Linear layers; ReLU after every layer except optionally the last."""

    def __init__(self, params, name, sizes, rng, final_relu=False):
        self.layers = [Linear(params, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.final_relu = final_relu

    def forward(self, x):
        acts = [x]
        for i, layer in enumerate(self.layers):
            y = layer(acts[-1])
            if i < len(self.layers) - 1 or self.final_relu:
                y = relu(y)
            acts.append(y)
        return acts[-1], acts

    def backward(self, acts, gy, accumulate=True):
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            if i < n - 1 or self.final_relu:
                gy = relu_backward(acts[i + 1], gy)
            gy = self.layers[i].backward(acts[i], gy, accumulate)
        return gy


# ---------------------------------------------------------------------------
# losses


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"length mismatch {np.shape(a)} vs {np.shape(b)}")


def cross_entropy(probs, label: int) -> float:
    p = float(np.ravel(probs)[label])
    return -float(np.log(max(p, EPS)))


def cross_entropy_backward(probs, label: int) -> np.ndarray:
    probs = np.ravel(probs)
    g = np.zeros_like(probs)
    if probs[label] > EPS:
        g[label] = -1.0 / probs[label]
    return g


def mse(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    _check_same(a, b)
    d = a - b
    return float(d @ d) / d.size


def mse_backward(a, b):
    """Gradients of mse w.r.t. a and b."""
    a, b = np.ravel(a), np.ravel(b)
    g = 2.0 * (a - b) / a.size
    return g, -g


def kl_div(p, q) -> float:
    p, q = np.ravel(p), np.ravel(q)
    _check_same(p, q)
    lp = np.log(np.maximum(p, EPS))
    lq = np.log(np.maximum(q, EPS))
    # rounding can leave a -1e-17 residue for p ~= q
    return max(float(p @ (lp - lq)), 0.0)


def kl_div_backward_p(p, q) -> np.ndarray:
    """dKL(p||q)/dp, treating q as constant."""
    p, q = np.ravel(p), np.ravel(q)
    return np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS)) + 1.0


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    lr: float = 1e-4
    momentum: float = 0.3
    weight_decay: float = 1e-3
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")


def sgd_step(params: ParamStore, state: SgdState):
    """v <- mu*v - lr*(g + wd*theta); theta <- theta + v; then zero the gradients."""
    mu, lr, wd = state.momentum, state.lr, state.weight_decay
    for name, p in params.items():
        if p.trainable:
            v = state.velocity.get(name)
            if v is None:
                v = state.velocity[name] = np.zeros_like(p.value)
            elif v.shape != p.value.shape:
                raise DimensionError(f"velocity shape {v.shape} != {p.value.shape} for {name}")
            kernels.sgd_update(p.value, p.grad, v, lr, mu, wd)
        else:
            p.grad.fill(0.0)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failed(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed


def rel_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def fd_noise_floor(loss_value, eps, margin=1e4):
    return margin * np.finfo(np.float64).eps * max(1.0, abs(float(loss_value))) / eps


def grad_check(loss_fn, grad_fn, params: ParamStore, eps: float = 1e-6, tol: float = 1e-4,
               names=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` evaluates the loss at the current parameter values;
    ``grad_fn()`` fills the ``grad`` slots of ``params`` (they are zeroed
    first).  The relative error per entry is |a - n| / max(|a| + |n|, floor).
    The floor sits well above the rounding noise of the difference quotient,
    about u * |L| / eps, so entries whose true gradient is below what central
    differences can resolve do not count as failures.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"finite-difference step must lie in [1e-7, 1e-4], got {eps}")
    base = loss_fn()
    if not np.isfinite(base):
        raise NumericError("non-finite loss at the unperturbed parameters")
    floor = max(1e-8, fd_noise_floor(base, eps))
    params.zero_grad()
    grad_fn()
    analytic = {n: params[n].grad.copy() for n in params}
    errors = {}
    for n in (names or params.names()):
        p = params[n]
        numeric = np.zeros_like(p.value)
        flat, nflat = p.value.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {n}[{i}]")
            nflat[i] = (up - down) / (2 * eps)
        errors[n] = rel_error(analytic[n], numeric, floor)
    params.zero_grad()
    return GradCheckReport(errors, tol)
