"""Dense numeric primitives shared by the aggregators.

Everything here works on float64 numpy arrays. Parameters of a model live in a
single flat vector (:class:`ParamSet`) so the optimizer and the gradient
checker can treat a model as one array while layers read named views.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(value, new_state)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    return _mix64(state), state


class Rng:
    """SplitMix64 generator.

    Scalar draws go through :func:`splitmix64_next`; the ``*_array`` methods
    evaluate the same stream in bulk with uint64 numpy arithmetic, so
    ``rng.u64_array(n)`` equals ``n`` consecutive ``rng.next_u64()`` calls.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        value, self.state = splitmix64_next(self.state)
        return value

    def u64_array(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = steps * np.uint64(GOLDEN_GAMMA) + np.uint64(self.state)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self) -> float:
        # top 53 bits, so the result is strictly below 1.0
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, n: int) -> int:
        """Integer in ``[0, n)`` by modulo reduction."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffle(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]

    def normal_array(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller, two per pair of uniforms."""
        pairs = (n + 1) // 2
        u = self.uniform_array(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()
        return z[:n]


class ParamSet:
    """Named 2-D parameter blocks backed by one contiguous float64 vector."""

    def __init__(self, shapes: dict[str, tuple[int, int]], flat: np.ndarray | None = None):
        self.shapes = {name: (int(r), int(c)) for name, (r, c) in shapes.items()}
        size = sum(r * c for r, c in self.shapes.values())
        if flat is None:
            flat = np.zeros(size, dtype=np.float64)
        elif flat.shape != (size,):
            raise DimensionError(f"flat vector has {flat.size} entries, layout needs {size}")
        self.flat = flat
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, (r, c) in self.shapes.items():
            self._views[name] = self.flat[offset:offset + r * c].reshape(r, c)
            offset += r * c

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        if value is not view:
            view[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def names(self) -> list[str]:
        return list(self.shapes)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._views.items()

    def slice_of(self, name: str) -> slice:
        offset = 0
        for other, (r, c) in self.shapes.items():
            if other == name:
                return slice(offset, offset + r * c)
            offset += r * c
        raise KeyError(name)

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.shapes)

    def copy(self) -> "ParamSet":
        return ParamSet(self.shapes, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        return ParamSet(self.shapes, flat)


def init_uniform(params: ParamSet, rng: Rng, names: Iterable[str] | None = None) -> None:
    """Fill blocks with U[-1/sqrt(fan_in), 1/sqrt(fan_in)].

    Weight ``W`` blocks are (out, in) so fan_in is the column count. A bias
    block ``<layer>.b`` uses the fan_in of its sibling ``<layer>.W``.
    """
    for name in names if names is not None else params.names():
        block = params[name]
        if name.endswith(".b"):
            fan_in = params[name[:-2] + ".W"].shape[1]
        else:
            fan_in = block.shape[1]
        bound = 1.0 / np.sqrt(fan_in)
        u = rng.uniform_array(block.size).reshape(block.shape)
        block[...] = (2.0 * u - 1.0) * bound


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W @ x + b`` for a vector ``x``, or row-wise for a matrix of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape}")
    return x @ W.T + b


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("log_softmax of an empty vector")
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def cross_entropy(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    return float(-log_softmax(logits)[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) = softmax - onehot."""
    loss = cross_entropy(logits, label)
    g = softmax(logits)
    g[label] -= 1.0
    return loss, g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay: str = "decoupled"
    _buf: np.ndarray | None = field(default=None, repr=False, compare=False)

    def scratch(self, shape) -> np.ndarray:
        if self._buf is None or self._buf.shape != shape:
            self._buf = np.empty(shape)
        return self._buf

    @classmethod
    def for_params(cls, n: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.decay not in ("decoupled", "l2"):
            raise ValueError("decay must be 'decoupled' or 'l2'")


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              mask: np.ndarray | None = None) -> np.ndarray:
    """In-place Adam update with decoupled weight decay; returns ``params``.

    ``mask`` (bool, same shape) restricts the update to selected entries;
    masked-out entries keep their value and moments.
    """
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError("adam_step: params, grads and moments must share a shape")
    state.t += 1
    coupled = state.decay == "l2" and state.weight_decay
    if coupled:
        grads = grads + state.weight_decay * params
    if mask is not None:
        grads = np.where(mask, grads, 0.0)
    buf = state.scratch(params.shape)
    np.multiply(grads, 1.0 - state.beta1, out=buf)
    state.m *= state.beta1
    state.m += buf
    np.multiply(grads, grads, out=buf)
    buf *= 1.0 - state.beta2
    state.v *= state.beta2
    state.v += buf
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    # lr * m_hat / (sqrt(v_hat) + eps)
    np.sqrt(state.v, out=buf)
    buf /= np.sqrt(bias2)
    buf += state.eps
    np.divide(state.m, buf, out=buf)
    buf *= state.lr / bias1
    if state.weight_decay and not coupled:
        if mask is None:
            params -= (state.lr * state.weight_decay) * params
        else:
            params -= np.where(mask, (state.lr * state.weight_decay) * params, 0.0)
    if mask is not None:
        buf[~mask] = 0.0
    params -= buf
    return params


def numeric_gradient(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                     params: np.ndarray, eps: float = 1e-5,
                     coords: Iterable[int] | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Central differences at the given coordinates.

    Returns ``(loss, analytic, numeric)`` where ``numeric`` is NaN at
    coordinates that were not probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64)
    loss, analytic = loss_fn(p.copy())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss at the base point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.full(p.size, np.nan)
    for i in range(p.size) if coords is None else coords:
        orig = p[i]
        p[i] = orig + eps
        up, _ = loss_fn(p.copy())
        p[i] = orig - eps
        down, _ = loss_fn(p.copy())
        p[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        numeric[i] = (up - down) / (2.0 * eps)
    return float(loss), analytic, numeric


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(1e-8, |a| + |n|)`` per coordinate (NaN where not probed)."""
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               params: np.ndarray, eps: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(p)`` returns ``(loss, grad)``; the gradient is only used at the
    base point.
    """
    _, analytic, numeric = numeric_gradient(loss_fn, params, eps, coords)
    rel = relative_errors(analytic, numeric)
    probed = ~np.isnan(rel)
    return float(rel[probed].max()) if probed.any() else 0.0
