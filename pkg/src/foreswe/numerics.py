"""Dense linear algebra and a small reverse-mode differentiation engine.

Everything runs in float64 on numpy arrays. :class:`Tensor` records the
operations applied to it so that a scalar objective can be differentiated
with respect to every leaf created with ``requires_grad=True``. Only the
operations the encoder and the GP objectives need are provided.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri

from .errors import NotPositiveDefinite, UnknownParameter

JITTER_START = 1e-8
JITTER_STOP = 1e-2


# ---------------------------------------------------------------------------
# plain numpy helpers


def softmax_rows(m):
    """Row-wise softmax of a 2-D array, shifted by the row max."""
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def jittered_cholesky(a):
    """Lower Cholesky factor of ``a``, adding diagonal jitter on failure.

    Jitter starts at ``1e-8 * mean(diag(a))`` and grows tenfold up to
    ``1e-2 * mean(diag(a))``.

    Returns
    -------
    L : ndarray
        Lower-triangular factor of ``a + jitter * I``.
    jitter : float
        The jitter that was finally added (0.0 if none was needed).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if not scale > 0.0:
        scale = 1.0
    eye = np.eye(a.shape[0])
    jitter = JITTER_START * scale
    while jitter <= JITTER_STOP * scale * (1 + 1e-12):
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefinite(
        f"Cholesky failed with jitter up to {JITTER_STOP * scale:.3g}"
    )


def cholesky_solve(a, b):
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    Returns the solution and ``log|a|`` (of the jittered matrix, if jitter
    was required).
    """
    L, _ = jittered_cholesky(a)
    b = np.asarray(b, dtype=np.float64)
    y = _solve_tri(L, b, lower=True)
    x = _solve_tri(L, y, lower=True, trans="T")
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    return x, log_det


# ---------------------------------------------------------------------------
# reverse-mode engine


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(value)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __array_priority__ = 100
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def item(self):
        return float(self.value)

    # -- graph traversal --------------------------------------------------

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.value) if seed is None else np.asarray(seed)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        return _node(
            a + b,
            (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        return _node(
            a - b,
            (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        return _node(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        out = a / b
        return _node(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return _node(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return _node(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul needs operands with at least 2 dimensions")

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return _node(a @ b, (self, other), backward)

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    # -- shape ------------------------------------------------------------

    def __getitem__(self, idx):
        shape = self.value.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return _node(self.value[idx], (self,), backward)

    def reshape(self, *shape):
        orig = self.value.shape
        return _node(self.value.reshape(*shape), (self,), lambda g: (g.reshape(orig),))

    def swapaxes(self, i, j):
        return _node(
            np.swapaxes(self.value, i, j), (self,), lambda g: (np.swapaxes(g, i, j),)
        )

    def sum(self, axis=None, keepdims=False):
        shape = self.value.shape

        def backward(g):
            if axis is not None and not keepdims:
                axes = (axis,) if np.isscalar(axis) else axis
                axes = sorted(a % len(shape) for a in axes)
                for a in axes:
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, shape),)

        return _node(self.value.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        total = self.sum(axis=axis, keepdims=keepdims)
        return total * (total.value.size / self.value.size)


# ---------------------------------------------------------------------------
# functions on tensors


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    x = _as_tensor(x)
    a = x.value
    return _node(np.log(a), (x,), lambda g: (g / a,))


def sqrt(x):
    x = _as_tensor(x)
    out = np.sqrt(x.value)
    return _node(out, (x,), lambda g: (0.5 * g / out,))


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max-subtraction."""
    x = _as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def concatenate(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward)


def einsum(subscripts, *operands):
    """``np.einsum`` with a gradient rule.

    Explicit ``->`` output is required and no operand may repeat an index.
    """
    operands = [_as_tensor(t) for t in operands]
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError("subscript count does not match operand count")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand subscripts {s!r}")
    vals = [t.value for t in operands]
    out = np.einsum(subscripts, *vals, optimize=len(vals) > 2)

    def backward(g):
        grads = []
        for i, (s, t) in enumerate(zip(in_subs, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[j], vals[j]) for j in range(len(vals)) if j != i]
            avail = set(out_subs).union(*[set(o) for o, _ in others])
            target = "".join(c for c in s if c in avail)
            expr = ",".join([out_subs] + [o for o, _ in others]) + "->" + target
            gi = np.einsum(expr, g, *[v for _, v in others], optimize=len(others) > 1)
            if target != s:
                for pos, c in enumerate(s):
                    if c not in avail:
                        gi = np.expand_dims(gi, pos)
                gi = np.broadcast_to(gi, t.value.shape)
            grads.append(gi)
        return tuple(grads)

    return _node(out, operands, backward)


def diagonal(a):
    """Main diagonal of a square 2-D tensor."""
    a = _as_tensor(a)
    return _node(np.diag(a.value).copy(), (a,), lambda g: (np.diag(g),))


def cholesky(a):
    """Lower Cholesky factor, with the same jitter policy as the numpy path."""
    a = _as_tensor(a)
    L, _ = jittered_cholesky(a.value)

    def backward(g):
        p = np.tril(L.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        x = _solve_tri(L, p.T, lower=True, trans="T").T
        s = _solve_tri(L, x, lower=True, trans="T")
        return (0.5 * (s + s.T),)

    return _node(L, (a,), backward)


def solve_triangular(L, b):
    """``L^{-1} b`` for lower-triangular 2-D ``L``."""
    L, b = _as_tensor(L), _as_tensor(b)
    lv = L.value
    x = _solve_tri(lv, b.value, lower=True)

    def backward(g):
        gb = _solve_tri(lv, g, lower=True, trans="T")
        if x.ndim == 1:
            gl = -np.tril(np.outer(gb, x))
        else:
            gl = -np.tril(gb @ x.T)
        return gl, gb

    return _node(x, (L, b), backward)


# ---------------------------------------------------------------------------
# tapes, checks and optimizers


class GradientTape:
    """A scalar objective evaluated once with gradients recorded.

    Parameters
    ----------
    objective : callable
        Maps a dict of named :class:`Tensor` leaves to a scalar Tensor.
    params : dict
        Parameter name to array.
    """

    def __init__(self, objective, params):
        self.objective = objective
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
        out = objective(leaves)
        if out.value.size != 1:
            raise ValueError("objective must be scalar")
        self.value = float(out.value)
        if out.requires_grad:
            out.backward()
        self.gradients = {
            k: (np.zeros_like(v.value) if v.grad is None else np.array(v.grad))
            for k, v in leaves.items()
        }

    def replay(self, **overrides):
        """Re-evaluate the objective without recording, optionally with
        some parameters replaced."""
        params = dict(self.params)
        for k, v in overrides.items():
            if k not in params:
                raise UnknownParameter(k)
            params[k] = np.asarray(v, dtype=np.float64)
        return float(self.objective({k: Tensor(v) for k, v in params.items()}).value)


def grad_check(tape, param, eps=1e-6):
    """Largest relative error between the recorded gradient of ``param`` and
    central finite differences, ``|a - fd| / (|fd| + 1e-10)``."""
    if param not in tape.params:
        raise UnknownParameter(param)
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    base = tape.params[param]
    analytic = tape.gradients[param]
    worst = 0.0
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fd = (tape.replay(**{param: plus}) - tape.replay(**{param: minus})) / (2 * eps)
        err = abs(analytic[idx] - fd) / (abs(fd) + 1e-10)
        worst = max(worst, err)
    return worst


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


class Adam:
    """Adam over a dict of named arrays (minimization)."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


class Standardizer:
    """Per-column affine scaling fitted on training data.

    Columns with zero spread get scale 1, so a constant column maps to 0.
    """

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, x, axis=0):
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=axis)
        std = x.std(axis=axis)
        std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
        return cls(mean, std)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["scale"])
