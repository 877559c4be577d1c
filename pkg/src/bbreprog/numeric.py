"""Dense float64 arithmetic, a small reverse-mode engine, and the losses.

Tensors are plain ``numpy.ndarray`` values (float64, row-major).  Batched
images are always flattened to ``(batch, H*W*C)``.

The differentiation engine is deliberately closed: a :class:`DiffGraph`
records a fixed set of primitives, each with a hand-written adjoint, and
:func:`backward` replays them once in reverse creation order.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Callable

import numpy as np

from .errors import CapabilityError, InvalidDistributionError, InvalidInputError, StateError

PROB_FLOOR = 1e-12
FD_STEP = 1e-5
SIMPLEX_TOL = 1e-6


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def _as_finite(x, name="input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Value-level functions
# ---------------------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    """Softmax over the last axis."""
    z = _as_finite(logits, "logits")
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least 2 classes")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = _as_finite(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_label(label, k):
    if not 0 <= int(label) < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    return int(label)


def cross_entropy(logits, label) -> float:
    z = _as_finite(logits, "logits")
    y = _check_label(label, z.shape[-1])
    return float(-log_softmax(z)[y])


def focal_loss(logits, label, gamma: float) -> float:
    """Focal loss ``(1 - p_y)**gamma * CE``; gamma=0 is exactly cross-entropy."""
    if gamma < 0:
        raise InvalidInputError("gamma must be non-negative")
    ce = cross_entropy(logits, label)
    if gamma == 0:
        return ce
    p_y = float(np.exp(-ce))
    return (1.0 - p_y) ** gamma * ce


def _check_simplex(p, name):
    p = _as_finite(p, name)
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum(axis=-1) - 1.0).max() > SIMPLEX_TOL:
        raise InvalidDistributionError(f"{name} is not a probability vector")
    return p


def entropy(p) -> float:
    p = _check_simplex(p, "p")
    return float(-(p * np.log(np.maximum(p, PROB_FLOOR))).sum())


def priming_loss(p_local, p_service) -> float:
    """Soft-target cross-entropy ``-sum p_service * log p_local``.

    Equals ``H(p_service) + KL(p_service || p_local)``.
    """
    p_l = _check_simplex(p_local, "p_local")
    p_s = _check_simplex(p_service, "p_service")
    if p_l.shape != p_s.shape:
        raise InvalidInputError("shape mismatch")
    return float(-(p_s * np.log(np.maximum(p_l, PROB_FLOOR))).sum())


def kl_divergence(p, q) -> float:
    p = _check_simplex(p, "p")
    q = _check_simplex(q, "q")
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], PROB_FLOOR)))).sum())


LOSS_KINDS = ("kl", "l1_prob", "l2_prob", "l1_logit", "l2_logit")


def alt_priming_loss(local, service, kind: str, logits_available: bool = False) -> float:
    """Priming-loss ablation variants; L2 kinds are the squared-distance sum."""
    if kind not in LOSS_KINDS:
        raise InvalidInputError(f"unknown loss kind {kind!r}")
    if kind.endswith("logit") and not logits_available:
        raise CapabilityError(f"{kind} needs service logits, the API exposes probabilities only")
    if kind == "kl":
        return priming_loss(local, service)
    a = _as_finite(local, "local")
    b = _as_finite(service, "service")
    if a.shape != b.shape:
        raise InvalidInputError("shape mismatch")
    d = a - b
    return float(np.abs(d).sum() if kind.startswith("l1") else (d * d).sum())


# ---------------------------------------------------------------------------
# Parameters and the differentiation graph
# ---------------------------------------------------------------------------

class ParamSet:
    """Named float64 tensors, each trainable or frozen, with gradient slots."""

    def __init__(self):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise InvalidInputError(f"duplicate parameter {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        self._trainable[name] = bool(trainable)
        self._grads[name] = np.zeros_like(self._values[name])

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise InvalidInputError(f"shape mismatch for {name!r}")
        self._values[name] = value.copy()

    def names(self) -> list[str]:
        return list(self._values)

    def trainable_names(self) -> list[str]:
        return [n for n in self._values if self._trainable[n]]

    def is_trainable(self, name) -> bool:
        return self._trainable[name]

    def set_trainable(self, name, flag: bool) -> None:
        self._trainable[name] = bool(flag)
        self._grads[name][...] = 0.0

    def grad(self, name) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def accumulate(self, name, g) -> None:
        if self._trainable[name]:
            self._grads[name] += g

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n in names if names is not None else self._values:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._values[n], dtype="<f8").tobytes())
        return h.hexdigest()

    def items(self):
        return self._values.items()


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "adjoint", "param")

    def __init__(self, value, parents=(), adjoint=None, requires_grad=False, param=None):
        self.value = value
        self.parents = parents
        self.adjoint = adjoint
        self.requires_grad = requires_grad
        self.param = param
        self.grad = None


class DiffGraph:
    """Tape of primitive operations for one forward pass.

    Nodes are appended in creation order, which is a valid topological
    order; :func:`backward` walks it reversed exactly once.
    """

    def __init__(self, params: ParamSet | None = None):
        self.params = params
        self.nodes: list[Node] = []
        self._done = False

    def _push(self, value, parents, adjoint):
        rg = any(p.requires_grad for p in parents)
        node = Node(value, parents, adjoint if rg else None, rg)
        self.nodes.append(node)
        return node

    # leaves
    def param(self, name: str, params: ParamSet | None = None) -> Node:
        ps = params if params is not None else self.params
        if ps is None:
            raise StateError("graph has no ParamSet")
        node = Node(ps[name], requires_grad=ps.is_trainable(name), param=(ps, name))
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        node = Node(np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        return node

    # primitives
    def matmul(self, a: Node, b: Node) -> Node:
        def adj(g):
            return (g @ b.value.T, a.value.T @ g)
        return self._push(a.value @ b.value, (a, b), adj)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise InvalidInputError("add needs equal shapes")
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def add_row(self, a: Node, row: Node) -> Node:
        """Add a row vector to every row of a (batch, n) matrix (bias add)."""
        return self._push(a.value + row.value, (a, row), lambda g: (g, g.sum(axis=0)))

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise InvalidInputError("mul needs equal shapes")
        return self._push(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._push(out, (a,), lambda g: (g * (1.0 - out * out),))

    def relu(self, a: Node) -> Node:
        out = np.maximum(a.value, 0.0)
        return self._push(out, (a,), lambda g: (g * (a.value > 0),))

    def clamp01(self, a: Node) -> Node:
        out = np.clip(a.value, 0.0, 1.0)
        inside = (a.value > 0.0) & (a.value < 1.0)
        return self._push(out, (a,), lambda g: (g * inside,))

    def scatter(self, vec: Node, index: np.ndarray, size: int) -> Node:
        """Place ``vec`` at positions ``index`` of a zero vector of length ``size``."""
        out = np.zeros(size)
        out[index] = vec.value
        return self._push(out, (vec,), lambda g: (g[index],))

    def softmax(self, a: Node) -> Node:
        p = softmax(a.value)

        def adj(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
        return self._push(p, (a,), adj)

    def matmul_const_t(self, a: Node, m: np.ndarray) -> Node:
        """``a @ m.T`` for a fixed matrix ``m`` (label-map application)."""
        return self._push(a.value @ m.T, (a,), lambda g: (g @ m,))

    def normalize_rows(self, a: Node) -> Node:
        s = a.value.sum(axis=-1, keepdims=True)
        out = a.value / s

        def adj(g):
            return ((g - (g * out).sum(axis=-1, keepdims=True)) / s,)
        return self._push(out, (a,), adj)

    def nll_probs(self, q: Node, labels) -> Node:
        """Mean of ``-log max(q[i, y_i], floor)`` over the batch."""
        labels = np.asarray(labels, dtype=np.int64)
        n = q.value.shape[0]
        picked = q.value[np.arange(n), labels]
        clamped = np.maximum(picked, PROB_FLOOR)

        def adj(g):
            out = np.zeros_like(q.value)
            out[np.arange(n), labels] = np.where(picked > PROB_FLOOR, -g / (n * clamped), 0.0)
            return (out,)
        return self._push(np.float64(-np.log(clamped).mean()), (q,), adj)

    def softmax_cross_entropy(self, z: Node, labels) -> Node:
        """Fused softmax + mean cross-entropy on integer labels."""
        labels = np.asarray(labels, dtype=np.int64)
        n, k = z.value.shape
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
            raise IndexError("label out of range")
        lsm = log_softmax(z.value)
        loss = -lsm[np.arange(n), labels].mean()

        def adj(g):
            d = np.exp(lsm)
            d[np.arange(n), labels] -= 1.0
            return (g * d / n,)
        return self._push(np.float64(loss), (z,), adj)

    def soft_cross_entropy(self, z: Node, targets: np.ndarray) -> Node:
        """Fused softmax + mean soft-target cross-entropy (the priming loss)."""
        t = np.asarray(targets, dtype=np.float64)
        n = z.value.shape[0]
        lsm = log_softmax(z.value)
        loss = -(t * lsm).sum() / n

        def adj(g):
            return (g * (np.exp(lsm) * t.sum(axis=-1, keepdims=True) - t) / n,)
        return self._push(np.float64(loss), (z,), adj)

    def l1_to(self, a: Node, target: np.ndarray) -> Node:
        """Mean over rows of the L1 distance to a fixed target."""
        d = a.value - target
        n = d.shape[0]
        return self._push(np.float64(np.abs(d).sum() / n), (a,), lambda g: (g * np.sign(d) / n,))

    def l2_to(self, a: Node, target: np.ndarray) -> Node:
        """Mean over rows of the squared L2 distance to a fixed target."""
        d = a.value - target
        n = d.shape[0]
        return self._push(np.float64((d * d).sum() / n), (a,), lambda g: (g * 2.0 * d / n,))

    def sum(self, a: Node) -> Node:
        return self._push(np.float64(a.value.sum()), (a,), lambda g: (np.full_like(a.value, g),))

    def mean(self, a: Node) -> Node:
        n = a.value.size
        return self._push(np.float64(a.value.mean()), (a,), lambda g: (np.full_like(a.value, g / n),))


def backward(graph: DiffGraph, loss: Node) -> None:
    """Reverse-mode sweep from a scalar ``loss``, accumulating into the ParamSet."""
    if graph._done:
        raise StateError("graph already consumed by backward")
    if not graph.nodes or loss not in graph.nodes:
        raise StateError("backward called without a recorded forward pass")
    if np.ndim(loss.value) != 0:
        raise InvalidInputError("loss must be a scalar")
    graph._done = True
    loss.grad = np.float64(1.0)
    for node in reversed(graph.nodes):
        if node.grad is None or not node.requires_grad:
            continue
        if node.param is not None:
            ps, name = node.param
            ps.accumulate(name, node.grad)
            continue
        for parent, g in zip(node.parents, node.adjoint(node.grad)):
            if not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def finite_difference_grad(objective: Callable[[ParamSet], float], params: ParamSet,
                           h: float = FD_STEP, names=None) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``objective`` for every trainable parameter."""
    if h <= 0:
        raise InvalidInputError("h must be positive")
    out = {}
    for name in names if names is not None else params.trainable_names():
        base = params[name].copy()
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            work = flat.copy()
            work[i] = flat[i] + h
            params[name] = work.reshape(base.shape)
            f_plus = objective(params)
            work[i] = flat[i] - h
            params[name] = work.reshape(base.shape)
            f_minus = objective(params)
            g.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        params[name] = base
        out[name] = g
    return out


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


class Adam:
    """Adaptive-moment gradient descent over the trainable entries of a ParamSet."""

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps=1e-8, names=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.names = list(names) if names is not None else params.trainable_names()
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in self.names:
            g = self.params.grad(n)
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            upd = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            self.params[n] = self.params[n] - upd
