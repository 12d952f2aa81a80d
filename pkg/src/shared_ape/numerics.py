"""Small dense-tensor engine with reverse-mode automatic differentiation.

Values are plain numpy arrays. A :class:`Graph` is an append-only tape: each
op computes its output eagerly and, when gradients are requested, records a
closure that maps the output gradient to input gradients. Because inputs are
always created before outputs, walking the tape backwards is a valid
topological order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "DimensionError",
    "Node",
    "Graph",
    "backward",
    "clip_by_global_norm",
    "sgd_step",
    "init_uniform",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"APECKPT1"


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Node:
    __slots__ = ("id", "value", "op", "inputs", "backward_fn", "name")

    def __init__(self, id: int, value: np.ndarray, op: str, inputs: Tuple[int, ...],
                 backward_fn: Optional[Callable], name: Optional[str] = None):
        self.id = id
        self.value = value
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.id}, op={self.op!r}, shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # sum out axes that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Tape of nodes.

    ``grad=False`` builds the same values without keeping backward closures,
    which is what decoding uses. ``check_finite=True`` raises as soon as an op
    produces NaN or Inf.
    """

    def __init__(self, grad: bool = True, check_finite: bool = False):
        self.grad = grad
        self.check_finite = check_finite
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, value: np.ndarray, op: str, inputs: Sequence[Node],
             backward_fn: Optional[Callable] = None, name: Optional[str] = None) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite output from op {op!r}")
        node = Node(len(self.nodes), value, op, tuple(n.id for n in inputs),
                    backward_fn if self.grad else None, name)
        self.nodes.append(node)
        return node

    # -- leaves --------------------------------------------------------------

    def leaf(self, value, name: Optional[str] = None) -> Node:
        """A differentiable input (parameters, or anything gradient-checked)."""
        return self._add(np.asarray(value), "leaf", (), None, name)

    def constant(self, value) -> Node:
        return self._add(np.asarray(value), "const", (), None)

    # -- elementwise / linear ------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.value, b.value

        def back(g):
            return g @ bv.T, av.T @ g

        return self._add(av @ bv, "matmul", (a, b), back)

    def add(self, a: Node, b: Node) -> Node:
        try:
            out = a.value + b.value
        except ValueError:
            raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
        sa, sb = a.shape, b.shape

        def back(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

        return self._add(out, "add", (a, b), back)

    def sub(self, a: Node, b: Node) -> Node:
        try:
            out = a.value - b.value
        except ValueError:
            raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None
        sa, sb = a.shape, b.shape

        def back(g):
            return _unbroadcast(g, sa), -_unbroadcast(g, sb)

        return self._add(out, "sub", (a, b), back)

    def mul(self, a: Node, b: Node) -> Node:
        try:
            out = a.value * b.value
        except ValueError:
            raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
        av, bv = a.value, b.value

        def back(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

        return self._add(out, "mul", (a, b), back)

    def scale(self, a: Node, factor: float) -> Node:
        return self._add(a.value * factor, "scale", (a,), lambda g: (g * factor,))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._add(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a: Node) -> Node:
        out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
        return self._add(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))

    def sum(self, a: Node) -> Node:
        shape = a.shape
        dtype = a.value.dtype
        return self._add(np.asarray(a.value.sum()), "sum", (a,),
                         lambda g: (np.full(shape, g, dtype=dtype),))

    # -- structural ----------------------------------------------------------

    def concat(self, nodes: Sequence[Node], axis: int = -1) -> Node:
        values = [n.value for n in nodes]
        try:
            out = np.concatenate(values, axis=axis)
        except ValueError:
            shapes = [v.shape for v in values]
            raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
        sizes = [v.shape[axis] for v in values]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._add(out, "concat", nodes, back)

    def slice(self, a: Node, start: int, stop: int, axis: int = -1) -> Node:
        axis = axis % a.value.ndim
        if not 0 <= start <= stop <= a.shape[axis]:
            raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
        index = [slice(None)] * a.value.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)
        shape, dtype = a.shape, a.value.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            full[index] = g
            return (full,)

        return self._add(a.value[index], "slice", (a,), back)

    def reshape(self, a: Node, shape: Tuple[int, ...]) -> Node:
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
        return self._add(out, "reshape", (a,), lambda g: (g.reshape(old),))

    def transpose(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
        return self._add(a.value.T, "transpose", (a,), lambda g: (g.T,))

    def stack(self, nodes: Sequence[Node], axis: int = 1) -> Node:
        try:
            out = np.stack([n.value for n in nodes], axis=axis)
        except ValueError:
            raise DimensionError(f"stack: incompatible shapes {[n.shape for n in nodes]}") from None
        count = len(nodes)

        def back(g):
            return tuple(np.take(g, i, axis=axis) for i in range(count))

        return self._add(out, "stack", nodes, back)

    def embedding(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        vocab = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexError(f"embedding: id out of range for table of {vocab} rows")
        shape, dtype = table.shape, table.value.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
            return (full,)

        return self._add(table.value[ids], "embedding", (table,), back)

    def dropout(self, a: Node, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Node:
        """Inverted dropout; the identity when ``p == 0`` or not training."""
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        if not training or p == 0.0:
            return a
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(a.shape) >= p).astype(a.value.dtype) / (1.0 - p)
        return self._add(a.value * keep, "dropout", (a,), lambda g: (g * keep,))

    def mask_blend(self, new: Node, old: Node, mask: np.ndarray) -> Node:
        """``mask * new + (1 - mask) * old`` with a constant 0/1 mask broadcast over the last axis."""
        if new.shape != old.shape:
            raise DimensionError(f"mask_blend: shapes {new.shape} and {old.shape} differ")
        m = np.asarray(mask, dtype=new.value.dtype).reshape(new.shape[:-1] + (1,))
        out = m * new.value + (1.0 - m) * old.value
        return self._add(out, "mask_blend", (new, old), lambda g: (g * m, g * (1.0 - m)))

    # -- attention primitives ------------------------------------------------

    def batched_dot(self, keys: Node, query: Node) -> Node:
        """(B, L, D) x (B, D) -> (B, L): one dot product per position."""
        kv, qv = keys.value, query.value
        if kv.ndim != 3 or qv.ndim != 2 or kv.shape[0] != qv.shape[0] or kv.shape[2] != qv.shape[1]:
            raise DimensionError(f"batched_dot: incompatible shapes {kv.shape} and {qv.shape}")
        out = np.einsum("bld,bd->bl", kv, qv)

        def back(g):
            return g[:, :, None] * qv[:, None, :], np.einsum("bl,bld->bd", g, kv)

        return self._add(out, "batched_dot", (keys, query), back)

    def weighted_sum(self, weights: Node, values: Node) -> Node:
        """(B, L) x (B, L, D) -> (B, D)."""
        wv, vv = weights.value, values.value
        if wv.ndim != 2 or vv.ndim != 3 or wv.shape != vv.shape[:2]:
            raise DimensionError(f"weighted_sum: incompatible shapes {wv.shape} and {vv.shape}")
        out = np.einsum("bl,bld->bd", wv, vv)

        def back(g):
            return np.einsum("bd,bld->bl", g, vv), wv[:, :, None] * g[:, None, :]

        return self._add(out, "weighted_sum", (weights, values), back)

    def softmax(self, a: Node, axis: int = -1, mask: Optional[np.ndarray] = None) -> Node:
        """Softmax along ``axis``; positions where ``mask`` is false get weight 0."""
        x = a.value
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != x.shape:
                raise DimensionError(f"softmax: mask shape {mask.shape} != input shape {x.shape}")
            x = np.where(mask, x, -np.inf)
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._add(out, "softmax", (a,), back)

    def log_softmax(self, a: Node, axis: int = -1) -> Node:
        x = a.value
        shifted = x - np.max(x, axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        probs = np.exp(out)

        def back(g):
            return (g - probs * g.sum(axis=axis, keepdims=True),)

        return self._add(out, "log_softmax", (a,), back)

    def cross_entropy(self, logits: Node, targets, weights: Optional[np.ndarray] = None) -> Node:
        """Summed negative log-likelihood of ``targets`` under softmax(logits).

        ``logits`` is (B, V) or (V,); ``weights`` (0/1 per row) masks padding.
        """
        x = logits.value
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        if targets.shape != (x.shape[0],):
            raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for logits {logits.shape}")
        if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
            raise IndexError("cross_entropy: target id out of range")
        w = np.ones(x.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
        shifted = x - np.max(x, axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(x.shape[0])
        nll = logz - shifted[rows, targets]
        out = np.asarray((w * nll).sum())

        def back(g):
            probs = np.exp(shifted - logz[:, None])
            probs[rows, targets] -= 1.0
            grad = g * w[:, None] * probs
            return (grad[0] if squeeze else grad,)

        return self._add(out, "cross_entropy", (logits,), back)


def backward(graph: Graph, loss: Node) -> Dict[int, np.ndarray]:
    """Gradients of the scalar ``loss`` for every node it depends on, keyed by node id."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.grad:
        raise ValueError("graph was built with grad=False")
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    nodes = graph.nodes
    for idx in range(loss.id, -1, -1):
        g = grads.get(idx)
        node = nodes[idx]
        if g is None or node.backward_fn is None:
            continue
        for src, gi in zip(node.inputs, node.backward_fn(g)):
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    return grads


# -- optimisation --------------------------------------------------------------


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return dict(grads)
    norm = global_norm(grads.values())
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def sgd_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             clip_norm: Optional[float] = None) -> Dict[str, np.ndarray]:
    """In-place ``p <- p - lr * g`` after optional global-norm clipping. Returns ``params``.

    Parameters without a gradient entry are left untouched.
    """
    grads = clip_by_global_norm(grads, clip_norm)
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"sgd_step: parameter {name!r} has shape {p.shape}, gradient {g.shape}")
        p -= (lr * g).astype(p.dtype, copy=False)
    return params


def init_uniform(rng: np.random.Generator, shape, scale: float = 0.1, dtype=np.float64) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


# -- checkpoints ---------------------------------------------------------------

# Layout: magic(8) | manifest length (uint64 LE) | manifest JSON | raw blocks.
# Every block is little-endian; offsets are relative to the start of the data region.


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset,
                         "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    (hlen,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest:
        start = base + entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated block for {entry['name']!r}")
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays
