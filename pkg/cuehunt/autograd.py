"""Dense tensors with a reverse-mode differentiation tape.

Only the primitives the localizer is built from are provided. A primitive
applied to tensors records one node on the tape its inputs belong to; tensors
that are not on any tape yet are adopted as constants. ``backward`` walks the
nodes once, in reverse order of recording.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericalError, ShapeError

DTYPES = {"float64": np.float64, "float32": np.float32}

# weighted_pool accepts weights whose sum is within this distance of 1
POOL_TOLERANCE = 1e-9


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"Unsupported float width '{dtype}', expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    return np.dtype(dtype)


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.tape: Optional["Tape"] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, tape_id={self.tape_id})"


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of primitive applications.

    Inputs always precede the node that consumes them because a node is only
    recorded after its inputs exist.
    """

    def __init__(self, dtype="float64"):
        self.dtype = resolve_dtype(dtype)
        self.nodes: list[Node] = []
        self.values: Dict[int, Tensor] = {}
        self.leaves: Dict[str, int] = {}
        self._next_id = 0

    def _register(self, tensor: Tensor) -> Tensor:
        tensor.tape = self
        tensor.tape_id = self._next_id
        self.values[self._next_id] = tensor
        self._next_id += 1
        return tensor

    def constant(self, data) -> Tensor:
        return self._register(Tensor(np.asarray(data, dtype=self.dtype)))

    def watch(self, name: str, data) -> Tensor:
        """Register a named trainable leaf."""
        if name in self.leaves:
            raise ContractError(f"Parameter '{name}' is already watched on this tape")
        tensor = self._register(Tensor(np.array(data, dtype=self.dtype), requires_grad=True))
        self.leaves[name] = tensor.tape_id
        return tensor

    def watch_all(self, arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
        return {name: self.watch(name, value) for name, value in arrays.items()}

    def adopt(self, tensor: Tensor, op: str) -> Tensor:
        if tensor.tape is None:
            if tensor.data.dtype != self.dtype:
                tensor.data = tensor.data.astype(self.dtype)
            return self._register(tensor)
        if tensor.tape is not self:
            raise ContractError(f"{op}: inputs belong to different tapes")
        return tensor

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        out = np.asarray(out, dtype=self.dtype)
        if not np.all(np.isfinite(out)):
            raise NumericalError(op)
        tensor = self._register(Tensor(out, requires_grad=any(t.requires_grad for t in inputs)))
        self.nodes.append(Node(op, tuple(t.tape_id for t in inputs), tensor.tape_id, vjp))
        return tensor

    @property
    def outputs(self) -> list[int]:
        """Ids of recorded values that no node consumes."""
        consumed = {i for node in self.nodes for i in node.inputs}
        return [node.output for node in self.nodes if node.output not in consumed]


def _tape_for(op: str, *tensors: Tensor) -> Tape:
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError(f"{op}: inputs belong to different tapes")
    if tapes:
        tape = next(iter(tapes.values()))
    else:
        tape = Tape(tensors[0].data.dtype if tensors[0].data.dtype in (np.float32, np.float64) else "float64")
    for t in tensors:
        tape.adopt(t, op)
    return tape


def _axis_grid(n: int) -> np.ndarray:
    """Normalized index coordinates 0..1 along an axis of length n."""
    if n == 1:
        return np.array([0.5])
    return np.arange(n) / (n - 1)


# ---------------------------------------------------------------- primitives

def conv2d_valid(input: Tensor, kernels: Tensor, bias: Tensor, *, op: str = "conv2d_valid") -> Tensor:
    """Cross-correlation without padding: C×H×W, K×C×kh×kw, K -> K×(H−kh+1)×(W−kw+1)."""
    x, k, b = input.data, kernels.data, bias.data
    if x.ndim != 3 or k.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"{op}: expected C×H×W input, K×C×kh×kw kernels and K bias, got {x.shape}, {k.shape}, {b.shape}")
    C, H, W = x.shape
    K, Ck, kh, kw = k.shape
    if Ck != C:
        raise ShapeError(f"{op}: kernels expect {Ck} channels but input has {C}")
    if b.shape[0] != K:
        raise ShapeError(f"{op}: bias has {b.shape[0]} entries for {K} kernels")
    if kh > H or kw > W:
        raise ShapeError(f"{op}: kernel {kh}×{kw} larger than input {H}×{W}")

    tape = _tape_for(op, input, kernels, bias)
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))
    out = np.tensordot(k, windows, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]

    def vjp(g):
        dk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        db = g.sum(axis=(1, 2))
        dx = np.zeros_like(x)
        Ho, Wo = g.shape[1:]
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + Ho, j:j + Wo] += np.tensordot(k[:, :, i, j], g, axes=([0], [0]))
        return dx, dk, db

    return tape.record(op, (input, kernels, bias), out, vjp)


def conv1x1(input: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel channel mixing (bottleneck layer)."""
    x, k, b = input.data, kernels.data, bias.data
    if k.ndim != 4 or k.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1: expected K×C×1×1 kernels, got {k.shape}")
    if x.ndim != 3 or x.shape[0] != k.shape[1]:
        raise ShapeError(f"conv1x1: kernels expect {k.shape[1]} channels, input shape is {x.shape}")
    if b.shape != (k.shape[0],):
        raise ShapeError(f"conv1x1: bias has shape {b.shape} for {k.shape[0]} kernels")

    tape = _tape_for("conv1x1", input, kernels, bias)
    w = k[:, :, 0, 0]
    out = np.tensordot(w, x, axes=([1], [0])) + b[:, None, None]

    def vjp(g):
        dx = np.tensordot(w, g, axes=([0], [0]))
        dk = np.tensordot(g, x, axes=([1, 2], [1, 2]))[:, :, None, None]
        return dx, dk, g.sum(axis=(1, 2))

    return tape.record("conv1x1", (input, kernels, bias), out, vjp)


def relu(input: Tensor) -> Tensor:
    x = input.data
    tape = _tape_for("relu", input)
    # subgradient 0 at x == 0
    mask = x > 0

    def vjp(g):
        return (g * mask,)

    return tape.record("relu", (input,), np.where(mask, x, 0.0), vjp)


def stack3x3(input: Tensor) -> Tensor:
    """Concatenate each pixel's 3×3 neighbourhood along channels.

    Output channel c*9 + n holds input channel c at neighbour n, neighbours
    taken row-major over the window.
    """
    x = input.data
    if x.ndim != 3 or x.shape[1] < 3 or x.shape[2] < 3:
        raise ShapeError(f"stack3x3: input must be C×H×W with H, W >= 3, got {x.shape}")
    C, H, W = x.shape
    tape = _tape_for("stack3x3", input)
    windows = sliding_window_view(x, (3, 3), axis=(1, 2))
    out = windows.transpose(0, 3, 4, 1, 2).reshape(9 * C, H - 2, W - 2)

    def vjp(g):
        g = g.reshape(C, 3, 3, H - 2, W - 2)
        dx = np.zeros_like(x)
        for di in range(3):
            for dj in range(3):
                dx[:, di:di + H - 2, dj:dj + W - 2] += g[:, di, dj]
        return (dx,)

    return tape.record("stack3x3", (input,), out, vjp)


def spatial_softmax(input: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the H×W grid of every channel."""
    x = input.data
    if x.ndim != 3:
        raise ShapeError(f"spatial_softmax: expected K×H×W input, got {x.shape}")
    if temperature <= 0:
        raise ContractError(f"spatial_softmax: temperature must be positive, got {temperature}")
    tape = _tape_for("spatial_softmax", input)
    z = x / temperature
    e = np.exp(z - z.max(axis=(1, 2), keepdims=True))
    s = e / e.sum(axis=(1, 2), keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=(1, 2), keepdims=True)) / temperature,)

    return tape.record("spatial_softmax", (input,), s, vjp)


def weighted_pool(features: Tensor, weights: Tensor) -> Tensor:
    """Convex combination of feature pixels: C×H×W, 1×H×W -> C."""
    f, w = features.data, weights.data
    if f.ndim != 3 or w.shape != (1,) + f.shape[1:]:
        raise ShapeError(f"weighted_pool: weights {w.shape} do not match features {f.shape}")
    tape = _tape_for("weighted_pool", features, weights)
    tolerance = max(POOL_TOLERANCE, 64 * np.finfo(tape.dtype).eps)
    total = float(w.sum())
    if np.any(w < 0) or abs(total - 1.0) > tolerance:
        raise ContractError(f"weighted_pool: weights must be non-negative and sum to 1, sum is {total!r}")
    out = np.tensordot(f, w[0], axes=([1, 2], [0, 1]))

    def vjp(g):
        return g[:, None, None] * w, np.tensordot(g, f, axes=([0], [0]))[None]

    return tape.record("weighted_pool", (features, weights), out, vjp)


def broadcast_mul(vector: Tensor, map: Tensor) -> Tensor:
    """Scale every channel of a C×H×W map by the matching vector entry."""
    v, m = vector.data, map.data
    if v.ndim != 1 or m.ndim != 3 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"broadcast_mul: vector {v.shape} does not match map {m.shape}")
    tape = _tape_for("broadcast_mul", vector, map)

    def vjp(g):
        return (g * m).sum(axis=(1, 2)), g * v[:, None, None]

    return tape.record("broadcast_mul", (vector, map), v[:, None, None] * m, vjp)


def expected_coordinates(alphas: Tensor) -> Tensor:
    """Expected normalized (row, column) index under each K×H×W distribution -> K×2."""
    a = alphas.data
    if a.ndim != 3:
        raise ShapeError(f"expected_coordinates: expected K×H×W input, got {a.shape}")
    tape = _tape_for("expected_coordinates", alphas)
    rows, cols = _axis_grid(a.shape[1]), _axis_grid(a.shape[2])
    out = np.stack([a.sum(axis=2) @ rows, a.sum(axis=1) @ cols], axis=1)

    def vjp(g):
        return (g[:, 0, None, None] * rows[None, :, None] + g[:, 1, None, None] * cols[None, None, :],)

    return tape.record("expected_coordinates", (alphas,), out, vjp)


def softargmax(scores: Tensor, temperature: float = 1.0) -> Tensor:
    """Differentiable argmax of every score map, as normalized (x, y) in [0, 1]²."""
    return expected_coordinates(spatial_softmax(scores, temperature))


def linear(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    x, w, b = input.data, weights.data, bias.data
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: incompatible shapes input {x.shape}, weights {w.shape}, bias {b.shape}")
    tape = _tape_for("linear", input, weights, bias)

    def vjp(g):
        return w.T @ g, np.outer(g, x), g

    return tape.record("linear", (input, weights, bias), w @ x + b, vjp)


def mse_loss(pred: Tensor, label: Tensor) -> Tensor:
    """Mean over the batch of the squared L2 distance between B×2 points."""
    p, y = pred.data, label.data
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"mse_loss: prediction {p.shape} and label {y.shape} must both be B×2")
    tape = _tape_for("mse_loss", pred, label)
    d = p - y
    batch = p.shape[0]

    def vjp(g):
        dp = 2.0 * d * g / batch
        return dp, -dp

    return tape.record("mse_loss", (pred, label), np.sum(d * d) / batch, vjp)


def reshape(input: Tensor, shape) -> Tensor:
    x = input.data
    tape = _tape_for("reshape", input)
    try:
        out = x.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e

    def vjp(g):
        return (g.reshape(x.shape),)

    return tape.record("reshape", (input,), out, vjp)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not tensors:
        raise ContractError("stack: nothing to stack")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: tensors have different shapes {sorted(shapes)}")
    tape = _tape_for("stack", *tensors)

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return tape.record("stack", tuple(tensors), np.stack([t.data for t in tensors]), vjp)


# ------------------------------------------------------------------ backward

def backward(tape: Tape, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every watched parameter.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("backward: loss was not produced on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for index, dg in zip(node.inputs, node.vjp(g)):
            if dg is None or not tape.values[index].requires_grad:
                continue
            if not np.all(np.isfinite(dg)):
                raise NumericalError(f"{node.op} (backward)")
            grads[index] = grads[index] + dg if index in grads else dg
    return {
        name: grads.get(index, np.zeros_like(tape.values[index].data))
        for name, index in tape.leaves.items()
    }
