"""Dense n-d tensors with a small reverse-mode autodiff engine.

The op set is exactly what the render network and losses need: 3D
convolution, relu/sigmoid, nearest upsampling, softmax along an axis,
channel concat/slice, elementwise arithmetic, reductions, and a few
layout ops.  A fresh Tape is built for every forward pass; tensors are
immutable once created.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

FLOAT_DTYPES = (np.float32, np.float64)


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in creation order, which is automatically a
    topological order for a define-by-run graph.  backward() walks the
    record once in reverse, so every node is visited exactly once.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, tensor: "Tensor") -> int:
        self._nodes.append(tensor)
        return len(self._nodes) - 1

    def node(self, node_id: int) -> "Tensor":
        return self._nodes[node_id]

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate gradients of `loss` w.r.t. every recorded node.

        Returns a node-id -> gradient map; the same arrays are published
        on each node's .grad.  Nodes unreachable from the loss get exact
        zeros.
        """
        if loss.tape is not self:
            raise ContractViolation("loss tensor was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward() needs a scalar loss, got shape {loss.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss._id] = np.ones_like(loss.data)
        for i in range(loss._id, -1, -1):
            g = grads[i]
            if g is None or self._nodes[i]._vjp is None:
                continue
            parent_grads = self._nodes[i]._vjp(g)
            for parent, pg in zip(self._nodes[i]._parents, parent_grads):
                if pg is None or parent._id is None:
                    continue
                if pg.shape != parent.data.shape:
                    raise AssertionError(
                        f"vjp shape {pg.shape} != parent shape {parent.data.shape}"
                    )
                if grads[parent._id] is None:
                    grads[parent._id] = np.zeros_like(parent.data)
                grads[parent._id] += pg
        out = {}
        for i, node in enumerate(self._nodes):
            node.grad = grads[i] if grads[i] is not None else np.zeros_like(node.data)
            out[i] = node.grad
        return out


def backward(tape: Tape, loss: "Tensor") -> dict[int, np.ndarray]:
    return tape.backward(loss)


class Tensor:
    """Contiguous float array, optionally recorded on a Tape."""

    __slots__ = ("data", "tape", "grad", "_id", "_parents", "_vjp")

    def __init__(self, data, tape: Tape | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if any(n < 1 for n in arr.shape):
            raise ContractViolation(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.tape = tape
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._id = tape._record(self) if tape is not None else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def strides(self):
        return self.data.strides

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, tape={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, parents, vjp) -> Tensor:
    """Create an op result; record it if any parent lives on a tape."""
    tapes = {p.tape for p in parents if p.tape is not None}
    if len(tapes) > 1:
        raise ContractViolation("operands are recorded on different tapes")
    tape = tapes.pop() if tapes else None
    out = Tensor(data, tape)
    if tape is not None:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    data = np.where(mask, x.data, 0)

    def vjp(g):
        return (g * mask,)

    return _result(data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sign = np.sign(x.data)  # 0 at 0, same convention as relu

    def vjp(g):
        return (g * sign,)

    return _result(data, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable in both tails
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    data = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return _result(data, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).astype(x.dtype, copy=True),)

    return _result(data, (x,), vjp)


# ---------------------------------------------------------------------------
# layout ops


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), vjp)


def moveaxis(x: Tensor, source: int, destination: int) -> Tensor:
    data = np.moveaxis(x.data, source, destination)

    def vjp(g):
        return (np.ascontiguousarray(np.moveaxis(g, destination, source)),)

    return _result(data, (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[1:] != b.shape[1:]:
        raise ContractViolation(
            f"concat_channels needs equal non-channel extents, got {a.shape} and {b.shape}"
        )
    data = np.concatenate([a.data, b.data], axis=0)
    na = a.shape[0]

    def vjp(g):
        return np.ascontiguousarray(g[:na]), np.ascontiguousarray(g[na:])

    return _result(data, (a, b), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ContractViolation(
            f"channel slice [{start}:{stop}] out of range for shape {x.shape}"
        )
    data = x.data[start:stop]

    def vjp(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _result(data, (x,), vjp)


# ---------------------------------------------------------------------------
# softmax


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ContractViolation(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _result(data, (x,), vjp)


# ---------------------------------------------------------------------------
# nearest-neighbor upsampling


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ContractViolation(f"{name} must be an int or a 3-tuple, got {v!r}")
    return t


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """Replicate a (C, P, H, W) tensor along its three spatial axes.

    Backward sums the upstream gradient over each replication block.
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample_nearest expects (C, P, H, W), got {x.shape}")
    fp, fh, fw = _triple(factor, "factor")
    if min(fp, fh, fw) < 1:
        raise ContractViolation("upsample factor must be >= 1")
    data = x.data.repeat(fp, axis=1).repeat(fh, axis=2).repeat(fw, axis=3)
    c, p, h, w = x.shape

    def vjp(g):
        blocks = g.reshape(c, p, fp, h, fh, w, fw)
        return (np.ascontiguousarray(blocks.sum(axis=(2, 4, 6))),)

    return _result(data, (x,), vjp)


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation convention)


def _conv3d_geometry(in_shape, kernel, stride, dilation, padding):
    """Padding amounts and output extents for the three spatial axes."""
    pads, outs = [], []
    for n, k, s, r in zip(in_shape, kernel, stride, dilation):
        ke = (k - 1) * r + 1
        p = (ke - 1) // 2 if padding == "same" else 0
        o = (n + 2 * p - ke) // s + 1
        if o < 1:
            raise ContractViolation(
                f"kernel (effective {ke}) does not fit input extent {n} with padding '{padding}'"
            )
        pads.append(p)
        outs.append(o)
    return tuple(pads), tuple(outs)


def conv3d(x: Tensor, weights: Tensor, bias: Tensor, stride=1, dilation=1,
           padding: str = "same") -> Tensor:
    """Strided/dilated 3D cross-correlation over a (C, P, H, W) tensor.

    weights: (C_out, C_in, kd, kh, kw) with odd kernel extents;
    padding: "same" (symmetric zero-pad) or "valid".
    Implemented as one small matmul per kernel tap, which keeps memory
    flat and maps onto BLAS.
    """
    if x.data.ndim != 4:
        raise ContractViolation(f"conv3d input must be (C, P, H, W), got {x.shape}")
    if weights.data.ndim != 5:
        raise ContractViolation(f"conv3d weights must be 5-d, got {weights.shape}")
    co, ci, kd, kh, kw = weights.shape
    if x.shape[0] != ci:
        raise ContractViolation(
            f"input has {x.shape[0]} channels but weights expect {ci}"
        )
    if any(k % 2 == 0 for k in (kd, kh, kw)):
        raise ContractViolation(f"kernel extents must be odd, got {(kd, kh, kw)}")
    if bias.shape != (co,):
        raise ContractViolation(f"bias must have shape ({co},), got {bias.shape}")
    if padding not in ("same", "valid"):
        raise ContractViolation(f"padding must be 'same' or 'valid', got {padding!r}")
    sd, sh, sw = _triple(stride, "stride")
    rd, rh, rw = _triple(dilation, "dilation")
    pads, outs = _conv3d_geometry(x.shape[1:], (kd, kh, kw), (sd, sh, sw),
                                  (rd, rh, rw), padding)
    (pd, ph, pw), (od, oh, ow) = pads, outs

    xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    wd = weights.data
    out = np.zeros((co, od, oh, ow), dtype=np.result_type(x.dtype, weights.dtype))

    def tap_view(arr, a, b, c):
        return arr[:,
                   a * rd: a * rd + (od - 1) * sd + 1: sd,
                   b * rh: b * rh + (oh - 1) * sh + 1: sh,
                   c * rw: c * rw + (ow - 1) * sw + 1: sw]

    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                out += np.tensordot(wd[:, :, a, b, c], tap_view(xp, a, b, c), axes=(1, 0))
    out += bias.data[:, None, None, None]

    def vjp(g):
        gb = g.sum(axis=(1, 2, 3))
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    sl = tap_view(xp, a, b, c)
                    gw[:, :, a, b, c] = np.tensordot(g, sl, axes=((1, 2, 3), (1, 2, 3)))
                    tap_view(gxp, a, b, c)[...] += np.tensordot(
                        wd[:, :, a, b, c], g, axes=(0, 0))
        gx = gxp[:, pd: pd + x.shape[1], ph: ph + x.shape[2], pw: pw + x.shape[3]]
        return np.ascontiguousarray(gx), gw, gb

    return _result(out, (x, weights, bias), vjp)
