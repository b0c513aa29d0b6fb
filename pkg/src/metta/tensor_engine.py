"""Float32 tensors, a recording tape for reverse-mode gradients, and SGD.

Values are stored as contiguous float32 arrays. Matrix products and
reductions accumulate in float64 and round back to float32 once, so
repeated runs on the same inputs are bitwise identical. Ops work on plain
``Tensor`` values (pure forward) or on ``Node`` handles created through a
``Tape``, in which case the op is recorded for ``backward``.
"""

from __future__ import annotations

import numpy as np

_F32 = np.float32
_F64 = np.float64

CROSS_ENTROPY_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """A spatial op would produce an output dimension < 1."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array of float32 values in row-major order."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _freeze(np.array(data, dtype=_F32, order="C"))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Wrap an array we own without copying."""
    t = Tensor.__new__(Tensor)
    t.data = _freeze(np.ascontiguousarray(arr, dtype=_F32))
    return t


class Node:
    """A value recorded on a tape; participates in backward."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", node_id: int, value: Tensor):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Ordered record of operations for one backward pass.

    Entries are appended in execution order, so the list is topologically
    sorted by construction; ``backward`` replays it in reverse.
    """

    def __init__(self):
        self._entries: list[tuple[int, tuple[int, ...], object]] = []
        self._next_id = 0
        self._param_nodes: dict[str, Node] = {}

    def _new_node(self, value: Tensor) -> Node:
        node = Node(self, self._next_id, value)
        self._next_id += 1
        return node

    def leaf(self, value: Tensor) -> Node:
        """Register an input value whose gradient may be queried."""
        return self._new_node(value)

    def param(self, name: str, value: Tensor) -> Node:
        """Register a trainable parameter under a unique name."""
        if name in self._param_nodes:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._new_node(value)
        self._param_nodes[name] = node
        return node

    @property
    def param_nodes(self) -> dict[str, Node]:
        return dict(self._param_nodes)

    def record(self, value: Tensor, parents: tuple[Node, ...], vjp) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ValueError("operands recorded on different tapes")
        node = self._new_node(value)
        self._entries.append((node.id, tuple(p.id for p in parents), vjp))
        return node


class Gradients:
    """Result of a backward pass."""

    def __init__(self, node_grads: dict[int, np.ndarray], tape: Tape):
        self._node_grads = node_grads
        self._tape = tape

    def of(self, node: Node) -> Tensor:
        g = self._node_grads.get(node.id)
        if g is None:
            return _wrap(np.zeros(node.value.shape, dtype=_F32))
        return _wrap(g)

    def params(self) -> dict[str, Tensor]:
        return {name: self.of(node) for name, node in self._tape.param_nodes.items()}


def backward(tape: Tape, loss: Node) -> Gradients:
    """Gradient of a scalar loss with respect to every recorded node."""
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.value.shape, dtype=_F32)}
    for out_id, parent_ids, vjp in reversed(tape._entries):
        g_out = grads.get(out_id)
        if g_out is None:
            continue
        parent_grads = vjp(g_out)
        for pid, g in zip(parent_ids, parent_grads):
            if g is None:
                continue
            prev = grads.get(pid)
            grads[pid] = g if prev is None else prev + g
    return Gradients(grads, tape)


# ---------------------------------------------------------------------------
# op plumbing

def _raw(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value.data
    if isinstance(x, Tensor):
        return x.data
    raise TypeError(f"expected Tensor or Node, got {type(x).__name__}")


def _result(value: np.ndarray, inputs, vjps):
    """Return a Tensor, or record a Node if any input is on a tape.

    ``vjps`` maps each input to a closure grad_out -> grad_in (or None for
    non-differentiable inputs).
    """
    nodes = [(x, vjp) for x, vjp in zip(inputs, vjps) if isinstance(x, Node)]
    out = _wrap(value)
    if not nodes:
        return out
    tape = nodes[0][0].tape

    def combined(g_out: np.ndarray):
        return tuple(vjp(g_out) if vjp is not None else None for _, vjp in nodes)

    return tape.record(out, tuple(n for n, _ in nodes), combined)


def _as_f32(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=_F32)


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise GeometryError(f"zero_pad must be >= 0, got {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise GeometryError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise GeometryError(f"output geometry {oh}x{ow} invalid")
    return oh, ow


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=_F64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, n: int, c: int, kh: int, kw: int, stride: int,
            oh: int, ow: int, hp: int, wp: int) -> np.ndarray:
    gx = np.zeros((n, c, hp, wp), dtype=_F64)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += gc[:, :, u, v]
    return gx


def conv2d(x, kernel, stride: int = 1, zero_pad: int = 0):
    """2-d cross-correlation (no kernel flip), zero padding, floor geometry.

    ``x`` is (C,H,W) or batched (N,C,H,W); ``kernel`` is (C_out,C_in,kH,kW).
    """
    xd, kd = _raw(x), _raw(kernel)
    batched = xd.ndim == 4
    if not batched:
        if xd.ndim != 3:
            raise ShapeError(f"conv2d input must be rank 3 or 4, got {xd.ndim}")
        xd = xd[None]
    if kd.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kd.ndim}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kd.shape
    if cin != kcin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    oh, ow = _conv_geometry(h, w, kh, kw, stride, zero_pad)

    if zero_pad:
        xp = np.zeros((n, cin, h + 2 * zero_pad, w + 2 * zero_pad), dtype=_F32)
        xp[:, :, zero_pad:zero_pad + h, zero_pad:zero_pad + w] = xd
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)          # (n, cin*kh*kw, oh*ow) f64
    kmat = kd.reshape(cout, cin * kh * kw).astype(_F64)
    out = np.matmul(kmat, cols)                          # (n, cout, oh*ow)
    out = _as_f32(out.reshape(n, cout, oh, ow))
    if not batched:
        out = out[0]

    hp, wp = h + 2 * zero_pad, w + 2 * zero_pad

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gm = g.reshape(n, cout, oh * ow).astype(_F64) if batched else \
            g.reshape(1, cout, oh * ow).astype(_F64)
        gcols = np.matmul(kmat.T, gm)                    # (n, cin*kh*kw, oh*ow)
        gxp = _col2im(gcols, n, cin, kh, kw, stride, oh, ow, hp, wp)
        gx = gxp[:, :, zero_pad:zero_pad + h, zero_pad:zero_pad + w]
        return _as_f32(gx if batched else gx[0])

    def vjp_k(g: np.ndarray) -> np.ndarray:
        gm = g.reshape(-1, cout, oh * ow).astype(_F64)
        gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
        return _as_f32(gk.reshape(cout, cin, kh, kw))

    return _result(out, (x, kernel), (vjp_x, vjp_k))


# ---------------------------------------------------------------------------
# elementwise and pooling

def relu(x):
    """Elementwise max(0, x)."""
    xd = _raw(x)
    out = np.maximum(xd, 0)
    mask = xd > 0

    def vjp(g):
        return _as_f32(g * mask)

    return _result(out, (x,), (vjp,))


def maxpool2d(x, window: int, stride: int):
    """Max over non-padded square windows; ties go to the lowest flat index."""
    xd = _raw(x)
    batched = xd.ndim == 4
    if not batched:
        if xd.ndim != 3:
            raise ShapeError(f"maxpool2d input must be rank 3 or 4, got {xd.ndim}")
        xd = xd[None]
    n, c, h, w = xd.shape
    if window < 1 or stride < 1:
        raise GeometryError("window and stride must be >= 1")
    if window > h or window > w:
        raise GeometryError(f"window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = np.empty((n, c, oh, ow, window, window), dtype=_F32)
    for u in range(window):
        for v in range(window):
            win[:, :, :, :, u, v] = xd[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if not batched:
        out = out[0]

    def vjp(g):
        gx = np.zeros((n, c, h, w), dtype=_F32)
        ni, ci, oi, oj = np.indices((n, c, oh, ow))
        hi = oi * stride + arg // window
        wi = oj * stride + arg % window
        np.add.at(gx, (ni, ci, hi, wi), g.reshape(n, c, oh, ow))
        return gx if batched else gx[0]

    return _result(out, (x,), (vjp,))


def global_avg_pool(x):
    """Spatial mean per channel: (C,H,W) -> (C,) or (N,C,H,W) -> (N,C)."""
    xd = _raw(x)
    if xd.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool input must be rank 3 or 4, got {xd.ndim}")
    h, w = xd.shape[-2:]
    out = _as_f32(xd.astype(_F64).mean(axis=(-2, -1)))

    def vjp(g):
        scale = np.asarray(g, dtype=_F32) / _F32(h * w)
        return np.broadcast_to(scale[..., None, None], xd.shape).astype(_F32)

    return _result(out, (x,), (vjp,))


def dense(x, weight, bias):
    """Affine map weight @ x + bias for (D,) input, or row-wise for (N,D)."""
    xd, wd, bd = _raw(x), _raw(weight), _raw(bias)
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[0] != bd.shape[0]:
        raise ShapeError(f"bad head shapes weight={wd.shape} bias={bd.shape}")
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"input dim {xd.shape[-1]} != weight dim {wd.shape[1]}")
    if xd.ndim not in (1, 2):
        raise ShapeError(f"dense input must be rank 1 or 2, got {xd.ndim}")
    x64, w64 = xd.astype(_F64), wd.astype(_F64)
    out = _as_f32(x64 @ w64.T + bd.astype(_F64))

    def vjp_x(g):
        return _as_f32(g.astype(_F64) @ w64)

    def vjp_w(g):
        g64 = g.astype(_F64)
        if xd.ndim == 1:
            return _as_f32(np.outer(g64, x64))
        return _as_f32(g64.T @ x64)

    def vjp_b(g):
        g64 = g.astype(_F64)
        return _as_f32(g64 if xd.ndim == 1 else g64.sum(axis=0))

    return _result(out, (x, weight, bias), (vjp_x, vjp_w, vjp_b))


def softmax(x):
    """Max-stabilized softmax along the last axis."""
    xd = _raw(x)
    if xd.ndim not in (1, 2) or xd.shape[-1] < 1:
        raise ShapeError(f"softmax expects rank 1 or 2 with K >= 1, got {xd.shape}")
    z = xd.astype(_F64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=-1, keepdims=True)
    out = _as_f32(p64)

    def vjp(g):
        g64 = g.astype(_F64)
        inner = (p64 * g64).sum(axis=-1, keepdims=True)
        return _as_f32(p64 * (g64 - inner))

    return _result(out, (x,), (vjp,))


def cross_entropy(probs, label):
    """Negative log probability of the label, input clamped at 1e-12.

    Rank-1 probs with an int label gives one value; rank-2 probs with a
    sequence of labels gives the mean over rows. Returns a float for plain
    tensors, a scalar Node when recorded on a tape.
    """
    pd = _raw(probs)
    if pd.ndim == 1:
        y = int(label)
        if not 0 <= y < pd.shape[0]:
            raise IndexError(f"label {y} out of range for {pd.shape[0]} classes")
        clamped = max(float(pd[y]), CROSS_ENTROPY_CLAMP)
        out = np.asarray(-np.log(clamped), dtype=_F32)

        def vjp(g):
            gp = np.zeros_like(pd)
            if pd[y] >= CROSS_ENTROPY_CLAMP:
                gp[y] = -float(g) / clamped
            return gp

        res = _result(out, (probs,), (vjp,))
        return res if isinstance(res, Node) else res.item()

    if pd.ndim == 2:
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (pd.shape[0],):
            raise ShapeError(f"expected {pd.shape[0]} labels, got {labels.shape}")
        if labels.min() < 0 or labels.max() >= pd.shape[1]:
            raise IndexError("label out of range")
        n = pd.shape[0]
        rows = np.arange(n)
        picked = pd[rows, labels].astype(_F64)
        clamped = np.maximum(picked, CROSS_ENTROPY_CLAMP)
        losses = -np.log(clamped)
        total = 0.0
        for v in losses:          # ascending-index accumulation
            total += float(v)
        out = np.asarray(total / n, dtype=_F32)

        def vjp(g):
            gp = np.zeros_like(pd)
            live = picked >= CROSS_ENTROPY_CLAMP
            gp[rows[live], labels[live]] = _as_f32(
                -float(g) / (n * clamped[live]))
            return gp

        res = _result(out, (probs,), (vjp,))
        return res if isinstance(res, Node) else res.item()

    raise ShapeError(f"cross_entropy expects rank 1 or 2 probs, got {pd.ndim}")


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    ad, bd = _raw(a), _raw(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"add shapes differ: {ad.shape} vs {bd.shape}")
    out = ad + bd
    return _result(out, (a, b), (lambda g: g, lambda g: g))


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    ad, bd = _raw(a), _raw(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"mul shapes differ: {ad.shape} vs {bd.shape}")
    out = ad * bd
    return _result(out, (a, b), (lambda g: _as_f32(g * bd), lambda g: _as_f32(g * ad)))


def tensor_sum(x):
    """Sum of all elements as a scalar, accumulated in float64."""
    xd = _raw(x)
    total = 0.0
    for v in xd.reshape(-1):      # ascending flat-index accumulation
        total += float(v)
    out = np.asarray(total, dtype=_F32)

    def vjp(g):
        return np.full(xd.shape, float(g), dtype=_F32)

    return _result(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# optimizer

class OptimizerState:
    """SGD-with-momentum state; velocity buffers are keyed by parameter name."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if not learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor],
             state: OptimizerState) -> dict[str, Tensor]:
    """One momentum-SGD update: v <- m*v + g; p <- p - lr*v."""
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names differ")
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape, dtype=_F32)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} != parameter shape {p.shape}")
        v = _F32(state.momentum) * v + g.data
        state.velocity[name] = v
        out[name] = _wrap(p.data - _F32(state.learning_rate) * v)
    return out
