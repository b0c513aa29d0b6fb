"""Finite-difference oracle for every differentiable op.

The reference forward passes here are written independently of the engine
(plain float64 loops over windows, no im2col), so a bug shared by forward
and backward in the engine cannot hide from the check.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor_engine as te

FD_STEP = 1e-3
REL_TOL = 1e-2
ABS_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# float64 reference forwards

def ref_conv2d(x, k, stride, pad):
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(oh):
        for j in range(ow):
            win = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(win, k, axes=([1, 2, 3], [1, 2, 3]))
    return out


def ref_maxpool2d(x, window, stride):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            win = x[:, :, i * stride:i * stride + window, j * stride:j * stride + window]
            out[:, :, i, j] = win.max(axis=(2, 3))
    return out


def ref_relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def ref_global_avg_pool(x):
    return np.asarray(x, dtype=np.float64).mean(axis=(-2, -1))


def ref_dense(x, w, b):
    x = np.asarray(x, dtype=np.float64)
    return x @ np.asarray(w, dtype=np.float64).T + np.asarray(b, dtype=np.float64)


def ref_softmax(x):
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ref_cross_entropy(p, label):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return -np.log(max(float(p[int(label)]), te.CROSS_ENTROPY_CLAMP))
    labels = np.asarray(label)
    picked = np.maximum(p[np.arange(p.shape[0]), labels], te.CROSS_ENTROPY_CLAMP)
    return float(np.mean(-np.log(picked)))


# ---------------------------------------------------------------------------
# harness

def central_difference(f, arrays, step=FD_STEP):
    """Central-difference gradients of scalar f w.r.t. each float64 array."""
    grads = []
    for idx in range(len(arrays)):
        base = np.array(arrays[idx], dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*_replace(arrays, idx, base))
            flat[i] = orig - step
            lo = f(*_replace(arrays, idx, base))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def _replace(arrays, idx, arr):
    out = list(arrays)
    out[idx] = arr
    return out


def max_relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class OpCheck:
    name: str
    instances: int
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


def _projected(op_out, rng):
    """Reduce an op output node to a scalar through a random projection."""
    weights = te.Tensor(rng.standard_normal(op_out.value.shape))
    return te.tensor_sum(te.mul(op_out, weights)), weights


def _check_instance(build, rng):
    """One random instance: returns the max relative error across inputs.

    ``build`` returns (input arrays, engine fn over Nodes, reference fn over
    float64 arrays, labels or None).
    """
    arrays, engine_fn, ref_fn = build(rng)
    tape = te.Tape()
    nodes = [tape.leaf(te.Tensor(a)) for a in arrays]
    out = engine_fn(*nodes)
    if isinstance(out, te.Node) and out.value.size != 1:
        loss, weights = _projected(out, rng)
        wd = weights.data.astype(np.float64)

        def scalar_ref(*arrs):
            return float(np.sum(ref_fn(*arrs) * wd))
    else:
        loss = out

        def scalar_ref(*arrs):
            return float(ref_fn(*arrs))
    grads = te.backward(tape, loss)
    analytic = [grads.of(nd).data for nd in nodes]
    f64_inputs = [nd.value.data.astype(np.float64) for nd in nodes]
    numeric = central_difference(scalar_ref, f64_inputs)
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))


# builders: each returns (arrays, engine_fn, ref_fn)

def _build_conv(rng):
    n = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 4))
    w = int(rng.integers(k, k + 4))
    x = rng.standard_normal((n, cin, h, w))
    ker = rng.standard_normal((cout, cin, k, k))
    return ([x, ker],
            lambda xn, kn: te.conv2d(xn, kn, stride, pad),
            lambda xa, ka: ref_conv2d(xa, ka, stride, pad))


def _build_relu(rng):
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 0.05] += 0.1          # keep away from the kink
    return [x], te.relu, ref_relu


def _build_maxpool(rng):
    window = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    h = int(rng.integers(window, window + 5))
    w = int(rng.integers(window, window + 5))
    x = rng.standard_normal((2, 2, h, w))
    return ([x],
            lambda xn: te.maxpool2d(xn, window, stride),
            lambda xa: ref_maxpool2d(xa, window, stride))


def _build_gap(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    return [x], te.global_avg_pool, ref_global_avg_pool


def _build_dense(rng):
    d = int(rng.integers(2, 8))
    kk = int(rng.integers(1, 6))
    batched = bool(rng.integers(0, 2))
    x = rng.standard_normal((3, d) if batched else (d,))
    w = rng.standard_normal((kk, d))
    b = rng.standard_normal((kk,))
    return [x, w, b], te.dense, ref_dense


def _build_softmax(rng):
    kk = int(rng.integers(2, 8))
    batched = bool(rng.integers(0, 2))
    x = 2.0 * rng.standard_normal((3, kk) if batched else (kk,))
    return [x], te.softmax, ref_softmax


def _build_cross_entropy(rng):
    kk = int(rng.integers(2, 8))
    raw = rng.uniform(0.05, 1.0, size=kk)
    probs = raw / raw.sum()
    y = int(rng.integers(0, kk))
    return ([probs],
            lambda pn: te.cross_entropy(pn, y),
            lambda pa: ref_cross_entropy(pa, y))


def _build_softmax_ce(rng):
    kk = int(rng.integers(2, 8))
    n = int(rng.integers(1, 4))
    z = 2.0 * rng.standard_normal((n, kk))
    ys = rng.integers(0, kk, size=n)
    return ([z],
            lambda zn: te.cross_entropy(te.softmax(zn), ys),
            lambda za: ref_cross_entropy(ref_softmax(za), ys))


def _build_add(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    return [a, b], te.add, lambda x, y: x + y


def _build_mul(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    return [a, b], te.mul, lambda x, y: x * y


def _build_sum(rng):
    x = rng.standard_normal((5, 4))
    return [x], te.tensor_sum, lambda xa: float(np.sum(xa))


OP_BUILDERS = {
    "conv2d": _build_conv,
    "relu": _build_relu,
    "maxpool2d": _build_maxpool,
    "global_avg_pool": _build_gap,
    "dense": _build_dense,
    "softmax": _build_softmax,
    "cross_entropy": _build_cross_entropy,
    "softmax_cross_entropy": _build_softmax_ce,
    "add": _build_add,
    "mul": _build_mul,
    "tensor_sum": _build_sum,
}


def check_op(name: str, instances: int = 100, seed: int = 0) -> OpCheck:
    tag = zlib.crc32(name.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence([seed, tag]))
    build = OP_BUILDERS[name]
    worst = 0.0
    for _ in range(instances):
        worst = max(worst, _check_instance(build, rng))
    return OpCheck(name, instances, worst, REL_TOL)


def run_all(instances: int = 100, seed: int = 0) -> list[OpCheck]:
    return [check_op(name, instances, seed) for name in OP_BUILDERS]
