"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation builds a fresh node holding its
parents and a backward closure, so each forward pass records a new tape.
All storage is float64; checkpoint files round values to float32.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of executed operations, for replay/determinism checks.

    Ops recorded while a tape is active can be re-executed with ``replay``;
    execution order is a topological order by construction.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.entries: list[tuple[str, callable, tuple[Tensor, ...], Tensor, np.ndarray]] = []

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("a tape is already active")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def replay(self) -> bool:
        """Re-run every recorded op from leaf data; True iff all outputs match bitwise."""
        computed: dict[int, np.ndarray] = {}
        ok = True
        for name, fn, inputs, out, snapshot in self.entries:
            args = [computed.get(id(t), t.data) for t in inputs]
            value = fn(*args)
            computed[id(out)] = value
            if not np.array_equal(value, snapshot):
                ok = False
        return ok


def _record(name: str, fn, inputs: tuple[Tensor, ...], out: Tensor) -> None:
    tape = Tape._active
    if tape is not None:
        tape.entries.append((name, fn, inputs, out, out.data.copy()))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise ValueError(f"{op}: non-finite values in input")


def _check_result(op: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise ValueError(f"{op}: produced non-finite values")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(name: str, inputs: tuple[Tensor, ...], value: np.ndarray, backward_fn) -> Tensor:
    """Assemble an output node; `backward_fn(g)` distributes grads to inputs."""
    _check_result(name, value)
    out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
    out._parents = inputs
    out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad leaf of a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    # only scalar-with-tensor broadcasting; anything else needs explicit reshape
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    _check_finite("add", a, b)
    out = make_op("add", (a, b), a.data + b.data, None)

    def bw(g):
        _accum(a, _reduce_to(g, a))
        _accum(b, _reduce_to(g, b))

    out._backward = bw
    _record("add", lambda x, y: x + y, (a, b), out)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    _check_finite("sub", a, b)
    out = make_op("sub", (a, b), a.data - b.data, None)

    def bw(g):
        _accum(a, _reduce_to(g, a))
        _accum(b, _reduce_to(-g, b))

    out._backward = bw
    _record("sub", lambda x, y: x - y, (a, b), out)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    _check_finite("mul", a, b)
    out = make_op("mul", (a, b), a.data * b.data, None)

    def bw(g):
        _accum(a, _reduce_to(g * b.data, a))
        _accum(b, _reduce_to(g * a.data, b))

    out._backward = bw
    _record("mul", lambda x, y: x * y, (a, b), out)
    return out


def _unary(name: str, a, fwd, dfwd) -> Tensor:
    a = as_tensor(a)
    _check_finite(name, a)
    value = fwd(a.data)
    out = make_op(name, (a,), value, None)

    def bw(g):
        _accum(a, g * dfwd(a.data, value))

    out._backward = bw
    _record(name, fwd, (a,), out)
    return out


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive")
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a) -> Tensor:
    return _unary("softplus", a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def absolute(a) -> Tensor:
    return _unary("abs", a, np.abs, lambda x, y: np.sign(x))


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    out = make_op("reshape", (a,), a.data.reshape(shape), None)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    out._backward = bw
    _record("reshape", lambda x: x.reshape(shape), (a,), out)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: needs a 2-d tensor, got shape {a.shape}")
    out = make_op("transpose", (a,), a.data.T.copy(), None)

    def bw(g):
        _accum(a, g.T)

    out._backward = bw
    _record("transpose", lambda x: x.T.copy(), (a,), out)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: needs at least one tensor")
    _check_finite("concat", *ts)
    value = np.concatenate([t.data for t in ts], axis=axis)
    out = make_op("concat", tuple(ts), value, None)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    out._backward = bw
    _record("concat", lambda *xs: np.concatenate(xs, axis=axis), ts, out)
    return out


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("sum", a)
    out = make_op("sum", (a,), np.array(a.data.sum()), None)

    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    out._backward = bw
    _record("sum", lambda x: np.array(x.sum()), (a,), out)
    return out


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("mean", a)
    out = make_op("mean", (a,), np.array(a.data.mean()), None)
    n = a.size

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    out._backward = bw
    _record("mean", lambda x: np.array(x.mean()), (a,), out)
    return out


# ---------------------------------------------------------------------------
# linear algebra / image ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    _check_finite("matmul", a, b)
    out = make_op("matmul", (a, b), a.data @ b.data, None)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out._backward = bw
    _record("matmul", lambda x, y: x @ y, (a, b), out)
    return out


def conv2d(x, weight, bias=None) -> Tensor:
    """Shape-preserving 2-d convolution: stride 1, zero padding k//2, odd kernels.

    x: (C_in, H, W); weight: (C_out, C_in, k, k); bias: optional (C_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected (C,H,W) and (O,C,k,k), got {x.shape} vs {weight.shape}")
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: channel mismatch {x.shape} vs {weight.shape}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} filters")
        inputs.append(bias)
    _check_finite("conv2d", *inputs)
    pad = kh // 2

    def fwd(xd, wd, bd=None):
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((cout, h, w))
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, u:u + h, v:v + w]
                out += np.tensordot(wd[:, :, u, v], patch, axes=(1, 0))
        if bd is not None:
            out += bd[:, None, None]
        return out

    value = fwd(*[t.data for t in inputs])
    out = make_op("conv2d", tuple(inputs), value, None)

    def bw(g):
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u:u + h, v:v + w] += np.tensordot(
                        weight.data[:, :, u, v], g, axes=(0, 0))
            _accum(x, gxp[:, pad:pad + h, pad:pad + w] if pad else gxp)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, u:u + h, v:v + w]
                    gw[:, :, u, v] = np.tensordot(g, patch, axes=((1, 2), (1, 2)))
            _accum(weight, gw)
        if bias is not None:
            _accum(bias, g.sum(axis=(1, 2)))

    out._backward = bw
    _record("conv2d", fwd, tuple(inputs), out)
    return out


def _upsample_axes(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # output i samples source (i + 0.5)/2 - 0.5, clamped at the edges
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f.astype(int), 0, n - 1)
    i1 = np.clip(i0f.astype(int) + 1, 0, n - 1)
    return i0, i1, frac


def upsample_bilinear2x(x) -> Tensor:
    """Bilinear 2x upsampling of a (C, H, W) map; constants are preserved."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"upsample: expected (C,H,W), got {x.shape}")
    _check_finite("upsample", x)
    c, h, w = x.shape
    r0, r1, rf = _upsample_axes(h)
    c0, c1, cf = _upsample_axes(w)

    def fwd(xd):
        rows = xd[:, r0, :] * (1 - rf)[None, :, None] + xd[:, r1, :] * rf[None, :, None]
        return rows[:, :, c0] * (1 - cf)[None, None, :] + rows[:, :, c1] * cf[None, None, :]

    out = make_op("upsample2x", (x,), fwd(x.data), None)

    def bw(g):
        grows = np.zeros((c, 2 * h, w))
        np.add.at(grows, (slice(None), slice(None), c0), g * (1 - cf)[None, None, :])
        np.add.at(grows, (slice(None), slice(None), c1), g * cf[None, None, :])
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), r0, slice(None)), grows * (1 - rf)[None, :, None])
        np.add.at(gx, (slice(None), r1, slice(None)), grows * rf[None, :, None])
        _accum(x, gx)

    out._backward = bw
    _record("upsample2x", fwd, (x,), out)
    return out


# ---------------------------------------------------------------------------
# optimization utilities


@dataclass
class SgdConfig:
    """Plain stochastic gradient descent settings."""

    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def sgd_step(params, config: SgdConfig) -> None:
    """p <- p - lr * grad for every parameter, then clear the grads."""
    items = params.items() if isinstance(params, dict) else ((p.name, p) for p in params)
    pairs = list(items)
    for name, p in pairs:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {name or '<unnamed>'} has no gradient")
    for _, p in pairs:
        p.data -= config.learning_rate * p.grad
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst_index: tuple[int, ...] | None


def grad_check(fn, point: Tensor, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of a scalar-valued fn against central differences.

    Error metric per element: |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be > 0, got {step}")
    point.grad = None
    loss = fn(point)
    backward(loss)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(point.data.copy())).item()
        flat[i] = orig - step
        lo = fn(Tensor(point.data.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else None
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_err, tol, max_err < tol, worst)


def init_param(name: str, shape, fan_in: int, seed: int = 0) -> Tensor:
    """Uniform [-k, k] parameter with k = 1/sqrt(fan_in), seeded by (seed, name)."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    k = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-k, k, size=tuple(shape)), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Write parameters as float32 records, sorted by name for stable bytes."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            data = params[name].data
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays keyed by parameter name."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        out[name] = values.astype(np.float64).reshape(dims)
    return out
