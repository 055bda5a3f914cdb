"""Reverse-mode autodiff over dense tensors.

Values are float32. Reduction-style primitives (sums, means, dot products,
log-sum-exp, norms) carry 64-bit accumulators and round the result back to
the value dtype; elementwise ops and gemms run at the value dtype, where
accumulation chains are short. Feeding float64 tensors through the same
ops keeps full precision end to end, which is what finite_diff_grad uses
to get an oracle-grade forward evaluation.

The primitive set is closed: affine maps (matmul/affine/conv2d), ReLU and
tanh, reductions (sum/mean/log-sum-exp), L2 normalization, dot products,
plus structural ops (reshape/stack/gather). No implicit broadcasting --
shape mismatches raise ArgumentError.
"""

import numpy as np

from .errors import ArgumentError, ContractError, NumericError

_ALLOWED = (np.float32, np.float64)


def _result_dtype(*tensors):
    if any(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


class Tensor:
    """Immutable-by-convention value node; doubles as a tape node.

    Tapes are single-use and single-thread: build a graph, call backward
    once, read .grad off the leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != np.float64 or not isinstance(data, np.ndarray):
            # only explicit float64 arrays ride the high-precision path
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        # float64 tensors only occur on the finite-difference oracle's shadow
        # path; the public float32 surface keeps the runtime finite guard
        if arr.dtype == np.float32 and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.shape != ():
            raise ArgumentError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _make(out_data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(
        out_data,
        requires_grad=req,
        _parents=tuple(parents) if req else (),
        _backward=backward_fn if req else None,
    )


def _accum(node, g):
    if not node.requires_grad:
        return
    g = np.asarray(g, dtype=node.data.dtype)
    if node.grad is None:
        node.grad = g.copy() if g.base is not None else g
    else:
        node.grad = node.grad + g


def backward(root: Tensor):
    """Backprop from a scalar root; fills .grad on requires_grad nodes."""
    if root.data.shape != ():
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones((), dtype=root.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # free the closure so the tape cannot be replayed
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -np.asarray(g))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        g = np.asarray(g)
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out = a.data * c

    def bwd(g):
        _accum(a, np.asarray(g) * c)

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, np.asarray(g) * (a.data > 0))

    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, np.asarray(g) * (1.0 - out * out))

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# affine maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ArgumentError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        g = np.asarray(g)
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Rows of x through x @ w + b (b broadcast over rows, explicitly)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ArgumentError(f"affine: incompatible shapes {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ArgumentError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    def bwd(g):
        g = np.asarray(g)
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0, dtype=np.float64))

    return _make(out, (x, w, b), bwd)


def _conv2d_fwd(x, w, b):
    # channels-last column matrix: block slices copy fast, and the gemm
    # output lands in (B,H,W,O) without a gather
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    xn = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
    xn[:, p : p + H, p : p + W, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, k * k, C), dtype=x.dtype)
    i = 0
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, i, :] = xn[:, di : di + H, dj : dj + W, :]
            i += 1
    cols = cols.reshape(B * H * W, k * k * C)
    out = cols @ w.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(B, H, W, O).transpose(0, 3, 1, 2)), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded stride-1 convolution, odd kernel size up to 5."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ArgumentError("conv2d: expected x (B,C,H,W) and w (O,C,k,k)")
    O, C, k, k2 = w.shape
    if k != k2 or k % 2 == 0 or k > 5:
        raise ArgumentError(f"conv2d: kernel must be odd and <=5, got {k}x{k2}")
    if x.shape[1] != C:
        raise ArgumentError(f"conv2d: channel mismatch {x.shape[1]} vs {C}")
    if b.shape != (O,):
        raise ArgumentError(f"conv2d: bias shape {b.shape} != ({O},)")
    dt = _result_dtype(x, w, b)
    x_ = np.asarray(x.data, dtype=dt)
    w_ = np.asarray(w.data, dtype=dt)
    out, cols = _conv2d_fwd(x_, w_, np.asarray(b.data, dtype=dt))

    def bwd(g):
        B, _, H, W = x.shape
        g = np.asarray(g, dtype=dt)
        if w.requires_grad or b.requires_grad:
            gom = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, O)
            gw = (cols.T @ gom).reshape(k, k, C, O).transpose(3, 2, 0, 1)
            _accum(w, gw)
            _accum(b, g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            # input grad = same-padded conv with the flipped, transposed kernel
            wt = np.ascontiguousarray(w_[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv2d_fwd(g, wt, None)
            _accum(x, gx)

    return _make(out, (x, w, b), bwd)


def add_chan(x: Tensor, b: Tensor) -> Tensor:
    """x (B,C,H,W) + per-sample per-channel bias b (B,C)."""
    if x.data.ndim != 4 or b.data.ndim != 2 or x.shape[:2] != b.shape:
        raise ArgumentError(f"add_chan: shapes {x.shape} and {b.shape} incompatible")
    out = x.data + b.data[:, :, None, None]

    def bwd(g):
        g = np.asarray(g)
        _accum(x, g)
        _accum(b, g.sum(axis=(2, 3), dtype=np.float64))

    return _make(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulators)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.full(a.shape, np.asarray(g), dtype=a.data.dtype))

    return _make(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.full(a.shape, np.asarray(g, dtype=np.float64) / n, dtype=a.data.dtype))

    return _make(out, (a,), bwd)


def mean_axis0(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ArgumentError(f"mean_axis0: expected 2-d tensor, got {a.shape}")
    K = a.shape[0]
    out = np.asarray(a.data.mean(axis=0, dtype=np.float64), dtype=a.data.dtype)

    def bwd(g):
        gg = np.asarray(g, dtype=np.float64) / K
        _accum(a, np.broadcast_to(gg, a.shape))

    return _make(out, (a,), bwd)


def mean_spatial(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C) spatial average."""
    if x.data.ndim != 4:
        raise ArgumentError(f"mean_spatial: expected 4-d tensor, got {x.shape}")
    B, C, H, W = x.shape
    out = np.asarray(x.data.mean(axis=(2, 3), dtype=np.float64), dtype=x.data.dtype)

    def bwd(g):
        gg = np.asarray(g, dtype=np.float64) / (H * W)
        _accum(x, np.broadcast_to(gg[:, :, None, None], x.shape))

    return _make(out, (x,), bwd)


def avgpool2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ArgumentError(f"avgpool2: expected 4-d tensor with even H,W, got {x.shape}")
    B, C, H, W = x.shape
    out = np.asarray(
        x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5), dtype=np.float64),
        dtype=x.data.dtype,
    )

    def bwd(g):
        g4 = np.asarray(g) / 4.0
        _accum(x, np.repeat(np.repeat(g4, 2, axis=2), 2, axis=3))

    return _make(out, (x,), bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (B,C,H,W)."""
    if x.data.ndim != 4:
        raise ArgumentError(f"upsample2: expected 4-d tensor, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        B, C, H2, W2 = out.shape
        g = np.asarray(g)
        _accum(x, g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)))

    return _make(out, (x,), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ArgumentError(f"dot: expected equal 1-d shapes, got {a.shape} and {b.shape}")
    out = np.asarray((a.data * b.data).sum(dtype=np.float64), dtype=_result_dtype(a, b))

    def bwd(g):
        g = np.asarray(g)
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, (a, b), bwd)


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot of two (B,d) tensors -> (B,)."""
    if a.data.ndim != 2 or a.shape != b.shape:
        raise ArgumentError(f"rows_dot: expected equal 2-d shapes, got {a.shape} and {b.shape}")
    out = np.asarray((a.data * b.data).sum(axis=1, dtype=np.float64),
                     dtype=_result_dtype(a, b))

    def bwd(g):
        g = np.asarray(g)[:, None]
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, (a, b), bwd)


def logsumexp(a: Tensor, axis=None) -> Tensor:
    """Stable log-sum-exp over all elements (axis=None), or axis 0/1 of a 2-d tensor."""
    x = a.data
    if axis is None:
        m = x.max()
        out64 = m + np.log(np.exp(x - m).sum(dtype=np.float64))
        red_axis = None
    else:
        if a.data.ndim != 2 or axis not in (0, 1):
            raise ArgumentError(f"logsumexp: axis {axis} invalid for shape {a.shape}")
        m = x.max(axis=axis, keepdims=True)
        out64 = (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True,
                                              dtype=np.float64))).squeeze(axis)
        red_axis = axis
    out = np.asarray(out64, dtype=a.data.dtype)

    def bwd(g):
        g = np.asarray(g)
        if red_axis is None:
            soft = np.exp(x - out)
            _accum(a, soft * g)
        else:
            soft = np.exp(x - np.expand_dims(out, red_axis))
            _accum(a, soft * np.expand_dims(g, red_axis))

    return _make(out, (a,), bwd)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Normalize each row of a (B,d) tensor to unit L2 norm."""
    if a.data.ndim != 2:
        raise ArgumentError(f"l2_normalize_rows: expected 2-d tensor, got {a.shape}")
    x = a.data
    n64 = np.sqrt((x * x).sum(axis=1, keepdims=True, dtype=np.float64))
    n = np.maximum(n64, 1e-30).astype(x.dtype)
    y = x / n
    out = y

    def bwd(g):
        g = np.asarray(g)
        # grad is orthogonal to the normalized direction
        _accum(a, (g - y * (g * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(
            x.dtype)) / n)

    return _make(out, (a,), bwd)


def l2_normalize(a: Tensor) -> Tensor:
    """Normalize a 1-d tensor to unit L2 norm."""
    if a.data.ndim != 1:
        raise ArgumentError(f"l2_normalize: expected 1-d tensor, got {a.shape}")
    x = a.data
    n = x.dtype.type(max(float(np.sqrt((x * x).sum(dtype=np.float64))), 1e-30))
    y = x / n
    out = y

    def bwd(g):
        g = np.asarray(g)
        _accum(a, (g - y * float((g * y).sum(dtype=np.float64))) / n)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, np.asarray(g).reshape(a.shape))

    return _make(out, (a,), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ArgumentError(f"transpose2d: expected 2-d tensor, got {a.shape}")
    out = a.data.T

    def bwd(g):
        _accum(a, np.asarray(g).T)

    return _make(out, (a,), bwd)


def stack0(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ArgumentError("stack0: empty input")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ArgumentError("stack0: mismatched shapes")
    out = np.stack([t.data for t in tensors])

    def bwd(g):
        g = np.asarray(g)
        for i, t in enumerate(tensors):
            _accum(t, g[i])

    return _make(out, tuple(tensors), bwd)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Rows of a (V,d) table selected by an int index array."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ArgumentError("gather_rows: expected 2-d table and 1-d indices")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ArgumentError("gather_rows: index out of range")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, idx, np.asarray(g, dtype=np.float64))
        _accum(table, gt)

    return _make(out, (table,), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Per-row element pick from a (B,K) tensor -> (B,)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ArgumentError("take_rows: expected (B,K) tensor and (B,) indices")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ArgumentError("take_rows: index out of range")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        ga = np.zeros(a.shape, dtype=a.data.dtype)
        ga[rows, idx] = np.asarray(g, dtype=a.data.dtype)
        _accum(a, ga)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# public gradient API


def value_and_grad(f, x: Tensor):
    """Evaluate a scalar-valued composition and its gradient at x.

    Returns (float value, Tensor gradient) with the gradient matching x's
    shape. Raises ContractError if f is not scalar-valued.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor):
        raise ContractError("objective must return a Tensor")
    if out.data.shape != ():
        raise ContractError(f"objective must be scalar-valued, got shape {out.shape}")
    backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape, dtype=leaf.data.dtype)
    return float(out.data), Tensor(np.asarray(grad, dtype=np.float32))


def finite_diff_grad(f, x: Tensor, h: float) -> Tensor:
    """Central-difference gradient oracle, evaluated in float64.

    If f exposes eval_fd(base (*shape) f64, h) -> (2n,) f64 it supplies all
    perturbed values itself (interleaved +h/-h per coordinate). Otherwise,
    eval_many(arr (N,*shape) f64) -> (N,) f64 batches the evaluations, and
    failing both, f is called per coordinate on float64 tensors.
    """
    if not h > 0:
        raise ArgumentError(f"finite_diff_grad: h must be positive, got {h}")
    base = np.asarray(x.data, dtype=np.float64)
    n = base.size
    flat = base.reshape(-1)
    fd_fn = getattr(f, "eval_fd", None)
    many_fn = getattr(f, "eval_many", None)
    if callable(fd_fn):
        vals = np.asarray(fd_fn(base, h), dtype=np.float64)
        grad = (vals[0::2] - vals[1::2]) / (2.0 * h)
    elif callable(many_fn):
        pert = np.repeat(flat[None, :], 2 * n, axis=0)
        rows = np.arange(n)
        pert[2 * rows, rows] += h
        pert[2 * rows + 1, rows] -= h
        vals = np.asarray(many_fn(pert.reshape((2 * n,) + base.shape)), dtype=np.float64)
        grad = (vals[0::2] - vals[1::2]) / (2.0 * h)
    else:
        grad = np.empty(n, dtype=np.float64)
        for i in range(n):
            xp = flat.copy()
            xp[i] += h
            fp = float(f(Tensor(xp.reshape(base.shape))).data)
            xm = flat.copy()
            xm[i] -= h
            fm = float(f(Tensor(xm.reshape(base.shape))).data)
            grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(base.shape).astype(np.float32))
