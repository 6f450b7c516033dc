"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward()`` walks the graph once in reverse topological
order. Gradients accumulate into ``.grad`` buffers: calling backward twice
without clearing adds the two gradients (the optimizer is responsible for
clearing at step boundaries). There is no global tape, so independent
graphs can be evaluated concurrently.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class StateError(RuntimeError):
    """Operation requires state that has not been initialized."""


def _as_dtype(dtype):
    dt = np.dtype(dtype)
    if dt not in FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """N-dimensional dense array participating in a reverse-mode graph.

    ``data`` is a numpy array (float32 for training, float64 for gradient
    checking). ``grad`` is lazily allocated with the same shape on first
    backward accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=_as_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op or 'leaf'})"

    def detach(self):
        """Same values, cut off from the graph. Shares the data buffer."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``.grad`` of every reachable tensor with d(self)/d(tensor).

        ``self`` must hold a single scalar. Gradients accumulate into any
        existing ``.grad`` buffers rather than overwriting them.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar used by models and tests.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording; forwards run data-only."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _result(data, parents, backward, op):
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    # Reduce a broadcast gradient back to the operand's shape.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))
    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))
    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
    return _result(a.data * b.data, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0
    def backward(g):
        _accumulate(x, g * mask)
    return _result(np.where(mask, x.data, 0), (x,), backward, "relu")


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def linear(x, weight, bias):
    """Dense layer: ``x @ weight.T + bias`` for x of shape B x I, weight O x I."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear expects (B,I) x (O,I), got {x.data.shape} and {weight.data.shape}")
    def backward(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        _accumulate(bias, g.sum(axis=0))
    return _result(np.dot(x.data, weight.data.T) + bias.data, (x, weight, bias), backward, "linear")


def pad2d(x, pad, value=0.0):
    """Pad the two trailing spatial axes of a B x C x H x W tensor on all sides."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    def backward(g):
        _accumulate(x, g[:, :, pad:-pad, pad:-pad])
    return _result(np.pad(x.data, widths, constant_values=value), (x,), backward, "pad2d")


def _conv_windows(xp, kh, kw, stride, out_h, out_w):
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (b, c, out_h, out_w, kh, kw),
        (sb, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def conv2d(x, weight, stride=1, padding=0):
    """2D cross-correlation of B x C x H x W input with F x C x kH x kW kernels.

    Bias-free; output spatial extent is floor((H + 2*padding - kH)/stride) + 1.
    """
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4D input and weight")
    b, c, h, w = x.data.shape
    f, c2, kh, kw = weight.data.shape
    if c != c2:
        raise ShapeError(f"input channels {c} != weight channels {c2}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w_mat = weight.data.reshape(f, -1)
    x_col = _conv_windows(xp, kh, kw, stride, out_h, out_w).transpose(0, 2, 3, 1, 4, 5)
    x_col = np.ascontiguousarray(x_col).reshape(b * out_h * out_w, c * kh * kw)
    out = np.dot(x_col, w_mat.T).reshape(b, out_h, out_w, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * out_h * out_w, f)
        if weight.requires_grad:
            # x_col is rebuilt from the padded input to avoid holding the
            # unfolded copy for the whole forward pass.
            col = _conv_windows(xp, kh, kw, stride, out_h, out_w).transpose(0, 2, 3, 1, 4, 5)
            col = np.ascontiguousarray(col).reshape(b * out_h * out_w, c * kh * kw)
            _accumulate(weight, np.dot(g_mat.T, col).reshape(weight.data.shape))
        if x.requires_grad:
            dcol = np.dot(g_mat, w_mat).reshape(b, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += dcol[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, dxp)

    return _result(out, (x, weight), backward, "conv2d")


def max_pool2d(x, kernel, stride, padding=0):
    """Max pooling over B x C x H x W; padded cells never win (padded with -inf)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    b, c, h, w = x.data.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"pool kernel {kernel} too large for input {h}x{w} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    windows = _conv_windows(xp, kernel, kernel, stride, out_h, out_w)
    flat = windows.reshape(b, c, out_h, out_w, kernel * kernel)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def backward(g):
        ki, kj = np.divmod(arg, kernel)
        bi, ci, hi, wi = np.indices(arg.shape, sparse=True)
        rows = hi * stride + ki
        cols = wi * stride + kj
        dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        np.add.at(dxp, (bi, ci, rows, cols), g)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        _accumulate(x, dxp)

    return _result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def global_avg_pool(x):
    """Spatial mean: B x C x H x W -> B x C."""
    b, c, h, w = x.data.shape
    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))
    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def concat(tensors, axis=1):
    """Concatenate along ``axis``; all other extents must match."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or any(a != b for i, (a, b) in enumerate(zip(s, base)) if i != axis):
            raise ShapeError(f"concat shapes differ off-axis: {base} vs {s}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def backward(g):
        for t, lo, hi in zip(tensors, offsets, offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def _canonical_reduce(stack, op):
    # Sum/product over the pod axis in sorted value order. Sorting makes the
    # reduction a function of the multiset of operands, so reordering the
    # pods (with their weights) reproduces the output bit for bit.
    ordered = np.sort(stack, axis=0)
    out = ordered[0].copy()
    for i in range(1, ordered.shape[0]):
        if op == "sum":
            out += ordered[i]
        else:
            out *= ordered[i]
    return out


def concat_linear(features, weight, bias):
    """Dense head over the concatenation of k feature blocks.

    Equivalent to ``linear(concat(features), weight, bias)`` but accumulates
    the per-block partial products in canonical order, so permuting blocks
    together with the matching weight columns is bit-exact.
    """
    features = list(features)
    sizes = [f.data.shape[1] for f in features]
    if weight.data.shape[1] != sum(sizes):
        raise ShapeError(
            f"weight expects {weight.data.shape[1]} input features, blocks sum to {sum(sizes)}")
    offsets = np.cumsum([0] + sizes)
    blocks = [np.ascontiguousarray(weight.data[:, lo:hi]) for lo, hi in zip(offsets, offsets[1:])]
    partials = np.stack([np.dot(f.data, blk.T) for f, blk in zip(features, blocks)])
    out = _canonical_reduce(partials, "sum") + bias.data

    def backward(g):
        for f, blk, lo, hi in zip(features, blocks, offsets, offsets[1:]):
            _accumulate(f, g @ blk)
            if weight.requires_grad:
                if weight.grad is None:
                    weight.grad = np.zeros_like(weight.data)
                weight.grad[:, lo:hi] += g.T @ f.data
        _accumulate(bias, g.sum(axis=0))

    return _result(out, list(features) + [weight, bias], backward, "concat_linear")


def elementwise_scale_combine(features, scales, mode="sum"):
    """Combine k B x L pod features as ``mode``-reduction of ``scale_i * f_i``.

    ``scales`` are k length-L per-channel multiplier vectors. ``mode`` is
    "sum" or "product". Reduction order is canonicalized as in
    ``concat_linear`` so pod order does not affect the bits.
    """
    if mode not in ("sum", "product"):
        raise ValueError(f"unknown combine mode {mode!r}")
    features = list(features)
    scales = list(scales)
    if len(features) != len(scales):
        raise ShapeError(f"{len(features)} features but {len(scales)} scales")
    length = features[0].data.shape[1]
    for t in features[1:]:
        if t.data.shape[1] != length:
            raise ShapeError(f"pod feature lengths differ: {length} vs {t.data.shape[1]}")
    for s in scales:
        if s.data.shape != (length,):
            raise ShapeError(f"scale shape {s.data.shape} != ({length},)")

    scaled = np.stack([f.data * s.data[None, :] for f, s in zip(features, scales)])
    out = _canonical_reduce(scaled, mode)

    def backward(g):
        if mode == "sum":
            dscaled = np.broadcast_to(g, scaled.shape)
        else:
            k = scaled.shape[0]
            prefix = np.ones_like(scaled)
            suffix = np.ones_like(scaled)
            for i in range(1, k):
                prefix[i] = prefix[i - 1] * scaled[i - 1]
                suffix[k - 1 - i] = suffix[k - i] * scaled[k - i]
            dscaled = g * prefix * suffix
        for i, (f, s) in enumerate(zip(features, scales)):
            _accumulate(f, dscaled[i] * s.data[None, :])
            _accumulate(s, (dscaled[i] * f.data).sum(axis=0))

    return _result(out, features + scales, backward, "scale_combine")


class BNBuffers:
    """Running mean/var state for one batch-norm layer.

    ``initialized`` flips on the first training-mode update; eval mode
    before that raises ``StateError``.
    """

    __slots__ = ("mean", "var", "initialized")

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False


def batch_norm2d(x, gamma, beta, buffers, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of a B x C x H x W tensor.

    Training mode normalizes with batch statistics over (B, H, W) and
    updates the running buffers in place as
    ``running <- (1 - momentum) * running + momentum * batch`` (running
    variance uses the unbiased batch estimate). Eval mode normalizes with
    the running statistics. Output is ``gamma * normalized + beta``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    b, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    n = b * h * w

    if training:
        if n < 2:
            raise ValueError(f"training-mode batch norm needs B*H*W >= 2, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        buffers.mean = (1.0 - momentum) * buffers.mean + momentum * mean
        buffers.var = (1.0 - momentum) * buffers.var + momentum * (var * n / (n - 1))
        buffers.initialized = True
    else:
        if not buffers.initialized:
            raise StateError("eval-mode batch norm before any training update of running stats")
        mean = buffers.mean
        var = buffers.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            # Full derivative through the batch statistics.
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        _accumulate(x, dx)

    return _result(out, (x, gamma, beta), backward, "batch_norm2d")


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of B x P logits against integer labels, log-sum-exp stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be B x P, got {logits.data.shape}")
    labels = np.asarray(labels)
    b, p = logits.data.shape
    if labels.shape != (b,):
        raise ValueError(f"labels must have length {b}, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= p:
        bad = int(np.argmax((labels < 0) | (labels >= p)))
        raise ValueError(f"label {labels[bad]} at index {bad} outside [0, {p})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(b), labels].mean()

    def backward(g):
        d = np.exp(log_probs)
        d[np.arange(b), labels] -= 1.0
        _accumulate(logits, d * (g / b))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent")
