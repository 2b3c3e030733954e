"""Reverse-mode automatic differentiation on numpy arrays.

Defines the tensor/tape machinery plus every layer primitive the networks in
this package need: matmul, 1D/2D convolution, a multi-layer GRU, dense layers,
the usual activations, softmax, cross-entropy, SGD with classical momentum,
and a finite-difference gradient checker. The graph is rebuilt on every
forward pass (define-by-run); `reset_tape()` starts a fresh recording.

Ops accept either the single-example shapes documented on each function or the
same shape with one extra leading batch dimension. 64-bit arrays are used for
gradient-check tests, 32-bit for training runs.
"""

from __future__ import annotations

import struct

import numpy as np

# Validate finiteness of every op output when True. Kept off by default:
# the extra pass over each activation is measurable in training loops.
CHECK_FINITE = False


def set_finite_checks(enabled):
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


class Tape:
    """Append-only record of op outputs, in execution (= topological) order."""

    def __init__(self):
        self.nodes = []

    def record(self, tensor):
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape():
    return _TAPE


def reset_tape():
    _TAPE.reset()


class no_grad:
    """Context manager disabling tape recording (inference/eval paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-d float array with an optional gradient buffer.

    `grad` has the same shape as `data` once backward() has run. `node_id`
    indexes the tape for op outputs; leaves (parameters, inputs) keep None.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar used when composing layers.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Trainable tensor plus its momentum accumulator (zeros until stepped)."""

    def __init__(self, data, dtype=np.float64):
        self.tensor = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
        self.velocity = np.zeros_like(self.tensor.data)

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.data.shape


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, parents, backward_fn):
    """Wrap an op result; record on the tape only if gradients can flow."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values in op output")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        _TAPE.record(out)
    return out


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss):
    """Populate .grad on every requires_grad ancestor of a scalar loss.

    Seed gradient is 1.0; fan-out accumulates additively. Each tape node is
    visited exactly once, in reverse recording order.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    if loss.node_id is None:
        return
    needed = bytearray(loss.node_id + 1)
    needed[loss.node_id] = 1
    nodes = _TAPE.nodes
    for nid in range(loss.node_id, -1, -1):
        if not needed[nid]:
            continue
        node = nodes[nid]
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
            if parent.node_id is not None:
                needed[parent.node_id] = 1
        if node is not loss:
            node.grad = None  # free intermediate buffers early


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    def _back(g):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _make(a.data + b.data, (a, b), _back)


def mul(a, b):
    def _back(g):
        return _sum_to(g * b.data, a.data.shape), _sum_to(g * a.data, b.data.shape)

    return _make(a.data * b.data, (a, b), _back)


def one_minus(x):
    return _make(1.0 - x.data, (x,), lambda g: (-g,))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(x):
    """Elementwise max(x, 0); subgradient 0 at the kink."""
    mask = x.data > 0

    def _back(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), _back)


def tanh(x):
    y = np.tanh(x.data)

    def _back(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), _back)


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))

    def _back(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), _back)


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    if x.data.shape[-1] < 1:
        raise ValueError("softmax needs at least one class")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), _back)


def concat(parts, axis=-1):
    """Order-preserving concatenation; backward slices the gradient."""
    if not parts:
        raise ValueError("concat of an empty part list")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), _back)


def reshape(x, shape):
    orig = x.data.shape

    def _back(g):
        return (g.reshape(orig),)

    return _make(x.data.reshape(shape), (x,), _back)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def _back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), _back)


def index_axis(x, axis, i):
    """Select index i along `axis`, dropping that axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = i
    idx = tuple(idx)

    def _back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), _back)


def tsum(x, axis=None, keepdims=False):
    def _back(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), _back)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]

    def _back(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, x.data.shape).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), _back)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product. Supports [m,k]@[k,n] and stacked [B,m,k]@[k,n]."""
    if a.data.shape[-1] != b.data.shape[0] or b.ndim != 2:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    if a.ndim == 2:
        def _back(g):
            return g @ b.data.T, a.data.T @ g

        return _make(a.data @ b.data, (a, b), _back)
    if a.ndim == 3:
        def _back(g):
            da = g @ b.data.T
            db = np.einsum("bik,bij->kj", a.data, g)
            return da, db

        return _make(a.data @ b.data, (a, b), _back)
    raise ValueError(f"matmul: unsupported rank {a.ndim} for shape {a.data.shape}")


def linear(x, w, b=None):
    """Affine map y = x @ w + b for x of shape [.., D], w [D, M], b [M]."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# Convolutions (cross-correlation convention, no kernel flip)
# ---------------------------------------------------------------------------

def _conv_out_len(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x, w, b=None, stride=1, padding=0):
    """1-D cross-correlation.

    x: [C_in, L] or [B, C_in, L]; w: [C_out, C_in, K]; b: [C_out] or None.
    out[t] = sum_i w[i] * x[t*stride + i - padding], zero outside the input.
    """
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    squeeze = x.ndim == 2
    xb = reshape(x, (1,) + x.data.shape) if squeeze else x
    B, C, L = xb.data.shape
    F, Cw, K = w.data.shape
    if Cw != C:
        raise ValueError(f"conv1d: input channels {C} do not match weight shape {w.data.shape}")
    if K > L + 2 * padding:
        raise ValueError(
            f"conv1d: kernel {K} exceeds padded length {L + 2 * padding} "
            f"(input shape {x.data.shape}, padding {padding})"
        )
    Lo = _conv_out_len(L, K, stride, padding)

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding))) if padding else xb.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    out = np.einsum("bclk,fck->bfl", windows, w.data)
    if b is not None:
        out = out + b.data[:, None]

    def _back(g):
        db = g.sum(axis=(0, 2)) if b is not None else None
        dw = np.einsum("bclk,bfl->fck", windows, g)
        Lp = L + 2 * padding
        dxp = np.zeros((B, C, Lp), dtype=g.dtype)
        for i in range(K):
            contrib = np.einsum("bfl,fc->bcl", g, w.data[:, :, i])
            dxp[:, :, i : i + stride * Lo : stride] += contrib
        dx = dxp[:, :, padding : padding + L] if padding else dxp
        return (dx, dw) if b is None else (dx, dw, db)

    parents = (xb, w) if b is None else (xb, w, b)
    y = _make(out, parents, _back)
    return reshape(y, y.data.shape[1:]) if squeeze else y


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """2-D cross-correlation.

    x: [C_in, H, W] or [B, C_in, H, W]; w: [C_out, C_in, Kh, Kw].
    """
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: strides must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xb = reshape(x, (1,) + x.data.shape) if squeeze else x
    B, C, H, W = xb.data.shape
    F, Cw, Kh, Kw = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d: input channels {C} do not match weight shape {w.data.shape}")
    if Kh > H + 2 * ph or Kw > W + 2 * pw:
        raise ValueError(
            f"conv2d: kernel ({Kh}, {Kw}) exceeds padded input "
            f"({H + 2 * ph}, {W + 2 * pw})"
        )
    Ho = _conv_out_len(H, Kh, sh, ph)
    Wo = _conv_out_len(W, Kw, sw, pw)

    xp = np.pad(xb.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xb.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (Kh, Kw), axis=(2, 3))[
        :, :, ::sh, ::sw, :, :
    ]
    out = np.einsum("bchwij,fcij->bfhw", windows, w.data)
    if b is not None:
        out = out + b.data[:, None, None]

    def _back(g):
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        dw = np.einsum("bchwij,bfhw->fcij", windows, g)
        Hp, Wp = H + 2 * ph, W + 2 * pw
        dxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        for i in range(Kh):
            for j in range(Kw):
                contrib = np.einsum("bfhw,fc->bchw", g, w.data[:, :, i, j])
                dxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += contrib
        dx = dxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else dxp
        return (dx, dw) if b is None else (dx, dw, db)

    parents = (xb, w) if b is None else (xb, w, b)
    y = _make(out, parents, _back)
    return reshape(y, y.data.shape[1:]) if squeeze else y


def maxpool1d(x, kernel=2):
    """Non-overlapping 1-D max pool (stride == kernel); tail remainder dropped."""
    squeeze = x.ndim == 2
    xb = reshape(x, (1,) + x.data.shape) if squeeze else x
    B, C, L = xb.data.shape
    Lo = L // kernel
    trimmed = xb.data[:, :, : Lo * kernel].reshape(B, C, Lo, kernel)
    arg = trimmed.argmax(axis=3)
    out = np.take_along_axis(trimmed, arg[..., None], axis=3)[..., 0]

    def _back(g):
        dwin = np.zeros((B, C, Lo, kernel), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=3)
        dx = np.zeros_like(xb.data)
        dx[:, :, : Lo * kernel] = dwin.reshape(B, C, Lo * kernel)
        return (dx,)

    y = _make(out, (xb,), _back)
    return reshape(y, y.data.shape[1:]) if squeeze else y


def global_avg_pool(x):
    """Mean over all trailing spatial axes: [B,C,L]->[B,C] or [B,C,H,W]->[B,C]."""
    axes = tuple(range(2, x.ndim))
    return tmean(x, axis=axes)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

CROSS_ENTROPY_FLOOR = 1e-12


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class.

    probs: [C], [1, C] or [B, C] rows from softmax; labels: int or int array
    of length B. The probability is floored at 1e-12 inside the log.
    """
    p2 = probs.data.reshape(-1, probs.data.shape[-1])
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, C = p2.shape
    if y.shape[0] != B:
        raise ValueError(f"cross_entropy: {B} rows but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= C:
        raise ValueError(f"cross_entropy: label out of range for {C} classes")
    picked = np.maximum(p2[np.arange(B), y], CROSS_ENTROPY_FLOOR)
    loss = np.asarray(-np.log(picked).mean(), dtype=probs.dtype)

    def _back(g):
        dp = np.zeros_like(p2)
        dp[np.arange(B), y] = -g / (B * picked)
        return (dp.reshape(probs.data.shape),)

    return _make(loss, (probs,), _back)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

class GRU:
    """Stacked GRU, many-to-1.

    Gate equations per step (sigma = logistic):
        z = sigma(W_z x + U_z h + b_z)
        r = sigma(W_r x + U_r h + b_r)
        n = tanh(W_n x + r * (U_n h + b_un) + b_wn)
        h' = (1 - z) * n + z * h

    Input-side weights are fused as W: [D, 3H] with column blocks (z, r, n);
    recurrent weights split as U_zr: [H, 2H] and U_n: [H, H].
    """

    def __init__(self, input_dim, hidden, layers=2, rng=None, dtype=np.float64, name="gru"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden = hidden
        self.layers = layers
        self.name = name
        self.params = {}
        for layer in range(layers):
            d = input_dim if layer == 0 else hidden
            w_bound = 1.0 / np.sqrt(d)
            u_bound = 1.0 / np.sqrt(hidden)
            p = {
                "W": rng.uniform(-w_bound, w_bound, (d, 3 * hidden)),
                "U_zr": rng.uniform(-u_bound, u_bound, (hidden, 2 * hidden)),
                "U_n": rng.uniform(-u_bound, u_bound, (hidden, hidden)),
                "b_z": rng.uniform(-u_bound, u_bound, hidden),
                "b_r": rng.uniform(-u_bound, u_bound, hidden),
                "b_un": rng.uniform(-u_bound, u_bound, hidden),
                "b_wn": rng.uniform(-u_bound, u_bound, hidden),
            }
            for key, value in p.items():
                self.params[f"{name}.l{layer}.{key}"] = Parameter(value, dtype=dtype)

    def named_parameters(self):
        return dict(self.params)

    def _layer(self, layer, key):
        return self.params[f"{self.name}.l{layer}.{key}"].tensor

    def forward(self, x, h0=None):
        """Run the stack over a sequence.

        x: [T, D] or [B, T, D]. h0: optional Tensor [layers, H] shared across
        the batch. Returns (out_last, h_layers): the top layer's final hidden
        state ([1, H] or [B, H]) and the per-layer final states (list).
        """
        squeeze = x.ndim == 2
        xb = reshape(x, (1,) + x.data.shape) if squeeze else x
        B, T, _ = xb.data.shape
        if T == 0:
            raise ValueError("GRU forward on an empty sequence")
        H = self.hidden

        zeros_bh = Tensor(np.zeros((B, H), dtype=x.dtype))
        seq = xb
        h_layers = []
        for layer in range(self.layers):
            if h0 is None:
                h = zeros_bh
            else:
                h = add(Tensor(np.zeros((B, H), dtype=x.dtype)), narrow(h0, 0, layer, 1))
            xw = matmul(seq, self._layer(layer, "W"))  # [B, T, 3H], one GEMM
            b_z = self._layer(layer, "b_z")
            b_r = self._layer(layer, "b_r")
            b_un = self._layer(layer, "b_un")
            b_wn = self._layer(layer, "b_wn")
            u_zr = self._layer(layer, "U_zr")
            u_n = self._layer(layer, "U_n")
            outputs = []
            for t in range(T):
                xw_t = index_axis(xw, 1, t)  # [B, 3H]
                hu = matmul(h, u_zr)  # [B, 2H]
                z = sigmoid(add(add(narrow(xw_t, 1, 0, H), narrow(hu, 1, 0, H)), b_z))
                r = sigmoid(add(add(narrow(xw_t, 1, H, H), narrow(hu, 1, H, H)), b_r))
                hn = add(matmul(h, u_n), b_un)
                n = tanh(add(add(narrow(xw_t, 1, 2 * H, H), mul(r, hn)), b_wn))
                h = add(mul(one_minus(z), n), mul(z, h))
                outputs.append(h)
            h_layers.append(h)
            if layer < self.layers - 1:
                # Next layer consumes this layer's full hidden sequence.
                seq = concat([reshape(o, (B, 1, H)) for o in outputs], axis=1)
        out_last = h_layers[-1]
        return out_last, h_layers


def gru_forward(x, gru, h0=None):
    """Many-to-1 GRU pass returning (out_last [1,H], h_final [layers,H]).

    x: [T, D]; h0: optional Tensor [layers, H].
    """
    out_last, h_layers = gru.forward(x, h0=h0)
    h_final = concat(h_layers, axis=0)
    return out_last, h_final


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_momentum_step(params, lr, mu):
    """Classical momentum: v <- mu*v + g; p <- p - lr*v. Grads zeroed after."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ValueError("sgd_momentum_step: parameter has no gradient")
        p.velocity *= mu
        p.velocity += g
        p.tensor.data -= lr * p.velocity
        p.tensor.grad = None


def zero_grads(params):
    for p in params:
        p.tensor.grad = None


def uniform_init(rng, shape, fan_in, dtype=np.float64):
    """Uniform in +-1/sqrt(fan_in); the init used by every layer here."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor. The relative error per element is
    |a - n| / max(|a|, |n|, 1e-8); the max over elements is returned.
    """
    x.data = np.ascontiguousarray(x.data)
    reset_tape()
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        reset_tape()
        hi = f(x).item()
        flat[i] = orig - eps
        reset_tape()
        lo = f(x).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)
    reset_tape()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(loss_fn, params, eps=1e-5, max_elems=0, rng=None,
                      min_denom=0.0, abs_floor=1e-7):
    """Gradient-check a loss against a set of Parameters.

    loss_fn() rebuilds the forward pass from current parameter values.
    When max_elems > 0, checks a subset per parameter: the largest-gradient
    coordinates plus random ones (all coordinates otherwise).

    Coordinates whose gradient magnitude falls below `min_denom` are beyond
    what central differences can resolve relative to the loss scale in
    64-bit; those are held to the absolute bound `abs_floor` instead of the
    relative formula. min_denom=0 compares every coordinate relatively.
    Returns the max relative error over the relatively-compared coordinates
    (1.0 is reported if an absolute-bound coordinate fails).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    reset_tape()
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.tensor.data.reshape(-1)
        aflat = a.reshape(-1)
        if max_elems and flat.size > max_elems:
            top = np.argsort(-np.abs(aflat))[: max_elems // 2]
            rand = rng.choice(flat.size, size=max_elems - top.size, replace=False)
            coords = np.unique(np.concatenate([top, rand]))
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            reset_tape()
            hi = loss_fn().item()
            flat[i] = orig - eps
            reset_tape()
            lo = loss_fn().item()
            flat[i] = orig
            n = (hi - lo) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(n))
            if denom < min_denom:
                if abs(aflat[i] - n) > abs_floor:
                    worst = max(worst, 1.0)
                continue
            worst = max(worst, abs(aflat[i] - n) / max(denom, 1e-8))
    reset_tape()
    zero_grads(params)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"XDOMCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, named_params):
    """Write parameters as binary records.

    Layout (all integers little-endian u32): magic "XDOMCKPT", version, then
    per parameter: name length, UTF-8 name, rank, dims, raw float32 data.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name in sorted(named_params):
            arr = named_params[name]
            data = getattr(arr, "data", arr)
            raw = np.ascontiguousarray(data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            fh.write(raw.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as {name: float32 ndarray}."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"truncated checkpoint data for parameter {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return out
