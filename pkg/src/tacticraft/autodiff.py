"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Float64 numpy arrays throughout, a tape-free graph (each result links to its
parents and a backward closure), and the categorical primitives the policy
and trainer are built from: masked log-softmax, categorical and Bernoulli KL,
and a layer-normalized LSTM cell.

Thread-safety: building a graph and calling backward on it is single-threaded
per graph; independent graphs may live on independent threads as long as no
parameter tensor is mutated concurrently.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidMaskError, NonFiniteError

MASK_FILL = -1e30  # additive stand-in for -inf; keeps exp() at exactly 0.0
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    Leaf tensors (constructed directly) with ``requires_grad=True`` carry a
    same-shape ``grad`` array that backward passes accumulate into
    additively; running backward twice without ``zero_grad`` doubles it.
    Tensors with ``requires_grad=False`` are frozen: no gradient is ever
    written into them and no graph edges grow through them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NonFiniteError("tensor created with NaN/Inf values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A graph-free view of the same values."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._bwd = None
        return out

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor into every reachable leaf.

        Visits each graph node exactly once in reverse topological order.
        Gradients land only in leaves that require grad; frozen tensors are
        never touched.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError("seed gradient shape mismatch")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            nid = id(node)
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        flowing = {id(self): seed}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._bwd is None:
                # leaf: accumulate persistently
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if not parent.requires_grad or pg is None:
                    continue
                pid = id(parent)
                if pid in flowing:
                    flowing[pid] = flowing[pid] + pg
                else:
                    flowing[pid] = pg

    # --- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _all_finite(arr: np.ndarray) -> bool:
    """Finiteness test with a one-pass fast path: NaN/Inf survives into the
    sum. A failed sum is confirmed elementwise, since adding finite values
    near the float64 ceiling can overflow the sum alone."""
    if np.isfinite(arr.sum()):
        return True
    return bool(np.all(np.isfinite(arr)))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data, parents, bwd, op: str) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise and linear ops ------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _result(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(data, (a, b), bwd, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """2-D matrix product; backward is dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), bwd, "matmul")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    gate = a.data > 0

    def bwd(g):
        return (g * gate,)

    return _result(np.maximum(a.data, 0.0), (a,), bwd, "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _result(s, (a,), bwd, "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - t * t),)

    return _result(t, (a,), bwd, "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)

    def bwd(g):
        return (g * e,)

    return _result(e, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(ad)
    return _result(data, (a,), bwd, "log")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = _as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * s,)

    return _result(data, (a,), bwd, "softplus")


# --- shape ops ------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _result(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(tensors, axis=-1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(ts), bwd, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), bwd, "narrow")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(
            g, axis if isinstance(axis, tuple) else (axis,))
        return (np.broadcast_to(gg, shape).copy(),)

    return _result(data, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# --- normalization and distribution ops -----------------------------------

def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, (a,), bwd, "layer_norm")


def _check_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {shape}")
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("mask leaves a fully-masked row: nothing to normalize")
    return mask


def log_softmax(a, mask=None) -> Tensor:
    """Log-probabilities along the last axis.

    Masked-out entries are pushed to an effective log-probability of
    MASK_FILL before normalization (their probability underflows to exactly
    zero) and receive an exactly-zero gradient.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        mask = _check_mask(mask, x.shape)
        x = np.where(mask, x, MASK_FILL)
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def bwd(g):
        gx = g - sm * g.sum(axis=-1, keepdims=True)
        if mask is not None:
            gx = np.where(mask, gx, 0.0)
        return (gx,)

    return _result(y, (a,), bwd, "log_softmax")


def softmax(a, mask=None) -> Tensor:
    return exp(log_softmax(a, mask=mask))


def select_index(a, index) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise DimensionError(
            f"index shape {idx.shape} must match leading dims of {a.data.shape}")
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _result(picked, (a,), bwd, "select_index")


def entity_dot(query, keys) -> Tensor:
    """Pointer scores: query [N,d] against per-entity keys [N,E,d] -> [N,E]."""
    query, keys = _as_tensor(query), _as_tensor(keys)
    if query.ndim != 2 or keys.ndim != 3 or query.shape[0] != keys.shape[0] \
            or query.shape[1] != keys.shape[2]:
        raise DimensionError(
            f"entity_dot expects [N,d] and [N,E,d], got {query.shape}, {keys.shape}")
    qd, kd = query.data, keys.data
    data = np.einsum("nd,ned->ne", qd, kd)

    def bwd(g):
        return np.einsum("ne,ned->nd", g, kd), np.einsum("ne,nd->ned", g, qd)

    return _result(data, (query, keys), bwd, "entity_dot")


def kl_categorical(p_logits, q_logits, mask=None, detach_p: bool = True) -> Tensor:
    """KL(p‖q) between the categorical distributions the logits induce.

    Reduced over the last axis; a 1-D input yields a scalar. Both sides are
    log-softmaxed internally, under the same optional mask. With
    ``detach_p`` (the default) the p side is treated as a frozen teacher and
    gradient flows into ``q_logits`` only.
    """
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(
            f"kl_categorical shapes differ: {p_logits.shape} vs {q_logits.shape}")
    p_in = p_logits.detach() if detach_p else p_logits
    lp = log_softmax(p_in, mask=mask)
    lq = log_softmax(q_logits, mask=mask)
    # masked entries: exp(lp) underflows to exactly 0, so they contribute 0
    return tsum(mul(exp(lp), sub(lp, lq)), axis=-1)


def bernoulli_kl(p_logits, q_logits, mask=None, detach_p: bool = True) -> Tensor:
    """Elementwise KL between Bernoulli(σ(p)) and Bernoulli(σ(q)).

    Same shape as the inputs; masked entries contribute exactly 0.
    """
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(
            f"bernoulli_kl shapes differ: {p_logits.shape} vs {q_logits.shape}")
    p_in = p_logits.detach() if detach_p else p_logits
    sp = sigmoid(p_in)
    log_sp, log_1sp = neg(softplus(neg(p_in))), neg(softplus(p_in))
    log_sq, log_1sq = neg(softplus(neg(q_logits))), neg(softplus(q_logits))
    kl = add(mul(sp, sub(log_sp, log_sq)),
             mul(sub(1.0, sp), sub(log_1sp, log_1sq)))
    if mask is not None:
        kl = mul(kl, np.asarray(mask, dtype=np.float64))
    return kl


def cross_entropy(logits, target_index, mask=None) -> Tensor:
    """Negative log-likelihood of the target index along the last axis."""
    return neg(select_index(log_softmax(logits, mask=mask), target_index))


def bce_with_logits(logits, targets, mask=None) -> Tensor:
    """Elementwise binary cross-entropy against 0/1 targets."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    loss = add(mul(t, softplus(neg(logits))),
               mul(1.0 - t, softplus(logits)))
    if mask is not None:
        loss = mul(loss, np.asarray(mask, dtype=np.float64))
    return loss


# --- layer-normalized LSTM cell -------------------------------------------

@dataclass
class LstmParams:
    """Weights for one cell: gate order is (input, forget, candidate, output)."""

    w_x: Tensor   # [d_in, 4H]
    w_h: Tensor   # [H, 4H]
    b: Tensor     # [4H]
    ln_gain: Tensor  # [4H]
    ln_bias: Tensor  # [4H]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    def tensors(self) -> dict:
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b,
                "ln_gain": self.ln_gain, "ln_bias": self.ln_bias}


def lstm_cell(x, h, c, params: LstmParams):
    """One step of a layer-normalized LSTM.

    The summed pre-activation gate block is layer-normalized (then scaled and
    shifted by the learned gain/bias) before the gate nonlinearities. Accepts
    [N, d] batches or bare [d] vectors.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    squeeze = x.ndim == 1
    if squeeze:
        x, h, c = reshape(x, (1, -1)), reshape(h, (1, -1)), reshape(c, (1, -1))
    hd = params.hidden_dim
    if x.shape[1] != params.w_x.shape[0] or h.shape[1] != hd or c.shape[1] != hd:
        raise DimensionError(
            f"lstm_cell dims inconsistent: x{x.shape} h{h.shape} c{c.shape} "
            f"vs w_x{params.w_x.shape} w_h{params.w_h.shape}")
    preact = add(add(matmul(x, params.w_x), matmul(h, params.w_h)), params.b)
    normed = add(mul(layer_norm(preact), params.ln_gain), params.ln_bias)
    gi = narrow(normed, -1, 0, hd)
    gf = narrow(normed, -1, hd, hd)
    gg = narrow(normed, -1, 2 * hd, hd)
    go = narrow(normed, -1, 3 * hd, hd)
    c_new = add(mul(sigmoid(gf), c), mul(sigmoid(gi), tanh(gg)))
    h_new = mul(sigmoid(go), tanh(c_new))
    if squeeze:
        h_new, c_new = reshape(h_new, (-1,)), reshape(c_new, (-1,))
    return h_new, c_new
