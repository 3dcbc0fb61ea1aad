"""Minimal reverse-mode autodiff on float64 numpy arrays.

Everything differentiable in the project (mask network, toy auxiliary
networks, losses, fixed-phase synthesis) is built from the ops in this
module.  A Tape records nodes in creation order, which is already a
topological order, so backward() is a single reverse sweep.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an op do not satisfy its contract."""


class ContractError(ValueError):
    """An op precondition other than a pure shape constraint failed."""


class ConfigurationError(ValueError):
    """A structural configuration (kernel width, head count, ...) is invalid."""


class Tape:
    """Ordered record of differentiable operations.

    nodes[i] = (output tensor, input tensors, backward function).  Inputs of
    every node were created before the node, so iterating ``nodes`` in
    reverse visits each node after all of its consumers.
    """

    def __init__(self):
        self.nodes = []
        self._next_id = 0

    def record(self, out, inputs, backward_fn):
        out.node_id = self._next_id
        self._next_id += 1
        self.nodes.append((out, inputs, backward_fn))


_TAPE_STACK: list[Tape] = []


def push_tape() -> Tape:
    t = Tape()
    _TAPE_STACK.append(t)
    return t


def pop_tape() -> Tape:
    return _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class tape:
    """Context manager establishing an active tape."""

    def __enter__(self):
        return push_tape()

    def __exit__(self, *exc):
        pop_tape()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the free functions do the real work.
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs, backward_fn):
    t = active_tape()
    if t is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        t.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _record(Tensor(e), (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _record(Tensor(np.log(a.data)), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _record(Tensor(np.abs(a.data)), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record(Tensor(t), (a,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(n)))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def concat(tensors, axis=-1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Index the last axis of ``a`` with an integer array; used for the
    relative-position bias table (backward is a scatter-add)."""
    out = Tensor(a.data[..., idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        # accumulate along the indexed axis
        flat = ga.reshape(-1, ga.shape[-1])
        gflat = g.reshape(flat.shape[0], -1)
        ix = idx.reshape(-1)
        for r in range(flat.shape[0]):
            np.add.at(flat[r], ix, gflat[r])
        return (ga,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# spec surface: op_linear, op_activations, op_norm, op_conv1d,
# op_attention, op_squeeze_excite


def op_linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
        y = add(y, b)
    return y


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _record(Tensor(s), (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _record(Tensor(a.data * m), (a,), lambda g: (g * m,))


def swish(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * s
    # d/dx x*sigma(x) = sigma + x*sigma*(1-sigma)
    return _record(Tensor(y), (a,), lambda g: (g * (s + y * (1.0 - s)),))


def softmax_lastdim(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(Tensor(p), (a,), bwd)


def glu_lastdim(a: Tensor) -> Tensor:
    n = a.shape[-1]
    if n % 2 != 0:
        raise DimensionError(f"glu: last dimension must be even, got {n}")
    h = n // 2
    u = a.data[..., :h]
    v = a.data[..., h:]
    s = 1.0 / (1.0 + np.exp(-v))

    def bwd(g):
        ga = np.empty_like(a.data)
        ga[..., :h] = g * s
        ga[..., h:] = g * u * s * (1.0 - s)
        return (ga,)

    return _record(Tensor(u * s), (a,), bwd)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "swish": swish,
    "softmax_lastdim": softmax_lastdim,
    "glu_lastdim": glu_lastdim,
}


def op_activations(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    n = x.shape[-1]

    def bwd(g):
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


class BatchNormState:
    """Running statistics for one batch-norm layer (per feature of the last axis)."""

    def __init__(self, num_features: int, momentum: float = 0.1):
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum

    def state_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, eps: float = 1e-5) -> Tensor:
    """Normalize over all axes except the last; the last axis is the feature axis."""
    axes = tuple(range(x.data.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if training:
        if n < 2:
            raise ContractError("batch_norm training mode needs an effective batch >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        gh = g * gamma.data
        if training:
            gx = inv * (gh - gh.mean(axis=axes)
                        - xhat * (gh * xhat).mean(axis=axes))
        else:
            gx = gh * inv
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


def op_norm(x: Tensor, kind: str, gamma: Tensor, beta: Tensor,
            state: BatchNormState | None = None, training: bool = True,
            eps: float = 1e-5) -> Tensor:
    if kind == "layer_norm":
        return layer_norm(x, gamma, beta, eps=eps)
    if kind == "batch_norm":
        if state is None:
            raise ContractError("batch_norm requires a BatchNormState")
        return batch_norm(x, gamma, beta, state, training, eps=eps)
    raise ConfigurationError(f"unknown norm kind {kind!r}")


def op_conv1d(x: Tensor, kernel: Tensor, mode: str = "full",
              bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Time-axis convolution of x[B,T,C] with same padding.

    kernel shapes: full [K,Cin,Cout], depthwise [K,C], pointwise [Cin,Cout].
    ``stride`` subsamples the output frames (used by the toy waveform
    front-ends; the mask network always uses stride 1).
    """
    if mode == "pointwise":
        return op_linear(x, kernel, bias)
    K = kernel.shape[0]
    if K % 2 == 0:
        raise ConfigurationError(f"conv kernel width must be odd for same padding, got {K}")
    if mode == "depthwise" and kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"depthwise kernel {kernel.shape} vs input {x.shape}")
    if mode == "full" and kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"conv kernel {kernel.shape} vs input {x.shape}")
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    # windows[b, t, k, c] = xp[b, t + k, c]
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)  # [B, T, C, K]
    win = win[:, ::stride]
    if mode == "depthwise":
        y = np.einsum("btck,kc->btc", win, kernel.data)
    else:
        y = np.einsum("btck,kco->bto", win, kernel.data)

    T_in = x.shape[1]

    def bwd(g):
        if mode == "depthwise":
            gk = np.einsum("btck,btc->kc", win, g)
            gxp = np.zeros_like(xp)
            for k in range(K):
                contrib = g * kernel.data[k]  # [B,To,C]
                idx = np.arange(g.shape[1]) * stride + k
                np.add.at(gxp, (slice(None), idx), contrib)
        else:
            gk = np.einsum("btck,bto->kco", win, g)
            gxp = np.zeros_like(xp)
            for k in range(K):
                contrib = np.einsum("bto,co->btc", g, kernel.data[k])
                idx = np.arange(g.shape[1]) * stride + k
                np.add.at(gxp, (slice(None), idx), contrib)
        gx = gxp[:, pad:pad + T_in]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    out = Tensor(y if bias is None else y + bias.data)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, bwd)


def sinusoidal_pe(T: int, D: int) -> np.ndarray:
    """Absolute sinusoidal position encodings [T, D]."""
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def relative_bias_matrix(bias_table: Tensor, T: int, max_dist: int) -> Tensor:
    """Expand a per-head bias table [H, 2*max_dist+1] to logits bias [H, T, T]."""
    offs = np.clip(np.arange(T)[:, None] - np.arange(T)[None, :], -max_dist, max_dist) + max_dist
    return gather_last(bias_table, offs)


def op_attention(x: Tensor, params: dict, heads: int, rel_pe: bool,
                 max_dist: int = 64) -> Tensor:
    """Multi-head self-attention over x[B,T,D].

    params: wq, wk, wv, wo [D,D]; bq, bk, bv, bo [D]; and, when rel_pe,
    rel_bias [heads, 2*max_dist+1].  Without rel_pe, sinusoidal absolute
    encodings are added to the input before projection.
    """
    B, T, D = x.shape
    if D % heads != 0:
        raise ConfigurationError(f"attention dim {D} not divisible by {heads} heads")
    dh = D // heads
    if not rel_pe:
        x = add(x, Tensor(sinusoidal_pe(T, D)))

    def split_heads(t):
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split_heads(op_linear(x, params["wq"], params["bq"]))
    k = split_heads(op_linear(x, params["wk"], params["bk"]))
    v = split_heads(op_linear(x, params["wv"], params["bv"]))
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(1.0 / np.sqrt(dh)))
    if rel_pe:
        logits = add(logits, relative_bias_matrix(params["rel_bias"], T, max_dist))
    attn = softmax_lastdim(logits)
    ctx = matmul(attn, v)  # [B,H,T,dh]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return op_linear(ctx, params["wo"], params["bo"])


def op_squeeze_excite(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                      squeeze_factor: int = 8) -> Tensor:
    """Channel gating of x[B,T,C] from a time-pooled descriptor."""
    C = x.shape[-1]
    if C < squeeze_factor:
        raise ConfigurationError(f"squeeze-excite needs C >= {squeeze_factor}, got {C}")
    pooled = tmean(x, axis=1)  # [B, C]
    gate = sigmoid(op_linear(relu(op_linear(pooled, w1, b1)), w2, b2))  # [B, C]
    gate = reshape(gate, (x.shape[0], 1, C))
    return mul(x, gate)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of logits[..., C] against integer labels[...]."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat = logp.reshape(-1, logp.shape[-1])
    lab = np.asarray(labels).reshape(-1)
    n = flat.shape[0]
    loss = -flat[np.arange(n), lab].mean()

    def bwd(g):
        p = np.exp(logp).reshape(-1, logp.shape[-1]).copy()
        p[np.arange(n), lab] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _record(Tensor(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward sweep and optimizer


def backward(loss: Tensor, tape_obj: Tape | None = None):
    """Populate .grad for every requires_grad tensor reachable from ``loss``.

    Repeated calls add into existing .grad buffers (gradient accumulation).
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    t = tape_obj or active_tape()
    if t is None:
        raise ContractError("backward called with no active tape")
    flow = {id(loss): np.ones_like(loss.data)}
    touched = {id(loss): loss}
    for out, inputs, bwd_fn in reversed(t.nodes):
        g = flow.pop(id(out), None)
        if g is None:
            continue
        grads = bwd_fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flow:
                flow[key] = flow[key] + gi
            else:
                flow[key] = gi
                touched[key] = inp
        touched.pop(id(out), None)
        if out.grad is None:
            out.grad = g.copy().reshape(out.shape)
        else:
            out.grad = out.grad + g.reshape(out.shape)
    # leaves
    for key, tensor in touched.items():
        g = flow.get(key)
        if g is None:
            continue
        g = g.reshape(tensor.shape)
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


class Adam:
    """Standard Adam with bias correction over a list of parameter Tensors."""

    def __init__(self, params, lr=0.00075, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def add_param(self, p: Tensor):
        self.params.append(p)
        self.m.append(np.zeros_like(p.data))
        self.v.append(np.zeros_like(p.data))

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional single Adam step over parallel lists of numpy arrays.

    state = {"m": [...], "v": [...], "t": int}; returns updated (params, state).
    """
    m, v, t = state["m"], state["v"], state["t"] + 1
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape or p.shape != mi.shape:
            raise ContractError(f"adam_step shape mismatch: {p.shape} vs {g.shape}")
        mi = beta1 * mi + (1 - beta1) * g
        vi = beta2 * vi + (1 - beta2) * g * g
        mhat = mi / (1 - beta1 ** t)
        vhat = vi / (1 - beta2 ** t)
        new_params.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_params, {"m": new_m, "v": new_v, "t": t}
