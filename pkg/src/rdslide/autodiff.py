"""A deliberately small reverse-mode autodiff layer over numpy arrays.

Only the operations the distillation model needs are provided. Each op
records its parents and a closure that maps the output gradient to parent
gradients; ``backward`` walks the recorded graph in reverse topological
order.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

NORM_EPS = 1e-5
ADAM_EPS = 1e-8


class Tensor:
    """Dense array node. Leaves with ``requires_grad`` collect ``.grad``."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def backward(self):
        return backward(self)

    # arithmetic sugar used by tests and the loss
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward_fn):
    """Wrap ``data`` as the output of an op with ``parents``.

    ``backward_fn(grad)`` returns one gradient (or None) per parent. When no
    parent needs a gradient the graph edge is not recorded at all.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Returns a dict mapping each such leaf to its gradient array. Interior
    nodes are released afterwards, so a graph can be walked only once.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if node._backward is None:
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
            p.grad = pg if p.grad is None else p.grad + pg
        node.grad = None
        node._parents = ()
        node._backward = None
    return leaves


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a = _lift(a)
    b = _lift(b, a)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a)
    out = a.data * b.data
    return make_node(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def tsum(x):
    x = _lift(x)
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def tmean(x):
    x = _lift(x)
    n = x.data.size
    return make_node(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g / n, x.shape),)
    )


def relu(x):
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return make_node(out, (x,), lambda g: (g * inside,))


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_node(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape),))


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy. ``logits`` is (n, k) or (n, k, 1, 1)."""
    z = logits.data.reshape(logits.shape[0], -1).astype(np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), targets].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _check_rank4(name, t):
    if t.data.ndim != 4 or min(t.shape) < 1:
        raise ValueError(f"{name} must be a non-empty rank-4 tensor, got shape {t.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (n, c_in, h, w) with (c_out, c_in, k, k)."""
    _check_rank4("input", x)
    _check_rank4("weight", weight)
    c_out, c_in, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != c_in or kh != kw:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ValueError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, k, stride, oh, ow)  # (n, c*k*k, oh*ow)
    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1)
    out = out.reshape(n, c_out, oh, ow)

    def bwd(g):
        g2 = g.reshape(n, c_out, oh * ow)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = _kernels.col2im(gcols, c, hp, wp, k, stride, oh, ow)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bwd)


def conv_transpose2d(x, weight, bias=None, stride=1):
    """Transposed convolution; ``weight`` is (c_in, c_out, k, k)."""
    _check_rank4("input", x)
    _check_rank4("weight", weight)
    c_in, c_out, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != c_in or kh != kw:
        raise ValueError(f"conv_transpose2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv_transpose2d needs stride >= 1, got {stride}")
    k = kh
    oh = (h - 1) * stride + k
    ow = (w - 1) * stride + k
    wmat = weight.data.reshape(c_in, c_out * k * k)
    xin = x.data.reshape(n, c_in, h * w)
    cols = np.matmul(wmat.T, xin)  # (n, c_out*k*k, h*w)
    out = _kernels.col2im(cols, c_out, oh, ow, k, stride, h, w)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)

    def bwd(g):
        gcols = _kernels.im2col(np.ascontiguousarray(g), k, stride, h, w)  # (n, c_out*k*k, h*w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols)
        if weight.requires_grad:
            gw = np.matmul(xin, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=NORM_EPS):
    """Per-channel normalization over (n, h, w).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (numpy arrays) are updated in place by exponential
    moving average; the running variance uses the unbiased estimate.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: gamma/beta {gamma.shape}/{beta.shape} vs {c} channels")
    if not training:
        scale = gamma.data / np.sqrt(running_var + eps)
        shift = beta.data - running_mean * scale
        out = (x.data * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)).astype(x.dtype)

        def bwd_eval(g):
            xhat = (x.data - running_mean.reshape(1, c, 1, 1)) / np.sqrt(running_var + eps).reshape(1, c, 1, 1)
            return (
                g * scale.reshape(1, c, 1, 1),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return make_node(out, (x, gamma, beta), bwd_eval)

    m = n * h * w
    if m < 2:
        raise ValueError(f"batch_norm2d in training mode needs more than one value per channel, got {x.shape}")
    mean = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mean.reshape(1, c, 1, 1)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1))

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        gx = (inv.reshape(1, c, 1, 1) / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        )
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Module:
    """Attribute-walking container. Every Tensor attribute is a parameter;
    ``requires_grad`` marks the trainable ones."""

    training = True

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, np.ndarray):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix=""):
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state, prefix=""):
        for name, p in self.named_parameters(prefix):
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in self.named_buffers(prefix):
            buf[...] = state[name]

    def __call__(self, *args):
        return self.forward(*args)


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        # fan-in of a transposed conv: input channels that reach one output pixel
        fan_in = c_in * max(1, (k // stride) ** 2)
        self.weight = Tensor(_kaiming(rng, (c_in, c_out, k, k), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, dtype=np.float32):
        self.momentum = momentum
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x):
        return batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum
        )


class ConvBlock(Module):
    """conv -> batch norm -> relu."""

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, dtype=np.float32):
        self.conv = Conv2d(c_in, c_out, k, stride, padding, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x):
        return relu(self.norm(self.conv(x)))


class UpBlock(Module):
    """transposed conv (k=2, stride=2) -> batch norm -> relu."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        self.deconv = ConvTranspose2d(c_in, c_out, 2, 2, rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x):
        return relu(self.norm(self.deconv(x)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, betas=(0.5, 0.999), eps=ADAM_EPS):
        return cls(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params, grads, state, names=None):
    """One bias-corrected Adam update, in place on ``params``. Returns ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state moments differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        label = names[i] if names else (p.name or f"param[{i}]")
        if g is None:
            raise ValueError(f"adam_step: no gradient for {label}")
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {label}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient in {label}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return state
