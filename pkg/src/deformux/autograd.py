"""Define-by-run reverse-mode differentiation.

Each differentiable call creates a ``Var`` that records its parents and a
vector-Jacobian closure. ``backward`` walks the graph once in reverse
topological order, adding parent contributions in a fixed order so the same
graph always yields bit-identical gradients.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from . import deform, tensor


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Var"] = (), vjp: Optional[Callable] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Var:
    return Var(np.asarray(value))


def parameter(value, name: Optional[str] = None) -> Var:
    return Var(np.asarray(value), requires_grad=True, name=name)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _node(value, parents, vjp) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, parents, vjp, requires_grad=True)
    return Var(value)


def _topo_order(root: Var):
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, params: Iterable[Var] = ()) -> Dict[Var, np.ndarray]:
    """Gradients of a scalar ``loss`` for every ``params`` entry.

    Parameters not reachable from ``loss`` get zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    return {p: grads.get(id(p), np.zeros_like(p.value)) for p in params}


def finite_difference_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-4,
                           indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences ``(f(t + h e_i) - f(t - h e_i)) / 2h``.

    ``indices`` restricts the probe to a subset of flat coordinates; the other
    entries of the result are NaN.
    """
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    out = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(theta.shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, s: float) -> Var:
    a = _as_var(a)
    return _node(a.value * s, (a,), lambda g: (g * s,))


def sum_all(a) -> Var:
    a = _as_var(a)
    shape = a.value.shape
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat_channels(vars_: Sequence) -> Var:
    vs = [_as_var(v) for v in vars_]
    sizes = np.cumsum([v.value.shape[1] for v in vs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=1))

    return _node(np.concatenate([v.value for v in vs], axis=1), vs, vjp)


# ---------------------------------------------------------------------------
# layers


def pointwise_linear(x, weight, bias=None) -> Var:
    x, weight = _as_var(x), _as_var(weight)
    parents = (x, weight) if bias is None else (x, weight, _as_var(bias))
    out = tensor.pointwise_linear(x.value, weight.value, None if bias is None else parents[2].value)

    def vjp(g):
        gx, gw, gb = tensor.pointwise_linear_backward(g, x.value, weight.value, need_x=x.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out, parents, vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Var:
    x, gamma, beta = _as_var(x), _as_var(gamma), _as_var(beta)
    out, saved = tensor.layer_norm_channels(x.value, gamma.value, beta.value, eps)

    def vjp(g):
        return tensor.layer_norm_channels_backward(g, saved, gamma.value, need_x=x.requires_grad)

    return _node(out, (x, gamma, beta), vjp)


def gelu(x) -> Var:
    x = _as_var(x)
    return _node(tensor.gelu(x.value), (x,), lambda g: (tensor.gelu_backward(g, x.value),))


def softmax(x) -> Var:
    x = _as_var(x)
    y = tensor.softmax_channels(x.value)
    return _node(y, (x,), lambda g: (tensor.softmax_channels_backward(g, y),))


def conv3d(x, weight, bias=None, stride=1, padding=0, groups=1) -> Var:
    x, weight = _as_var(x), _as_var(weight)
    parents = (x, weight) if bias is None else (x, weight, _as_var(bias))
    out = tensor.conv3d(x.value, weight.value, None if bias is None else parents[2].value,
                        stride, padding, groups)

    def vjp(g):
        gx, gw, gb = tensor.conv3d_backward(g, x.value, weight.value, stride, padding, groups,
                                            need_x=x.requires_grad, need_w=weight.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out, parents, vjp)


def transposed_conv3d(x, weight, bias=None, stride=2) -> Var:
    x, weight = _as_var(x), _as_var(weight)
    parents = (x, weight) if bias is None else (x, weight, _as_var(bias))
    out = tensor.transposed_conv3d(x.value, weight.value, None if bias is None else parents[2].value, stride)

    def vjp(g):
        gx, gw, gb = tensor.transposed_conv3d_backward(g, x.value, weight.value, stride,
                                                       need_x=x.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out, parents, vjp)


def deformable_conv(x, weight, offsets, bias=None, groups=None, grid=deform.DEFAULT_GRID,
                    mask=deform.TRI_PLANAR) -> Var:
    """Deformable convolution node; ``groups=None`` means depthwise (weight is C x K)."""
    x, weight, offsets = _as_var(x), _as_var(weight), _as_var(offsets)
    parents = (x, weight, offsets) if bias is None else (x, weight, offsets, _as_var(bias))
    bval = None if bias is None else parents[3].value
    if groups is None:
        out = deform.ddc_forward(x.value, weight.value, offsets.value, bval, grid, mask)
    else:
        out = deform.standard_deformable_forward(x.value, weight.value, offsets.value, bval, groups, grid, mask)

    def vjp(g):
        if groups is None:
            gx, gw, goff, gb = deform.ddc_backward(g, x.value, weight.value, offsets.value, grid, mask)
        else:
            gx, gw, goff, gb = deform.standard_deformable_backward(g, x.value, weight.value, offsets.value,
                                                                   groups, grid, mask)
        return (gx, gw, goff) if bias is None else (gx, gw, goff, gb)

    return _node(out, parents, vjp)


# ---------------------------------------------------------------------------
# losses


def soft_dice_loss(probs, onehot, eps: float = 1e-5) -> Var:
    """``1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)`` over foreground classes c >= 1.

    Sums run over the batch and all voxels of each class.
    """
    probs = _as_var(probs)
    p, gt = probs.value, np.asarray(onehot, dtype=probs.value.dtype)
    if p.shape != gt.shape:
        raise ValueError(f"probabilities {p.shape} and one-hot target {gt.shape} differ")
    axes = (0,) + tuple(range(2, p.ndim))
    inter = (p * gt).sum(axis=axes)[1:]
    denom = p.sum(axis=axes)[1:] + gt.sum(axis=axes)[1:] + eps
    num = 2.0 * inter + eps
    nfg = p.shape[1] - 1
    loss = 1.0 - (num / denom).mean()

    def vjp(g):
        bshape = (1, -1) + (1,) * (p.ndim - 2)
        dnum = (2.0 / denom).reshape(bshape)
        dden = (num / denom**2).reshape(bshape)
        gp = np.zeros_like(p)
        gp[:, 1:] = -(dnum * gt[:, 1:] - dden) / nfg
        return (g * gp,)

    return _node(np.asarray(loss), (probs,), vjp)


def cross_entropy(logits, onehot) -> Var:
    """Mean voxelwise cross-entropy of channel softmax against a one-hot target."""
    logits = _as_var(logits)
    z = logits.value
    gt = np.asarray(onehot, dtype=z.dtype)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    count = z.size // z.shape[1]
    loss = -((z - lse) * gt).sum() / count

    def vjp(g):
        return (g * (np.exp(z - lse) - gt) / count,)

    return _node(np.asarray(loss), (logits,), vjp)
