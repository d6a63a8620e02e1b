"""Reverse-mode autodiff over float32 NumPy arrays.

A ``Tensor`` wraps an ndarray and records a backward closure per operation;
``backward()`` runs the closures in reverse topological order and then frees
the graph. Only the operations the training paths need are implemented:
elementwise arithmetic with broadcasting, matmul (2-D and batched), full
reductions, the fused kernels (rmsnorm, causal softmax, cross-entropy), and
the model-specific ops (embedding lookup, rotary positions, key/value head
repetition).

Inference code does not use this module; it runs plain NumPy.
"""
import numpy as np

from depthgate import backend
from depthgate.errors import ContractError, ShapeError


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _acc(grad, update):
    """Accumulate `update`, copying first: it may alias another live buffer."""
    if grad is None:
        return update.astype(np.float32, copy=True)
    grad += update
    return grad


def _acc_owned(grad, update):
    """Accumulate an `update` freshly allocated by the caller; no copy."""
    if grad is None:
        return update
    grad += update
    return grad


class Tensor:
    def __init__(self, data, requires_grad=False, _children=()):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad) or any(
            t.requires_grad for t in _children)
        self.grad = None
        self._backward = None
        # Topo edges only to differentiable inputs; constants are leaves.
        self._prev = tuple(t for t in _children if t.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (
            self.data.shape, self.requires_grad)

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, _children=(self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self.grad = _acc(self.grad, _unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other.grad = _acc(other.grad, _unbroadcast(out.grad, other.shape))
            out._backward = _backward
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, _children=(self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self.grad = _acc_owned(
                        self.grad, _unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad:
                    other.grad = _acc_owned(
                        other.grad, _unbroadcast(out.grad * self.data, other.shape))
            out._backward = _backward
        return out

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def exp(self):
        out = Tensor(np.exp(self.data), _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc_owned(self.grad, out.grad * out.data)
            out._backward = _backward
        return out

    def log(self):
        if np.any(self.data <= 0):
            raise ContractError("log: input has non-positive entries")
        out = Tensor(np.log(self.data), _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc_owned(self.grad, out.grad / self.data)
            out._backward = _backward
        return out

    def sigmoid(self):
        out = Tensor(backend.sigmoid(self.data), _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc_owned(self.grad, out.grad * out.data * (1.0 - out.data))
            out._backward = _backward
        return out

    def clip01(self):
        """Clamp to [0, 1]; the subgradient is 1 strictly inside (0, 1)."""
        x = self.data
        out = Tensor(np.clip(x, 0.0, 1.0), _children=(self,))
        if out.requires_grad:
            inside = ((x > 0.0) & (x < 1.0)).astype(np.float32)
            def _backward():
                self.grad = _acc_owned(self.grad, out.grad * inside)
            out._backward = _backward
        return out

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out = Tensor(self.data.reshape(shape), _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc(self.grad, out.grad.reshape(orig))
            out._backward = _backward
        return out

    def transpose(self, axes):
        axes = tuple(axes)
        out = Tensor(self.data.transpose(axes), _children=(self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            def _backward():
                self.grad = _acc(self.grad, out.grad.transpose(inverse))
            out._backward = _backward
        return out

    def select(self, index):
        """Pick one element of a 1-D tensor as a scalar tensor."""
        if self.data.ndim != 1:
            raise ShapeError("select: expected 1-D tensor, got shape %s"
                             % (self.data.shape,))
        index = int(index)
        out = Tensor(self.data[index], _children=(self,))
        if out.requires_grad:
            def _backward():
                g = np.zeros_like(self.data)
                g[index] = out.grad
                self.grad = _acc_owned(self.grad, g)
            out._backward = _backward
        return out

    # -- reductions -------------------------------------------------------

    def sum(self):
        out = Tensor(self.data.sum(), _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc(
                    self.grad, np.broadcast_to(out.grad, self.shape))
            out._backward = _backward
        return out

    def mean(self):
        n = self.data.size
        out = Tensor(self.data.mean(), _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc(
                    self.grad, np.broadcast_to(out.grad / n, self.shape))
            out._backward = _backward
        return out

    # -- matmul -----------------------------------------------------------

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul: incompatible shapes %s @ %s"
                             % (a.shape, b.shape))
        out = Tensor(a @ b, _children=(self, other))
        if out.requires_grad:
            def _backward():
                gy = out.grad
                if self.requires_grad:
                    self.grad = _acc_owned(self.grad, _unbroadcast(
                        gy @ b.swapaxes(-1, -2), self.shape))
                if other.requires_grad:
                    other.grad = _acc_owned(other.grad, _unbroadcast(
                        a.swapaxes(-1, -2) @ gy, other.shape))
            out._backward = _backward
        return out

    # -- fused kernels ----------------------------------------------------

    def rmsnorm(self, weight, eps=1e-5):
        """Root-mean-square normalization over the last axis, then scale."""
        d = self.data.shape[-1]
        if weight.data.shape != (d,):
            raise ShapeError("rmsnorm: weight shape %s does not match last axis %d"
                             % (weight.data.shape, d))
        x2 = self.data.reshape(-1, d)
        y2, inv_rms = backend.rmsnorm_fwd(x2, weight.data, eps)
        out = Tensor(y2.reshape(self.data.shape), _children=(self, weight))
        if out.requires_grad:
            def _backward():
                gx, gw = backend.rmsnorm_bwd(
                    x2, weight.data, inv_rms, out.grad.reshape(-1, d))
                if self.requires_grad:
                    self.grad = _acc_owned(self.grad, gx.reshape(self.shape))
                if weight.requires_grad:
                    weight.grad = _acc_owned(weight.grad, gw)
            out._backward = _backward
        return out

    def softmax_lastdim(self):
        """Softmax over the last axis; rows sum to one."""
        d = self.data.shape[-1]
        y2 = backend.softmax_fwd(self.data.reshape(-1, d))
        out = Tensor(y2.reshape(self.data.shape), _children=(self,))
        if out.requires_grad:
            def _backward():
                gx = backend.softmax_bwd(y2, out.grad.reshape(-1, d))
                self.grad = _acc_owned(self.grad, gx.reshape(self.shape))
            out._backward = _backward
        return out

    def causal_softmax(self, offset=0):
        """Softmax over the last axis where row i attends to keys j <= offset + i."""
        if self.data.ndim < 2:
            raise ShapeError("causal_softmax: need at least 2 dims, got shape %s"
                             % (self.data.shape,))
        q, k = self.data.shape[-2], self.data.shape[-1]
        x3 = self.data.reshape(-1, q, k)
        y3 = backend.causal_softmax_fwd(x3, offset)
        out = Tensor(y3.reshape(self.data.shape), _children=(self,))
        if out.requires_grad:
            def _backward():
                gx = backend.causal_softmax_bwd(y3, out.grad.reshape(-1, q, k))
                self.grad = _acc_owned(self.grad, gx.reshape(self.shape))
            out._backward = _backward
        return out

    def cross_entropy(self, targets):
        """Mean negative log-likelihood of integer `targets` under row logits."""
        if self.data.ndim != 2:
            raise ShapeError("cross_entropy: logits must be 2-D, got shape %s"
                             % (self.data.shape,))
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (self.data.shape[0],):
            raise ShapeError("cross_entropy: targets shape %s does not match "
                             "logits rows %d" % (targets.shape, self.data.shape[0]))
        vocab = self.data.shape[1]
        if targets.size and (targets.min() < 0 or targets.max() >= vocab):
            raise IndexError("cross_entropy: target id out of range [0, %d)"
                             % vocab)
        loss, probs = backend.cross_entropy_fwd(self.data, targets)
        out = Tensor(loss, _children=(self,))
        if out.requires_grad:
            def _backward():
                self.grad = _acc_owned(self.grad, backend.cross_entropy_bwd(
                    probs, targets, float(out.grad)))
            out._backward = _backward
        return out

    # -- autodiff driver --------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward: root must be scalar, got shape %s"
                             % (self.data.shape,))
        if not self.requires_grad:
            raise ContractError("backward: root does not require grad")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # Free the graph so intermediate buffers can be collected.
        for node in topo:
            node._backward = None
            node._prev = ()


def embedding(weight, tokens):
    """Row lookup `weight[tokens]`; gradients scatter-add into the table."""
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab, dim = weight.data.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ContractError("embedding: token id out of range [0, %d)" % vocab)
    out = Tensor(weight.data[tokens], _children=(weight,))
    if out.requires_grad:
        def _backward():
            g = np.zeros_like(weight.data)
            np.add.at(g, tokens.reshape(-1), out.grad.reshape(-1, dim))
            weight.grad = _acc_owned(weight.grad, g)
        out._backward = _backward
    return out


def rope(x, cos, sin):
    """Rotate interleaved (even, odd) feature pairs by per-position angles.

    `x` has shape (..., s, d) with d even; `cos`/`sin` have shape (s, d // 2)
    and broadcast over leading axes. The map is linear in `x`, so the backward
    pass is the inverse rotation applied to the gradient.
    """
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise ShapeError("rope: last axis must be even, got shape %s"
                         % (x.data.shape,))
    if cos.shape != (x.data.shape[-2], d // 2) or sin.shape != cos.shape:
        raise ShapeError("rope: angle tables %s do not match input %s"
                         % (cos.shape, x.data.shape))
    ev, od = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = ev * cos - od * sin
    out_data[..., 1::2] = ev * sin + od * cos
    out = Tensor(out_data, _children=(x,))
    if out.requires_grad:
        def _backward():
            ge, go = out.grad[..., 0::2], out.grad[..., 1::2]
            g = np.empty_like(x.data)
            g[..., 0::2] = ge * cos + go * sin
            g[..., 1::2] = -ge * sin + go * cos
            x.grad = _acc_owned(x.grad, g)
        out._backward = _backward
    return out


def repeat_kv(x, n_rep):
    """Repeat each key/value head `n_rep` times along axis 1.

    Input (b, h_kv, s, d) becomes (b, h_kv * n_rep, s, d); gradients sum over
    the copies of each head.
    """
    if n_rep == 1:
        return x
    if x.data.ndim != 4:
        raise ShapeError("repeat_kv: expected 4-D input, got shape %s"
                         % (x.data.shape,))
    b, h_kv, s, d = x.data.shape
    out = Tensor(np.repeat(x.data, n_rep, axis=1), _children=(x,))
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(b, h_kv, n_rep, s, d).sum(axis=2)
            x.grad = _acc_owned(x.grad, g)
        out._backward = _backward
    return out
