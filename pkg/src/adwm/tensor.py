"""Dense float64 tensors with reverse-mode automatic differentiation.

Small define-by-run engine in the micrograd tradition: every operation
records its parents and a closure that knows how to push gradients back.
Everything is float64; desk-scale problem sizes make the memory cost
irrelevant and keep finite-difference checks tight.

Shapes follow numpy. Image tensors are channels-first, (C, H, W), with an
optional leading batch axis (B, C, H, W) accepted by the image ops.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were broadcast from size 1
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = None

    @property
    def _backward(self):
        return self._backward_fn

    @_backward.setter
    def _backward(self, fn):
        # a stored closure references this tensor and vice versa, which
        # turns every graph into cyclic garbage the collector must chase;
        # tensors outside the tape simply drop it
        self._backward_fn = fn if self.requires_grad else None

    # ------------------------------------------------------------------
    # plumbing

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def detach(self):
        """A view of the same data, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            # first write takes a straight copy: one memory pass instead
            # of the zeros-then-add two, and never aliases the source
            if np.shape(g) == self.data.shape:
                self.grad = np.array(g, dtype=self.data.dtype)
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Populates ``grad`` on every tensor with ``requires_grad`` that
        this output depends on. The tape is single-use: closures and
        parent links are released as the sweep completes, so the graph's
        intermediates free by refcount alone. Run a fresh forward pass
        for another gradient.
        """
        if self.data.shape != ():
            raise UsageError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        topo = []
        visited = set()

        def build(t):
            if id(t) in visited:
                return
            visited.add(id(t))
            for p in t._parents:
                build(p)
            topo.append(t)

        build(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward_fn is not None:
                t._backward_fn()
            t._backward_fn = None
            t._parents = ()

    # ------------------------------------------------------------------
    # elementwise arithmetic

    @staticmethod
    def _coerce(other):
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _check_broadcast(a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(
                f"shapes {a.shape} and {b.shape} do not broadcast"
            ) from None

    def __add__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self, other)
        out = Tensor(
            self.data + other.data,
            self.requires_grad or other.requires_grad,
            (self, other),
        )

        def _backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.shape))

        out._backward = _backward
        return out

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self, other)
        out = Tensor(
            self.data * other.data,
            self.requires_grad or other.requires_grad,
            (self, other),
        )

        def _backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        out._backward = _backward
        return out

    def __truediv__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self, other)
        out = Tensor(
            self.data / other.data,
            self.requires_grad or other.requires_grad,
            (self, other),
        )

        def _backward():
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-out.grad * self.data / other.data**2, other.shape)
                )

        out._backward = _backward
        return out

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __rsub__(self, other):
        return (-self) + other

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    # ------------------------------------------------------------------
    # nonlinearities

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), self.requires_grad, (self,))

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad * (self.data > 0))

        out._backward = _backward
        return out

    def leaky_relu(self, slope=0.01):
        out = Tensor(
            np.where(self.data > 0, self.data, slope * self.data),
            self.requires_grad,
            (self,),
        )

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad * np.where(self.data > 0, 1.0, slope))

        out._backward = _backward
        return out

    def sigmoid(self):
        # guard both tails so exp never overflows
        x = self.data
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor(s, self.requires_grad, (self,))

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad * s * (1.0 - s))

        out._backward = _backward
        return out

    def sqrt(self):
        root = np.sqrt(self.data)
        out = Tensor(root, self.requires_grad, (self,))

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad * 0.5 / root)

        out._backward = _backward
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), self.requires_grad, (self,))

        def _backward():
            if self.requires_grad:
                # subgradient 0 at exact ties
                self._accumulate(out.grad * np.sign(self.data))

        out._backward = _backward
        return out

    # ------------------------------------------------------------------
    # reductions and shape ops

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, (self,))

        def _backward():
            if not self.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), self.requires_grad, (self,))

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(self.shape))

        out._backward = _backward
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        out = Tensor(self.data.transpose(axes), self.requires_grad, (self,))
        inverse = tuple(np.argsort(axes))

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad.transpose(inverse))

        out._backward = _backward
        return out

    @property
    def T(self):
        return self.transpose()

    def diagonal(self):
        """Diagonal of the last two axes, shape (..., n)."""
        if self.ndim < 2 or self.shape[-1] != self.shape[-2]:
            raise DimensionError(f"diagonal needs square trailing axes, got {self.shape}")
        n = self.shape[-1]
        idx = np.arange(n)
        out = Tensor(self.data[..., idx, idx], self.requires_grad, (self,))

        def _backward():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                g[..., idx, idx] = out.grad
                self._accumulate(g)

        out._backward = _backward
        return out

    # ------------------------------------------------------------------
    # linear algebra

    def __matmul__(self, other):
        return self.matmul(other)

    def matmul(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(
                f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}"
            )
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(
                f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
            )
        try:
            out_data = np.matmul(a.data, b.data)
        except ValueError:
            raise DimensionError(
                f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}"
            ) from None
        out = Tensor(out_data, a.requires_grad or b.requires_grad, (a, b))

        def _backward():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        out._backward = _backward
        return out


# ----------------------------------------------------------------------
# free functions


def softmax(v, axis=-1):
    """Numerically stable softmax along `axis` (max subtraction).

    The primary contract is a length-n vector; higher-rank inputs are
    normalized along the given axis.
    """
    v = Tensor._coerce(v)
    if v.size == 0:
        raise DimensionError("softmax of an empty tensor")
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, v.requires_grad, (v,))

    def _backward():
        if v.requires_grad:
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            v._accumulate(y * (g - dot))

    out._backward = _backward
    return out


def spatial_mean(f):
    """Per-channel mean over the spatial axes.

    (C, H, W) -> (C,), or (B, C, H, W) -> (B, C).
    """
    f = Tensor._coerce(f)
    if f.ndim not in (3, 4):
        raise DimensionError(f"spatial_mean expects (C,H,W) or (B,C,H,W), got {f.shape}")
    return f.mean(axis=(-2, -1))


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(out_data, any(t.requires_grad for t in tensors), tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(idx)])

    out._backward = _backward
    return out


def stack(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack of an empty sequence")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors), tuple(tensors))

    def _backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(out.grad, i, axis=axis))

    out._backward = _backward
    return out


# ----------------------------------------------------------------------
# convolution

def _im2col(xp, kh, kw, out_h, out_w):
    """Columns for the transposed-GEMM convolution.

    xp: padded input (B, C, Hp, Wp). Returns (C*kh*kw, B*out_h*out_w).
    The weights-on-the-left GEMM orientation is markedly faster here than
    patches-on-the-left for the thin channel counts this package uses.
    """
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,oh,ow,kh,kw view
    win = win[:, :, :out_h, :out_w]
    c = xp.shape[1]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)


def conv2d(x, k, padding=1):
    """2-D cross-correlation with zero padding.

    x: (C_in, H, W) or (B, C_in, H, W); k: (C_out, C_in, kh, kw) with odd
    square spatial size; `padding` must preserve H and W. Gradients are
    defined for both operands.
    """
    x = Tensor._coerce(x)
    k = Tensor._coerce(k)
    if k.ndim != 4:
        raise DimensionError(f"kernel must be 4-D (C_out,C_in,kh,kw), got {k.shape}")
    cout, cin, kh, kw = k.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel spatial size must be odd and square, got {kh}x{kw}")
    if padding != kh // 2:
        raise DimensionError(
            f"padding {padding} does not preserve spatial dims for a {kh}x{kw} kernel"
        )
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"input must be (C,H,W) or (B,C,H,W), got {x.shape}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != cin:
        raise DimensionError(
            f"input channels {xd.shape[1]} do not match kernel C_in {cin}"
        )
    b, _, h, w = xd.shape
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _im2col(xp, kh, kw, h, w)
    wm = k.data.reshape(cout, cin * kh * kw)
    y = (wm @ cols).reshape(cout, b, h, w).transpose(1, 0, 2, 3)
    out = Tensor(y if batched else y[0], x.requires_grad or k.requires_grad, (x, k))

    if out.requires_grad:
        def _backward():
            gy = out.grad if batched else out.grad[None]
            gy_t = gy.transpose(1, 0, 2, 3).reshape(cout, -1)
            if k.requires_grad:
                # columns are rebuilt rather than cached: the rebuild costs
                # ~15% of a step but keeps peak memory to one layer's patch
                # matrix instead of all of them
                cols_b = _im2col(xp, kh, kw, h, w)
                k._accumulate((gy_t @ cols_b.T).reshape(k.shape))
            if x.requires_grad:
                gyp = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p)))
                cols_g = _im2col(gyp, kh, kw, h, w)
                wback = k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(
                    cin, cout * kh * kw
                )
                gx = (wback @ cols_g).reshape(cin, b, h, w).transpose(1, 0, 2, 3)
                x._accumulate(gx if batched else gx[0])

        out._backward = _backward
    return out


# ----------------------------------------------------------------------
# verification

def gradcheck(fn, x, eps=1e-5):
    """Compare analytic gradients of a scalar-valued `fn` to central differences.

    `x` is a Tensor or a sequence of Tensors; all of them are perturbed.
    Returns the max over coordinates of |a - n| / max(1, |a|, |n|).
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*xs)
    if not isinstance(out, Tensor) or out.shape != ():
        raise UsageError("gradcheck requires a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in xs]

    worst = 0.0
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*xs).data)
            flat[i] = orig - eps
            fm = float(fn(*xs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic[ti].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
