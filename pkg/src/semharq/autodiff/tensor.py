import numpy as np

from semharq.errors import UsageError


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def as_tensor(value):
    """Wrap ``value`` into a constant :class:`Tensor` unless it already is one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    r"""
    Dense 64-bit tensor node of a define-by-run computation graph.

    Every arithmetic operation on a tensor that requires gradients returns a
    new tensor remembering its parents and a closure mapping the output
    gradient to the parent gradients. Calling :meth:`backward` on a scalar
    result walks the graph in reverse topological order and accumulates
    ``grad`` on every tensor that requires gradients.

    Parameters
    ----------
    data : array_like
        Values, converted to ``float64``.
    requires_grad : bool, optional
        Leaf flag marking trainable parameters (default is False).
    name : str, optional
        Parameter path used in error messages and checkpoints.

    Attributes
    ----------
    data : numpy.ndarray
        Row-major values.
    grad : numpy.ndarray or None
        Accumulated gradient with the shape of ``data``.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

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
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def _make(self, data, parents, backward):
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
        return Tensor(data)

    # arithmetic
    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            return (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            )

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** -1.0

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise UsageError("Only constant exponents are supported.")
        exponent = float(exponent)
        out = self.data ** exponent

        def backward(g):
            return (g * exponent * self.data ** (exponent - 1.0),)

        return self._make(out, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)

        def backward(g):
            a, b = self.data, other.data
            if a.ndim == 1:
                ga = g @ b.T
                gb = np.outer(a, g)
            else:
                ga = g @ b.T
                gb = a.T @ g
            return ga, gb

        return self._make(self.data @ other.data, (self, other), backward)

    def __getitem__(self, index):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            return (full,)

        return self._make(self.data[index], (self,), backward)

    # reductions
    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        return self._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(self.shape),))

    # elementwise functions
    def exp(self):
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: (g * out,))

    def log(self):
        return self._make(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        return self ** 0.5

    def relu(self):
        return self._make(np.maximum(self.data, 0.0), (self,), lambda g: (g * (self.data > 0.0),))

    def tanh(self):
        out = np.tanh(self.data)
        return self._make(out, (self,), lambda g: (g * (1.0 - out ** 2),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return self._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self):
        return self._make(_softplus(self.data), (self,), lambda g: (g * _sigmoid(self.data),))

    def identity(self):
        return self

    def clip(self, low, high):
        inside = (self.data >= low) & (self.data <= high)
        return self._make(np.clip(self.data, low, high), (self,), lambda g: (g * inside,))

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def backward(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return self._make(out, (self,), backward)

    # graph traversal
    def backward(self):
        """
        Back-propagate from this scalar node.

        Raises
        ------
        UsageError
            If the tensor is not a scalar.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}.")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def concat(tensors, axis=-1):
    """Concatenate tensors (or arrays) along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return tensors[0]._make(data, tensors, backward)


def minimum(a, b):
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return a._make(np.minimum(a.data, b.data), (a, b), backward)
