"""Small reverse-mode differentiation kernel over dense float64 arrays."""
import logging

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    def __init__(self, data, requires_grad=False, ctx=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._ctx = ctx

    def __repr__(self):
        return f"<Tensor shape={self.data.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return Add.apply(self, as_tensor(other))

    def __mul__(self, other):
        return Mul.apply(self, as_tensor(other))

    def __matmul__(self, other):
        return MatMul.apply(self, as_tensor(other))

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        topo = []
        visited = set()

        def visit(node):
            if id(node) in visited:
                return
            visited.add(id(node))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    visit(parent)
            topo.append(node)

        visit(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)

        for node in reversed(topo):
            ctx = node._ctx
            if ctx is None or node.grad is None:
                continue
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not self:
                node.grad = None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name, out):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced non-finite values")


class Function:
    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def invoke(cls, *parents, **kwargs):
        """Run the op and return (output tensor, op context)."""
        parents = tuple(as_tensor(p) for p in parents)
        ctx = cls(*parents)
        out = ctx.forward(*[p.data for p in parents], **kwargs)
        _check_finite(cls.__name__, out)
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, ctx=ctx if requires_grad else None), ctx

    @classmethod
    def apply(cls, *parents, **kwargs):
        return cls.invoke(*parents, **kwargs)[0]

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Add(Function):
    def forward(self, x, y):
        if x.shape != y.shape:
            raise ValueError(f"Add needs equal shapes, got {x.shape} and {y.shape}")
        return x + y

    def backward(self, grad):
        return grad, grad


class AddBias(Function):
    """x (N×d) plus a length-d bias broadcast over rows."""

    def forward(self, x, b):
        return x + b

    def backward(self, grad):
        return grad, grad.sum(axis=0)


class Mul(Function):
    def forward(self, x, y):
        if x.shape != y.shape:
            raise ValueError(f"Mul needs equal shapes, got {x.shape} and {y.shape}")
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class MulConst(Function):
    """Multiply by a constant array that broadcasts into x's shape."""

    def forward(self, x, const=None):
        self.const = np.broadcast_to(np.asarray(const, dtype=np.float64), x.shape)
        return x * self.const

    def backward(self, grad):
        return (grad * self.const,)


class MatMul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class ReLU(Function):
    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, 0.0)

    def backward(self, grad):
        return (grad * self.positive,)


class ELU(Function):
    def forward(self, x, alpha=1.0):
        self.alpha = alpha
        self.positive = x > 0
        self.negative_out = alpha * np.expm1(np.minimum(x, 0.0))
        return np.where(self.positive, x, self.negative_out)

    def backward(self, grad):
        return (grad * np.where(self.positive, 1.0, self.negative_out + self.alpha),)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.array(x.sum())

    def backward(self, grad):
        return (np.full(self.shape, float(grad)),)


class GetItem(Function):
    def forward(self, x, key=None):
        self.shape = x.shape
        self.key = key
        return np.array(x[key])

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.key, grad)
        return (full,)


class Reshape(Function):
    def forward(self, x, shape=None):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Gather(Function):
    """Pick entries along the last axis: out[..., j] = x[..., indices[..., j]]."""

    def forward(self, x, indices=None):
        self.shape = x.shape
        self.indices = indices
        return np.take_along_axis(x, indices, axis=-1)

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.put_along_axis(full, self.indices, grad, axis=-1)
        return (full,)


class Concat(Function):
    def forward(self, *xs, axis=1):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class MeanOf(Function):
    def forward(self, *xs):
        self.count = len(xs)
        return np.mean(np.stack(xs), axis=0)

    def backward(self, grad):
        return tuple(grad / self.count for _ in range(self.count))


def masked_softmax(x, keep=None):
    """Softmax along the last axis; entries that are -inf or not kept map to 0.

    Raises ValueError when a row has no finite kept entry.
    """
    x = np.asarray(x, dtype=np.float64)
    keep = np.isfinite(x) if keep is None else (np.asarray(keep, dtype=bool) & np.isfinite(x))
    if not keep.any(axis=-1).all():
        raise ValueError("masked_softmax: every entry of a row is masked")
    z = np.where(keep, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class MaskedSoftmax(Function):
    def forward(self, x, keep=None):
        self.out = masked_softmax(x, keep)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - np.sum(grad * s, axis=-1, keepdims=True)),)


class LogSoftmaxNLL(Function):
    """Mean negative log-likelihood of log-softmax(logits) over masked rows."""

    def forward(self, logits, labels=None, mask=None):
        mask = np.asarray(mask, dtype=bool)
        count = int(mask.sum())
        if count == 0:
            raise ValueError("LogSoftmaxNLL: empty mask")
        z = logits - logits.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.flatnonzero(mask)
        self.probs = np.exp(log_probs)
        self.rows = rows
        self.labels = np.asarray(labels)[rows]
        self.count = count
        return np.array(-log_probs[rows, self.labels].mean())

    def backward(self, grad):
        d = np.zeros_like(self.probs)
        d[self.rows] = self.probs[self.rows]
        d[self.rows, self.labels] -= 1.0
        return (float(grad) * d / self.count,)


class SparseAggregate(Function):
    """out[v] = sum_j values[v, j] * X[indices[v, j]] for compact N×k attention."""

    def forward(self, values, X, indices=None):
        n, k = values.shape
        self.indices = indices
        self.X = X
        rows = np.repeat(np.arange(n), k)
        self.A = sp.csr_matrix((values.ravel(), (rows, indices.ravel())), shape=(n, X.shape[0]))
        return self.A @ X

    def backward(self, grad):
        gathered = self.X[self.indices]
        g_values = np.einsum("vd,vjd->vj", grad, gathered)
        return g_values, self.A.T @ grad


def relu(x):
    return ReLU.apply(x)


def elu(x, alpha=1.0):
    return ELU.apply(x, alpha=alpha)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout; the identity when not training or rate == 0."""
    if not training or rate <= 0:
        return x
    keep = rng.random(x.shape) >= rate
    return MulConst.apply(x, const=keep / (1.0 - rate))


def grad_check(f, inputs, eps=1e-5):
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) with central differences."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tensors)
    out.backward()

    worst = 0.0
    for index, base in enumerate(arrays):
        analytic = tensors[index].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        for position in np.ndindex(base.shape):
            shifted = [a.copy() for a in arrays]
            shifted[index][position] = base[position] + eps
            plus = float(f(*[Tensor(a) for a in shifted]).data)
            shifted[index][position] = base[position] - eps
            minus = float(f(*[Tensor(a) for a in shifted]).data)
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, abs(analytic[position] - numeric) / max(1.0, abs(numeric)))
    return worst


class Adam:
    """Adam with classic L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=0.01, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def effective_gradient(self, name):
        p = self.params[name]
        if p.grad is None:
            return None
        return p.grad + self.weight_decay * p.data

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            g = self.effective_gradient(name)
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp_filter(head_count, hidden_width, rng):
    """Filter MLP 1 -> hidden -> hidden -> M; Glorot-uniform weights, zero biases."""
    return {
        "mlp_w1": Tensor(glorot_uniform(rng, 1, hidden_width), requires_grad=True),
        "mlp_b1": Tensor(np.zeros(hidden_width), requires_grad=True),
        "mlp_w2": Tensor(glorot_uniform(rng, hidden_width, hidden_width), requires_grad=True),
        "mlp_b2": Tensor(np.zeros(hidden_width), requires_grad=True),
        "mlp_w3": Tensor(glorot_uniform(rng, hidden_width, head_count), requires_grad=True),
        "mlp_b3": Tensor(np.zeros(head_count), requires_grad=True),
    }


def mlp_response(params, eigenvalues):
    """Pointwise filter MLP at λ/2; returns a len(eigenvalues)×M Tensor."""
    lam = np.asarray(eigenvalues, dtype=np.float64).reshape(-1, 1)
    x = Tensor(lam / 2.0)
    h = relu(AddBias.apply(x @ as_tensor(params["mlp_w1"]), as_tensor(params["mlp_b1"])))
    h = relu(AddBias.apply(h @ as_tensor(params["mlp_w2"]), as_tensor(params["mlp_b2"])))
    return AddBias.apply(h @ as_tensor(params["mlp_w3"]), as_tensor(params["mlp_b3"]))
