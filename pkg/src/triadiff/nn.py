"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for FiLM-modulated MLP heads: broadcast add/mul,
2-D matmul, tanh, concat, slicing, reshape, and reductions. Gradients are
checked against central finite differences in the test suite.
"""

import math

import numpy as np

__all__ = [
    "Tensor",
    "concat",
    "tanh",
    "linear",
    "film",
    "AdamW",
    "cosine_lr",
    "trunc_normal",
    "timestep_embedding",
]


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # -- graph walk ----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- ops -----------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw)

    def __radd__(self, other):
        return _wrap(other) + self

    def __neg__(self):
        def bw(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor(-self.data, parents=(self,), backward_fn=bw)

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw)

    def __rmul__(self, other):
        return _wrap(other) * self

    def __matmul__(self, other):
        other = _wrap(other)
        out_data = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor(out_data, parents=(self, other), backward_fn=bw)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def repeat_rows(self, k: int):
        """Repeat each row of a 2-D tensor k times: (B, d) -> (B*k, d)."""
        if self.data.ndim != 2:
            raise ValueError("repeat_rows requires a 2-D tensor")
        out_data = np.repeat(self.data, k, axis=0)
        b, d = self.data.shape

        def bw(g):
            if self.requires_grad:
                self._accum(g.reshape(b, k, d).sum(axis=1))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        old_shape = self.data.shape

        def bw(g):
            if self.requires_grad:
                self._accum(g.reshape(old_shape))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def sum(self):
        def bw(g):
            if self.requires_grad:
                self._accum(np.full(self.data.shape, float(g)))

        return Tensor(self.data.sum(), parents=(self,), backward_fn=bw)

    def mean(self):
        n = self.data.size

        def bw(g):
            if self.requires_grad:
                self._accum(np.full(self.data.shape, float(g) / n))

        return Tensor(self.data.mean(), parents=(self,), backward_fn=bw)

    def abs(self):
        sign = np.sign(self.data)

        def bw(g):
            if self.requires_grad:
                self._accum(g * sign)

        return Tensor(np.abs(self.data), parents=(self,), backward_fn=bw)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def tanh(t: Tensor) -> Tensor:
    out_data = np.tanh(t.data)

    def bw(g):
        if t.requires_grad:
            t._accum(g * (1.0 - out_data**2))

    return Tensor(out_data, parents=(t,), backward_fn=bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                t._accum(g[tuple(index)])

    return Tensor(out_data, parents=tuple(tensors), backward_fn=bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def film(h: Tensor, scale_delta: Tensor, shift: Tensor) -> Tensor:
    """Feature-wise modulation h * (1 + scale_delta) + shift.

    Zero-initialized generators therefore start at the identity map.
    """
    return h * (scale_delta + 1.0) + shift


def trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal draws with resampling outside two standard deviations."""
    out = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return out * std


def timestep_embedding(step: int | np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion step indices; shape (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    steps = np.atleast_1d(np.asarray(step, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb[0] if np.isscalar(step) or np.ndim(step) == 0 else emb


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to exactly zero at the final step."""
    if total_steps <= 1:
        return base_lr if step == 0 else 0.0
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {k!r}")
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite parameter in {k!r}")

    def state(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
