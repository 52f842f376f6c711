"""Lightweight parameter containers, initialisers and the Adam optimiser."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from faxbev.tensor import Parameter, Tensor, batch_norm, conv2d, layer_norm, linear


class Module:
    """Attribute-based parameter tree.

    Parameters, buffers (plain float arrays stored in ``self._buffers``) and
    sub-modules are discovered by walking instance attributes; lists of
    modules are supported.  Names are dotted paths.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, arr in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", arr
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self, prefix: str = "") -> "Module":
        """Stamp each parameter with its dotted path (call once after construction)."""
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (between training runs only)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            buf = getattr(m, "_buffers", None)
            if buf:
                for k in buf:
                    buf[k] = buf[k].astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = {}
        for m_name, m in _named_modules(self):
            for k in getattr(m, "_buffers", {}):
                bufs[m_name + k] = (m, k)
        expected = set(own) | set(bufs)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, copy=True)
        for name, (m, k) in bufs.items():
            m._buffers[k] = np.array(state[name], copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _named_modules(mod: Module, prefix: str = ""):
    yield prefix, mod
    for key, val in vars(mod).items():
        if key.startswith("_"):
            continue
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{key}.")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{key}.{i}.")


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> Parameter:
    bound = math.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def zeros(shape, dtype=np.float32) -> Parameter:
    return Parameter(np.zeros(shape), dtype=dtype)


def ones(shape, dtype=np.float32) -> Parameter:
    return Parameter(np.ones(shape), dtype=dtype)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True):
        self.weight = uniform_fan_in(rng, (cin, cout), cin)
        self.bias = zeros((cout,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gamma = ones((c,))
        self.beta = zeros((c,))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self._eps)


class BatchNorm(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = ones((c,))
        self.beta = zeros((c,))
        self._buffers = {"running_mean": np.zeros(c, dtype=np.float32),
                         "running_var": np.ones(c, dtype=np.float32)}
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                          self._buffers["running_var"], self.training, self._momentum, self._eps)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1, bias: bool = True):
        self.weight = uniform_fan_in(rng, (kernel, kernel, cin, cout), kernel * kernel * cin)
        self.bias = zeros((cout,)) if bias else None
        self._stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self._stride)


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``weight_decay > 0``)."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        adam_step(self, self.lr if lr is None else lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam, lr: float) -> None:
    """One Adam update over every parameter holding a gradient."""
    opt.t += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    clip = 1.0
    if opt.grad_clip is not None:
        total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in opt.params if p.grad is not None))
        if total > opt.grad_clip:
            clip = opt.grad_clip / (total + 1e-12)
    for p, m, v in zip(opt.params, opt.m, opt.v):
        if p.grad is None:
            continue
        g = p.grad * clip
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if opt.weight_decay:
            update = update + opt.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float = 0.0, warmup: int = 0) -> float:
    """Cosine annealing from ``base_lr`` to ``min_lr`` with an optional linear warmup."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(step: int, total: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    initial = max_lr / div_factor
    final = initial / final_div_factor
    up = max(int(total * pct_start), 1)
    if step < up:
        frac = step / up
        return initial + (max_lr - initial) * 0.5 * (1 - math.cos(math.pi * frac))
    frac = min((step - up) / max(total - up, 1), 1.0)
    return final + (max_lr - final) * 0.5 * (1 + math.cos(math.pi * frac))
