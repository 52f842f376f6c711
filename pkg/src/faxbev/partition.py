"""Fused-Block / Fused-Grid partitioning and their inverses.

Both operators take ``x`` of shape ``[..., N, H, W, C]`` and move a set of
tokens into a single "spatial axis" so that ordinary attention over the
second-to-last axis mixes exactly those tokens:

* block: window ``(i, j)`` holds ``x[n, i*P + p, j*P + q]``, tokens ordered ``(n, p, q)``
* grid:  group ``(u, v)`` holds ``x[n, a*(H/G) + u, b*(W/G) + v]``, tokens ordered ``(n, a, b)``

Window and grid sizes may be rectangular ``(rows, cols)``.  Non-divisible
maps are rejected, never padded.
"""
from __future__ import annotations

from dataclasses import dataclass

from faxbev.errors import ConfigurationError, DimensionError
from faxbev.tensor import Tensor, permute_axes, reshape


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class PartitionSpec:
    P: int | tuple[int, int]
    G: int | tuple[int, int]
    N: int
    H: int
    W: int
    C: int

    def __post_init__(self):
        ph, pw = self.window
        gh, gw = self.grid
        if min(ph, pw, gh, gw, self.N, self.H, self.W, self.C) < 1:
            raise ConfigurationError(f"all partition sizes must be positive: {self}")
        if self.H % ph or self.W % pw:
            raise ConfigurationError(f"window P={self.P} must divide H={self.H} and W={self.W}")
        if self.H % gh or self.W % gw:
            raise ConfigurationError(f"grid G={self.G} must divide H={self.H} and W={self.W}")

    @property
    def window(self) -> tuple[int, int]:
        return _pair(self.P)

    @property
    def grid(self) -> tuple[int, int]:
        return _pair(self.G)

    @property
    def num_windows(self) -> int:
        ph, pw = self.window
        return (self.H // ph) * (self.W // pw)

    @property
    def window_tokens(self) -> int:
        ph, pw = self.window
        return self.N * ph * pw

    @property
    def num_grid_groups(self) -> int:
        gh, gw = self.grid
        return (self.H // gh) * (self.W // gw)

    @property
    def grid_tokens(self) -> int:
        gh, gw = self.grid
        return self.N * gh * gw

    @property
    def blocked_shape(self) -> tuple[int, int, int]:
        return self.num_windows, self.window_tokens, self.C

    @property
    def gridded_shape(self) -> tuple[int, int, int]:
        return self.num_grid_groups, self.grid_tokens, self.C


def _check_input(x: Tensor, spec: PartitionSpec) -> tuple[int, ...]:
    if x.ndim < 4 or tuple(x.shape[-4:]) != (spec.N, spec.H, spec.W, spec.C):
        raise DimensionError(f"expected [..., {spec.N}, {spec.H}, {spec.W}, {spec.C}], got {x.shape}")
    return tuple(x.shape[:-4])


def _check_parted(y: Tensor, spec: PartitionSpec, shape: tuple[int, int, int]) -> tuple[int, ...]:
    if y.ndim < 3 or tuple(y.shape[-3:]) != shape:
        raise DimensionError(f"expected [..., {shape[0]}, {shape[1]}, {shape[2]}], got {y.shape}")
    return tuple(y.shape[:-3])


def fused_block(x: Tensor, spec: PartitionSpec) -> Tensor:
    lead = _check_input(x, spec)
    ph, pw = spec.window
    n, h, w, c = spec.N, spec.H, spec.W, spec.C
    k = len(lead)
    y = reshape(x, lead + (n, h // ph, ph, w // pw, pw, c))
    # (..., n, i, p, j, q, c) -> (..., i, j, n, p, q, c)
    y = permute_axes(y, tuple(range(k)) + tuple(k + a for a in (1, 3, 0, 2, 4, 5)))
    return reshape(y, lead + spec.blocked_shape)


def fused_unblock(y: Tensor, spec: PartitionSpec) -> Tensor:
    lead = _check_parted(y, spec, spec.blocked_shape)
    ph, pw = spec.window
    n, h, w, c = spec.N, spec.H, spec.W, spec.C
    k = len(lead)
    x = reshape(y, lead + (h // ph, w // pw, n, ph, pw, c))
    # (..., i, j, n, p, q, c) -> (..., n, i, p, j, q, c)
    x = permute_axes(x, tuple(range(k)) + tuple(k + a for a in (2, 0, 3, 1, 4, 5)))
    return reshape(x, lead + (n, h, w, c))


def fused_grid(x: Tensor, spec: PartitionSpec) -> Tensor:
    lead = _check_input(x, spec)
    gh, gw = spec.grid
    n, h, w, c = spec.N, spec.H, spec.W, spec.C
    k = len(lead)
    y = reshape(x, lead + (n, gh, h // gh, gw, w // gw, c))
    # (..., n, a, u, b, v, c) -> (..., u, v, n, a, b, c)
    y = permute_axes(y, tuple(range(k)) + tuple(k + a for a in (2, 4, 0, 1, 3, 5)))
    return reshape(y, lead + spec.gridded_shape)


def fused_ungrid(y: Tensor, spec: PartitionSpec) -> Tensor:
    lead = _check_parted(y, spec, spec.gridded_shape)
    gh, gw = spec.grid
    n, h, w, c = spec.N, spec.H, spec.W, spec.C
    k = len(lead)
    x = reshape(y, lead + (h // gh, w // gw, n, gh, gw, c))
    # (..., u, v, n, a, b, c) -> (..., n, a, u, b, v, c)
    x = permute_axes(x, tuple(range(k)) + tuple(k + a for a in (2, 3, 0, 4, 1, 5)))
    return reshape(x, lead + (n, h, w, c))
