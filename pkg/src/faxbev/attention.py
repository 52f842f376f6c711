"""3D relative attention and the FAX self-/cross-attention blocks.

A FAX block is two pre-norm transformer sub-blocks run back to back: the
first attends inside non-overlapping ``N x P x P`` windows (``fused_block``),
the second across a dilated ``N x G x G`` grid (``fused_grid``).  Each
sub-block is ``x + attn(LN(x))`` followed by ``x + MLP(LN(x))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from faxbev import nn
from faxbev.errors import ConfigurationError, DimensionError
from faxbev.partition import PartitionSpec, _pair, fused_block, fused_grid, fused_unblock, fused_ungrid
from faxbev.tensor import (
    Tensor,
    add,
    gather_last,
    matmul,
    mlp_block,
    permute_axes,
    reshape,
    scale,
    softmax_lastaxis,
    swap_last2,
)

# Additive score for masked keys.  Large enough that exp() underflows to an
# exact zero in f32 and f64 after max-subtraction, while staying finite.
MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    num_heads: int
    P: int | tuple[int, int] = 8
    G: int | tuple[int, int] = 8
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.num_heads < 1 or self.dim % self.num_heads:
            raise ConfigurationError(f"num_heads={self.num_heads} must divide dim={self.dim}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def spec(self, n: int, h: int, w: int) -> PartitionSpec:
        return PartitionSpec(self.P, self.G, n, h, w, self.dim)


@lru_cache(maxsize=None)
def relative_index(n: int, ph: int, pw: int, n0: int | None = None, ph0: int | None = None,
                   pw0: int | None = None) -> np.ndarray:
    """Flat offsets into a ``(2N0-1, 2P0h-1, 2P0w-1)`` table for every token pair.

    Tokens are ordered ``(n, p, q)``.  The table may be built for a larger
    window than the one queried (``n0 >= n`` etc.); offsets stay centred.
    """
    n0, ph0, pw0 = n0 or n, ph0 or ph, pw0 or pw
    if n > n0 or ph > ph0 or pw > pw0:
        raise ConfigurationError(f"window ({n},{ph},{pw}) exceeds bias table ({n0},{ph0},{pw0})")
    nn_, pp, qq = np.meshgrid(np.arange(n), np.arange(ph), np.arange(pw), indexing="ij")
    coords = np.stack([nn_.ravel(), pp.ravel(), qq.ravel()], axis=1)
    d = coords[:, None, :] - coords[None, :, :]
    d0 = d[..., 0] + n0 - 1
    d1 = d[..., 1] + ph0 - 1
    d2 = d[..., 2] + pw0 - 1
    idx = (d0 * (2 * ph0 - 1) + d1) * (2 * pw0 - 1) + d2
    idx.setflags(write=False)
    return idx


class RelativeBiasTable(nn.Module):
    """Learned per-head bias indexed by 3D token offsets (agent, row, col)."""

    def __init__(self, num_heads: int, n: int, window, dtype=np.float32):
        ph, pw = _pair(window)
        self._dims = (n, ph, pw)
        size = (2 * n - 1) * (2 * ph - 1) * (2 * pw - 1)
        self.table = nn.zeros((num_heads, size), dtype=dtype)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._dims

    def index_map(self, n: int | None = None) -> np.ndarray:
        n0, ph, pw = self._dims
        return relative_index(n or n0, ph, pw, n0, ph, pw)

    def bias(self, n: int | None = None) -> Tensor:
        idx = self.index_map(n)
        return gather_last(self.table, idx)  # [heads, T, T]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, c = x.shape
    y = reshape(x, tuple(lead) + (t, heads, c // heads))
    k = len(lead)
    return permute_axes(y, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, d = x.shape
    k = len(lead)
    y = permute_axes(x, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(y, tuple(lead) + (t, h * d))


def relative_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, num_heads: int,
                       key_mask: np.ndarray | None = None, out_weight: Tensor | None = None,
                       out_bias: Tensor | None = None, counter: dict | None = None,
                       probe: list | None = None) -> Tensor:
    """Multi-head ``softmax(q k^T / sqrt(d) + B) v`` over the second-to-last axis.

    ``q``: [..., Tq, C]; ``k``/``v``: [..., Tk, C] (already projected).
    ``bias``: [heads, Tq, Tk] broadcast over the leading axes.
    ``key_mask``: boolean, broadcastable to [..., Tk]; False keys get no weight.
    ``counter["pairs"]`` is incremented by the number of score entries formed.
    """
    c = q.shape[-1]
    if c % num_heads:
        raise ConfigurationError(f"num_heads={num_heads} must divide channels={c}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    d = c // num_heads
    qh, kh, vh = _split_heads(q, num_heads), _split_heads(k, num_heads), _split_heads(v, num_heads)
    scores = scale(matmul(qh, swap_last2(kh)), 1.0 / math.sqrt(d))
    if bias is not None:
        scores = add(scores, bias)
    if key_mask is not None:
        m = np.asarray(key_mask, dtype=bool)
        additive = np.where(m, 0.0, MASK_VALUE).astype(scores.dtype)
        scores = add(scores, additive[..., None, None, :])
    if counter is not None:
        counter["pairs"] = counter.get("pairs", 0) + int(np.prod(scores.shape))
    weights = softmax_lastaxis(scores)
    if probe is not None:
        probe.append(weights.data)
    out = _merge_heads(matmul(weights, vh))
    if out_weight is not None:
        out = matmul(out, out_weight)
        if out_bias is not None:
            out = add(out, out_bias)
    return out


class AttentionProjections(nn.Module):
    """Bias-free Q/K/V projections and a biased output projection."""

    def __init__(self, rng, dim: int, kv_dim: int | None = None):
        kv_dim = kv_dim or dim
        self.wq = nn.uniform_fan_in(rng, (dim, dim), dim)
        self.wk = nn.uniform_fan_in(rng, (kv_dim, dim), kv_dim)
        self.wv = nn.uniform_fan_in(rng, (kv_dim, dim), kv_dim)
        self.wo = nn.uniform_fan_in(rng, (dim, dim), dim)
        self.bo = nn.zeros((dim,))


class MLP(nn.Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.w1 = nn.uniform_fan_in(rng, (dim, hidden), dim)
        self.w2 = nn.uniform_fan_in(rng, (hidden, dim), hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_block(x, self.w1, self.w2)


class FaxSubBlock(nn.Module):
    """One attention + MLP sub-block; ``mode`` selects window or grid partitioning."""

    def __init__(self, rng, cfg: AttentionConfig, n_agents: int, mode: str):
        if mode not in ("block", "grid"):
            raise ValueError(f"mode must be 'block' or 'grid', got {mode!r}")
        self._mode = mode
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = AttentionProjections(rng, cfg.dim)
        self.rel_bias = RelativeBiasTable(cfg.num_heads, n_agents, cfg.P if mode == "block" else cfg.G)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = MLP(rng, cfg.dim, cfg.mlp_ratio * cfg.dim)

    @property
    def mode(self) -> str:
        return self._mode


class FaxSABlock(nn.Module):
    def __init__(self, rng, cfg: AttentionConfig, n_agents: int):
        self.local = FaxSubBlock(rng, cfg, n_agents, "block")
        self.glob = FaxSubBlock(rng, cfg, n_agents, "grid")


def _fax_sa_sub(x: Tensor, sub: FaxSubBlock, cfg: AttentionConfig, valid=None,
                counter: dict | None = None, probe: list | None = None) -> Tensor:
    n, h, w, c = x.shape[-4:]
    if c != cfg.dim:
        raise DimensionError(f"feature channels {c} != attention dim {cfg.dim}")
    spec = cfg.spec(n, h, w)
    part, unpart = (fused_block, fused_unblock) if sub.mode == "block" else (fused_grid, fused_ungrid)
    gh, gw = spec.window if sub.mode == "block" else spec.grid
    y = part(sub.ln1(x), spec)  # [..., groups, tokens, C]
    a = sub.attn
    q, k, v = matmul(y, a.wq), matmul(y, a.wk), matmul(y, a.wv)
    key_mask = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape[-1] != n:
            raise DimensionError(f"validity mask length {valid.shape[-1]} != agent count {n}")
        # token order inside a window/group is (n, row, col)
        key_mask = np.repeat(valid, gh * gw, axis=-1)
        if key_mask.ndim > 1:
            key_mask = key_mask[..., None, :]  # broadcast over groups
    bias = sub.rel_bias.bias(n)
    out = relative_attention(q, k, v, bias, cfg.num_heads, key_mask, a.wo, a.bo, counter, probe)
    x = add(x, unpart(out, spec))
    return add(x, sub.mlp(sub.ln2(x)))


def fax_local_sa(x: Tensor, block: FaxSABlock, cfg: AttentionConfig, valid=None,
                 counter: dict | None = None, probe: list | None = None) -> Tensor:
    """Windowed 3D attention over ``x: [..., N, H, W, C]``, with residual and MLP."""
    return _fax_sa_sub(x, block.local, cfg, valid, counter, probe)


def fax_global_sa(x: Tensor, block: FaxSABlock, cfg: AttentionConfig, valid=None,
                  counter: dict | None = None, probe: list | None = None) -> Tensor:
    """Sparse grid 3D attention over ``x: [..., N, H, W, C]``, with residual and MLP."""
    return _fax_sa_sub(x, block.glob, cfg, valid, counter, probe)


def fax_sa_block(x: Tensor, block: FaxSABlock, cfg: AttentionConfig, valid=None,
                 counter: dict | None = None, probe: list | None = None) -> Tensor:
    x = fax_local_sa(x, block, cfg, valid, counter, probe)
    return fax_global_sa(x, block, cfg, valid, counter, probe)


def fax_sa_pair_count(n: int, h: int, w: int, cfg: AttentionConfig) -> int:
    """Closed-form number of score entries in one FAX-SA block: HW N^2 (P^2 + G^2) heads."""
    ph, pw = _pair(cfg.P)
    gh, gw = _pair(cfg.G)
    return h * w * n * n * (ph * pw + gh * gw) * cfg.num_heads


def dense_pair_count(n: int, h: int, w: int, num_heads: int) -> int:
    return (n * h * w) ** 2 * num_heads


# -- cross attention ----------------------------------------------------------

class FaxCASubBlock(nn.Module):
    """Cross-attention sub-block: BEV queries attend to camera-feature tokens.

    The learned bias is indexed by (query token, key token within one
    camera's window) and shared across cameras, so camera order only enters
    through the positional encoding.
    """

    def __init__(self, rng, cfg: AttentionConfig, kv_dim: int, q_window, kv_window, mode: str):
        self._mode = mode
        qh, qw = _pair(q_window)
        kh, kw = _pair(kv_window)
        self.ln_q = nn.LayerNorm(cfg.dim)
        self.ln_kv = nn.LayerNorm(kv_dim)
        self.attn = AttentionProjections(rng, cfg.dim, kv_dim)
        self.cross_bias = nn.zeros((cfg.num_heads, qh * qw, kh * kw))
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = MLP(rng, cfg.dim, cfg.mlp_ratio * cfg.dim)

    @property
    def mode(self) -> str:
        return self._mode


class FaxCABlock(nn.Module):
    def __init__(self, rng, cfg_bev: AttentionConfig, cfg_feat: AttentionConfig):
        self.local = FaxCASubBlock(rng, cfg_bev, cfg_feat.dim, cfg_bev.P, cfg_feat.P, "block")
        self.glob = FaxCASubBlock(rng, cfg_bev, cfg_feat.dim, cfg_bev.G, cfg_feat.G, "grid")


def _fax_ca_sub(bev: Tensor, cams: Tensor, pe: Tensor, sub: FaxCASubBlock, cfg_bev: AttentionConfig,
                cfg_feat: AttentionConfig, counter=None, probe=None) -> Tensor:
    hb, wb, c = bev.shape[-3:]
    m, hf, wf, cf = cams.shape[-4:]
    lead = tuple(bev.shape[:-3])
    spec_b = PartitionSpec(cfg_bev.P, cfg_bev.G, 1, hb, wb, c)
    spec_f = PartitionSpec(cfg_feat.P, cfg_feat.G, m, hf, wf, cf)
    if sub.mode == "block":
        part, unpart = fused_block, fused_unblock
        nb, nf = spec_b.num_windows, spec_f.num_windows
        kw_ = spec_f.window
    else:
        part, unpart = fused_grid, fused_ungrid
        nb, nf = spec_b.num_grid_groups, spec_f.num_grid_groups
        kw_ = spec_f.grid
    if nb != nf:
        kind = "window" if sub.mode == "block" else "grid-group"
        raise ConfigurationError(f"BEV {kind} count {nb} != camera-feature {kind} count {nf}")
    x4 = reshape(bev, lead + (1, hb, wb, c))
    qin = part(sub.ln_q(x4), spec_b)                    # [..., groups, Tq, C]
    kvn = sub.ln_kv(cams)
    kv = part(kvn, spec_f)                              # [..., groups, M*Tf, Cf]
    kin = add(kv, part(pe, spec_f))
    a = sub.attn
    q, k, v = matmul(qin, a.wq), matmul(kin, a.wk), matmul(kv, a.wv)
    per_cam = kw_[0] * kw_[1]
    bias = gather_last(sub.cross_bias, np.tile(np.arange(per_cam), m))
    out = relative_attention(q, k, v, bias, cfg_bev.num_heads, None, a.wo, a.bo, counter, probe)
    x4 = add(x4, unpart(out, spec_b))
    x4 = add(x4, sub.mlp(sub.ln2(x4)))
    return reshape(x4, lead + (hb, wb, c))


def fax_ca_block(bev_query: Tensor, cam_feats: Tensor, pe: Tensor, block: FaxCABlock,
                 cfg_bev: AttentionConfig, cfg_feat: AttentionConfig, counter=None, probe=None) -> Tensor:
    """BEV queries ``[..., Hb, Wb, C]`` cross-attend to cameras ``[..., M, hf, wf, Cf]``.

    The i-th BEV window pairs with the i-th camera-feature window (raster
    order) across all M cameras; likewise for grid groups.  ``pe`` is added
    to the keys only.
    """
    x = _fax_ca_sub(bev_query, cam_feats, pe, block.local, cfg_bev, cfg_feat, counter, probe)
    return _fax_ca_sub(x, cam_feats, pe, block.glob, cfg_bev, cfg_feat, counter, probe)
