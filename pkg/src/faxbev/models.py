"""End-to-end assemblies: camera encoder, SinBEVT, compression, FuseBEVT, decoder.

Shapes follow the architecture table of the original design, scaled down
by the ``toy`` presets so the whole pipeline trains on a laptop CPU.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from faxbev import nn
from faxbev.attention import AttentionConfig, FaxCABlock, FaxSABlock, fax_ca_block, fax_sa_block
from faxbev.errors import ConfigurationError, DimensionError
from faxbev.geometry import BevGrid, CameraRig, Pose2D, camera_geometry_features, in_comm_range, warp_matrix
from faxbev.tensor import (
    Tensor,
    add,
    bilinear_upsample2x,
    concat,
    gelu,
    index_select,
    linear_resample,
    matmul,
    reshape,
)

Window = int | tuple[int, int]


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


@dataclass(frozen=True)
class SinBevtConfig:
    bev_sizes: tuple[int, int, int] = (32, 16, 8)
    dim: int = 32
    num_heads: int = 4
    image_size: tuple[int, int] = (32, 64)
    num_cameras: int = 4
    encoder_channels: tuple[int, int, int] = (16, 32, 32)
    bev_windows: tuple[Window, Window, Window] = (8, 4, 2)
    bev_grids: tuple[Window, Window, Window] = (8, 4, 2)
    feat_windows: tuple[Window, Window, Window] = ((4, 8), (2, 4), (1, 2))
    feat_grids: tuple[Window, Window, Window] = ((4, 8), (2, 4), (1, 2))
    bottleneck_ratio: int = 4

    @classmethod
    def full_scale(cls) -> "SinBevtConfig":
        # the stand-in encoder downsamples /2, /4, /8, so 128x128 inputs give the
        # 64/32/16 feature maps of the reference backbone
        return cls(bev_sizes=(128, 64, 32), dim=128, num_heads=4, image_size=(128, 128),
                   encoder_channels=(128, 256, 512), bev_windows=(16, 16, 32), bev_grids=(16, 16, 32),
                   feat_windows=(8, 8, 16), feat_grids=(8, 8, 16))

    def feature_sizes(self) -> list[tuple[int, int]]:
        h, w = self.image_size
        return [(h // 2, w // 2), (h // 4, w // 4), (h // 8, w // 8)]

    def stage_configs(self) -> list[tuple[AttentionConfig, AttentionConfig]]:
        out = []
        for s in range(3):
            cb = AttentionConfig(self.dim, self.num_heads, self.bev_windows[s], self.bev_grids[s])
            cf = AttentionConfig(self.encoder_channels[s], 1, self.feat_windows[s], self.feat_grids[s])
            out.append((cb, cf))
        return out

    def validate(self) -> None:
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ConfigurationError(f"image size {h}x{w} must be divisible by 8")
        sizes = self.bev_sizes
        if sizes[1] * 2 != sizes[0] or sizes[2] * 2 != sizes[1]:
            raise ConfigurationError(f"BEV stages must halve resolution, got {sizes}")
        for s, ((hf, wf), (cb, cf)) in enumerate(zip(self.feature_sizes(), self.stage_configs())):
            spec_b = cb.spec(1, sizes[s], sizes[s])
            spec_f = AttentionConfig(cf.dim, 1, cf.P, cf.G).spec(self.num_cameras, hf, wf)
            if spec_b.num_windows != spec_f.num_windows:
                raise ConfigurationError(
                    f"stage {s}: BEV window count {spec_b.num_windows} != feature window count {spec_f.num_windows}")
            if spec_b.num_grid_groups != spec_f.num_grid_groups:
                raise ConfigurationError(
                    f"stage {s}: BEV grid count {spec_b.num_grid_groups} != feature grid count {spec_f.num_grid_groups}")


@dataclass(frozen=True)
class CompressorConfig:
    rate: int = 1
    dim: int = 32

    def __post_init__(self):
        if self.rate < 1 or self.rate & (self.rate - 1):
            raise ConfigurationError(f"compression rate must be a power of two, got {self.rate}")
        if self.dim % self.rate:
            raise ConfigurationError(f"compression rate {self.rate} must divide C={self.dim}")

    @property
    def code_dim(self) -> int:
        return self.dim // self.rate


@dataclass(frozen=True)
class FuseBevtConfig:
    dim: int = 32
    num_heads: int = 4
    window: int = 4
    grid: int = 4
    num_layers: int = 3
    max_agents: int = 4

    @classmethod
    def full_scale(cls) -> "FuseBevtConfig":
        return cls(dim=128, num_heads=4, window=8, grid=8, num_layers=3, max_agents=5)

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.num_heads, self.window, self.grid)


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 32
    channels: tuple[int, int, int] = (32, 16, 16)
    num_classes: int = 2

    @classmethod
    def full_scale(cls, head: str = "dynamic") -> "DecoderConfig":
        return cls(dim=128, channels=(128, 64, 32), num_classes=head_classes(head))


def head_classes(head: str) -> int:
    try:
        return {"dynamic": 2, "static": 3}[head]
    except KeyError:
        raise ConfigurationError(f"head must be 'dynamic' or 'static', got {head!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    sinbevt: SinBevtConfig = field(default_factory=SinBevtConfig)
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    fusebevt: FuseBevtConfig = field(default_factory=FuseBevtConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    feature_meters_per_cell: float = 4.0
    comm_range: float = 70.0

    def bev_feature_grid(self) -> BevGrid:
        s = self.sinbevt.bev_sizes[-1]
        return BevGrid(s, s, self.feature_meters_per_cell)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def build(kls, sub):
            sub = {k: (tuple(_tuplify(x) for x in v) if isinstance(v, list) else v) for k, v in sub.items()}
            return kls(**sub)

        return cls(
            sinbevt=build(SinBevtConfig, d.get("sinbevt", {})),
            compressor=build(CompressorConfig, d.get("compressor", {})),
            fusebevt=build(FuseBevtConfig, d.get("fusebevt", {})),
            decoder=build(DecoderConfig, d.get("decoder", {})),
            feature_meters_per_cell=d.get("feature_meters_per_cell", 4.0),
            comm_range=d.get("comm_range", 70.0),
        )


# -- building blocks ------------------------------------------------------------

class TinyImageEncoder(nn.Module):
    """Three stride-2 conv3x3 + GELU stages (stand-in for a pretrained backbone)."""

    def __init__(self, rng, channels: Sequence[int] = (16, 32, 32), in_channels: int = 3):
        chans = [in_channels, *channels]
        self.convs = [nn.Conv2d(rng, chans[i], chans[i + 1], 3, stride=2) for i in range(3)]

    def __call__(self, images: Tensor) -> list[Tensor]:
        h, w = images.shape[-3:-1]
        if h % 8 or w % 8:
            raise ConfigurationError(f"image size {h}x{w} must be divisible by 8")
        feats = []
        x = images
        for conv in self.convs:
            x = gelu(conv(x))
            feats.append(x)
        return feats


def tiny_image_encoder(images: Tensor, params: TinyImageEncoder) -> list[Tensor]:
    return params(images)


class ResBottleneck(nn.Module):
    """conv1x1 (C -> C/r) -> conv3x3 (stride) -> conv1x1 (-> C), BN + GELU, residual."""

    def __init__(self, rng, dim: int, stride: int = 1, ratio: int = 4):
        mid = max(dim // ratio, 1)
        self.conv1 = nn.Conv2d(rng, dim, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm(mid)
        self.conv2 = nn.Conv2d(rng, mid, mid, 3, stride=stride, bias=False)
        self.bn2 = nn.BatchNorm(mid)
        self.conv3 = nn.Conv2d(rng, mid, dim, 1, bias=False)
        self.bn3 = nn.BatchNorm(dim)
        if stride != 1:
            self.down = nn.Conv2d(rng, dim, dim, 1, stride=stride, bias=False)
            self.down_bn = nn.BatchNorm(dim)
        else:
            self.down = None

    def __call__(self, x: Tensor) -> Tensor:
        y = gelu(self.bn1(self.conv1(x)))
        y = gelu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        short = x if self.down is None else self.down_bn(self.down(x))
        return gelu(add(y, short))


def geometric_bev_embedding(size: int, dim: int, rng, noise: float = 0.1) -> np.ndarray:
    """Initial value of the learnable BEV query, ``[size, size, dim]``.

    Channels hold the cell's bearing (cos, sin), normalised range and
    Fourier features of its normalised (x, y) position, then small uniform
    noise; each deterministic channel has unit variance.  Starting from
    geometry lets the query/key projections line cells up with camera rays
    instead of discovering every cell independently.
    """
    grid = BevGrid(size, size, 2.0 / size)
    xy = grid.cell_centers()
    x, y = xy[..., 0], xy[..., 1]
    ang = np.arctan2(y, x)
    chans = [np.cos(ang), np.sin(ang), np.hypot(x, y)]
    k = 1
    while len(chans) < dim:
        for f in (np.sin, np.cos):
            chans.extend([f(np.pi * k * x / 2), f(np.pi * k * y / 2)])
        k += 1
    emb = np.stack(chans[:dim], axis=-1)
    emb = (emb - emb.mean(axis=(0, 1))) / (emb.std(axis=(0, 1)) + 1e-6)
    return emb + rng.uniform(-noise, noise, size=emb.shape)


class SinBEVT(nn.Module):
    def __init__(self, rng, cfg: SinBevtConfig):
        cfg.validate()
        self._cfg = cfg
        h0 = cfg.bev_sizes[0]
        self.encoder = TinyImageEncoder(rng, cfg.encoder_channels)
        self.bev_embedding = nn.Parameter(geometric_bev_embedding(h0, cfg.dim, rng), dtype=np.float32)
        self.pe_proj = [nn.uniform_fan_in(rng, (6, c), 6) for c in cfg.encoder_channels]
        self.cross = [FaxCABlock(rng, cb, cf) for cb, cf in cfg.stage_configs()]
        # two bottlenecks per stage, flattened; the first of stages 0 and 1 halves the map
        self.refine = [ResBottleneck(rng, cfg.dim, 2 if (i % 2 == 0 and i < 4) else 1, cfg.bottleneck_ratio)
                       for i in range(6)]
        self._pe_cache: dict = {}

    @property
    def config(self) -> SinBevtConfig:
        return self._cfg

    def geometry(self, rigs: Sequence[CameraRig]) -> list[np.ndarray]:
        key = tuple((r.K.tobytes(), r.R.tobytes(), r.t.tobytes(), r.height, r.width) for r in rigs)
        if key not in self._pe_cache:
            self._pe_cache = {key: [np.stack([camera_geometry_features(r, fs) for r in rigs])
                                    for fs in self._cfg.feature_sizes()]}
        return self._pe_cache[key]

    def positional_encodings(self, rigs: Sequence[CameraRig]) -> list[Tensor]:
        out = []
        for geo, proj in zip(self.geometry(rigs), self.pe_proj):
            out.append(matmul(Tensor(geo.astype(proj.dtype)), proj))
        return out

    def __call__(self, images: Tensor, rigs: Sequence[CameraRig], probe: dict | None = None) -> Tensor:
        return sinbevt_forward(images, rigs, self, self._cfg, probe)


def sinbevt_forward(images: Tensor, rigs: Sequence[CameraRig], params: SinBEVT, cfg: SinBevtConfig,
                    probe: dict | None = None) -> Tensor:
    """Images ``[..., M, h, w, 3]`` -> BEV feature ``[..., H, W, C]``."""
    m = images.shape[-4]
    if len(rigs) != m:
        raise DimensionError(f"{len(rigs)} camera rigs for {m} images")
    if tuple(images.shape[-3:-1]) != tuple(cfg.image_size):
        raise DimensionError(f"images {images.shape[-3:-1]} != configured size {cfg.image_size}")
    lead = tuple(images.shape[:-4])
    feats = params.encoder(images)
    pes = params.positional_encodings(rigs)
    emb = params.bev_embedding
    bev = add(Tensor(np.zeros(lead + emb.shape, dtype=emb.dtype)), emb) if lead else emb
    for s, ((cb, cf), block) in enumerate(zip(cfg.stage_configs(), params.cross)):
        attn_probe = [] if probe is not None else None
        bev = fax_ca_block(bev, feats[s], pes[s], block, cb, cf, probe=attn_probe)
        if probe is not None:
            probe[f"sinbevt.stage{s}"] = attn_probe
        for blk in params.refine[2 * s:2 * s + 2]:
            bev = blk(bev)
    return bev


class Compressor(nn.Module):
    """1x1 convolutional auto-encoder on the channel axis."""

    def __init__(self, rng, cfg: CompressorConfig):
        self._cfg = cfg
        self.encode = nn.Conv2d(rng, cfg.dim, cfg.code_dim, 1)
        self.decode = nn.Conv2d(rng, cfg.code_dim, cfg.dim, 1)

    @property
    def config(self) -> CompressorConfig:
        return self._cfg

    def compress(self, feat: Tensor) -> Tensor:
        return self.encode(feat)

    def decompress(self, code: Tensor) -> Tensor:
        return self.decode(code)


def compress(feat: Tensor, params: Compressor) -> Tensor:
    return params.compress(feat)


def decompress(code: Tensor, params: Compressor) -> Tensor:
    return params.decompress(code)


def payload_bytes(h: int, w: int, c: int, rate: int, bytes_per_scalar: int = 4) -> int:
    """Transmitted size of one compressed ``h x w x c`` feature map."""
    if c % rate:
        raise ConfigurationError(f"compression rate {rate} must divide C={c}")
    return h * w * (c // rate) * bytes_per_scalar


class FuseBEVT(nn.Module):
    def __init__(self, rng, cfg: FuseBevtConfig):
        self._cfg = cfg
        acfg = cfg.attention()
        self.blocks = [FaxSABlock(rng, acfg, cfg.max_agents) for _ in range(cfg.num_layers)]

    @property
    def config(self) -> FuseBevtConfig:
        return self._cfg

    def __call__(self, stack: Tensor, valid, probe: dict | None = None) -> Tensor:
        return fusebevt_forward(stack, valid, self, probe)


def fusebevt_forward(stack: Tensor, valid, params: FuseBEVT, probe: dict | None = None,
                     counter: dict | None = None) -> Tensor:
    """Stacked agent features ``[..., N, H, W, C]`` -> fused ego feature ``[..., H, W, C]``.

    Slot 0 is the ego; invalid slots are excluded from attention.
    """
    valid = np.asarray(valid, dtype=bool)
    if not valid[..., 0].all():
        raise ConfigurationError("the ego slot (index 0) must be valid")
    acfg = params.config.attention()
    x = stack
    for i, blk in enumerate(params.blocks):
        attn_probe = [] if probe is not None else None
        x = fax_sa_block(x, blk, acfg, valid, counter, attn_probe)
        if probe is not None:
            probe[f"fusebevt.layer{i}"] = attn_probe
    return index_select(x, np.array(0), axis=-4)


class Decoder(nn.Module):
    """Three (bilinear x2, conv3x3, BN, GELU) stages and a 1x1 classification head."""

    def __init__(self, rng, cfg: DecoderConfig):
        self._cfg = cfg
        chans = [cfg.dim, *cfg.channels]
        self.convs = [nn.Conv2d(rng, chans[i], chans[i + 1], 3, bias=False) for i in range(3)]
        self.bns = [nn.BatchNorm(chans[i + 1]) for i in range(3)]
        self.head = nn.Conv2d(rng, chans[-1], cfg.num_classes, 1)

    def __call__(self, fused: Tensor) -> Tensor:
        return decoder_forward(fused, self)


def decoder_forward(fused: Tensor, params: Decoder, head: str | None = None) -> Tensor:
    if head is not None and head_classes(head) != params.head.weight.shape[-1]:
        raise ConfigurationError(f"decoder was built for {params.head.weight.shape[-1]} classes, not {head!r}")
    x = fused
    for conv, bn in zip(params.convs, params.bns):
        x = gelu(bn(conv(bilinear_upsample2x(x))))
    return params.head(x)


# -- full models ---------------------------------------------------------------

class SingleAgentModel(nn.Module):
    """SinBEVT followed directly by the decoder (no cooperation)."""

    kind = "single"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self.sinbevt = SinBEVT(rng, cfg.sinbevt)
        self.decoder = Decoder(rng, cfg.decoder)
        self.name_parameters()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def __call__(self, images: Tensor, rigs, poses=None, probe: dict | None = None) -> Tensor:
        """``images``: [A, M, h, w, 3] or a batch [B, A, M, h, w, 3]; only agent 0 (the ego) is used."""
        if images.ndim not in (4, 5, 6):
            raise DimensionError(f"expected [M, h, w, 3], [A, M, h, w, 3] or [B, A, M, h, w, 3], got {images.shape}")
        ego = images if images.ndim == 4 else index_select(images, np.array(0), axis=images.ndim - 5)
        return self.decoder(self.sinbevt(ego, rigs, probe))


class CoBEVT(nn.Module):
    """Per-agent SinBEVT, compressed sharing, warp to ego, FuseBEVT fusion, decoder."""

    kind = "cobevt"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self.sinbevt = SinBEVT(rng, cfg.sinbevt)
        self.compressor = Compressor(rng, cfg.compressor)
        self.fusebevt = FuseBEVT(rng, cfg.fusebevt)
        self.decoder = Decoder(rng, cfg.decoder)
        self.name_parameters()

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def __call__(self, images: Tensor, rigs, poses: Sequence[Pose2D], probe: dict | None = None,
                 max_agents: int | None = None) -> Tensor:
        return cobevt_forward(images, rigs, poses, self, probe=probe, max_agents=max_agents)


def select_agents(poses: Sequence[Pose2D], comm_range: float, n_max: int,
                  max_agents: int | None = None) -> list[int]:
    """Indices of agents that join the ego's stack: ego first, then in-range agents in scene order."""
    valid = in_comm_range(list(poses), 0, comm_range)
    limit = n_max if max_agents is None else min(n_max, max_agents)
    chosen = [0] + [i for i in range(1, len(poses)) if valid[i]]
    return chosen[:max(limit, 1)]


def cobevt_forward(images: Tensor, rigs, poses, params: CoBEVT,
                   probe: dict | None = None, max_agents: int | None = None) -> Tensor:
    """Scene inputs for all agents -> ego logits.

    ``images`` is ``[A, M, h, w, 3]`` with ``poses`` a list of A poses (agent
    0 is the ego), or a batch ``[B, A, M, h, w, 3]`` with ``poses`` a list of
    B such lists.  Returns ``[8H, 8W, K]`` or ``[B, 8H, 8W, K]``.
    """
    cfg = params.config
    batched = images.ndim == 6
    poses_b = list(poses) if batched else [list(poses)]
    if not batched:
        if images.ndim != 5:
            raise DimensionError(f"expected images [A, M, h, w, 3], got {images.shape}")
        images = reshape(images, (1,) + tuple(images.shape))
    b_count, a_count = images.shape[:2]
    if len(poses_b) != b_count or any(len(p) != a_count for p in poses_b) or a_count < 1:
        raise DimensionError(f"images {images.shape} do not match poses for {[len(p) for p in poses_b]} agents")
    n_max = cfg.fusebevt.max_agents
    chosen = [select_agents(p, cfg.comm_range, n_max, max_agents) for p in poses_b]
    rows = [b * a_count + a for b, ch in enumerate(chosen) for a in ch]
    flat = reshape(images, (b_count * a_count,) + tuple(images.shape[2:]))
    imgs = flat if rows == list(range(b_count * a_count)) else index_select(flat, np.array(rows), axis=0)
    feats = params.sinbevt(imgs, rigs, probe)  # [K, H, W, C]
    k_rows = feats.shape[0]
    h, w, c = feats.shape[-3:]
    grid = cfg.bev_feature_grid()

    # slot -> row of the pool [own features | warped shared features | zeros]
    ego_rows, other_rows, mats = [], [], []
    pos = 0
    for b, ch in enumerate(chosen):
        ego_rows.append(pos)
        for j, a in enumerate(ch[1:]):
            other_rows.append(pos + 1 + j)
            mats.append(warp_matrix(poses_b[b][a], poses_b[b][0], grid))
        pos += len(ch)
    pool = [feats]
    if other_rows:
        shared = index_select(feats, np.array(other_rows), axis=0)
        shared = params.compressor.decompress(params.compressor.compress(shared))
        k_o = len(other_rows)
        # one block-diagonal resample warps every sender at once
        warped = linear_resample(reshape(shared, (k_o * h, w, c)), sp.block_diag(mats, format="csr"), (k_o * h, w))
        warped = reshape(warped, (k_o, h, w, c))
        pool.append(warped)
        if probe is not None:
            probe["warped"] = [warped.data[i] for i in range(k_o)]
    elif probe is not None:
        probe["warped"] = []
    pool.append(Tensor(np.zeros((1, h, w, c), dtype=feats.dtype)))
    zero_row = k_rows + len(other_rows)
    index = np.full((b_count, n_max), zero_row, dtype=np.int64)
    valid = np.zeros((b_count, n_max), dtype=bool)
    o = 0
    for b, ch in enumerate(chosen):
        index[b, 0] = ego_rows[b]
        for j in range(1, len(ch)):
            index[b, j] = k_rows + o
            o += 1
        valid[b, :len(ch)] = True
    stack = reshape(index_select(concat(pool, axis=0), index.reshape(-1), axis=0), (b_count, n_max, h, w, c))
    fused = params.fusebevt(stack, valid, probe)
    logits = params.decoder(fused)
    return logits if batched else reshape(logits, tuple(logits.shape[1:]))


def build_model(kind: str, cfg: ModelConfig, seed: int = 0) -> nn.Module:
    if kind == "single":
        return SingleAgentModel(cfg, seed)
    if kind == "cobevt":
        return CoBEVT(cfg, seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def zero_fusion(model: CoBEVT) -> None:
    """Zero every attention output and MLP output weight so FuseBEVT is the identity map."""
    for blk in model.fusebevt.blocks:
        for sub in (blk.local, blk.glob):
            sub.attn.wo.data[...] = 0
            sub.attn.bo.data[...] = 0
            sub.mlp.w2.data[...] = 0
