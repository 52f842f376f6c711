"""Built-in gradient checks (imported lazily by :mod:`faxbev.gradcheck`)."""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from faxbev import attention as A
from faxbev import models as M
from faxbev import tensor as T
from faxbev.geometry import BevGrid, Pose2D, camera_positional_encoding, make_rig, surround_rigs, warp_features
from faxbev.gradcheck import _leaf, register
from faxbev.partition import PartitionSpec, fused_block, fused_grid, fused_unblock, fused_ungrid
from faxbev.tensor import Tensor

F64 = np.float64


def _params(module) -> list[Tensor]:
    module.to(F64)
    return module.parameters()


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return Tensor(np.sign(x) * (0.1 + np.abs(x)), requires_grad=True, dtype=F64)


# -- elementwise and reductions -------------------------------------------------

@register("add")
def _(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    return [a, b], lambda: T.add(a, b)


@register("sub")
def _(rng):
    a, b = _leaf(rng, (2, 1, 3)), _leaf(rng, (4, 3))
    return [a, b], lambda: T.sub(a, b)


@register("mul")
def _(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 1))
    return [a, b], lambda: T.mul(a, b)


@register("scale")
def _(rng):
    a = _leaf(rng, (5,))
    s = float(rng.uniform(-2, 2))
    return [a], lambda: T.scale(a, s)


@register("gelu")
def _(rng):
    a = _leaf(rng, (4, 5), scale=2.0)
    return [a], lambda: T.gelu(a)


@register("relu")
def _(rng):
    a = _away_from_zero(rng, (4, 5))
    return [a], lambda: T.relu(a)


@register("sum_all")
def _(rng):
    a = _leaf(rng, (3, 4))
    return [a], lambda: T.sum_all(a)


@register("mean_all")
def _(rng):
    a = _leaf(rng, (3, 4))
    return [a], lambda: T.mean_all(a)


@register("sum_axis")
def _(rng):
    a = _leaf(rng, (3, 4, 2))
    ax = int(rng.integers(-3, 3))
    keep = bool(rng.integers(2))
    return [a], lambda: T.sum_axis(a, ax, keepdims=keep)


# -- shape ops -------------------------------------------------------------------

@register("reshape")
def _(rng):
    a = _leaf(rng, (2, 3, 4))
    return [a], lambda: T.reshape(a, (4, 6))


@register("permute_axes")
def _(rng):
    a = _leaf(rng, (2, 3, 4))
    axes = tuple(rng.permutation(3))
    return [a], lambda: T.permute_axes(a, axes)


@register("swap_last2")
def _(rng):
    a = _leaf(rng, (2, 3, 4))
    return [a], lambda: T.swap_last2(a)


@register("concat")
def _(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 5))
    return [a, b], lambda: T.concat([a, b], axis=-1)


@register("stack")
def _(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    return [a, b], lambda: T.stack([a, b], axis=1)


@register("index_select")
def _(rng):
    a = _leaf(rng, (4, 3))
    idx = rng.integers(0, 4, size=6)  # repeats exercise accumulation
    return [a], lambda: T.index_select(a, idx, axis=0)


@register("index_select_nd")
def _(rng):
    a = _leaf(rng, (2, 4, 3))
    idx = rng.integers(0, 4, size=(2, 3)) if rng.random() < 0.5 else np.array(rng.integers(0, 4))
    return [a], lambda: T.index_select(a, idx, axis=1)


@register("gather_last")
def _(rng):
    table = _leaf(rng, (2, 7))
    idx = rng.integers(0, 7, size=(4, 5))
    return [table], lambda: T.gather_last(table, idx)


# -- linear algebra ----------------------------------------------------------------

@register("matmul")
def _(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    return [a, b], lambda: T.matmul(a, b)


@register("matmul_batched")
def _(rng):
    a, b = _leaf(rng, (2, 1, 3, 4)), _leaf(rng, (3, 4, 2))
    return [a, b], lambda: T.matmul(a, b)


@register("linear")
def _(rng):
    x, w, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2)), _leaf(rng, (2,))
    return [x, w, b], lambda: T.linear(x, w, b)


@register("mlp_block")
def _(rng):
    x, w1, w2 = _leaf(rng, (3, 4)), _leaf(rng, (4, 8)), _leaf(rng, (8, 4))
    return [x, w1, w2], lambda: T.mlp_block(x, w1, w2)


@register("softmax_lastaxis")
def _(rng):
    x = _leaf(rng, (3, 5), scale=2.0)
    return [x], lambda: T.softmax_lastaxis(x)


@register("log_softmax_lastaxis")
def _(rng):
    x = _leaf(rng, (3, 5), scale=2.0)
    return [x], lambda: T.log_softmax_lastaxis(x)


@register("layer_norm")
def _(rng):
    x, g, b = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    return [x, g, b], lambda: T.layer_norm(x, g, b)


@register("batch_norm")
def _(rng):
    x, g, b = _leaf(rng, (2, 3, 3, 4)), _leaf(rng, (4,)), _leaf(rng, (4,))
    rm, rv = np.zeros(4), np.ones(4)
    return [x, g, b], lambda: T.batch_norm(x, g, b, rm, rv, training=True)


@register("conv2d_3x3")
def _(rng):
    x, w, b = _leaf(rng, (2, 5, 6, 3)), _leaf(rng, (3, 3, 3, 4)), _leaf(rng, (4,))
    return [x, w, b], lambda: T.conv2d(x, w, b)


@register("conv2d_3x3_stride2")
def _(rng):
    x, w = _leaf(rng, (1, 6, 5, 2)), _leaf(rng, (3, 3, 2, 3))
    return [x, w], lambda: T.conv2d(x, w, None, stride=2)


@register("conv2d_1x1")
def _(rng):
    x, w, b = _leaf(rng, (4, 4, 3)), _leaf(rng, (1, 1, 3, 2)), _leaf(rng, (2,))
    return [x, w, b], lambda: T.conv2d(x, w, b)


@register("linear_resample")
def _(rng):
    x = _leaf(rng, (2, 4, 4, 3))
    mat = sp.random(15, 16, density=0.3, random_state=np.random.RandomState(int(rng.integers(1 << 30))),
                    format="csr")
    return [x], lambda: T.linear_resample(x, mat, (3, 5))


@register("bilinear_upsample2x")
def _(rng):
    x = _leaf(rng, (3, 4, 2))
    return [x], lambda: T.bilinear_upsample2x(x)


# -- losses --------------------------------------------------------------------

@register("weighted_cross_entropy")
def _(rng):
    logits = _leaf(rng, (3, 4, 3))
    target = rng.integers(0, 3, size=(3, 4))
    w = rng.uniform(0.5, 3.0, size=3)
    mask = rng.random((3, 4)) < 0.7
    return [logits], lambda: T.weighted_cross_entropy(logits, target, w, mask)


@register("focal_loss")
def _(rng):
    logits = _leaf(rng, (3, 4, 2))
    target = rng.integers(0, 2, size=(3, 4))
    gamma = float(rng.choice([0.0, 1.0, 2.0, 2.5]))
    return [logits], lambda: T.focal_loss(logits, target, gamma)


@register("mse")
def _(rng):
    x = _leaf(rng, (3, 4))
    y = rng.standard_normal((3, 4))
    return [x], lambda: T.mse(x, y)


# -- partition operators -------------------------------------------------------------

def _spec(rng) -> PartitionSpec:
    return PartitionSpec(P=(2, 1), G=(1, 2), N=int(rng.integers(1, 3)), H=2, W=2, C=2)


@register("fused_block")
def _(rng):
    s = _spec(rng)
    x = _leaf(rng, (s.N, s.H, s.W, s.C))
    return [x], lambda: fused_block(x, s)


@register("fused_unblock")
def _(rng):
    s = _spec(rng)
    y = _leaf(rng, s.blocked_shape)
    return [y], lambda: fused_unblock(y, s)


@register("fused_grid")
def _(rng):
    s = _spec(rng)
    x = _leaf(rng, (s.N, s.H, s.W, s.C))
    return [x], lambda: fused_grid(x, s)


@register("fused_ungrid")
def _(rng):
    s = _spec(rng)
    y = _leaf(rng, s.gridded_shape)
    return [y], lambda: fused_ungrid(y, s)


# -- attention -------------------------------------------------------------------

@register("relative_attention")
def _(rng):
    q, k, v = _leaf(rng, (2, 6, 4)), _leaf(rng, (2, 5, 4)), _leaf(rng, (2, 5, 4))
    bias = _leaf(rng, (2, 6, 5))
    wo, bo = _leaf(rng, (4, 4)), _leaf(rng, (4,))
    mask = np.array([True, True, False, True, True])
    return [q, k, v, bias, wo, bo], lambda: A.relative_attention(q, k, v, bias, 2, mask, wo, bo)


_SA = A.AttentionConfig(dim=4, num_heads=2, P=2, G=2)


def _sa_setup(rng):
    block = A.FaxSABlock(rng, _SA, 2)
    for sub in (block.local, block.glob):
        sub.rel_bias.table.data[...] = rng.standard_normal(sub.rel_bias.table.shape) * 0.5
    x = _leaf(rng, (2, 4, 4, 4))
    valid = np.array([True, bool(rng.integers(2))])
    return block, x, valid


@register("fax_local_sa", max_coords=40)
def _(rng):
    block, x, valid = _sa_setup(rng)
    return [x] + _params(block.local), lambda: A.fax_local_sa(x, block, _SA, valid)


@register("fax_global_sa", max_coords=40)
def _(rng):
    block, x, valid = _sa_setup(rng)
    return [x] + _params(block.glob), lambda: A.fax_global_sa(x, block, _SA, valid)


@register("fax_sa_block", max_coords=40)
def _(rng):
    block, x, valid = _sa_setup(rng)
    return [x] + _params(block), lambda: A.fax_sa_block(x, block, _SA, valid)


@register("fax_ca_block", max_coords=40)
def _(rng):
    cb = A.AttentionConfig(dim=4, num_heads=2, P=2, G=2)
    cf = A.AttentionConfig(dim=3, num_heads=1, P=(1, 2), G=(1, 2))
    block = A.FaxCABlock(rng, cb, cf)
    for sub in (block.local, block.glob):
        sub.cross_bias.data[...] = rng.standard_normal(sub.cross_bias.shape) * 0.5
    bev = _leaf(rng, (4, 4, 4))
    cams = _leaf(rng, (2, 2, 4, 3))
    pe = _leaf(rng, (2, 2, 4, 3))
    return [bev, cams, pe] + _params(block), lambda: A.fax_ca_block(bev, cams, pe, block, cb, cf)


# -- geometry ------------------------------------------------------------------------

@register("warp_features")
def _(rng):
    grid = BevGrid(4, 4, 1.0)
    feat = _leaf(rng, (4, 4, 3))
    sender = Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi))
    ego = Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi))
    return [feat], lambda: warp_features(feat, sender, ego, grid)


@register("camera_positional_encoding")
def _(rng):
    rig = make_rig(float(rng.uniform(-math.pi, math.pi)), 8, 16)
    proj, bias = _leaf(rng, (6, 3)), _leaf(rng, (3,))
    return [proj, bias], lambda: camera_positional_encoding(rig, (2, 4), proj, bias)


# -- model components ---------------------------------------------------------------

def tiny_model_config() -> M.ModelConfig:
    """Smallest configuration satisfying every shape constraint (used for checks)."""
    sb = M.SinBevtConfig(bev_sizes=(8, 4, 2), dim=4, num_heads=2, image_size=(16, 32), num_cameras=4,
                         encoder_channels=(3, 4, 4), bev_windows=(4, 2, 1), bev_grids=(4, 2, 1),
                         feat_windows=((4, 8), (2, 4), (1, 2)), feat_grids=((4, 8), (2, 4), (1, 2)),
                         bottleneck_ratio=2)
    return M.ModelConfig(sinbevt=sb, compressor=M.CompressorConfig(rate=2, dim=4),
                         fusebevt=M.FuseBevtConfig(dim=4, num_heads=2, window=1, grid=2, num_layers=1,
                                                   max_agents=3),
                         decoder=M.DecoderConfig(dim=4, channels=(4, 3, 3), num_classes=2),
                         feature_meters_per_cell=2.0)


@register("tiny_image_encoder", max_coords=40)
def _(rng):
    enc = M.TinyImageEncoder(rng, (3, 4, 2))
    x = _leaf(rng, (2, 8, 8, 3))
    return [x] + _params(enc), lambda: T.concat([T.reshape(f, (-1,)) for f in enc(x)], axis=0)


@register("res_bottleneck", max_coords=40)
def _(rng):
    blk = M.ResBottleneck(rng, 4, stride=int(rng.choice([1, 2])), ratio=2)
    x = _leaf(rng, (2, 4, 4, 4))
    return [x] + _params(blk), lambda: blk(x)


@register("compress_decompress")
def _(rng):
    comp = M.Compressor(rng, M.CompressorConfig(rate=2, dim=4))
    x = _leaf(rng, (3, 3, 4))
    return [x] + _params(comp), lambda: M.decompress(M.compress(x, comp), comp)


@register("fusebevt_forward", instances=10, max_coords=40)
def _(rng):
    cfg = M.FuseBevtConfig(dim=4, num_heads=2, window=2, grid=2, num_layers=2, max_agents=3)
    fb = M.FuseBEVT(rng, cfg)
    x = _leaf(rng, (3, 4, 4, 4))
    valid = np.array([True, True, bool(rng.integers(2))])
    return [x] + _params(fb), lambda: M.fusebevt_forward(x, valid, fb)


@register("decoder_forward", instances=10, max_coords=40)
def _(rng):
    dec = M.Decoder(rng, M.DecoderConfig(dim=4, channels=(4, 3, 3), num_classes=2))
    x = _leaf(rng, (2, 2, 4))
    return [x] + _params(dec), lambda: M.decoder_forward(x, dec, "dynamic")


@register("sinbevt_forward", instances=5, max_coords=40)
def _(rng):
    cfg = tiny_model_config().sinbevt
    model = M.SinBEVT(rng, cfg)
    images = _leaf(rng, (4, 16, 32, 3), scale=0.3, offset=0.5)
    rigs = surround_rigs(16, 32)
    return [images] + _params(model), lambda: model(images, rigs)


@register("cobevt_end_to_end", instances=2, max_coords=64, directions=4)
def _(rng):
    cfg = tiny_model_config()
    model = M.CoBEVT(cfg, int(rng.integers(1 << 30)))
    model.to(F64)
    images = _leaf(rng, (3, 4, 16, 32, 3), scale=0.3, offset=0.5)
    rigs = surround_rigs(16, 32)
    poses = [Pose2D(0.0, 0.0, 0.0), Pose2D(1.0, 0.5, 0.4), Pose2D(-0.7, 1.2, -2.0)]
    target = rng.integers(0, 2, size=(16, 16))
    mask = rng.random((16, 16)) < 0.8

    def loss():
        logits = model(images, rigs, poses)
        return T.weighted_cross_entropy(logits, target, [1.0, 3.0], mask)

    return [images] + model.parameters(), loss
