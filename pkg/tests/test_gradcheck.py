import numpy as np
import pytest

from faxbev import gradcheck
from faxbev import tensor as T
from faxbev.cli import main
from faxbev.errors import UsageError
from faxbev.gradcheck import H, TOLERANCE, format_table, run_checks, select

OPS = [
    "add", "sub", "mul", "scale", "gelu", "relu", "sum_all", "mean_all", "sum_axis", "reshape",
    "permute_axes", "swap_last2", "concat", "stack", "index_select", "index_select_nd", "gather_last",
    "matmul", "matmul_batched", "linear", "mlp_block", "softmax_lastaxis", "log_softmax_lastaxis",
    "layer_norm", "batch_norm", "conv2d_3x3", "conv2d_3x3_stride2", "conv2d_1x1", "linear_resample",
    "bilinear_upsample2x", "weighted_cross_entropy", "focal_loss", "mse", "fused_block", "fused_unblock",
    "fused_grid", "fused_ungrid", "relative_attention", "fax_local_sa", "fax_global_sa", "fax_sa_block",
    "fax_ca_block", "warp_features", "camera_positional_encoding", "tiny_image_encoder", "res_bottleneck",
    "compress_decompress", "fusebevt_forward", "decoder_forward", "sinbevt_forward", "cobevt_end_to_end",
]


def test_registry_covers_every_op():
    names = {c.name for c in select(None)}
    assert set(OPS) <= names


def test_settings():
    assert H == 1e-4 and TOLERANCE == 1e-3


@pytest.mark.parametrize("name", [n for n in OPS if n != "cobevt_end_to_end"])
def test_op_gradient(name):
    (res,) = run_checks(f"^{name}$", instances=5)
    assert res.passed, format_table([res])


def test_end_to_end_cobevt_gradient():
    (res,) = run_checks("^cobevt_end_to_end$")
    assert res.passed, format_table([res])


_GELU = T.gelu


def _broken_gelu(x):
    good = _GELU(x)

    def bw(g):
        return (g * 1.05,)  # wrong on purpose

    return T._make(good.data, (x,), bw, "gelu")


def test_corrupted_backward_is_caught(monkeypatch, capsys):
    monkeypatch.setattr(T, "gelu", _broken_gelu)
    (res,) = run_checks("^gelu$", instances=3)
    assert not res.passed and res.max_rel_error > 1e-2
    assert main(["gradcheck", "--filter", "^gelu$", "--instances", "2"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_cli_success_exit(capsys):
    assert main(["gradcheck", "--filter", "^(add|matmul)$", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "add" in out and "matmul" in out and "FAIL" not in out


def test_bad_filter():
    with pytest.raises(UsageError):
        select("no_such_op_xyz")
    with pytest.raises(UsageError):
        select("(")
    assert main(["gradcheck", "--filter", "no_such_op_xyz"]) == 2


def test_seeded_and_repeatable():
    a = run_checks("^layer_norm$", seed=3, instances=2)[0].max_rel_error
    b = run_checks("^layer_norm$", seed=3, instances=2)[0].max_rel_error
    assert a == b


def test_check_instance_zero_error_for_linear_op():
    check = gradcheck.REGISTRY["add"]
    assert gradcheck.check_instance(check, np.random.default_rng(0)) < 1e-8
