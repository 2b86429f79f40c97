import pytest
import torch

from distill3d import gradcheck as G

OPS = sorted(G.build_checks())


def test_registry_is_complete():
    assert set(OPS) == {"quadratic", "render_rgb", "ms_loss", "aug_sds", "nz", "cds", "sds3d",
                        "ref", "nv", "nc", "ls", "mesh_render"}


def test_quadratic_is_essentially_exact():
    (res,) = G.run_checks(["quadratic"])
    assert res.max_rel_err < 1e-8


@pytest.mark.parametrize("op", OPS)
def test_op_matches_finite_differences(op):
    (res,) = G.run_checks([op])
    assert res.passed(), G.format_table([res])


def test_check_detects_wrong_gradient():
    w = torch.tensor([0.3, -1.2], dtype=torch.float64, requires_grad=True)

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * x        # should be 2x

    res = G.finite_diff_check(lambda: Bad.apply(w), {"w": w}, name="bad")
    assert not res.passed()
    assert "bad" in G.format_table([res])


def test_unknown_op_raises():
    with pytest.raises(KeyError):
        G.run_checks(["nope"])
