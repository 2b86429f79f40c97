import math

import numpy as np
import pytest
import torch

from distill3d import encoders as E
from distill3d.errors import ConfigError, EmbeddingError
from distill3d.gradcheck import finite_diff_check


class FixedEncoder:
    """Maps every image to the same embedding while staying differentiable in the pixels."""

    def __init__(self, e):
        self.e = E.normalize_embedding(e)

    def embed_image(self, image):
        x = E._as_image(image)
        return self.e + 0.0 * x.sum()


def _img(seed, h=16, w=16):
    return torch.from_numpy(np.random.default_rng(seed).random((h, w, 3)))


def test_toy_encoder_contract():
    enc = E.ToyEncoder()
    x = _img(0)
    a, b = E.embed_image(enc, x), E.embed_image(enc, x.clone())
    assert torch.equal(a, b)
    assert float(a.norm()) == pytest.approx(1.0, abs=1e-12)
    assert E.ToyEncoder(seed=1).embed_image(x).shape == (64,)
    with pytest.raises(ValueError):
        enc.embed_image(torch.zeros(4, 4, 3))


def test_toy_encoder_separates_noise_from_unrelated():
    enc = E.ToyEncoder()
    g = np.random.default_rng(42)
    for k in range(10):
        x = _img(100 + k)
        noisy = x + torch.from_numpy(0.02 * g.standard_normal(x.shape))
        other = _img(200 + k)
        ex = enc.embed_image(x)
        assert float(E.cosine(ex, enc.embed_image(noisy))) > float(E.cosine(ex, enc.embed_image(other)))


def test_embed_modality():
    enc = E.ToyEncoder(8)
    v = np.arange(1.0, 9.0)
    out = E.embed_modality(enc, v)
    np.testing.assert_allclose(out.numpy(), v / np.linalg.norm(v))
    with pytest.raises(ValueError):
        enc.embed_modality(np.ones(5))
    with pytest.raises(EmbeddingError):
        E.normalize_embedding(np.zeros(4))


def test_zero_jitter_perspective_is_identity():
    spec = E.AugmentationSpec(jitter=0.0)
    x = _img(1)
    assert torch.equal(E.augment(x, "G", spec, np.random.default_rng(0)), x)


def test_warp_with_identity_matrix_is_exact():
    x = _img(2, 9, 7)
    np.testing.assert_allclose(E._warp(x, np.eye(3)).numpy(), x.numpy(), atol=1e-15)


def test_unit_normalisation_is_identity():
    spec = E.AugmentationSpec(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    x = _img(3)
    assert torch.equal(E.augment(x, "Z", spec, np.random.default_rng(0)), x)
    clip = E.AugmentationSpec()
    np.testing.assert_allclose(E.denormalize(E.augment(x, "Z", clip, None), clip).numpy(),
                               x.numpy(), atol=1e-12)


def test_crop_of_split_image_is_reproducible_and_matches_recomputation():
    H = W = 32
    x = torch.zeros(H, W, 3, dtype=torch.float64)
    x[:, W // 2:] = 1.0
    spec = E.AugmentationSpec(jitter=0.0, crop_area=(0.5, 0.5))
    a = E.augment(x, "L", spec, np.random.default_rng(11))
    b = E.augment(x, "L", spec, np.random.default_rng(11))
    assert torch.equal(a, b)
    cx, _, cw, _ = E.sample_params("L", spec, np.random.default_rng(11), H, W)["crop"]
    assert cw == pytest.approx(math.sqrt(0.5) * W)
    # independent 1-D resampling of one row: pixel centres map into the crop box
    sx = cx + (np.arange(W) + 0.5) * cw / W
    row = np.interp(sx - 0.5, np.arange(W), np.r_[np.zeros(W // 2), np.ones(W // 2)])
    assert float(a.mean()) == pytest.approx(row.mean(), abs=1e-12)
    means = [float(E.augment(x, "L", spec, np.random.default_rng(k)).mean()) for k in range(20)]
    assert max(abs(m - 0.5) for m in means) > 0.05


def test_augmentation_spec_validation():
    for bad in (dict(n=0), dict(weights=[1.0]), dict(jitter=0.6), dict(crop_area=(0.9, 0.5)),
                dict(std=(1.0, 0.0, 1.0))):
        with pytest.raises(ConfigError):
            E.AugmentationSpec(**bad)
    assert E.AugmentationSpec(n=4).W == [0.25] * 4
    with pytest.raises(ConfigError):
        E.sample_params("Q", E.AugmentationSpec(), np.random.default_rng(0), 8, 8)


def test_infonce_examples():
    x = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert float(E.infonce(x, 0, [[1.0, 0.0]], 0.3)) == pytest.approx(0.0, abs=1e-15)
    val = float(E.infonce(x, 0, [[1.0, 0.0], [0.0, 1.0]], 1.0))
    assert val == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-14)
    assert val == pytest.approx(0.3133, abs=1e-4)
    assert float(E.infonce(x, 0, [[1.0, 0.0], [0.0, 1.0]], 0.01)) < 1e-40
    with pytest.raises(IndexError):
        E.infonce(x, 2, [[1.0, 0.0]])


def test_ms_loss_perfect_and_orthogonal_alignment():
    C = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    imgs = [_img(4), _img(5)]
    perfect = E.ms_loss(C, imgs, FixedEncoder(C), E.AugmentationSpec(), np.random.default_rng(0))
    assert float(perfect) == pytest.approx(-3.0, abs=1e-12)
    ortho = E.ms_loss(C, imgs, FixedEncoder(torch.tensor([0.0, 1.0, 0.0])), E.AugmentationSpec(),
                      np.random.default_rng(0))
    assert float(ortho) == 0.0


def test_ms_loss_independent_of_image_order():
    enc = E.ToyEncoder()
    C = E.normalize_embedding(torch.from_numpy(np.random.default_rng(0).standard_normal(64)))
    imgs = [_img(6), _img(7), _img(8)]
    a = E.ms_loss(C, imgs, enc, rng=np.random.default_rng(3))
    b = E.ms_loss(C, imgs[::-1], enc, rng=np.random.default_rng(3))
    assert float(a) == pytest.approx(float(b), abs=1e-14)
    parts = {}
    E.ms_loss(C, imgs, enc, rng=np.random.default_rng(3), parts=parts)
    assert set(parts) == {"G", "L", "Z"}
    assert -sum(parts.values()) == pytest.approx(float(a), abs=1e-12)


def test_ms_loss_pixel_gradient_matches_finite_differences():
    enc = E.ToyEncoder()
    spec = E.AugmentationSpec(jitter=0.0, crop_area=(1.0, 1.0), mean=(0.0,) * 3, std=(1.0,) * 3)
    C = E.normalize_embedding(torch.from_numpy(np.random.default_rng(9).standard_normal(64)))
    x = _img(10, 8, 8).requires_grad_(True)
    res = finite_diff_check(lambda: E.ms_loss(C, [x], enc, spec, np.random.default_rng(1)),
                            {"x": x})
    assert res.max_rel_err < 1e-3
