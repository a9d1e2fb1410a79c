from dataclasses import replace

import numpy as np
import pytest

from promptseg.attribution import BottleneckConfig, _Objective, compute_saliency, saliency_to_image_space
from promptseg.embedding import PlantedRegion, TextPrompt, make_synthetic_encoder, preprocess_image, render_planted_image, unit

PLANTED = PlantedRegion(4, 5, 3, 3)


@pytest.fixture(scope="module")
def setup():
    enc = make_synthetic_encoder(0, 64, planted=PLANTED)
    img = preprocess_image(render_planted_image(PLANTED, 224, enc.patch_grid, seed=0), 224)
    t = unit(enc.text_encoder(TextPrompt(PLANTED.prompt)))
    return enc, img, t


def test_range_shape_and_metadata(setup):
    enc, img, t = setup
    s = compute_saliency(enc, img, t, BottleneckConfig(gamma=0.1, seed=3), prompt_id="p")
    assert s.shape == img.shape
    assert s.values.min() >= 0.0 and s.values.max() <= 1.0
    assert (s.prompt_id, s.gamma, s.steps, s.seed) == ("p", 0.1, 10, 3)
    assert s.patch_values.shape == enc.patch_grid


def test_planted_region_is_more_salient(setup):
    enc, img, t = setup
    s = compute_saliency(enc, img, t)
    inside = PLANTED.pixel_mask(enc.patch_grid, 224)
    assert s.values[inside].mean() > s.values[~inside].mean()


def test_gamma_sweep_mass_non_increasing(setup):
    enc, img, t = setup
    masses = [compute_saliency(enc, img, t, BottleneckConfig(gamma=g)).values.sum() for g in (0, 0.1, 1, 10)]
    assert all(b <= a for a, b in zip(masses, masses[1:])), masses


def test_gamma_zero_keeps_almost_everything(setup):
    enc, img, t = setup
    s = compute_saliency(enc, img, t, BottleneckConfig(gamma=0.0, steps=50))
    assert s.values.mean() > 0.9


def test_bitwise_deterministic(setup):
    enc, img, t = setup
    a = compute_saliency(enc, img, t, BottleneckConfig(seed=5))
    b = compute_saliency(enc, img, t, BottleneckConfig(seed=5))
    assert np.array_equal(a.values, b.values)


def test_line_search_objective_non_decreasing(setup):
    enc, img, t = setup
    s = compute_saliency(enc, img, t, BottleneckConfig(gamma=1.0, steps=8, line_search=True))
    h = np.array(s.history)
    assert np.isfinite(h).all() and len(h) >= 2
    assert np.all(np.diff(h) >= 0)


def test_requires_patch_features(setup):
    enc, img, t = setup
    with pytest.raises(ValueError, match="attribution requires patch-level features"):
        compute_saliency(replace(enc, pool=None), img, t)
    pooled_only = replace(enc, image_encoder=lambda im: (None, enc.image_encoder(im)[1]))
    with pytest.raises(ValueError, match="attribution requires patch-level features"):
        compute_saliency(pooled_only, img, t)


def test_text_must_be_unit(setup):
    enc, img, t = setup
    with pytest.raises(ValueError, match="unit-norm"):
        compute_saliency(enc, img, 2 * t)


def test_config_validation():
    for bad in ({"gamma": -1}, {"steps": 0}, {"noise_samples": 0}, {"step_size": 0}):
        with pytest.raises(ValueError):
            BottleneckConfig(**bad)


def test_objective_gradient_matches_finite_differences(setup, rng):
    enc, img, t = setup
    patches, _ = enc.image_encoder(img)
    obj = _Objective(enc, patches, t, BottleneckConfig(gamma=0.7))
    x = rng.normal(1.0, 2.0, size=patches.shape[0])
    noise = rng.standard_normal((3,) + patches.shape)
    _, g = obj.value_and_grad(x, noise)
    for j in rng.choice(patches.shape[0], size=8, replace=False):
        e = np.zeros_like(x)
        e[j] = 1e-5
        num = (obj.value_and_grad(x + e, noise)[0] - obj.value_and_grad(x - e, noise)[0]) / 2e-5
        assert g[j] == pytest.approx(num, rel=1e-5, abs=1e-8)


class TestUpsample:
    def test_constant(self):
        np.testing.assert_allclose(saliency_to_image_space(np.full((3, 4), 0.7), 30, 40), 0.7, atol=1e-15)

    def test_single_patch(self):
        np.testing.assert_allclose(saliency_to_image_space(np.array([[0.25]]), 5, 7), 0.25)

    def test_corners_on_exact_2x(self):
        g = np.array([[0.1, 0.4], [0.7, 1.0]])
        out = saliency_to_image_space(g, 4, 4)
        assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.1, 0.4, 0.7, 1.0)
        # interior pixel at 1/4 offset between two patch centres
        assert out[0, 1] == pytest.approx(0.75 * 0.1 + 0.25 * 0.4)

    def test_range_preserved(self, rng):
        out = saliency_to_image_space(rng.random((5, 5)), 37, 23)
        assert out.min() >= 0 and out.max() <= 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            saliency_to_image_space(np.zeros((0, 3)), 4, 4)
