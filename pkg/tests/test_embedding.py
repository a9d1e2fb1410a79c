import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptseg.embedding import (
    CLIP_MEAN,
    CLIP_STD,
    EmbeddingBatch,
    ImageTensor,
    PlantedRegion,
    SyntheticEncoder,
    TextPrompt,
    clean_caption,
    encode_batch,
    ensemble_prompt_embedding,
    load_encoder,
    load_pairs,
    load_prompt_manifest,
    make_synthetic_encoder,
    make_two_cluster_corpus,
    preprocess_image,
    prompts_for,
    register_encoder,
    render_planted_image,
)
from promptseg.imaging import write_rgb


def const_image(v, side):
    return ImageTensor(np.full((side, side, 3), v))


class TestPreprocess:
    def test_constant_half_maps_to_standardized_constant(self):
        out = preprocess_image(const_image(0.5, 64), 224)
        assert out.shape == (224, 224)
        for c in range(3):
            np.testing.assert_allclose(out.pixels[..., c], (0.5 - CLIP_MEAN[c]) / CLIP_STD[c], atol=1e-12)

    def test_reference_constants(self):
        assert tuple(CLIP_MEAN) == (0.48145466, 0.4578275, 0.40821073)
        assert tuple(CLIP_STD) == (0.26862954, 0.26130258, 0.27577711)

    def test_exact_downscale_keeps_block_values(self):
        blocks = np.kron(np.array([[0.1, 0.9], [0.4, 0.6]]), np.ones((224, 224)))
        raw = ImageTensor(np.repeat(blocks[..., None], 3, axis=-1))
        out = preprocess_image(raw, 224)
        assert out.shape == (224, 224)
        expect = (0.1 - CLIP_MEAN[0]) / CLIP_STD[0]
        np.testing.assert_allclose(out.pixels[:100, :100, 0], expect, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            preprocess_image(ImageTensor(np.zeros((8, 8, 4))), 32)

    def test_deterministic(self):
        img = render_planted_image(PlantedRegion(1, 1, 2, 2), 64, (4, 4), seed=3)
        a, b = preprocess_image(img, 32), preprocess_image(img, 32)
        assert np.array_equal(a.pixels, b.pixels)


class TestCaption:
    def test_short_filtered(self):
        assert clean_caption("  Chest X-ray!!  ") is None

    def test_kept_and_trimmed(self):
        text = "Axial CT of the thorax showing fibrosis."
        assert clean_caption("   " + text + "  ") == text

    def test_nineteen_characters_filtered_twenty_kept(self):
        assert clean_caption("a" * 19) is None
        assert clean_caption("a" * 20) == "a" * 20

    @given(st.text(max_size=60))
    def test_output_is_clean_or_none(self, text):
        out = clean_caption(text)
        assert out is None or (len(out) >= 20 and out == out.strip())


class TestEncodeBatch:
    def test_single_pair_unit_rows(self):
        enc = make_synthetic_encoder(0, 16, side=32, patch=8)
        b = encode_batch(enc, [const_image(0.3, 32)], [TextPrompt("lesion finding")])
        assert b.size == 1
        np.testing.assert_allclose(np.linalg.norm(b.image_embeddings, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(b.text_embeddings, axis=1), 1.0, atol=1e-12)

    def test_deterministic_and_batch_of_50(self):
        enc = make_synthetic_encoder(1, 16, side=32, patch=8)
        pairs = make_two_cluster_corpus(50, seed=1, world=enc.trainable.world)
        imgs = [preprocess_image(i, 32) for i, _ in pairs]
        txts = [p for _, p in pairs]
        a, b = encode_batch(enc, imgs, txts), encode_batch(enc, imgs, txts)
        assert a.image_embeddings.shape == (50, 16)
        assert np.array_equal(a.image_embeddings, b.image_embeddings)
        assert np.array_equal(a.text_embeddings, b.text_embeddings)

    def test_dimension_mismatch(self):
        enc = make_synthetic_encoder(0, 16, side=32, patch=8)
        other = make_synthetic_encoder(0, 8, side=32, patch=8)
        from dataclasses import replace

        broken = replace(enc, text_encoder=other.text_encoder)
        with pytest.raises(ValueError, match="dimension mismatch"):
            encode_batch(broken, [const_image(0.3, 32)], [TextPrompt("some text prompt")])

    def test_batch_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(np.ones((2, 3)), np.ones((2, 3)))


class TestEnsemble:
    def test_identical_prompts(self):
        enc = make_synthetic_encoder(0, 16)
        one = ensemble_prompt_embedding(enc, [TextPrompt("benign lesion")])
        two = ensemble_prompt_embedding(enc, [TextPrompt("benign lesion")] * 2)
        np.testing.assert_allclose(one, two, atol=1e-15)

    def test_orthogonal_pair_gives_diagonal(self):
        e1, e2 = np.eye(4)[0], np.eye(4)[1]
        vecs = {"a": e1, "b": e2}
        from promptseg.embedding import EncoderHandle

        enc = EncoderHandle(lambda im: (None, np.zeros(4)), lambda p: vecs[p.text], "v", (1, 1), dim=4, input_side=1)
        out = ensemble_prompt_embedding(enc, [TextPrompt("a"), TextPrompt("b")])
        np.testing.assert_allclose(out, (e1 + e2) / np.sqrt(2), atol=1e-15)

    def test_twenty_prompts_unit_norm(self):
        enc = make_synthetic_encoder(0, 16)
        out = ensemble_prompt_embedding(enc, [TextPrompt(f"prompt number {i}") for i in range(20)])
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            ensemble_prompt_embedding(make_synthetic_encoder(0, 16), [])


class TestSyntheticEncoder:
    def test_same_seed_bitwise(self):
        img = render_planted_image(PlantedRegion(2, 2, 3, 3), 224, (14, 14), seed=0)
        a = make_synthetic_encoder(7, 32).image_encoder(img)[1]
        b = make_synthetic_encoder(7, 32).image_encoder(img)[1]
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        img = const_image(0.2, 224)
        a = make_synthetic_encoder(1, 32).image_encoder(img)[1]
        b = make_synthetic_encoder(2, 32).image_encoder(img)[1]
        assert not np.allclose(a, b)

    def test_planted_prompt_matches_planted_patches(self):
        pl = PlantedRegion(4, 5, 3, 3)
        enc = make_synthetic_encoder(0, 32, planted=pl)
        img = preprocess_image(render_planted_image(pl, 224, enc.patch_grid, seed=0), 224)
        patches, _ = enc.image_encoder(img)
        inside = patches[pl.patch_mask(enc.patch_grid).ravel()].mean(axis=0)
        t = enc.text_encoder(TextPrompt(pl.prompt))
        cos = inside @ t / np.linalg.norm(inside) / np.linalg.norm(t)
        assert cos == pytest.approx(1.0, abs=1e-12)

    def test_small_dim_rejected(self):
        with pytest.raises(ValueError):
            SyntheticEncoder(0, 3)

    def test_render_mode_pairs_align(self):
        enc = SyntheticEncoder(0, 16, side=32, patch=8, text_mode="render").handle()
        pairs = make_two_cluster_corpus(4, seed=0, world=enc.trainable.world, noise=0.0)
        b = encode_batch(enc, [preprocess_image(i, 32) for i, _ in pairs], [p for _, p in pairs])
        np.testing.assert_allclose(np.sum(b.image_embeddings * b.text_embeddings, axis=1), 1.0, atol=1e-12)

    def test_fd_backprop(self, rng):
        model = SyntheticEncoder(0, 6, side=16, patch=8, width=12)
        pairs = make_two_cluster_corpus(4, seed=0, world=model.world)
        pairs = [(preprocess_image(i, 16), p) for i, p in pairs]
        feats = model.prepare(pairs)
        idx = np.arange(4)
        gi, gt = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))

        def objective(params):
            a, b = model.embed(params, feats, idx)
            return np.sum(a * gi) + np.sum(b * gt)

        grads = model.backprop(model.params, feats, idx, gi, gt)
        for k in model.params:
            p = {kk: v.copy() for kk, v in model.params.items()}
            flat = p[k].reshape(-1)
            j = 3
            flat[j] += 1e-6
            up = objective(p)
            flat[j] -= 2e-6
            down = objective(p)
            assert grads[k].reshape(-1)[j] == pytest.approx((up - down) / 2e-6, rel=1e-6, abs=1e-9)


class TestLoading:
    def test_load_encoder_synthetic_and_unknown(self):
        enc = load_encoder("synthetic", {"dim": 8, "side": 32, "patch": 8})
        assert enc.dim == 8 and enc.patch_grid == (4, 4)
        with pytest.raises(LookupError):
            load_encoder("bogus")
        with pytest.raises(LookupError):
            load_encoder("external:nothing-registered")

    def test_registered_external(self):
        register_encoder("toy-test", lambda cfg: make_synthetic_encoder(0, 8))
        assert load_encoder("external:toy-test").dim == 8

    def test_pairs_and_manifest(self, tmp_path):
        (tmp_path / "images").mkdir()
        for i in range(3):
            write_rgb(tmp_path / "images" / f"im{i}.png", np.full((8, 8, 3), 0.2 * i))
        (tmp_path / "captions.tsv").write_text(
            "im0.png\tA long enough caption for image zero.\nim1.png\tshort\nim2.png\tAnother usable caption text here\n"
        )
        pairs = load_pairs(tmp_path)
        assert [p.text for _, p in pairs] == ["A long enough caption for image zero.", "Another usable caption text here"]

        (tmp_path / "p3_benign.txt").write_text("benign tumor\nround smooth mass\n")
        (tmp_path / "manifest.json").write_text(json.dumps({"P3": {"benign": "p3_benign.txt"}}))
        manifest = load_prompt_manifest(tmp_path / "manifest.json")
        prompts = prompts_for(manifest, "P3", "benign")
        assert [p.text for p in prompts] == ["benign tumor", "round smooth mass"]
        assert all(p.config_id == "P3" for p in prompts)
        with pytest.raises(KeyError):
            prompts_for(manifest, "P4", "benign")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_encode_batch_rows_always_unit(seed):
    enc = make_synthetic_encoder(seed % 5, 8, side=16, patch=8, width=16)
    r = np.random.default_rng(seed)
    imgs = [ImageTensor(r.random((16, 16, 3))) for _ in range(3)]
    b = encode_batch(enc, [preprocess_image(i, 16) for i in imgs], [TextPrompt(f"word{seed} x"), TextPrompt("y"), TextPrompt("z")])
    np.testing.assert_allclose(np.linalg.norm(b.image_embeddings, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(b.text_embeddings, axis=1), 1.0, atol=1e-6)
