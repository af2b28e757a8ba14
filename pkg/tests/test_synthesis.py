"""Synthetic anomaly generators and prompt rendering."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ucf import synthesis as syn
from ucf.errors import DomainError, ShapeError, ValidationError

FIXTURES = Path(__file__).parent / "fixtures"


def _image(rng, shape=(3, 16, 16)):
    return rng.uniform(0, 1, shape).astype(np.float32)


class TestPerlin:
    def test_threshold_extremes(self):
        noise = syn.perlin_noise((16, 16), 4, seed=3)
        assert syn.perlin_mask((16, 16), 4, noise.max() + 1e-9, seed=3).sum() == 0
        assert syn.perlin_mask((16, 16), 4, noise.min() - 1e-9, seed=3).all()

    def test_golden_mask(self):
        text = (FIXTURES / "perlin_mask_16x24_s3_t0.1_seed7_oct2.txt").read_text().split()
        golden = np.array([[int(c) for c in row] for row in text], dtype=np.uint8)
        assert np.array_equal(syn.perlin_mask((16, 24), 3, 0.1, 7, octaves=2), golden)

    def test_binary_and_deterministic(self):
        a = syn.perlin_mask((20, 12), 2, 0.0, seed=1)
        assert set(np.unique(a)) <= {0, 1}
        assert np.array_equal(a, syn.perlin_mask((20, 12), 2, 0.0, seed=1))

    @pytest.mark.parametrize("shape,scale", [((0, 4), 2), ((4, 4), 0)])
    def test_degenerate(self, shape, scale):
        with pytest.raises(ValidationError):
            syn.perlin_mask(shape, scale, 0.0, 0)


class TestTexture:
    def test_beta_one_identity(self, rng):
        img, tex = _image(rng), _image(rng)
        out = syn.texture_anomaly(img, np.ones((16, 16)), tex, 1.0)
        assert np.array_equal(out.image, img)

    def test_beta_zero_is_texture(self, rng):
        img, tex = _image(rng), _image(rng)
        mask = syn.perlin_mask((16, 16), 2, 0.0, 1)
        out = syn.texture_anomaly(img, mask, tex, 0.0)
        m = mask.astype(bool)
        assert np.array_equal(out.image[:, m], tex[:, m])
        assert np.array_equal(out.image[:, ~m], img[:, ~m])

    def test_midpoint(self):
        img = np.full((3, 2, 2), 0.2, np.float32)
        tex = np.full((3, 2, 2), 0.8, np.float32)
        out = syn.texture_anomaly(img, np.ones((2, 2)), tex, 0.5)
        assert np.allclose(out.image, 0.5, atol=1e-7)

    @pytest.mark.parametrize("beta", [-0.1, 1.1])
    def test_domain(self, rng, beta):
        with pytest.raises(DomainError):
            syn.texture_anomaly(_image(rng), np.ones((16, 16)), _image(rng), beta)

    def test_procedural_range(self):
        for kind in ("noise", "stripes", "checker"):
            t = syn.procedural_texture(kind, (16, 16), 4)
            assert t.shape == (3, 16, 16) and t.min() >= 0 and t.max() <= 1
        with pytest.raises(ValidationError):
            syn.procedural_texture("marble", (16, 16), 0)


class TestStructural:
    def test_identity_permutation(self, rng):
        img = _image(rng)
        out = syn.structural_anomaly(img, np.ones((16, 16)), 4, seed=0, perm=np.arange(16))
        assert np.array_equal(out.image, img)

    @given(st.integers(0, 2**31), st.sampled_from([1, 2, 4, 8]))
    def test_constant_image(self, seed, g):
        img = np.full((3, 16, 16), 0.3, np.float32)
        out = syn.structural_anomaly(img, np.ones((16, 16)), g, seed)
        assert np.array_equal(out.image, img)

    def test_swap_table(self):
        # tiles numbered row-major: 0 1 / 2 3; output tile t shows input tile perm[t]
        img = np.zeros((1, 4, 4), np.float32)
        for t in range(4):
            r, c = divmod(t, 2)
            img[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2] = t / 10
        perm = np.array([3, 2, 1, 0])
        out = syn.structural_anomaly(img, np.ones((4, 4)), 2, seed=0, perm=perm, blend=False)
        table = {0: 0.3, 1: 0.2, 2: 0.1, 3: 0.0}
        for t, v in table.items():
            r, c = divmod(t, 2)
            assert np.all(out.image[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2] == np.float32(v))

    def test_seeded_permutation_recorded(self):
        assert syn.tile_permutation(2, 5).tolist() == np.random.default_rng(5).permutation(4).tolist()

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            syn.structural_anomaly(_image(rng), np.ones((16, 16)), 3, 0)


class TestPoints:
    def _grid(self):
        yy, xx = np.mgrid[0:12, 0:12] / 12.0
        return np.stack([xx, yy, 0.3 * xx - 0.2 * yy + 0.1]).astype(np.float32)

    @pytest.mark.parametrize("mode", syn.POINT_MODES)
    def test_empty_mask(self, mode):
        g = self._grid()
        out = syn.perturb_points(g, np.zeros((12, 12)), mode, seed=1)
        assert np.array_equal(out.point_grid, g)

    def test_zero_sigma(self):
        g = self._grid()
        out = syn.perturb_points(g, np.ones((12, 12)), "gaussian", {"sigma": 0.0}, seed=1)
        assert np.array_equal(out.point_grid, g)

    def test_interp_fill_plane(self):
        g = self._grid()
        mask = np.zeros((12, 12))
        mask[:, 4:7] = 1
        out = syn.perturb_points(g, mask, "interp_fill").point_grid
        assert np.allclose(out, g, atol=1e-6)

    @pytest.mark.parametrize("mode", syn.POINT_MODES)
    def test_outside_unchanged_and_deterministic(self, rng, mode):
        g = rng.standard_normal((3, 12, 12)).astype(np.float32)
        mask = syn.perlin_mask((12, 12), 2, 0.0, 4)
        a = syn.perturb_points(g, mask, mode, seed=9).point_grid
        b = syn.perturb_points(g, mask, mode, seed=9).point_grid
        assert np.array_equal(a, b)
        assert np.array_equal(a[:, mask == 0], g[:, mask == 0])

    def test_unknown_mode(self):
        with pytest.raises(ValidationError):
            syn.perturb_points(self._grid(), np.zeros((12, 12)), "warp")


class TestPrompts:
    def test_substitution(self):
        bank = syn.PromptTemplateBank(["a photo of a flawless [cls]"], ["a photo of a damaged [cls]"])
        normal, abnormal = syn.render_prompts(bank, "bottle")
        assert abnormal == ["a photo of a damaged bottle"] and normal == ["a photo of a flawless bottle"]

    def test_class_agnostic_pass_through(self):
        normal, abnormal = syn.render_prompts(syn.object_agnostic_bank(), "bottle")
        assert normal == ["a photo of a [object]"] and abnormal == ["a photo of a damaged [object]"]

    def test_empty_bank(self):
        with pytest.raises(ValidationError):
            syn.PromptTemplateBank([], ["x [cls]"])

    def test_missing_placeholder(self):
        with pytest.raises(ValidationError):
            syn.render_prompts(syn.PromptTemplateBank(["a photo"], ["a [cls]"]), "bottle")

    def test_needs_class_name(self):
        with pytest.raises(ValidationError):
            syn.render_prompts(syn.default_prompt_bank(), "")

    def test_default_bank(self):
        normal, abnormal = syn.render_prompts(syn.default_prompt_bank(), "disc")
        assert "a bad photo of a damaged disc" in abnormal
        assert all("disc" in p for p in normal + abnormal)


CONFIGS = [
    syn.SynthConfig(),
    syn.SynthConfig(p_structural=1.0, blend_structural=False),
    syn.SynthConfig(p_structural=0.0, refine_delta=0.2),
]


class TestSynthesize:
    @given(st.integers(0, 2**31), st.sampled_from(range(len(CONFIGS))), st.booleans())
    def test_diff_support_within_mask(self, seed, ci, points):
        r = np.random.default_rng(seed)
        img = _image(r)
        grid = r.standard_normal((3, 16, 16)).astype(np.float32) if points else None
        s = syn.synthesize(img, 1, seed, CONFIGS[ci], grid)
        changed = np.any(s.image != img, axis=0)
        assert not np.any(changed & (s.mask == 0))
        if points:
            moved = np.any(s.point_grid != grid, axis=0)
            assert not np.any(moved & (s.mask == 0))
        assert s.image.min() >= 0 and s.image.max() <= 1 and s.class_label == 1

    @given(st.integers(0, 2**31))
    def test_deterministic(self, seed):
        img = _image(np.random.default_rng(0))
        a, b = syn.synthesize(img, 0, seed), syn.synthesize(img, 0, seed)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) and a.mode == b.mode

    def test_beta_one_identity_all_generators(self, rng):
        img, mask = _image(rng), np.ones((16, 16))
        assert np.array_equal(syn.texture_anomaly(img, mask, _image(rng), 1.0).image, img)
        assert np.array_equal(syn.structural_anomaly(img, mask, 4, 3, beta=1.0).image, img)

    @given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
    def test_beta_monotone(self, seed, b1, b2):
        lo, hi = sorted((b1, b2))
        r = np.random.default_rng(seed)
        img, tex = _image(r), _image(r)
        mask = np.ones((16, 16))
        for gen in (lambda b: syn.texture_anomaly(img, mask, tex, b),
                    lambda b: syn.structural_anomaly(img, mask, 4, seed, beta=b)):
            d_lo = np.abs(gen(lo).image - img)
            d_hi = np.abs(gen(hi).image - img)
            assert np.all(d_hi <= d_lo + 1e-6)

    def test_refine_drops_unchanged_pixels(self, rng):
        img = _image(rng)
        s = syn.texture_anomaly(img, np.ones((16, 16)), img.copy(), 0.0)
        s = syn.refine_to_changes(s, img, 0.05)
        assert s.mask.sum() == 0 and np.array_equal(s.image, img)


def test_save_load_round_trip(rng, tmp_path):
    img = _image(rng)
    grid = rng.standard_normal((3, 16, 16)).astype(np.float32)
    samples = [syn.synthesize(img, k, k, syn.SynthConfig(), grid) for k in range(4)]
    manifest = syn.save_samples(samples, tmp_path)
    back = syn.load_samples(tmp_path)
    assert manifest.exists() and len(back) == 4
    for a, b in zip(samples, back):
        assert np.array_equal(a.mask, b.mask) and a.class_label == b.class_label and a.mode == b.mode
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6
        assert np.array_equal(a.point_grid, b.point_grid)


def test_sample_validation():
    with pytest.raises(ValidationError):
        syn.SynthSample(np.zeros((3, 2, 2)), np.full((2, 2), 2))
    with pytest.raises(ShapeError):
        syn.SynthSample(np.zeros((3, 2, 3)), np.zeros((2, 2)))
