import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatattn import ham
from splatattn.scene import build_view_ring
from splatattn.stack import (
    BiasSpec,
    Blob,
    CAStack,
    TokenSet,
    bias_from_json,
    bias_to_json,
    ca_map,
    forward_all,
    gaussian_bump,
    make_query_grid,
    point_target_blob,
    random_stack,
    synth_biased_map,
)


def bump_oracle(center, sigma, h, w):
    g = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            x, y = (c + 0.5) / w, (r + 0.5) / h
            g[r, c] = math.exp(-((x - center[0]) ** 2 + (y - center[1]) ** 2) / (2 * sigma**2))
    return g / g.sum()


def tokens(n, d=16, seed=0):
    rng = np.random.default_rng(seed)
    return TokenSet([(f"t{i}", rng.normal(size=d)) for i in range(n)])


class TestCAMap:
    def test_single_token(self):
        st_ = random_stack(seed=1)
        grid = make_query_grid(6, 6, 16)
        np.testing.assert_array_equal(ca_map(st_, 0, 0, grid, tokens(1)).values, np.ones((6, 6)))

    def test_saturation(self):
        d = 4
        eye = np.broadcast_to(np.eye(d), (2, 2, d, d))
        stack = CAStack(eye, eye)
        toks = TokenSet([("a", [1.0, 0, 0, 0]), ("b", [0, 1.0, 0, 0])])
        grid = np.zeros((3, 3, d))
        grid[..., 0] = 200.0
        np.testing.assert_allclose(ca_map(stack, 1, 1, grid, toks, 0).values, 1.0, atol=1e-12)

    def test_orthogonal_keys(self):
        d = 4
        eye = np.broadcast_to(np.eye(d), (2, 2, d, d))
        stack = CAStack(eye, eye)
        toks = TokenSet([(w, e) for w, e in zip("abcd", np.eye(d))])
        grid = np.zeros((5, 5, d))
        grid[..., 1] = 1.0
        grid[2, 3] = [3.0, 0, 0, 0]
        m = ca_map(stack, 0, 1, grid, toks, 0)
        assert np.unravel_index(np.argmax(m.values), m.values.shape) == (2, 3)
        # direct softmax at that pixel: logits (3, 0, 0, 0) / sqrt(4)
        z = np.array([1.5, 0, 0, 0])
        assert m.values[2, 3] == pytest.approx(np.exp(z[0]) / np.exp(z).sum())

    def test_token_softmax_sums_to_one(self):
        st_ = random_stack(seed=3, scale=4.0)
        grid = make_query_grid(7, 5, 16, np.random.default_rng(0).normal(size=15))
        toks = tokens(5)
        for l in range(4):
            for h in range(4):
                np.testing.assert_allclose(st_.probs(l, h, grid, toks).sum(axis=1), 1.0, atol=1e-9)

    def test_pixel_softmax(self):
        st_ = random_stack(seed=3)
        m = ca_map(st_, 1, 2, make_query_grid(6, 6, 16), tokens(3), pixel_softmax=True)
        assert m.values.sum() == pytest.approx(1.0)

    def test_bad_token(self):
        with pytest.raises(IndexError):
            ca_map(random_stack(), 0, 0, make_query_grid(4, 4, 16), tokens(2), 5)

    def test_stack_validation(self):
        with pytest.raises(ValueError):
            CAStack(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 4)))

    def test_json_round_trip(self):
        st_ = random_stack(seed=9)
        back = CAStack.from_json(st_.to_json())
        np.testing.assert_array_equal(back.wq, st_.wq)
        np.testing.assert_array_equal(back.wk, st_.wk)


class TestForwardAll:
    def test_matches_per_head(self):
        st_ = random_stack(seed=2)
        grid = make_query_grid(5, 5, 16)
        toks = tokens(3)
        maps = forward_all(st_, grid, toks)
        for l in range(4):
            for h in range(4):
                np.testing.assert_array_equal(maps[l][h].values, ca_map(st_, l, h, grid, toks).values)

    def test_unit_gain_identity(self):
        st_ = random_stack(seed=2)
        grid = make_query_grid(5, 5, 16)
        toks = tokens(3)
        a = forward_all(st_, grid, toks)
        b = forward_all(ham.constant_gain_hook(st_, 1.0, ("t1",)), grid, toks)
        for l in range(4):
            for h in range(4):
                assert np.abs(a[l][h].values - b[l][h].values).max() <= 1e-12

    def test_planted_view_heads_favour_view_token(self):
        sgt = ham.load_sgt()
        stack = ham.planted_stack(sgt)
        sub, view = sgt.subclasses[0], sgt.subclasses[sgt.subclass_index("side_view")]
        toks = TokenSet([(sub.words[0], sub.embeddings[0]), (view.words[0], view.embeddings[0])], 0, 1)
        grid = make_query_grid(8, 8, 16)
        heads, _ = ham.plan_truth(sgt)
        f = sgt.subclass_index("side_view")
        vmaps = forward_all(stack, grid, toks, 1)
        planted = [vmaps[l][h].values.mean() for l, h in zip(*np.nonzero(heads == f))]
        others = [vmaps[l][h].values.mean() for l, h in zip(*np.nonzero(heads != f))]
        assert min(planted) > 0.75
        assert min(planted) > max(others)


class TestBiasedMap:
    cam = build_view_ring(4, elevation=0.3)[1]
    bias = BiasSpec(0.5, 0.0, Blob((0.8, 0.8), 0.05), lambda cam: Blob((0.2, 0.2), 0.05))

    def test_epsilon_zero(self):
        m = synth_biased_map(self.bias.with_epsilon(0.0), self.cam, (16, 16))
        np.testing.assert_allclose(m.values, bump_oracle((0.2, 0.2), 0.05, 16, 16), atol=1e-15)

    def test_epsilon_one_view_invariant(self):
        b = self.bias.with_epsilon(1.0)
        maps = [synth_biased_map(b, cam, (16, 16)).values for cam in build_view_ring(4)]
        for m in maps:
            np.testing.assert_allclose(m, bump_oracle((0.8, 0.8), 0.05, 16, 16), atol=1e-15)
            np.testing.assert_array_equal(m, maps[0])

    def test_equal_modes(self):
        m = synth_biased_map(self.bias, self.cam, (32, 32)).values
        assert m[:16, :16].sum() == pytest.approx(0.5, abs=1e-9)
        assert m[16:, 16:].sum() == pytest.approx(0.5, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(eps=st.floats(0, 1))
    def test_unit_mass(self, eps):
        m = synth_biased_map(self.bias.with_epsilon(eps), self.cam, (12, 20))
        assert m.values.sum() == pytest.approx(1.0, abs=1e-6)

    def test_prior_component_view_invariant(self):
        b = BiasSpec(0.4, 0.0, Blob((0.5, 0.7), 0.08), point_target_blob((0, 0.5, 0)))
        c0, c1 = build_view_ring(4, elevation=0.3)[:2]
        d0 = synth_biased_map(b, c0).values - 0.6 * gaussian_bump(b.target_blob_fn(c0), (32, 32))
        d1 = synth_biased_map(b, c1).values - 0.6 * gaussian_bump(b.target_blob_fn(c1), (32, 32))
        assert np.abs(d0 - d1).sum() <= 1e-9

    def test_target_follows_projection(self):
        fn = point_target_blob((0.0, 0.0, 0.0))
        for cam in build_view_ring(3, elevation=0.4):
            assert fn(cam).center == pytest.approx((0.5, 0.5))

    def test_validation(self):
        with pytest.raises(ValueError):
            synth_biased_map(self.bias, self.cam, (4, 4))
        with pytest.raises(ValueError):
            BiasSpec(1.5)
        with pytest.raises(ValueError):
            Blob((0.5, 0.5), 0.0)

    def test_json_round_trip(self):
        b = BiasSpec(0.3, 0.0, Blob((0.4, 0.6), 0.1), point_target_blob((0, 0.8, 0), 0.1))
        back = bias_from_json(bias_to_json(b, (0, 0.8, 0)))
        np.testing.assert_allclose(synth_biased_map(back, self.cam).values, synth_biased_map(b, self.cam).values)
