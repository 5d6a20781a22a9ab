import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatattn import ham
from splatattn.ham import (
    ModulationHook,
    SemanticGuidanceTree,
    SGTValidationError,
    SubClass,
    WeightMatrices,
    accumulate_weights,
    load_sgt,
    make_probes,
    modulate,
    modulation_gains,
    parse_sgt,
    plan_truth,
    planted_stack,
    srp_head_scores,
    srp_layer_scores,
)
from splatattn.stack import CAStack, TokenSet, forward_all, make_query_grid, random_stack


def inst(word, *emb):
    return {"word": word, "embedding": list(emb)}


MINIMAL = {"A": {"a1": [inst("x", 1.0, 0.0)]}, "B": {"b1": [inst("y", 0.0, 1.0)]}}


def identity_stack(d=16, L=2, H=2):
    eye = np.broadcast_to(np.eye(d), (L, H, d, d)).copy()
    return CAStack(eye, eye.copy())


def pooled_oracle(stack, layer, probe, keys):
    """(H, F) pooled scores by explicit loops over pixels."""
    X = probe.reshape(-1, probe.shape[-1])
    out = np.zeros((stack.n_heads, len(keys)))
    for h in range(stack.n_heads):
        for f, e in enumerate(keys):
            k = stack.wk[layer, h] @ e
            total = 0.0
            for x in X:
                total += float((stack.wq[layer, h] @ x) @ k) / math.sqrt(stack.head_dim)
            out[h, f] = total / len(X)
    return out


class TestParse:
    def test_minimal(self):
        t = parse_sgt(MINIMAL)
        assert (t.M, t.F, t.dim) == (2, 2, 2)

    def test_empty_subclass_named(self):
        doc = {"A": {"a1": []}, "B": {"b1": [inst("y", 1.0)]}}
        with pytest.raises(SGTValidationError, match="A/a1"):
            parse_sgt(doc)

    def test_fixture(self):
        t = load_sgt()
        assert t.M == 3 and t.classes == ["Object", "Attribute", "View"]
        for f, s in enumerate(t.subclasses):
            assert t.class_of(f) == s.class_index
            assert f in t.subclasses_of(s.class_index)
        assert t.F == 6 and t.dim == 16

    def test_flat_layout_and_orphan(self):
        flat = {"classes": {"A": ["a1"], "B": ["b1"]}, "subclasses": {"a1": [inst("x", 1.0)], "b1": [inst("y", 2.0)]}}
        assert parse_sgt(flat).F == 2
        flat["subclasses"]["c1"] = [inst("z", 3.0)]
        with pytest.raises(SGTValidationError, match="orphan"):
            parse_sgt(flat)

    def test_duplicate_subclass(self):
        flat = {"classes": {"A": ["a1"], "B": ["a1"]}, "subclasses": {"a1": [inst("x", 1.0)]}}
        with pytest.raises(SGTValidationError, match="already belongs"):
            parse_sgt(flat)

    def test_dimension_mismatch(self):
        doc = {"A": {"a1": [inst("x", 1.0, 0.0)]}, "B": {"b1": [inst("y", 1.0)]}}
        with pytest.raises(SGTValidationError, match="B/b1"):
            parse_sgt(doc)

    def test_json_round_trip(self):
        t = load_sgt()
        back = parse_sgt(json.dumps(t.to_json()))
        assert back.classes == t.classes
        for a, b in zip(back.subclasses, t.subclasses):
            assert a.name == b.name and a.words == b.words
            np.testing.assert_array_equal(a.embeddings, b.embeddings)


class TestSRP:
    sgt = load_sgt()

    def test_head_query_equal_to_key(self):
        stack = identity_stack()
        keys = self.sgt.first_instances()
        for k in range(self.sgt.F):
            probe = np.broadcast_to(keys[k], (4, 4, 16))
            got = srp_head_scores(stack, (1, 0), probe, self.sgt, keys)
            assert got == k == int(np.argmax(pooled_oracle(stack, 1, probe, keys)[0]))

    def test_pooled_scores_match_oracle(self):
        stack = random_stack(seed=4)
        probe = make_probes(1, 16, (3, 3), seed=5)[0]
        keys = self.sgt.first_instances()
        np.testing.assert_allclose(ham.pooled_scores(stack, 2, probe, keys), pooled_oracle(stack, 2, probe, keys),
                                   rtol=1e-12, atol=1e-12)

    def test_identical_keys_tie(self):
        keys = np.tile(self.sgt.first_instances()[3], (self.sgt.F, 1))
        assert srp_head_scores(random_stack(seed=1), (0, 0), make_probes(1, 16)[0], self.sgt, keys) == 0

    @settings(max_examples=30, deadline=None)
    @given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    def test_positive_rescaling(self, c, seed):
        stack = random_stack(seed=seed)
        probe = make_probes(1, 16, seed=seed)[0]
        keys = self.sgt.first_instances()
        for l in range(stack.n_layers):
            for h in range(stack.n_heads):
                assert srp_head_scores(stack, (l, h), probe, self.sgt, keys) == \
                    srp_head_scores(stack, (l, h), c * probe, self.sgt, keys)
            assert srp_layer_scores(stack, l, probe, self.sgt, keys) == \
                srp_layer_scores(stack, l, c * probe, self.sgt, keys)

    def test_common_shift_in_logits(self):
        # an extra key component that every key shares adds the same amount to every pooled score
        stack = random_stack(seed=8)
        probe = make_probes(1, 16, seed=8)[0]
        keys = self.sgt.first_instances()
        shift = np.zeros(16)
        shift[0] = 5.0
        base = ham.pooled_scores(stack, 1, probe, keys)
        moved = ham.pooled_scores(stack, 1, probe, keys + shift)
        np.testing.assert_allclose(moved - base, np.broadcast_to((moved - base)[:, :1], base.shape), atol=1e-9)
        assert np.array_equal(base.argmax(axis=1), moved.argmax(axis=1))

    def test_layer_planted_for_class(self):
        m = self.sgt.class_index("Attribute")
        subs = [self.sgt.subclasses[f].name for f in self.sgt.subclasses_of(m)]
        plan = tuple((subs[0], subs[1], subs[0], subs[1]) for _ in range(4))
        stack = planted_stack(self.sgt, plan)
        keys = self.sgt.first_instances()
        probe = make_probes(1, 16)[0]
        sums = pooled_oracle(stack, 2, probe, keys).sum(axis=0)
        oracle = int(np.argmax([sums[self.sgt.subclasses_of(k)].sum() for k in range(self.sgt.M)]))
        assert srp_layer_scores(stack, 2, probe, self.sgt, keys) == m == oracle

    def test_single_class_tree(self):
        t = SemanticGuidanceTree(["only"], [SubClass("s", 0, ["w"], np.eye(16)[:1])])
        assert srp_layer_scores(random_stack(), 0, make_probes(1, 16)[0], t, t.first_instances()) == 0

    def test_head_permutation(self):
        stack = random_stack(seed=6)
        probe = make_probes(1, 16, seed=6)[0]
        keys = self.sgt.first_instances()
        perm = [2, 0, 3, 1]
        permuted = CAStack(stack.wq[:, perm], stack.wk[:, perm])
        for l in range(4):
            assert srp_layer_scores(stack, l, probe, self.sgt, keys) == srp_layer_scores(permuted, l, probe, self.sgt, keys)


class TestAccumulate:
    sgt = load_sgt()

    def fresh(self, stack):
        return WeightMatrices.zeros(self.sgt, stack.n_layers, stack.n_heads)

    def test_one_probe(self):
        stack = random_stack(seed=2)
        W = accumulate_weights(self.fresh(stack), make_probes(1, 16), stack, self.sgt, np.random.default_rng(0))
        np.testing.assert_array_equal(W.head_weights.sum(axis=0), 1)
        np.testing.assert_array_equal(W.layer_weights.sum(axis=0), 1)

    def test_identical_probes(self):
        stack = planted_stack(self.sgt)
        p = make_probes(1, 16)[0]
        W = accumulate_weights(self.fresh(stack), [p] * 7, stack, self.sgt, np.random.default_rng(0))
        assert set(np.unique(W.head_weights)) <= {0.0, 7.0}
        assert set(np.unique(W.layer_weights)) <= {0.0, 7.0}

    def test_planted_mass(self):
        stack = planted_stack(self.sgt)
        W = accumulate_weights(self.fresh(stack), make_probes(50, 16, seed=3), stack, self.sgt,
                               np.random.default_rng(4))
        heads, layers = plan_truth(self.sgt)
        cols = np.arange(16)
        assert np.all(W.head_weights[heads.ravel(), cols] >= 0.9 * 50)
        assert np.all(W.layer_weights[layers, np.arange(4)] >= 0.9 * 50)
        assert np.array_equal(W.head_argmax(), heads)
        assert np.array_equal(W.layer_argmax(), layers)

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(1, 6), seed=st.integers(0, 500))
    def test_one_hot_columns(self, n, seed):
        stack = random_stack(seed=seed)
        W = accumulate_weights(self.fresh(stack), make_probes(n, 16, (3, 3), seed=seed), stack, self.sgt,
                               np.random.default_rng(seed))
        np.testing.assert_array_equal(W.head_weights.sum(axis=0), W.probes_seen)
        np.testing.assert_array_equal(W.layer_weights.sum(axis=0), W.probes_seen)
        assert W.probes_seen == n

    def test_empty_probe(self):
        stack = random_stack()
        with pytest.raises(ValueError):
            accumulate_weights(self.fresh(stack), [np.zeros((0, 0, 16))], stack, self.sgt, np.random.default_rng(0))


class TestModulate:
    sgt = load_sgt()

    def unit_matrices(self, L=4, H=4):
        W = WeightMatrices(np.ones((self.sgt.M, L)), np.ones((self.sgt.F, L * H)), H, 1)
        return W

    def test_identity_gain(self):
        stack = random_stack(seed=5)
        mod = modulate(stack, self.unit_matrices(), self.sgt, "side_view", 1.0)
        np.testing.assert_array_equal(mod.hook.gains, 1.0)
        f = self.sgt.subclasses[self.sgt.subclass_index("side_view")]
        toks = TokenSet([("dog", self.sgt.subclasses[0].embeddings[0]), (f.words[0], f.embeddings[0])])
        grid = make_query_grid(6, 6, 16)
        a, b = forward_all(stack, grid, toks), forward_all(mod, grid, toks)
        for l in range(4):
            for h in range(4):
                assert np.abs(a[l][h].values - b[l][h].values).max() <= 1e-12

    def test_zero_weight_head_untouched(self):
        W = self.unit_matrices()
        f = self.sgt.subclass_index("side_view")
        W.head_weights[f, 1 * 4 + 2] = 0.0
        gains = modulation_gains(W, self.sgt, f, 3.0)
        assert gains[1, 2] == 0.0
        hook = ModulationHook(gains, ("side",))
        p = np.array([[0.3, 0.7]])
        toks = TokenSet([("dog", np.zeros(16)), ("side", np.ones(16))])
        assert hook(1, 2, p, toks, np.log(p)) is p
        assert hook(1, 1, p, toks, np.log(p))[0, 1] > 0.7

    def test_hand_renormalization(self):
        hook = ModulationHook(np.full((1, 1), 2.0), ("side",))
        toks = TokenSet([("dog", np.zeros(4)), ("side", np.ones(4))])
        out = hook(0, 0, np.array([[0.5, 0.5]]), toks, np.zeros((1, 2)))
        assert out[0, 1] == pytest.approx(2 / 3, abs=1e-15)

    def test_pre_mode(self):
        hook = ModulationHook(np.full((1, 1), 2.0), ("side",), "pre")
        toks = TokenSet([("dog", np.zeros(4)), ("side", np.ones(4))])
        z = np.array([[0.0, 1.0]])
        out = hook(0, 0, None, toks, z)
        e = np.exp([0.0, 2.0])
        np.testing.assert_allclose(out[0], e / e.sum())

    @settings(max_examples=25, deadline=None)
    @given(lam=st.floats(0.1, 20), seed=st.integers(0, 1000), mode=st.sampled_from(["post", "pre"]))
    def test_normalization_preserved(self, lam, seed, mode):
        stack = random_stack(seed=seed, scale=3.0)
        rng = np.random.default_rng(seed)
        W = WeightMatrices(rng.integers(0, 3, (self.sgt.M, 4)).astype(float),
                           rng.integers(0, 3, (self.sgt.F, 16)).astype(float), 4, 2)
        mod = modulate(stack, W, self.sgt, "back_view", lam, mode)
        toks = TokenSet([("dog", rng.normal(size=16)), ("back", rng.normal(size=16)), ("red", rng.normal(size=16))])
        grid = make_query_grid(4, 4, 16)
        for l in range(4):
            for h in range(4):
                np.testing.assert_allclose(mod.probs(l, h, grid, toks).sum(axis=1), 1.0, atol=1e-9)

    def test_gain_formula(self):
        W = WeightMatrices(np.array([[2.0, 0], [0, 2], [1, 1]]).repeat(2, axis=1)[:, :4],
                           np.zeros((self.sgt.F, 16)), 4, 2)
        f = self.sgt.subclass_index("side_view")
        W.head_weights[f, 5] = 1.0
        g = modulation_gains(W, self.sgt, "side_view", 4.0)
        m = self.sgt.class_of(f)
        assert g[1, 1] == pytest.approx(4.0 * (W.layer_weights[m, 1] / 2) * 0.5)
        assert np.count_nonzero(g) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            modulate(random_stack(), self.unit_matrices(), self.sgt, "side_view", 1.0, "sideways")
        with pytest.raises(KeyError):
            modulate(random_stack(), self.unit_matrices(), self.sgt, "top_view", 1.0)
        with pytest.raises(ValueError):
            WeightMatrices.zeros(self.sgt, 4, 4).normalized()
