"""Semantic parser and memory-bank retrieval tests.

The parser is checked against a straight-line numpy recomputation; the
retriever against an exhaustive-scan oracle with the same tie-break.
"""

import math

import numpy as np
import pytest

from rasr.config import TrainConfig
from rasr.corpus import Domain, FeatureDims, synth_generate
from rasr.cspr import (
    AlphaWeights,
    MemoryBank,
    SemanticPrimitive,
    aggregate_similarity,
    build_bank,
    parse_semantic,
    refresh_bank,
    retrieve,
)
from rasr.errors import DataError
from rasr.numerics import ParamStore
from rasr.pipeline import init_params

CFG = TrainConfig(
    d_v=8, d_t=8, d_a=4, d_s=6, d_p=6, d_h=4, d_align=4, d_attn=4, d_c=4,
    s_tokens=2, seed=13,
)


def _params(seed=13):
    return init_params(CFG.with_overrides(seed=seed))


def _oracle_parse(f_v, f_t, f_a, params, cfg):
    """Independent straight-line recomputation of the parser chain."""
    q_v = f_v @ params["cspr.attn_v.w"] + params["cspr.attn_v.b"]
    q_t = f_t @ params["cspr.attn_t.w"] + params["cspr.attn_t.b"]
    q_a = f_a @ params["cspr.attn_a.w"] + params["cspr.attn_a.b"]
    s_v = float(q_t @ q_v) / math.sqrt(cfg.d_attn)
    s_a = float(q_t @ q_a) / math.sqrt(cfg.d_attn)
    e_v, e_a = math.exp(s_v - max(s_v, s_a)), math.exp(s_a - max(s_v, s_a))
    w_v, w_a = e_v / (e_v + e_a), e_a / (e_v + e_a)
    h = q_t + w_v * q_v + w_a * q_a
    hidden = np.tanh(h @ params["cspr.mlp_sem.w1"] + params["cspr.mlp_sem.b1"])
    s = hidden @ params["cspr.mlp_sem.w2"] + params["cspr.mlp_sem.b2"]
    return {
        "s": s,
        "v": s @ params["cspr.comp_v.w"],
        "t": s @ params["cspr.comp_t.w"],
        "a": s @ params["cspr.comp_a.w"],
    }


class TestParseSemantic:
    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(21)
        params = _params()
        for _ in range(10):
            f_v, f_t, f_a = rng.normal(size=8), rng.normal(size=8), rng.normal(size=4)
            got = parse_semantic(f_v, f_t, f_a, params, CFG)
            want = _oracle_parse(f_v, f_t, f_a, params, CFG)
            np.testing.assert_allclose(got.s, want["s"], atol=1e-12)
            np.testing.assert_allclose(got.s_v, want["v"], atol=1e-12)
            np.testing.assert_allclose(got.s_t, want["t"], atol=1e-12)
            np.testing.assert_allclose(got.s_a, want["a"], atol=1e-12)

    def test_identical_tokens_make_attention_weight_irrelevant(self):
        rng = np.random.default_rng(22)
        params = _params()
        # force the two projected tokens to coincide
        params["cspr.attn_a.w"] = np.zeros((4, 4))
        params["cspr.attn_a.b"] = np.zeros(4)
        params["cspr.attn_v.w"] = np.zeros((8, 4))
        params["cspr.attn_v.b"] = np.zeros(4)
        common = rng.normal(size=4)
        params["cspr.attn_v.b"] = common
        params["cspr.attn_a.b"] = common
        f_v, f_t, f_a = rng.normal(size=8), rng.normal(size=8), rng.normal(size=4)
        got = parse_semantic(f_v, f_t, f_a, params, CFG)
        q_t = f_t @ params["cspr.attn_t.w"] + params["cspr.attn_t.b"]
        h = q_t + common
        hidden = np.tanh(h @ params["cspr.mlp_sem.w1"] + params["cspr.mlp_sem.b1"])
        want = hidden @ params["cspr.mlp_sem.w2"] + params["cspr.mlp_sem.b2"]
        np.testing.assert_allclose(got.s, want, atol=1e-12)

    def test_zero_mlp_weights_collapse_to_bias(self):
        rng = np.random.default_rng(23)
        params = _params()
        params["cspr.mlp_sem.w1"] = np.zeros((4, 6))
        params["cspr.mlp_sem.w2"] = np.zeros((6, 6))
        bias = rng.normal(size=6)
        params["cspr.mlp_sem.b2"] = bias
        got = parse_semantic(rng.normal(size=8), rng.normal(size=8), rng.normal(size=4),
                             params, CFG)
        np.testing.assert_allclose(got.s, bias, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        params = _params()
        with pytest.raises(DataError, match="visual"):
            parse_semantic(np.ones(7), np.ones(8), np.ones(4), params, CFG)

    def test_components_are_linear_images(self):
        rng = np.random.default_rng(24)
        params = _params()
        prim = parse_semantic(rng.normal(size=8), rng.normal(size=8), rng.normal(size=4),
                              params, CFG)
        assert prim.check_consistent(params)


class TestAggregateSimilarity:
    def _prim(self, v, t, a):
        return SemanticPrimitive(s=np.zeros(2), s_v=np.asarray(v, float),
                                 s_t=np.asarray(t, float), s_a=np.asarray(a, float))

    def test_uniform_weights_arithmetic(self):
        # cosines 0.9 / 0.6 / 0.3 by construction
        def pair(c):
            return [1.0, 0.0], [c, math.sqrt(1 - c * c)]

        p_v, q_v = pair(0.9)
        p_t, q_t = pair(0.6)
        p_a, q_a = pair(0.3)
        p = self._prim(p_v, p_t, p_a)
        q = self._prim(q_v, q_t, q_a)
        got = aggregate_similarity(p, q, AlphaWeights())
        assert abs(got - 0.6) < 1e-9

    def test_degenerate_weights_pick_one_modality(self):
        p = self._prim([1, 0], [1, 0], [1, 0])
        q = self._prim([0.8, 0.6], [0, 1], [-1, 0])
        alpha = AlphaWeights(logits=(60.0, 0.0, 0.0))
        got = aggregate_similarity(p, q, alpha)
        assert abs(got - 0.8) < 1e-6

    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(31)
        p = self._prim(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3))
        assert abs(aggregate_similarity(p, p, AlphaWeights()) - 1.0) < 1e-6

    def test_alpha_weights_sum_to_one(self):
        rng = np.random.default_rng(32)
        for _ in range(50):
            alpha = AlphaWeights(logits=tuple(rng.normal(scale=10, size=3)))
            assert abs(sum(alpha.weights) - 1.0) < 1e-9
            assert all(w > 0 for w in alpha.weights)

    def test_monotone_in_single_modality_cosine(self):
        alpha = AlphaWeights()
        base = self._prim([1, 0], [1, 0], [1, 0])

        def with_v(c):
            return self._prim([c, math.sqrt(1 - c * c)], [1, 0], [1, 0])

        scores = [aggregate_similarity(base, with_v(c), alpha) for c in (0.1, 0.5, 0.9)]
        assert scores[0] < scores[1] < scores[2]


def _random_bank(rng, n, d_s=5):
    entries = []
    for i in range(n):
        prim = SemanticPrimitive(
            s=rng.normal(size=d_s), s_v=rng.normal(size=d_s),
            s_t=rng.normal(size=d_s), s_a=rng.normal(size=d_s),
        )
        from rasr.cspr import BankEntry

        entries.append(BankEntry(
            video_id=f"e{i:04d}",
            domain=rng.choice(list(Domain)),
            label=int(rng.integers(0, 2)),
            primitive=prim,
        ))
    return MemoryBank(entries)


def _oracle_retrieve(bank, query, domain, query_id, k_intra, k_cross, alpha):
    """Plain-python exhaustive scan with (score desc, id asc) tie-break."""
    def cos(a, b):
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(a @ b) / ((na + 1e-12) * (nb + 1e-12))

    w = alpha.weights
    scored = []
    for e in bank.entries:
        if e.video_id == query_id:
            continue
        s = (w[0] * cos(query.s_v, e.primitive.s_v)
             + w[1] * cos(query.s_t, e.primitive.s_t)
             + w[2] * cos(query.s_a, e.primitive.s_a))
        scored.append((e.video_id, s, e.domain))
    intra = sorted((x for x in scored if x[2] == domain), key=lambda x: (-x[1], x[0]))
    cross = sorted((x for x in scored if x[2] != domain), key=lambda x: (-x[1], x[0]))
    merged = intra[:k_intra] + cross[:k_cross]
    merged.sort(key=lambda x: (-x[1], x[0]))
    return [x[0] for x in merged]


class TestRetrieve:
    def test_zero_quotas_give_empty_context(self):
        rng = np.random.default_rng(41)
        bank = _random_bank(rng, 10)
        q = bank.entries[0].primitive
        ctx = retrieve(bank, q, bank.entries[0].domain, "none", 0, 0, AlphaWeights())
        assert ctx.items == ()

    def test_query_id_never_returned(self):
        rng = np.random.default_rng(42)
        bank = _random_bank(rng, 30)
        e = bank.entries[3]
        ctx = retrieve(bank, e.primitive, e.domain, e.video_id, 10, 10, AlphaWeights())
        assert e.video_id not in [it.video_id for it in ctx.items]

    def test_partition_discipline(self):
        rng = np.random.default_rng(43)
        bank = _random_bank(rng, 60)
        e = bank.entries[0]
        ctx = retrieve(bank, e.primitive, e.domain, e.video_id, 4, 4, AlphaWeights())
        by_id = {x.video_id: x for x in ctx.items}
        intra = [x for x in ctx.items if x.domain == e.domain]
        cross = [x for x in ctx.items if x.domain != e.domain]
        assert len(intra) == ctx.intra_count and len(cross) == ctx.cross_count
        assert len(by_id) == len(ctx.items)

    def test_short_partition_returns_all_without_backfill(self):
        rng = np.random.default_rng(44)
        bank = _random_bank(rng, 40)
        domain = bank.entries[0].domain
        n_intra = len(bank.domain_index[domain])
        q = SemanticPrimitive(*(rng.normal(size=5) for _ in range(4)))
        ctx = retrieve(bank, q, domain, "none", n_intra + 5, 2, AlphaWeights())
        assert ctx.intra_count == n_intra
        assert ctx.cross_count == 2

    def test_empty_bank_rejected(self):
        q = SemanticPrimitive(*(np.ones(3) for _ in range(4)))
        with pytest.raises(DataError, match="empty"):
            retrieve(MemoryBank([]), q, Domain.HEALTH, "x", 2, 2, AlphaWeights())

    def test_matches_exhaustive_oracle_on_randomized_instances(self):
        """200 random (bank, query) cases match the brute-force ranking."""
        rng = np.random.default_rng(45)
        alpha = AlphaWeights()
        for trial in range(200):
            bank = _random_bank(rng, int(rng.integers(2, 64)))
            q = SemanticPrimitive(*(rng.normal(size=5) for _ in range(4)))
            domain = rng.choice(list(Domain))
            k_i, k_c = int(rng.integers(0, 6)), int(rng.integers(0, 6))
            query_id = "e0000" if trial % 3 == 0 else "absent"
            got = retrieve(bank, q, domain, query_id, k_i, k_c, alpha)
            want = _oracle_retrieve(bank, q, domain, query_id, k_i, k_c, alpha)
            assert [it.video_id for it in got.items] == want

    def test_ties_break_by_id_ascending(self):
        from rasr.cspr import BankEntry

        prim = SemanticPrimitive(*(np.ones(3) for _ in range(4)))
        entries = [
            BankEntry(video_id=vid, domain=Domain.HEALTH, label=0, primitive=prim)
            for vid in ("zz", "aa", "mm")
        ]
        bank = MemoryBank(entries)
        ctx = retrieve(bank, prim, Domain.HEALTH, "none", 2, 0, AlphaWeights())
        assert [it.video_id for it in ctx.items] == ["aa", "mm"]


class TestBank:
    def test_build_covers_all_records(self):
        cfg = CFG
        corpus = synth_generate(40, 0.5, 0.5, seed=3, dims=FeatureDims(8, 8, 4))
        params = _params()
        bank = build_bank(corpus, params, cfg)
        assert len(bank) == 40
        total = sum(len(v) for v in bank.domain_index.values())
        assert total == 40

    def test_duplicate_ids_rejected(self):
        corpus = synth_generate(20, 0.5, 0.5, seed=3, dims=FeatureDims(8, 8, 4))
        corpus[1].id = corpus[0].id
        with pytest.raises(DataError, match="duplicate"):
            build_bank(corpus, _params(), CFG)

    def test_refresh_idempotent_under_same_params(self):
        corpus = synth_generate(25, 0.5, 0.5, seed=4, dims=FeatureDims(8, 8, 4))
        params = _params()
        bank = build_bank(corpus, params, CFG)
        again = refresh_bank(bank, params, CFG)
        for a, b in zip(bank.entries, again.entries):
            assert np.array_equal(a.primitive.s, b.primitive.s)
            assert a.video_id == b.video_id

    def test_refresh_zeroed_mlp_collapses_to_bias(self):
        corpus = synth_generate(20, 0.5, 0.5, seed=5, dims=FeatureDims(8, 8, 4))
        params = _params()
        bank = build_bank(corpus, params, CFG)
        params["cspr.mlp_sem.w1"] = np.zeros((4, 6))
        params["cspr.mlp_sem.w2"] = np.zeros((6, 6))
        params["cspr.mlp_sem.b2"] = np.full(6, 1.5)
        bank = refresh_bank(bank, params, CFG)
        for e in bank.entries:
            np.testing.assert_allclose(e.primitive.s, np.full(6, 1.5), atol=1e-12)

    def test_refresh_preserves_reports_and_labels(self):
        corpus = synth_generate(20, 0.5, 0.5, seed=6, dims=FeatureDims(8, 8, 4))
        params = _params()
        bank = build_bank(corpus, params, CFG)
        bank.entries[0].reports = {"v": "sentinel-report"}
        refreshed = refresh_bank(bank, params, CFG)
        assert refreshed.entries[0].reports == {"v": "sentinel-report"}
        assert [e.label for e in refreshed.entries] == [e.label for e in bank.entries]
