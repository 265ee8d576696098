"""Corpus tests: schema validation, split protocols, synthetic quality.

The synthetic-generator quality gates use an independent logistic probe
(scikit-learn) on the cross-modal cosines as the oracle.
"""

import json
import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from rasr.corpus import (
    DOMAINS,
    Domain,
    FAKE_MARKER,
    FeatureDims,
    REAL_MARKER,
    SplitSpec,
    load_corpus,
    lodo_split,
    save_corpus,
    split,
    synth_generate,
)
from rasr.errors import DataError


def _line(i=0, dv=4, dt=4, da=2, **over):
    obj = {
        "id": f"vid-{i}",
        "domain": "Health",
        "label": i % 2,
        "text": f"sample {i}",
        "features": {
            "visual": [0.1] * dv,
            "text": [0.2] * dt,
            "audio": [0.3] * da,
        },
    }
    obj.update(over)
    return obj


def _write(tmp_path, objs, name="corpus.jsonl"):
    path = tmp_path / name
    with open(path, "w") as fh:
        for obj in objs:
            fh.write(json.dumps(obj) + "\n")
    return path


class TestLoadCorpus:
    def test_three_valid_lines(self, tmp_path):
        path = _write(tmp_path, [_line(i) for i in range(3)])
        records = load_corpus(path)
        assert len(records) == 3
        assert records[0].domain is Domain.HEALTH

    def test_dimension_error_names_line(self, tmp_path):
        objs = [_line(0), _line(1)]
        objs[1]["features"]["visual"] = [0.1] * 3  # first line sets d_v=4
        path = _write(tmp_path, objs)
        with pytest.raises(DataError, match="line 2"):
            load_corpus(path)

    def test_round_trip_identity(self, tmp_path):
        records = synth_generate(30, 0.5, 0.5, seed=1)
        path = tmp_path / "rt.jsonl"
        save_corpus(records, path)
        again = load_corpus(path)
        assert records == again

    def test_duplicate_id_rejected(self, tmp_path):
        path = _write(tmp_path, [_line(0), _line(0)])
        with pytest.raises(DataError, match="duplicate id"):
            load_corpus(path)

    def test_unknown_domain_rejected(self, tmp_path):
        path = _write(tmp_path, [_line(0, domain="health")])  # case-sensitive
        with pytest.raises(DataError, match="unknown domain"):
            load_corpus(path)

    def test_non_finite_rejected(self, tmp_path):
        bad = _line(0)
        bad["features"]["audio"] = [float("nan"), 0.0]
        path = _write(tmp_path, [bad])
        with pytest.raises(DataError, match="non-finite"):
            load_corpus(path)

    def test_bad_label_rejected(self, tmp_path):
        path = _write(tmp_path, [_line(0, label=2)])
        with pytest.raises(DataError, match="label"):
            load_corpus(path)

    def test_missing_field_names_line(self, tmp_path):
        obj = _line(0)
        del obj["text"]
        path = _write(tmp_path, [obj])
        with pytest.raises(DataError, match="line 1.*text"):
            load_corpus(path)

    def test_reports_field_round_trips(self, tmp_path):
        obj = _line(0, reports={"v": {"text": "looks fine", "confidence": 0.9}})
        path = _write(tmp_path, [obj])
        rec = load_corpus(path)[0]
        assert rec.reports["v"]["confidence"] == 0.9


class TestGeneralSplit:
    def test_sizes_100_at_70_15_15(self):
        corpus = synth_generate(100, 0.5, 0.5, seed=7)
        spec = SplitSpec(seed=7, ratios=(0.7, 0.15, 0.15))
        tr, va, te = split(corpus, spec)
        assert (len(tr), len(va), len(te)) == (70, 15, 15)

    def test_deterministic_partitions(self):
        corpus = synth_generate(120, 0.5, 0.5, seed=3)
        spec = SplitSpec(seed=11)
        a = tuple(sorted(r.id for r in part) for part in split(corpus, spec))
        b = tuple(sorted(r.id for r in part) for part in split(corpus, spec))
        assert a == b

    def test_zero_ratio_rejected(self):
        corpus = synth_generate(20, 0.5, 0.5, seed=3)
        with pytest.raises(DataError, match="positive"):
            split(corpus, SplitSpec(ratios=(1.0, 0.0, 0.0)))

    def test_ratios_must_sum_to_one(self):
        corpus = synth_generate(20, 0.5, 0.5, seed=3)
        with pytest.raises(DataError, match="sum to 1"):
            split(corpus, SplitSpec(ratios=(0.5, 0.2, 0.2)))

    def test_partition_property(self):
        corpus = synth_generate(83, 0.5, 0.5, seed=5)
        tr, va, te = split(corpus, SplitSpec(seed=2))
        ids = [r.id for part in (tr, va, te) for r in part]
        assert sorted(ids) == sorted(r.id for r in corpus)
        assert len(set(ids)) == len(ids)

    def test_per_cell_within_one_and_exact_totals(self):
        rng = np.random.default_rng(0)
        for trial in range(25):
            n = int(rng.integers(40, 300))
            corpus = synth_generate(n, 0.5, 0.5, seed=trial)
            ratios = (0.7, 0.15, 0.15) if trial % 2 else (0.6, 0.2, 0.2)
            spec = SplitSpec(seed=trial, ratios=ratios)
            parts = split(corpus, spec)
            totals = [len(p) for p in parts]
            exact = [n * r for r in ratios]
            base = [math.floor(e) for e in exact]
            rem = n - sum(base)
            order = sorted(range(3), key=lambda i: (-(exact[i] - base[i]), i))
            for i in order[:rem]:
                base[i] += 1
            assert totals == base
            for label in (0, 1):
                for domain in DOMAINS:
                    cell = [r for r in corpus if r.label == label and r.domain == domain]
                    if not cell:
                        continue
                    for part, ratio in zip(parts, ratios):
                        got = sum(1 for r in part if r.label == label and r.domain == domain)
                        assert abs(got - len(cell) * ratio) <= 1.0 + 1e-9


class TestLodoSplit:
    def test_partition_by_domain(self):
        corpus = synth_generate(90, 0.5, 0.5, seed=9)
        target = Domain.POLITICS
        train, test = lodo_split(corpus, target)
        assert all(r.domain != target for r in train)
        assert all(r.domain == target for r in test)
        assert len(train) + len(test) == len(corpus)

    def test_train_test_disjoint(self):
        corpus = synth_generate(60, 0.5, 0.5, seed=9)
        train, test = lodo_split(corpus, Domain.HEALTH)
        assert not ({r.id for r in train} & {r.id for r in test})

    def test_absent_target_rejected(self):
        corpus = [r for r in synth_generate(60, 0.5, 0.5, seed=9) if r.domain != Domain.SCIENCE]
        with pytest.raises(DataError, match="absent"):
            lodo_split(corpus, Domain.SCIENCE)


PROBE_DIMS = FeatureDims(d_v=32, d_t=32, d_a=32)  # equal dims so both cosines exist


def _probe_accuracy(corpus, seed=0):
    """Independent oracle: logistic regression on the two text cosines."""
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    feats = np.array(
        [[cos(r.text_feature, r.visual_feature), cos(r.text_feature, r.audio_feature)]
         for r in corpus]
    )
    labels = np.array([r.label for r in corpus])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    cut = int(0.7 * len(corpus))
    tr, te = order[:cut], order[cut:]
    clf = LogisticRegression().fit(feats[tr], labels[tr])
    return float(clf.score(feats[te], labels[te]))


class TestSynthGenerate:
    def test_high_separability_probe(self):
        corpus = synth_generate(2000, 1.0, 1.0, seed=0, dims=PROBE_DIMS, fake_fraction=0.5)
        assert _probe_accuracy(corpus) >= 0.95

    def test_zero_separability_probe_at_chance(self):
        corpus = synth_generate(2000, 0.0, 0.0, seed=0, dims=PROBE_DIMS, fake_fraction=0.5)
        acc = _probe_accuracy(corpus)
        assert abs(acc - 0.5) <= 0.05

    def test_same_seed_bitwise_identical_files(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(synth_generate(100, 0.7, 0.3, seed=42), a)
        save_corpus(synth_generate(100, 0.7, 0.3, seed=42), b)
        assert a.read_bytes() == b.read_bytes()

    def test_minimum_size_enforced(self):
        with pytest.raises(DataError, match="18"):
            synth_generate(17, 0.5, 0.5, seed=0)

    def test_markers_follow_labels(self):
        corpus = synth_generate(200, 0.5, 1.0, seed=4)
        for rec in corpus:
            marker = FAKE_MARKER if rec.label == 1 else REAL_MARKER
            other = REAL_MARKER if rec.label == 1 else FAKE_MARKER
            assert marker in rec.text
            assert other not in rec.text

    def test_leak_zero_has_no_markers(self):
        corpus = synth_generate(100, 0.5, 0.0, seed=4)
        assert all(FAKE_MARKER not in r.text and REAL_MARKER not in r.text for r in corpus)

    def test_fake_fraction(self):
        corpus = synth_generate(300, 0.5, 0.5, seed=4)
        assert sum(r.label for r in corpus) == 100

    def test_domain_label_skew_keeps_balance(self):
        corpus = synth_generate(540, 0.5, 0.5, seed=4, domain_label_skew=0.6)
        assert sum(r.label for r in corpus) == 180
        rates = {}
        for d in DOMAINS:
            cell = [r for r in corpus if r.domain == d]
            rates[d] = sum(r.label for r in cell) / len(cell)
        assert max(rates.values()) - min(rates.values()) > 0.2

    def test_label_cluster_raises_homophily(self):
        def knn_same_label(corpus, k=8):
            z = np.stack([r.visual_feature for r in corpus])
            z = z / np.linalg.norm(z, axis=1, keepdims=True)
            labels = np.array([r.label for r in corpus])
            sims = z @ z.T
            np.fill_diagonal(sims, -np.inf)
            nn = np.argsort(-sims, axis=1)[:, :k]
            return float((labels[nn] == labels[:, None]).mean())

        plain = knn_same_label(synth_generate(300, 0.5, 0.5, seed=6))
        clustered = knn_same_label(synth_generate(300, 0.5, 0.5, seed=6, label_cluster=0.8))
        assert clustered > plain + 0.1

    @pytest.mark.slow
    def test_probe_accuracy_monotone_in_separability(self):
        """acc(s1) >= acc(s2) - 2% for s1 > s2 on 5-seed medians (balanced probe corpora)."""
        grid = (0.0, 0.4, 0.7, 1.0)
        medians = []
        for s in grid:
            accs = [
                _probe_accuracy(synth_generate(600, s, 0.5, seed=seed, dims=PROBE_DIMS, fake_fraction=0.5), seed=seed)
                for seed in range(5)
            ]
            medians.append(float(np.median(accs)))
        for hi in range(1, len(grid)):
            for lo in range(hi):
                assert medians[hi] >= medians[lo] - 0.02
