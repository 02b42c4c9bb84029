import numpy as np
import pytest

from patternid.errors import EvalError
from patternid.metrics import (
    EvalProtocolConfig,
    all_pairs,
    draw_gallery_split,
    ranked_individuals,
    topk_from_embeddings,
    vary_gallery_size,
    verification_metrics,
)


def oracle_verification(embeddings, labels, far_target=0.01):
    """Enumerate every distinct threshold with plain loops."""
    e = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    pos, neg = [], []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            d = float(np.linalg.norm(e[i] - e[j]))
            (pos if labels[i] == labels[j] else neg).append(d)
    grid = sorted(set(pos) | set(neg))
    thresholds = [grid[0] - 1.0] + grid + [grid[-1] + 1.0]
    tpr = [sum(1 for d in pos if d <= t) / len(pos) for t in thresholds]
    far = [sum(1 for d in neg if d <= t) / len(neg) for t in thresholds]
    auc = 0.0
    for i in range(1, len(thresholds)):
        auc += (far[i] - far[i - 1]) * (tpr[i] + tpr[i - 1]) / 2.0
    best = max(i for i in range(len(thresholds)) if far[i] <= far_target)
    return thresholds, tpr, far, auc, tpr[best]


class TestAllPairs:
    def test_two_classes_of_two(self):
        pos, neg = all_pairs(["a", "a", "b", "b"])
        assert len(pos) == 2
        assert len(neg) == 4
        assert set(pos) == {(0, 1), (2, 3)}

    def test_total_is_n_choose_two(self, rng):
        labels = rng.integers(0, 5, size=40)
        pos, neg = all_pairs(labels)
        assert len(pos) + len(neg) == 40 * 39 // 2

    def test_single_class_no_negatives(self):
        pos, neg = all_pairs([1, 1, 1])
        assert len(pos) == 3
        assert neg == []

    def test_test_fold_scale_pair_counts(self):
        # ~300 images over 24 individuals: ~45k pairs, ~2k positive.
        sizes = [12] * 12 + [13] * 12
        labels = np.concatenate([np.full(s, i) for i, s in enumerate(sizes)])
        assert len(labels) == 300
        pos, neg = all_pairs(labels)
        assert len(pos) + len(neg) == 300 * 299 // 2 == 44850
        assert 1500 <= len(pos) <= 2500

    def test_too_few_items(self):
        with pytest.raises(EvalError):
            all_pairs([1])


class TestVerificationMetrics:
    def test_perfectly_separated_auc_one(self):
        e = np.array([[0.0], [0.1], [10.0], [10.1], [20.0], [20.1]])
        labels = ["a", "a", "b", "b", "c", "c"]
        report = verification_metrics(e, labels)
        assert report.auc == pytest.approx(1.0)
        assert report.tpr_at_far == pytest.approx(1.0)

    def test_three_point_hand_case(self):
        # Points 0, 1 (same class) and -0.5: the positive pair sits at
        # distance 1.0 with negatives at 0.5 and 1.5, one on each side. At
        # threshold 1.0 the positive is accepted (TPR 1) alongside one of
        # two negatives (FAR 0.5). Sweeping every distinct distance walks
        # the ROC through (0,0) -> (0.5,0) -> (0.5,1) -> (1,1); the area
        # under that step curve is 0.5, confirmed by the
        # enumerate-all-thresholds oracle.
        e = np.array([[0.0], [1.0], [-0.5]])
        labels = ["a", "a", "b"]
        report = verification_metrics(e, labels)
        idx = list(report.thresholds).index(1.0)
        assert report.tpr[idx] == 1.0
        assert report.far[idx] == 0.5
        _, _, _, auc, tpr_at = oracle_verification(e, labels)
        assert report.auc == pytest.approx(auc)
        assert report.auc == pytest.approx(0.5)

    def test_random_labels_mean_auc_near_half(self):
        aucs = []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            e = rng.normal(size=(30, 4))
            labels = rng.integers(0, 6, size=30)
            while len(set(labels.tolist())) < 2:
                labels = rng.integers(0, 6, size=30)
            aucs.append(verification_metrics(e, labels).auc)
        assert abs(float(np.mean(aucs)) - 0.5) < 0.05

    def test_matches_enumeration_oracle_exactly(self, rng):
        for trial in range(25):
            n = int(rng.integers(4, 30))
            e = rng.normal(size=(n, 3))
            labels = rng.integers(0, max(2, n // 3), size=n)
            if len(set(labels.tolist())) < 2:
                continue
            report = verification_metrics(e, labels)
            thr, tpr, far, auc, tpr_at = oracle_verification(e, labels)
            assert np.allclose(report.thresholds, thr)
            assert np.allclose(report.tpr, tpr)
            assert np.allclose(report.far, far)
            assert report.auc == pytest.approx(auc, abs=1e-12)
            assert report.tpr_at_far == pytest.approx(tpr_at, abs=1e-12)

    def test_roc_monotone_with_proper_endpoints(self, rng):
        e = rng.normal(size=(20, 3))
        labels = rng.integers(0, 4, size=20)
        report = verification_metrics(e, labels)
        assert np.all(np.diff(report.tpr) >= 0)
        assert np.all(np.diff(report.far) >= 0)
        assert report.tpr[0] == 0 and report.far[0] == 0
        assert report.tpr[-1] == 1 and report.far[-1] == 1
        assert 0.0 <= report.auc <= 1.0

    def test_single_class_rejected(self, rng):
        e = rng.normal(size=(5, 2))
        with pytest.raises(EvalError):
            verification_metrics(e, ["a"] * 5)

    def test_roc_csv_format(self, rng):
        e = rng.normal(size=(6, 2))
        report = verification_metrics(e, ["a", "a", "b", "b", "c", "c"])
        lines = report.roc_csv().strip().splitlines()
        assert lines[0] == "threshold,tpr,far"
        assert len(lines) == len(report.thresholds) + 1


class TestDrawGallerySplit:
    def test_m_rows_per_individual_disjoint_queries(self, rng):
        labels = ["a"] * 4 + ["b"] * 5 + ["c"] * 3
        gallery, queries = draw_gallery_split(labels, 2, rng)
        assert len(gallery) == 6
        assert len(queries) == 12 - 6
        assert not set(gallery.tolist()) & set(queries.tolist())
        for iid in "abc":
            assert sum(1 for g in gallery if labels[g] == iid) == 2

    def test_insufficient_images_named(self, rng):
        labels = ["a"] * 3 + ["tiny"] * 2
        with pytest.raises(EvalError, match="tiny"):
            draw_gallery_split(labels, 2, rng)


class TestRankedIndividuals:
    def test_first_occurrence_order(self):
        labels = np.array(["x", "y", "x", "z", "y"])
        assert ranked_individuals(labels, np.array([2, 0, 1, 3, 4])) == ["x", "y", "z"]


def make_protocol(**kw):
    defaults = dict(gallery_matches_per_individual=2, repetitions=3, k_list=(1, 2, 5), seed=1)
    defaults.update(kw)
    return EvalProtocolConfig(**defaults)


class TestTopkFromEmbeddings:
    def test_degenerate_self_match_top1(self, rng):
        # Duplicate embeddings per individual and m = copies - 1: every query
        # has an exact duplicate in the gallery.
        base = rng.normal(size=(4, 6))
        test_e = np.repeat(base, 3, axis=0)
        test_l = [f"id{i}" for i in range(4) for _ in range(3)]
        protocol = make_protocol(gallery_matches_per_individual=2, k_list=(1,))
        report = topk_from_embeddings(np.zeros((0, 6)), [], test_e, test_l, protocol)
        assert report.mean[1] == 1.0

    def test_k_equal_to_individual_count_is_one(self, rng):
        test_e = rng.normal(size=(12, 5))
        test_l = [f"id{i}" for i in range(4) for _ in range(3)]
        protocol = make_protocol(gallery_matches_per_individual=1, k_list=(4,), repetitions=2)
        report = topk_from_embeddings(np.zeros((0, 5)), [], test_e, test_l, protocol)
        assert report.mean[4] == 1.0

    def test_tiny_fixed_instance_hand_ranked(self):
        """3 individuals x 3 images with hand-placed 1-D embeddings.

        With seed-0 repetition 0, the drawn gallery rows and every query's
        distance ranking were enumerated by hand to fix the accuracies.
        """
        test_e = np.array([[0.0], [1.0], [10.0], [0.4], [1.4], [20.0], [0.6], [1.6], [30.0]])
        test_l = ["a", "a", "a", "b", "b", "b", "c", "c", "c"]
        protocol = EvalProtocolConfig(
            gallery_matches_per_individual=2, repetitions=1, k_list=(1, 2, 3), seed=0
        )
        rng = np.random.default_rng(np.random.SeedSequence([0, 0]))
        gallery, queries = draw_gallery_split(test_l, 2, rng)
        report = topk_from_embeddings(np.zeros((0, 1)), [], test_e, test_l, protocol)
        # Recompute by hand with the same draw.
        gal_e = test_e[gallery]
        gal_l = np.asarray([test_l[i] for i in gallery])
        hits = {1: 0, 2: 0, 3: 0}
        for q in queries:
            order = np.argsort(np.abs(gal_e[:, 0] - test_e[q, 0]), kind="stable")
            ranking = ranked_individuals(gal_l, order)
            rank = ranking.index(test_l[q]) + 1
            for k in hits:
                hits[k] += rank <= k
        for k in (1, 2, 3):
            assert report.per_repetition[0][k] == pytest.approx(hits[k] / len(queries))
        assert report.mean[3] == 1.0  # k = all individuals

    def test_monotone_in_k(self, rng):
        train_e = rng.normal(size=(20, 4))
        train_l = [f"t{i % 5}" for i in range(20)]
        test_e = rng.normal(size=(12, 4))
        test_l = [f"q{i}" for i in range(4) for _ in range(3)]
        protocol = make_protocol(k_list=(1, 2, 3, 5, 9))
        report = topk_from_embeddings(train_e, train_l, test_e, test_l, protocol)
        values = [report.mean[k] for k in (1, 2, 3, 5, 9)]
        assert values == sorted(values)

    def test_deterministic_per_seed(self, rng):
        test_e = rng.normal(size=(12, 4))
        test_l = [f"q{i}" for i in range(4) for _ in range(3)]
        protocol = make_protocol()
        a = topk_from_embeddings(np.zeros((0, 4)), [], test_e, test_l, protocol)
        b = topk_from_embeddings(np.zeros((0, 4)), [], test_e, test_l, protocol)
        assert a.per_repetition == b.per_repetition

    def test_protocol_error_names_individual(self, rng):
        test_e = rng.normal(size=(5, 3))
        test_l = ["a", "a", "a", "shallow", "shallow"]
        protocol = make_protocol(gallery_matches_per_individual=2)
        with pytest.raises(EvalError, match="shallow"):
            topk_from_embeddings(np.zeros((0, 3)), [], test_e, test_l, protocol)

    def test_std_uses_sample_statistics(self, rng):
        test_e = rng.normal(size=(12, 4))
        test_l = [f"q{i}" for i in range(4) for _ in range(3)]
        report = topk_from_embeddings(
            np.zeros((0, 4)), [], test_e, test_l, make_protocol(repetitions=4)
        )
        for k in report.k_list:
            vals = [rep[k] for rep in report.per_repetition]
            assert report.std[k] == pytest.approx(float(np.std(vals, ddof=1)))


class TestVaryGallerySize:
    def test_reports_per_m_and_monotone_k(self, rng):
        test_e = rng.normal(size=(20, 4))
        test_l = [f"q{i}" for i in range(5) for _ in range(4)]
        base = make_protocol(k_list=(1, 3, 5), repetitions=2)
        sweep = vary_gallery_size(np.zeros((0, 4)), [], test_e, test_l, [1, 2, 3], base)
        assert sorted(sweep) == [1, 2, 3]
        for m, report in sweep.items():
            assert report.gallery_matches_per_individual == m
            values = [report.mean[k] for k in (1, 3, 5)]
            assert values == sorted(values)

    def test_shared_seed_schedule_repeatable(self, rng):
        test_e = rng.normal(size=(12, 3))
        test_l = [f"q{i}" for i in range(3) for _ in range(4)]
        base = make_protocol(k_list=(1, 3), repetitions=2)
        a = vary_gallery_size(np.zeros((0, 3)), [], test_e, test_l, [1, 2], base)
        b = vary_gallery_size(np.zeros((0, 3)), [], test_e, test_l, [1, 2], base)
        for m in (1, 2):
            assert a[m].per_repetition == b[m].per_repetition
