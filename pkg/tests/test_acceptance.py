"""Acceptance criteria, one test per criterion, each printing a verdict line.

The end-to-end reproduction and the ablation harness train real models and
dominate the suite's runtime; everything else is oracle equivalence at
fixed tolerances.
"""

import dataclasses
import json
import os
import time

import numpy as np
import pytest

from patternid import mining, net
from patternid.corpus import CorpusConfig, build_dataset
from patternid.database import EmbeddingDatabase, EmbeddingRecord, db_bytes, knn_query, parse_db
from patternid.errors import FormatError
from patternid.experiments import run_ablations
from patternid.metrics import (
    EvalProtocolConfig,
    all_pairs,
    draw_gallery_split,
    evaluate_fold,
    topk_from_embeddings,
    verification_metrics,
)
from patternid.train import TrainConfig, train

from test_metrics import oracle_verification
from test_mining import oracle_batch_hard, oracle_semi_hard


def verdict(name: str, ok: bool, detail: str = "") -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


class TestGradientSuite:
    def test_gradients_match_finite_differences(self):
        started = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        coords = 200

        # Network layers: conv blocks, dense head, global pooling and ReLU in
        # the path, with and without l2 normalization.
        for l2 in (False, True):
            config = net.ModelConfig(conv_channels=(4, 6), embedding_dim=32, l2_normalize=l2)
            params = {
                k: v.astype(np.float64) for k, v in net.init_params(config, 7).items()
            }
            x = rng.normal(size=(2, 1, 9, 9))
            upstream = rng.normal(size=(2, 32))

            def loss_of():
                emb, _ = net.forward(params, config, x)
                return float(np.sum(emb * upstream))

            _, cache = net.forward(params, config, x)
            grads = net.backward(cache, upstream)
            for name, grad in grads.items():
                flat = params[name].ravel()
                gf = grad.ravel()
                picks = rng.choice(flat.size, size=min(coords, flat.size), replace=True)
                for i in picks:
                    orig = flat[i]
                    h = 1e-3 * max(1.0, abs(orig))
                    flat[i] = orig + h
                    lp = loss_of()
                    flat[i] = orig - h
                    lm = loss_of()
                    flat[i] = orig
                    fd = (lp - lm) / (2 * h)
                    worst = max(worst, abs(fd - gf[i]) / max(abs(fd), abs(gf[i]), 1e-8))

        # Both losses, gradients with respect to the embeddings.
        for trial in range(4):
            e = rng.normal(size=(12, 4))
            labels = np.repeat(np.arange(4), 3)
            d = mining.pairwise_sq_distances(e)
            cfg = mining.MiningConfig(margin=0.5, include_hard_negatives=True)
            triplets = mining.mine_semi_hard(d, labels, cfg)
            pairs = mining.all_batch_pairs(labels)
            _, g_trip = mining.triplet_loss(e, triplets, cfg.margin)
            _, g_con = mining.contrastive_loss(e, pairs, 1.5)
            checked = 0
            for i in range(12):
                for j in range(4):
                    ep, em = e.copy(), e.copy()
                    ep[i, j] += 1e-6
                    em[i, j] -= 1e-6
                    fd_t = (
                        mining.triplet_loss(ep, triplets, cfg.margin)[0]
                        - mining.triplet_loss(em, triplets, cfg.margin)[0]
                    ) / 2e-6
                    fd_c = (
                        mining.contrastive_loss(ep, pairs, 1.5)[0]
                        - mining.contrastive_loss(em, pairs, 1.5)[0]
                    ) / 2e-6
                    worst = max(worst, abs(fd_t - g_trip[i, j]) / max(abs(fd_t), abs(g_trip[i, j]), 1e-6))
                    worst = max(worst, abs(fd_c - g_con[i, j]) / max(abs(fd_c), abs(g_con[i, j]), 1e-6))
                    checked += 1
            assert checked >= 48

        elapsed = time.perf_counter() - started
        verdict(
            "gradient-suite",
            worst < 1e-4 and elapsed < 60,
            f"(max rel err {worst:.2e}, {elapsed:.1f}s)",
        )


class TestMinerOracles:
    def test_miners_equal_exhaustive_enumeration(self):
        started = time.perf_counter()
        rng = np.random.default_rng(77)
        for trial in range(100):
            n_classes = int(rng.integers(2, 7))
            sizes = rng.integers(2, 5, size=n_classes)
            labels = np.concatenate([np.full(s, c) for c, s in enumerate(sizes)])[:30]
            if len(set(labels.tolist())) < 2 or min(np.bincount(labels)) < 2:
                labels = np.repeat(np.arange(3), 4)
            e = rng.normal(size=(len(labels), 5))
            d = mining.pairwise_sq_distances(e)
            for include in (True, False):
                cfg = mining.MiningConfig(
                    margin=float(rng.uniform(0.05, 1.5)), include_hard_negatives=include
                )
                assert mining.mine_semi_hard(d, labels, cfg) == oracle_semi_hard(d, labels, cfg)
            assert mining.mine_batch_hard(d, labels) == oracle_batch_hard(d, labels)
        elapsed = time.perf_counter() - started
        verdict("miner-oracles", elapsed < 10, f"(100 batches, {elapsed:.1f}s)")


class TestMetricOracles:
    def test_verification_metrics_oracle_equivalence(self):
        rng = np.random.default_rng(5150)
        checked = 0
        for trial in range(60):
            n = int(rng.integers(4, 51))
            e = rng.normal(size=(n, 4))
            labels = rng.integers(0, max(2, n // 4), size=n)
            if len(set(labels.tolist())) < 2:
                continue
            report = verification_metrics(e, labels)
            thr, tpr, far, auc, tpr_at = oracle_verification(e, labels)
            # TPR/FAR are exact pair-count ratios and must match exactly;
            # the thresholds themselves may differ in the last float ulp
            # because the oracle sums squared differences in another order.
            assert np.allclose(report.thresholds, np.asarray(thr), atol=1e-9, rtol=0)
            assert np.array_equal(report.tpr, np.asarray(tpr))
            assert np.array_equal(report.far, np.asarray(far))
            assert report.auc == pytest.approx(auc, abs=1e-12)
            assert report.tpr_at_far == pytest.approx(tpr_at, abs=1e-12)
            checked += 1
        assert checked >= 50

        separated = np.array([[0.0], [0.05], [5.0], [5.05], [10.0], [10.05]])
        sep_labels = ["a", "a", "b", "b", "c", "c"]
        auc_sep = verification_metrics(separated, sep_labels).auc

        aucs = []
        for seed in range(100):
            r = np.random.default_rng(seed)
            e = r.normal(size=(40, 4))
            labels = np.repeat(np.arange(8), 5)
            aucs.append(verification_metrics(e, labels).auc)
        mean_auc = float(np.mean(aucs))

        verdict(
            "metric-oracles",
            auc_sep == 1.0 and abs(mean_auc - 0.5) < 0.05,
            f"({checked} instances exact, separated AUC {auc_sep}, random mean {mean_auc:.3f})",
        )


class TestKnnExactness:
    def test_knn_matches_full_sort_brute_force(self):
        rng = np.random.default_rng(31337)
        for trial in range(100):
            n = int(rng.integers(5, 1001))
            dim = int(rng.integers(2, 17))
            matrix = rng.normal(size=(n, dim)).astype(np.float32)
            db = EmbeddingDatabase(
                dim,
                "0" * 16,
                [
                    EmbeddingRecord(f"id{i % 20}", f"img{i}", matrix[i])
                    for i in range(n)
                ],
            )
            query = rng.normal(size=dim).astype(np.float32)
            diff = matrix.astype(np.float64) - query.astype(np.float64)
            dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            oracle_order = np.argsort(dists, kind="stable")
            full = knn_query(db, query, n + 10)
            got_order = [e.image_id for e in full.entries]
            assert got_order == [f"img{i}" for i in oracle_order]
            # Every k is a prefix of the full ranking.
            for k in set(
                [1, 2, 3, n // 2 or 1, n] + [int(x) for x in rng.integers(1, n + 1, size=5)]
            ):
                top = knn_query(db, query, k)
                assert [e.image_id for e in top.entries] == got_order[:k]
        verdict("knn-exactness", True, "(100 databases, all k prefixes exact)")


class TestProtocolFidelity:
    def test_gallery_composition_and_monotonicity(self):
        rng = np.random.default_rng(99)
        train_e = rng.normal(size=(40, 6))
        train_l = [f"t{i % 8}" for i in range(40)]
        test_e = rng.normal(size=(30, 6))
        test_l = [f"q{i}" for i in range(6) for _ in range(5)]

        for rep in range(5):
            draw_rng = np.random.default_rng(np.random.SeedSequence([3, rep]))
            gallery, queries = draw_gallery_split(test_l, 2, draw_rng)
            counts = {}
            for g in gallery:
                counts[test_l[g]] = counts.get(test_l[g], 0) + 1
            assert counts == {f"q{i}": 2 for i in range(6)}
            assert not set(gallery.tolist()) & set(queries.tolist())
            assert len(gallery) + len(queries) == len(test_l)

        protocol = EvalProtocolConfig(
            gallery_matches_per_individual=2, repetitions=5, k_list=(1, 2, 3, 5, 10), seed=3
        )
        report = topk_from_embeddings(train_e, train_l, test_e, test_l, protocol)
        values = [report.mean[k] for k in protocol.k_list]
        monotone = values == sorted(values)

        pos, neg = all_pairs([f"c{i % 7}" for i in range(50)])
        pair_count_ok = len(pos) + len(neg) == 50 * 49 // 2

        verdict(
            "protocol-fidelity",
            monotone and pair_count_ok,
            f"(gallery 2 per individual, top-k {values})",
        )


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "corpus"
    config = CorpusConfig(individuals=50, views_per_individual=10, seed=0, folds=5)
    return build_dataset(config, root)


class TestEndToEndDeskReproduction:
    def test_trained_model_clears_operational_bar(self, desk_corpus, tmp_path):
        started = time.perf_counter()
        protocol = EvalProtocolConfig(
            gallery_matches_per_individual=2, repetitions=5, k_list=(1, 5, 10), seed=0
        )
        config = TrainConfig()  # 2000 steps, semi-hard, margin 0.2, 256-dim
        assert config.steps == 2000
        assert config.mining.strategy == "semi_hard"
        assert config.mining.margin == 0.2
        assert config.model.embedding_dim == 256
        assert config.augmentation == "extensive"

        untrained = net.init_params(config.model, 4242)
        untrained_eval = evaluate_fold(untrained, config.model, desk_corpus, 0, protocol)

        result = train(desk_corpus, config, checkpoint_path=tmp_path / "desk.pidm")
        trained_eval = evaluate_fold(result.params, config.model, desk_corpus, 0, protocol)
        steps_used = config.steps

        top10 = trained_eval.topk.mean[10]
        if top10 < 0.95:
            # Criterion fallback: the bar may be met at up to 10000 steps.
            config = dataclasses.replace(config, steps=10000, eval_every=2500)
            result = train(desk_corpus, config, checkpoint_path=tmp_path / "desk10k.pidm")
            trained_eval = evaluate_fold(result.params, config.model, desk_corpus, 0, protocol)
            top10 = trained_eval.topk.mean[10]
            steps_used = config.steps

        top1 = trained_eval.topk.mean[1]
        chance = 1.0 / 10.0  # ten held-out individuals
        untrained_top1 = untrained_eval.topk.mean[1]
        elapsed = time.perf_counter() - started
        # The 30-minute budget assumes 4 cores; scale for this machine.
        budget = 30 * 60 * max(1.0, 4.0 / (os.cpu_count() or 4))

        detail = (
            f"(steps {steps_used}: top10 {top10:.3f} >= 0.95, top1 {top1:.3f} >= {5 * chance:.2f}, "
            f"untrained top1 {untrained_top1:.3f} <= {3 * chance:.2f}, "
            f"{elapsed / 60:.1f} min vs {budget / 60:.0f} min budget on {os.cpu_count()} cores)"
        )
        verdict(
            "end-to-end-desk-reproduction",
            top10 >= 0.95
            and top1 >= 5 * chance
            and untrained_top1 <= 3 * chance
            and elapsed <= budget,
            detail,
        )


class TestAblationHarness:
    def test_four_axes_run_and_tabulate(self, tmp_path):
        corpus = CorpusConfig(
            individuals=20, views_per_individual=6, seed=3, folds=5
        )
        manifest = build_dataset(corpus, tmp_path / "ablation-corpus")
        base = TrainConfig(
            steps=120,
            seed=1,
            eval_every=120,
            batch=mining.BatchSpec(p=8, k=3),
            model=net.ModelConfig(conv_channels=(8, 16, 32), embedding_dim=256),
        )
        protocol = EvalProtocolConfig(
            gallery_matches_per_individual=2, repetitions=2, k_list=(1, 5, 10), seed=0
        )
        reports = run_ablations(
            manifest,
            base,
            protocol,
            m_list=(1, 2, 3, 4, 5),
            embedding_dims=(128, 256, 512),
            out_dir=tmp_path / "ablations",
        )
        axes = {r.axis for r in reports}
        ok = axes == {"l2_normalize", "embedding_dim", "augmentation", "gallery_m"}
        by_axis = {r.axis: r for r in reports}
        ok &= [v.name for v in by_axis["l2_normalize"].variants] == ["off", "on"]
        ok &= [v.name for v in by_axis["embedding_dim"].variants] == ["128", "256", "512"]
        ok &= [v.name for v in by_axis["augmentation"].variants] == ["small", "extensive"]
        ok &= [v.name for v in by_axis["gallery_m"].variants] == [f"m={m}" for m in range(1, 6)]
        ok &= (tmp_path / "ablations" / "ablations.json").exists()
        ok &= (tmp_path / "ablations" / "ablations.txt").exists()
        # Directional outcomes are reported (not asserted): every axis names
        # its winner per metric.
        directions = {r.axis: r.best_by_metric for r in reports}
        ok &= all(directions[axis] for axis in axes)
        verdict("ablation-harness", bool(ok), f"(directions reported: {directions['l2_normalize']})")


class TestDeterminismAndPersistence:
    def test_fixed_seeds_reproduce_everything(self, tmp_path):
        corpus_config = CorpusConfig(
            individuals=8,
            views_per_individual=4,
            image_size=(32, 32),
            seed=11,
            folds=4,
            spot_count_range=(4, 9),
        )
        m1 = build_dataset(corpus_config, tmp_path / "c1")
        m2 = build_dataset(corpus_config, tmp_path / "c2")
        corpora_equal = (tmp_path / "c1" / "manifest.json").read_bytes() == (
            tmp_path / "c2" / "manifest.json"
        ).read_bytes()

        config = TrainConfig(
            steps=3,
            seed=5,
            batch=mining.BatchSpec(p=4, k=2),
            model=net.ModelConfig(conv_channels=(4, 8), embedding_dim=32),
            eval_every=3,
        )
        train(m1, config, checkpoint_path=tmp_path / "a.pidm")
        train(m2, config, checkpoint_path=tmp_path / "b.pidm")
        checkpoints_equal = (tmp_path / "a.pidm").read_bytes() == (tmp_path / "b.pidm").read_bytes()

        from patternid.database import build_database

        dbs = [db_bytes(build_database(tmp_path / "a.pidm", m1)) for _ in range(2)]
        db_equal = dbs[0] == dbs[1]

        params, model_config = net.load_checkpoint(tmp_path / "a.pidm")
        protocol = EvalProtocolConfig(
            gallery_matches_per_individual=1, repetitions=3, k_list=(1, 2), seed=9
        )
        reports = [
            json.dumps(evaluate_fold(params, model_config, m1, 0, protocol).to_dict(), sort_keys=True)
            for _ in range(2)
        ]
        reports_equal = reports[0] == reports[1]

        # Containers: round trip exactly, reject corrupted headers.
        ckpt_bytes = (tmp_path / "a.pidm").read_bytes()
        loaded_params, loaded_config = net.parse_checkpoint(ckpt_bytes)
        round_trip = net.checkpoint_bytes(loaded_params, loaded_config) == ckpt_bytes
        db_round_trip = db_bytes(parse_db(dbs[0])) == dbs[0]
        corrupt_rejected = True
        for blob, parser in ((ckpt_bytes, net.parse_checkpoint), (dbs[0], parse_db)):
            mutated = bytearray(blob)
            mutated[2] ^= 0xFF
            try:
                parser(bytes(mutated))
                corrupt_rejected = False
            except FormatError:
                pass

        verdict(
            "determinism-and-persistence",
            corpora_equal
            and checkpoints_equal
            and db_equal
            and reports_equal
            and round_trip
            and db_round_trip
            and corrupt_rejected,
            "(corpus, checkpoint, database, reports byte-stable; containers strict)",
        )
