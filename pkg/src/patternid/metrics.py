"""Verification and top-k retrieval metrics.

Verification enumerates every image pair and sweeps a distance threshold
over all distinct pair distances. The top-k protocol plants m gallery views
per query individual next to the training images and asks whether the true
individual appears among the k nearest identities.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patternid.errors import EvalError
from patternid import net
from patternid.corpus import DatasetManifest, load_split_arrays, split_by_individual


def all_pairs(labels: np.ndarray | list) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Every unordered index pair, split into same-class and different-class."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise EvalError(f"need at least 2 items to form pairs, got {n}")
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    positives = list(zip(iu[same].tolist(), ju[same].tolist()))
    negatives = list(zip(iu[~same].tolist(), ju[~same].tolist()))
    return positives, negatives


@dataclass
class VerificationReport:
    """Threshold sweep over all pair distances."""

    thresholds: np.ndarray
    tpr: np.ndarray
    far: np.ndarray
    auc: float
    tpr_at_far: float
    far_target: float
    threshold_at_far: float
    n_positive_pairs: int
    n_negative_pairs: int

    def to_dict(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "tpr": [float(t) for t in self.tpr],
            "far": [float(t) for t in self.far],
            "auc": self.auc,
            "tpr_at_far": self.tpr_at_far,
            "far_target": self.far_target,
            "threshold_at_far": self.threshold_at_far,
            "n_positive_pairs": self.n_positive_pairs,
            "n_negative_pairs": self.n_negative_pairs,
        }

    def roc_csv(self) -> str:
        lines = ["threshold,tpr,far"]
        lines += [
            f"{float(t)!r},{float(tp)!r},{float(fa)!r}"
            for t, tp, fa in zip(self.thresholds, self.tpr, self.far)
        ]
        return "\n".join(lines) + "\n"


def verification_metrics(
    embeddings: np.ndarray, labels: np.ndarray | list, far_target: float = 0.01
) -> VerificationReport:
    """TPR/FAR curve, AUC and TPR at the FAR target over all pairs.

    A pair is accepted at threshold d when its embedding distance is <= d.
    The threshold grid is every distinct pair distance plus sentinels below
    and above, so the curve runs from (0, 0) to (1, 1); AUC is the trapezoid
    over it. TPR@FAR uses the largest threshold with FAR <= target.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    positives, negatives = all_pairs(labels)
    if not positives or not negatives:
        raise EvalError(
            f"verification needs both pair kinds; got {len(positives)} positive "
            f"and {len(negatives)} negative"
        )

    def pair_dists(pairs: list[tuple[int, int]]) -> np.ndarray:
        idx = np.asarray(pairs)
        diff = e[idx[:, 0]] - e[idx[:, 1]]
        return np.sqrt(np.sum(diff * diff, axis=1))

    pos_d = np.sort(pair_dists(positives))
    neg_d = np.sort(pair_dists(negatives))
    all_d = np.unique(np.concatenate([pos_d, neg_d]))
    thresholds = np.concatenate([[all_d[0] - 1.0], all_d, [all_d[-1] + 1.0]])

    tpr = np.searchsorted(pos_d, thresholds, side="right") / len(pos_d)
    far = np.searchsorted(neg_d, thresholds, side="right") / len(neg_d)
    auc = float(np.trapezoid(tpr, far))

    ok = far <= far_target
    pick = int(np.nonzero(ok)[0][-1])  # largest threshold still within target
    return VerificationReport(
        thresholds=thresholds,
        tpr=tpr,
        far=far,
        auc=auc,
        tpr_at_far=float(tpr[pick]),
        far_target=far_target,
        threshold_at_far=float(thresholds[pick]),
        n_positive_pairs=len(positives),
        n_negative_pairs=len(negatives),
    )


@dataclass(frozen=True)
class EvalProtocolConfig:
    """Top-k protocol settings."""

    gallery_matches_per_individual: int = 2
    repetitions: int = 5
    k_list: tuple[int, ...] = (1, 5, 10)
    seed: int = 0

    def validate(self) -> None:
        if self.gallery_matches_per_individual < 1:
            raise EvalError(
                f"gallery_matches_per_individual must be >= 1, got "
                f"{self.gallery_matches_per_individual}"
            )
        if self.repetitions < 1:
            raise EvalError(f"repetitions must be >= 1, got {self.repetitions}")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise EvalError(f"k_list must hold positive ranks, got {self.k_list}")


@dataclass
class TopKReport:
    k_list: tuple[int, ...]
    mean: dict[int, float]
    std: dict[int, float]
    per_repetition: list[dict[int, float]]
    gallery_matches_per_individual: int
    repetitions: int
    seed: int
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "k_list": list(self.k_list),
            "mean": {str(k): v for k, v in self.mean.items()},
            "std": {str(k): v for k, v in self.std.items()},
            "per_repetition": [{str(k): v for k, v in rep.items()} for rep in self.per_repetition],
            "gallery_matches_per_individual": self.gallery_matches_per_individual,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "n_queries": self.n_queries,
        }


def draw_gallery_split(
    test_labels: list[str], m: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Pick m gallery rows per test individual; the rest become queries.

    Returns (gallery row indices grouped by sorted individual, query row
    indices in original order). Raises when an individual has < m+1 images.
    """
    labels = np.asarray(test_labels)
    gallery: list[int] = []
    is_gallery = np.zeros(len(labels), dtype=bool)
    for iid in sorted(set(labels.tolist())):
        rows = np.nonzero(labels == iid)[0]
        if len(rows) < m + 1:
            raise EvalError(
                f"individual {iid!r} has {len(rows)} images; protocol needs at least {m + 1}"
            )
        picked = rng.choice(len(rows), size=m, replace=False)
        chosen = rows[np.sort(picked)]
        gallery.extend(int(r) for r in chosen)
        is_gallery[chosen] = True
    queries = np.nonzero(~is_gallery)[0]
    return np.asarray(gallery, dtype=np.int64), queries


def ranked_individuals(gallery_labels: np.ndarray, order: np.ndarray) -> list[str]:
    """Distinct individuals in first-occurrence order along a record ranking."""
    seen: set[str] = set()
    out: list[str] = []
    for idx in order:
        iid = gallery_labels[idx]
        if iid not in seen:
            seen.add(iid)
            out.append(iid)
    return out


def topk_from_embeddings(
    train_embeddings: np.ndarray,
    train_labels: list[str],
    test_embeddings: np.ndarray,
    test_labels: list[str],
    protocol: EvalProtocolConfig,
) -> TopKReport:
    """Run the gallery/query protocol on precomputed embeddings.

    Per repetition the gallery is the training images plus m drawn views per
    test individual; every remaining test image queries it. A query counts
    correct at k when its individual is among the k nearest distinct
    identities.
    """
    protocol.validate()
    m = protocol.gallery_matches_per_individual
    train_e = np.asarray(train_embeddings, dtype=np.float64)
    test_e = np.asarray(test_embeddings, dtype=np.float64)
    train_l = list(train_labels)
    test_l = list(test_labels)
    if train_e.ndim != 2 or test_e.ndim != 2:
        raise EvalError("embeddings must be 2-D arrays")

    per_rep: list[dict[int, float]] = []
    n_queries = 0
    for rep in range(protocol.repetitions):
        rng = np.random.default_rng(np.random.SeedSequence([protocol.seed, rep]))
        gal_rows, query_rows = draw_gallery_split(test_l, m, rng)
        gallery_e = np.concatenate([train_e, test_e[gal_rows]], axis=0)
        gallery_l = np.asarray(train_l + [test_l[i] for i in gal_rows])

        hits = {k: 0 for k in protocol.k_list}
        for q in query_rows:
            diff = gallery_e - test_e[q]
            dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            order = np.argsort(dists, kind="stable")
            ranking = ranked_individuals(gallery_l, order)
            true_id = test_l[q]
            rank = ranking.index(true_id) + 1 if true_id in ranking else None
            for k in protocol.k_list:
                if rank is not None and rank <= k:
                    hits[k] += 1
        n_queries = len(query_rows)
        per_rep.append({k: hits[k] / len(query_rows) for k in protocol.k_list})

    mean = {k: float(np.mean([rep[k] for rep in per_rep])) for k in protocol.k_list}
    std = {
        k: float(np.std([rep[k] for rep in per_rep], ddof=1)) if len(per_rep) > 1 else 0.0
        for k in protocol.k_list
    }
    return TopKReport(
        k_list=tuple(protocol.k_list),
        mean=mean,
        std=std,
        per_repetition=per_rep,
        gallery_matches_per_individual=m,
        repetitions=protocol.repetitions,
        seed=protocol.seed,
        n_queries=n_queries,
    )


def topk_accuracy(
    checkpoint_path: Path,
    manifest: DatasetManifest,
    fold: int,
    protocol: EvalProtocolConfig,
) -> TopKReport:
    """Protocol over a manifest fold: train split feeds the gallery,
    the fold's individuals provide gallery matches and queries."""
    params, config = net.load_checkpoint(checkpoint_path)
    return topk_for_params(params, config, manifest, fold, protocol)


def topk_for_params(
    params: dict[str, np.ndarray],
    config: net.ModelConfig,
    manifest: DatasetManifest,
    fold: int,
    protocol: EvalProtocolConfig,
) -> TopKReport:
    train_ids, test_ids = split_by_individual(manifest, fold)
    train_px, train_lab, train_keys = load_split_arrays(manifest, train_ids)
    test_px, test_lab, test_keys = load_split_arrays(manifest, test_ids)
    train_e = net.embed_pixels(params, config, train_px)
    test_e = net.embed_pixels(params, config, test_px)
    return topk_from_embeddings(
        train_e,
        [train_ids[i] for i in train_lab],
        test_e,
        [test_ids[i] for i in test_lab],
        protocol,
    )


def vary_gallery_size(
    train_embeddings: np.ndarray,
    train_labels: list[str],
    test_embeddings: np.ndarray,
    test_labels: list[str],
    m_list: list[int],
    base_protocol: EvalProtocolConfig,
) -> dict[int, TopKReport]:
    """Re-run the top-k protocol for each gallery size under a shared seed schedule."""
    reports: dict[int, TopKReport] = {}
    for m in m_list:
        protocol = EvalProtocolConfig(
            gallery_matches_per_individual=m,
            repetitions=base_protocol.repetitions,
            k_list=base_protocol.k_list,
            seed=base_protocol.seed,
        )
        reports[m] = topk_from_embeddings(
            train_embeddings, train_labels, test_embeddings, test_labels, protocol
        )
    return reports


@dataclass
class FoldEvaluation:
    fold: int
    verification: VerificationReport
    topk: TopKReport

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "verification": self.verification.to_dict(),
            "topk": self.topk.to_dict(),
        }


def evaluate_fold(
    params: dict[str, np.ndarray],
    config: net.ModelConfig,
    manifest: DatasetManifest,
    fold: int,
    protocol: EvalProtocolConfig,
) -> FoldEvaluation:
    """Verification over the fold's test images plus the top-k protocol."""
    train_ids, test_ids = split_by_individual(manifest, fold)
    train_px, train_lab, _ = load_split_arrays(manifest, train_ids)
    test_px, test_lab, _ = load_split_arrays(manifest, test_ids)
    train_e = net.embed_pixels(params, config, train_px)
    test_e = net.embed_pixels(params, config, test_px)
    test_label_strs = [test_ids[i] for i in test_lab]
    verification = verification_metrics(test_e, test_label_strs)
    topk = topk_from_embeddings(
        train_e,
        [train_ids[i] for i in train_lab],
        test_e,
        test_label_strs,
        protocol,
    )
    return FoldEvaluation(fold=fold, verification=verification, topk=topk)
