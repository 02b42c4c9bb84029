"""In-batch triplet/pair mining and the embedding losses.

All selection happens online, on the distance matrix of the current batch's
embeddings; nothing is carried across batches. Distance and loss math runs
in float64 so the oracle tests can demand tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from patternid.errors import ConfigError, MiningError

MINING_STRATEGIES = ("semi_hard", "batch_hard", "random")
NEGATIVE_TERMS = ("anchor", "positive")


class TripletIndex(NamedTuple):
    """Anchor/positive/negative positions within one batch."""

    a: int
    p: int
    n: int


class PairIndex(NamedTuple):
    i: int
    j: int
    same_class: bool


@dataclass(frozen=True)
class BatchSpec:
    """P classes per batch, K images per class."""

    p: int = 15
    k: int = 5

    @property
    def size(self) -> int:
        return self.p * self.k

    def validate(self) -> None:
        if self.p < 2 or self.k < 2:
            raise ConfigError(
                f"need P >= 2 and K >= 2 for in-batch mining, got P={self.p}, K={self.k}"
            )


@dataclass(frozen=True)
class MiningConfig:
    strategy: str = "semi_hard"
    margin: float = 0.2
    # Strict semi-hard band by default: negatives closer than the positive
    # are excluded. Including them drives embeddings into a collapsed state
    # under this loss (the hinge settles at the margin with no separation).
    include_hard_negatives: bool = False
    # Which embedding the negative distance is measured from in the loss.
    negative_term: str = "anchor"

    def validate(self) -> None:
        if self.strategy not in MINING_STRATEGIES:
            raise ConfigError(f"unknown mining strategy {self.strategy!r}")
        if not np.isfinite(self.margin) or self.margin <= 0:
            raise ConfigError(f"margin must be finite and positive, got {self.margin}")
        if self.negative_term not in NEGATIVE_TERMS:
            raise ConfigError(f"negative_term must be one of {NEGATIVE_TERMS}")


def pairwise_sq_distances(embeddings: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all rows; exact zeros on the diagonal."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ConfigError(f"embeddings must be 2-D, got shape {e.shape}")
    sq = np.sum(e * e, axis=1)
    d = sq[:, None] - 2.0 * (e @ e.T) + sq[None, :]
    d = 0.5 * (d + d.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    return pos, neg


def semi_hard_mask(
    dists: np.ndarray, labels: np.ndarray, config: MiningConfig
) -> np.ndarray:
    """Boolean (a, p, n) mask of triplets selected by semi-hard mining.

    A triplet is selected when the negative violates the margin constraint
    D(a,p)^2 + m > D(a,n)^2. With include_hard_negatives=False the negative
    must additionally be no closer than the positive (the strict band).
    """
    config.validate()
    pos, neg = _pair_masks(labels)
    d_ap = dists[:, :, None]
    d_an = dists[:, None, :]
    selected = d_ap + config.margin > d_an
    if not config.include_hard_negatives:
        selected &= d_an >= d_ap
    return selected & pos[:, :, None] & neg[:, None, :]


def mine_semi_hard(
    dists: np.ndarray, labels: np.ndarray, config: MiningConfig
) -> list[TripletIndex]:
    """All margin-violating triplets, ordered by (a, p, n)."""
    mask = semi_hard_mask(dists, labels, config)
    return [TripletIndex(int(a), int(p), int(n)) for a, p, n in zip(*np.nonzero(mask))]


def mine_batch_hard(dists: np.ndarray, labels: np.ndarray) -> list[TripletIndex]:
    """One triplet per anchor: furthest same-class, closest other-class.

    Ties break toward the lowest index. Every class must have >= 2 members
    and the batch >= 2 classes.
    """
    labels = np.asarray(labels)
    pos, neg = _pair_masks(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise MiningError("batch-hard mining needs at least 2 classes in the batch")
    small = classes[counts < 2]
    if small.size:
        raise MiningError(f"class {small[0]!r} has a single member; cannot pick a positive")

    d_pos = np.where(pos, dists, -np.inf)
    d_neg = np.where(neg, dists, np.inf)
    hardest_pos = np.argmax(d_pos, axis=1)  # first max wins: lowest index
    hardest_neg = np.argmin(d_neg, axis=1)
    return [
        TripletIndex(int(a), int(hardest_pos[a]), int(hardest_neg[a]))
        for a in range(len(labels))
    ]


def mine_random(
    labels: np.ndarray, rng: np.random.Generator
) -> list[TripletIndex]:
    """One uniformly drawn negative per ordered anchor-positive pair."""
    labels = np.asarray(labels)
    pos, neg = _pair_masks(labels)
    triplets: list[TripletIndex] = []
    neg_idx = [np.nonzero(neg[a])[0] for a in range(len(labels))]
    for a, p in zip(*np.nonzero(pos)):
        cands = neg_idx[a]
        if cands.size:
            triplets.append(TripletIndex(int(a), int(p), int(rng.choice(cands))))
    return triplets


def triplet_loss(
    embeddings: np.ndarray,
    triplets: list[TripletIndex],
    margin: float,
    negative_term: str = "anchor",
) -> tuple[float, np.ndarray]:
    """Hinge on squared distances summed over triplets, with its subgradient.

    loss = sum_i max(0, margin + D(a_i, p_i)^2 - D(x_i, n_i)^2) where x is
    the anchor or the positive per `negative_term`. Inactive triplets get a
    zero gradient.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(e)
    if not triplets:
        return 0.0, grad
    if negative_term not in NEGATIVE_TERMS:
        raise ConfigError(f"negative_term must be one of {NEGATIVE_TERMS}")
    a = np.fromiter((t.a for t in triplets), dtype=np.int64, count=len(triplets))
    p = np.fromiter((t.p for t in triplets), dtype=np.int64, count=len(triplets))
    n = np.fromiter((t.n for t in triplets), dtype=np.int64, count=len(triplets))
    x = a if negative_term == "anchor" else p

    diff_ap = e[a] - e[p]
    diff_xn = e[x] - e[n]
    viol = margin + np.sum(diff_ap**2, axis=1) - np.sum(diff_xn**2, axis=1)
    active = viol > 0
    loss = float(viol[active].sum())
    if active.any():
        ga = 2.0 * diff_ap[active]
        gn = 2.0 * diff_xn[active]
        np.add.at(grad, a[active], ga)
        np.add.at(grad, p[active], -ga)
        np.add.at(grad, x[active], -gn)
        np.add.at(grad, n[active], gn)
    return loss, grad


def mined_triplet_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    config: MiningConfig,
) -> tuple[float, np.ndarray, int]:
    """Fused semi-hard mining + triplet loss over a batch.

    Equivalent to triplet_loss(embeddings, mine_semi_hard(...)) but without
    materializing the triplet list; returns (loss, gradient, active count).
    """
    e = np.asarray(embeddings, dtype=np.float64)
    dists = pairwise_sq_distances(e)
    mined = semi_hard_mask(dists, labels, config)
    if config.negative_term == "anchor":
        viol = dists[:, :, None] + config.margin - dists[:, None, :]
    else:
        # Loss measures the negative from the positive: D(p, n)^2.
        viol = dists[:, :, None] + config.margin - dists[None, :, :]
    active = mined & (viol > 0)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(e), 0
    loss = float(viol[active].sum())

    w_ap = active.sum(axis=2).astype(np.float64)  # weight per (a, p) pair
    if config.negative_term == "anchor":
        w_xn = active.sum(axis=1).astype(np.float64)  # per (a, n)
    else:
        w_xn = active.sum(axis=0).astype(np.float64)  # per (p, n)

    grad = np.zeros_like(e)
    # d/de of sum w_ap * ||e_a - e_p||^2.
    row, col = w_ap.sum(axis=1), w_ap.sum(axis=0)
    grad += 2.0 * (row[:, None] * e - w_ap @ e)
    grad += 2.0 * (col[:, None] * e - w_ap.T @ e)
    # d/de of -sum w_xn * ||e_x - e_n||^2.
    row, col = w_xn.sum(axis=1), w_xn.sum(axis=0)
    grad -= 2.0 * (row[:, None] * e - w_xn @ e)
    grad -= 2.0 * (col[:, None] * e - w_xn.T @ e)
    return loss, grad, n_active


def all_batch_pairs(labels: np.ndarray) -> list[PairIndex]:
    """Every unordered pair in the batch, flagged same/different class."""
    labels = np.asarray(labels)
    n = len(labels)
    return [
        PairIndex(i, j, bool(labels[i] == labels[j]))
        for i in range(n)
        for j in range(i + 1, n)
    ]


def contrastive_loss(
    embeddings: np.ndarray, pairs: list[PairIndex], margin: float
) -> tuple[float, np.ndarray]:
    """Same-class pairs pay D^2; different-class pairs pay max(0, m - D)^2."""
    e = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(e)
    if not pairs:
        return 0.0, grad
    i = np.fromiter((p.i for p in pairs), dtype=np.int64, count=len(pairs))
    j = np.fromiter((p.j for p in pairs), dtype=np.int64, count=len(pairs))
    same = np.fromiter((p.same_class for p in pairs), dtype=bool, count=len(pairs))

    diff = e[i] - e[j]
    dist = np.sqrt(np.sum(diff**2, axis=1))
    loss = 0.0

    g = np.zeros_like(diff)
    if same.any():
        loss += float(np.sum(dist[same] ** 2))
        g[same] = 2.0 * diff[same]
    far = ~same & (dist < margin)
    if far.any():
        slack = margin - dist[far]
        loss += float(np.sum(slack**2))
        safe = np.maximum(dist[far], 1e-12)
        # Gradient of (m - D)^2; the D=0 kink takes the zero subgradient.
        g[far] = (-2.0 * slack / safe)[:, None] * diff[far]
    np.add.at(grad, i, g)
    np.add.at(grad, j, -g)
    return loss, grad


def sample_pk_batch(
    images: dict[str, list[str]],
    split_ids: list[str],
    rng: np.random.Generator,
    spec: BatchSpec,
) -> list[tuple[str, str]]:
    """Draw P distinct individuals then K views each.

    Views are drawn without replacement when the individual has >= K images,
    with replacement otherwise. Deterministic given the generator state.
    """
    spec.validate()
    ids = sorted(split_ids)
    if len(ids) < spec.p:
        raise MiningError(
            f"split has {len(ids)} individuals; batch needs P={spec.p}"
        )
    chosen = rng.choice(len(ids), size=spec.p, replace=False)
    batch: list[tuple[str, str]] = []
    for idx in chosen:
        iid = ids[int(idx)]
        views = sorted(images[iid])
        replace = len(views) < spec.k
        picks = rng.choice(len(views), size=spec.k, replace=replace)
        batch.extend((iid, views[int(v)]) for v in picks)
    return batch
