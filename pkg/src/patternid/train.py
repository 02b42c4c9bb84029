"""Training loop: sample a PxK batch, augment, embed, mine, step.

Triplets are mined from the embeddings computed in the same step, never
from stale ones. Three independent seed streams (batch order, augmentation,
init) derive from the master seed so toggling augmentation does not change
which images are drawn.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from patternid.errors import ConfigError, DataError, RuntimeAbort
from patternid import mining, net
from patternid.corpus import DatasetManifest, load_split_arrays, split_by_individual
from patternid.metrics import (
    EvalProtocolConfig,
    FoldEvaluation,
    evaluate_fold,
    topk_from_embeddings,
    verification_metrics,
)
from patternid.warps import derive_rng, sample_view_params, warp_batch

LOSSES = ("triplet", "contrastive")
AUGMENTATIONS = ("extensive", "small", "none")

# Seed stream tags.
_BATCH_STREAM = 1
_AUG_STREAM = 2
_INIT_STREAM = 3
_MINE_STREAM = 4
_FOLD_STREAM = 5

# Cap on images embedded for the in-training diagnostics pass.
_DIAG_CAP = 150


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    batch: mining.BatchSpec = mining.BatchSpec()
    mining: mining.MiningConfig = mining.MiningConfig()
    model: net.ModelConfig = net.ModelConfig()
    loss: str = "triplet"
    contrastive_margin: float = 1.0
    augmentation: str = "extensive"
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    eval_every: int = 500
    fold: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 1 <= self.eval_every <= self.steps:
            raise ConfigError(
                f"eval_every must be in [1, steps={self.steps}], got {self.eval_every}"
            )
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(
                f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}"
            )
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.contrastive_margin <= 0:
            raise ConfigError(
                f"contrastive_margin must be positive, got {self.contrastive_margin}"
            )
        self.batch.validate()
        self.mining.validate()
        self.model.validate()


@dataclass
class StepRecord:
    step: int
    loss: float
    raw_loss: float
    active_count: int
    wall_time: float


@dataclass
class EvalRecord:
    step: int
    tpr_at_far: float
    auc: float
    topk: dict[int, float]


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def validate(self) -> None:
        indices = [r.step for r in self.steps]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DataError("step indices must be strictly increasing")
        if any(not np.isfinite(r.loss) for r in self.steps):
            raise DataError("non-finite loss in train log")

    def to_ndjson(self) -> str:
        lines = []
        for r in self.steps:
            lines.append(
                json.dumps(
                    {
                        "type": "step",
                        "step": r.step,
                        "loss": r.loss,
                        "raw_loss": r.raw_loss,
                        "active_count": r.active_count,
                        "wall_time": r.wall_time,
                    },
                    sort_keys=True,
                )
            )
        for r in self.evals:
            lines.append(
                json.dumps(
                    {
                        "type": "eval",
                        "step": r.step,
                        "tpr_at_far": r.tpr_at_far,
                        "auc": r.auc,
                        "topk": {str(k): v for k, v in r.topk.items()},
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ndjson(), encoding="utf-8")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    config: TrainConfig
    log: TrainLog
    checkpoint_path: Path | None = None


def fit_images(
    pixels: np.ndarray,
    images: dict[str, list[str]],
    row_of: dict[tuple[str, str], int],
    config: TrainConfig,
    checkpoint_path: Path | None = None,
) -> TrainResult:
    """Run the step loop over in-memory images grouped by individual."""
    config.validate()
    split_ids = sorted(images)
    if not split_ids:
        raise DataError("training split is empty")
    if len(split_ids) < config.batch.p:
        raise DataError(
            f"training split has {len(split_ids)} individuals, batch needs P={config.batch.p}"
        )
    image_size = pixels.shape[1:]

    params = net.init_params(config.model, _stream_seed(config.seed, _INIT_STREAM))
    state = net.init_adam(
        params,
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.epsilon,
    )
    batch_rng = derive_rng(config.seed, _BATCH_STREAM)
    aug_rng = derive_rng(config.seed, _AUG_STREAM)
    mine_rng = derive_rng(config.seed, _MINE_STREAM)

    log = TrainLog()
    started = time.perf_counter()
    for step in range(1, config.steps + 1):
        entries = mining.sample_pk_batch(images, split_ids, batch_rng, config.batch)
        rows = [row_of[entry] for entry in entries]
        batch_px = pixels[rows]
        if config.augmentation != "none":
            aug_params = [
                sample_view_params(aug_rng, config.augmentation, image_size=image_size)
                for _ in range(len(rows))
            ]
            batch_px = warp_batch(batch_px, aug_params)
        labels = _encode_labels([iid for iid, _ in entries])

        x = net.preprocess_batch(batch_px)
        embeddings, cache = net.forward(params, config.model, x)
        loss_sum, grad, n_active = _loss_and_grad(embeddings, labels, config, mine_rng)
        if not np.isfinite(loss_sum):
            _abort(params, config, checkpoint_path, step, loss_sum)
        mean_loss = loss_sum / max(1, n_active)

        if n_active > 0:
            upstream = (grad / max(1, n_active)).astype(np.float32)
            grads = net.backward(cache, upstream)
            params, state = net.adam_step(params, grads, state)

        log.steps.append(
            StepRecord(
                step=step,
                loss=float(mean_loss),
                raw_loss=float(loss_sum),
                active_count=int(n_active),
                wall_time=time.perf_counter() - started,
            )
        )
        if step % config.eval_every == 0 or step == config.steps:
            log.evals.append(_diagnostics(step, params, config, pixels, images, row_of))

    log.validate()
    result = TrainResult(params=params, config=config, log=log)
    if checkpoint_path is not None:
        net.save_checkpoint(params, config.model, checkpoint_path)
        result.checkpoint_path = Path(checkpoint_path)
    return result


def _encode_labels(ids: list[str]) -> np.ndarray:
    index = {iid: i for i, iid in enumerate(sorted(set(ids)))}
    return np.asarray([index[iid] for iid in ids], dtype=np.int64)


def _loss_and_grad(
    embeddings: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    mine_rng: np.random.Generator,
) -> tuple[float, np.ndarray, int]:
    if config.loss == "contrastive":
        pairs = mining.all_batch_pairs(labels)
        loss, grad = mining.contrastive_loss(embeddings, pairs, config.contrastive_margin)
        n_active = _active_pairs(embeddings, pairs, config.contrastive_margin)
        return loss, grad, n_active

    strategy = config.mining.strategy
    if strategy == "semi_hard":
        return mining.mined_triplet_loss(embeddings, labels, config.mining)
    dists = mining.pairwise_sq_distances(embeddings)
    if strategy == "batch_hard":
        triplets = mining.mine_batch_hard(dists, labels)
    else:
        triplets = mining.mine_random(labels, mine_rng)
    loss, grad = mining.triplet_loss(
        embeddings, triplets, config.mining.margin, config.mining.negative_term
    )
    n_active = _active_triplets(dists, triplets, config.mining)
    return loss, grad, n_active


def _active_triplets(
    dists: np.ndarray, triplets: list[mining.TripletIndex], cfg: mining.MiningConfig
) -> int:
    count = 0
    for t in triplets:
        x = t.a if cfg.negative_term == "anchor" else t.p
        if cfg.margin + dists[t.a, t.p] - dists[x, t.n] > 0:
            count += 1
    return count


def _active_pairs(embeddings: np.ndarray, pairs: list[mining.PairIndex], margin: float) -> int:
    e = np.asarray(embeddings, dtype=np.float64)
    count = 0
    for p in pairs:
        d = float(np.linalg.norm(e[p.i] - e[p.j]))
        if (p.same_class and d > 0) or (not p.same_class and d < margin):
            count += 1
    return count


def _diagnostics(
    step: int,
    params: dict[str, np.ndarray],
    config: TrainConfig,
    pixels: np.ndarray,
    images: dict[str, list[str]],
    row_of: dict[tuple[str, str], int],
) -> EvalRecord:
    """Verification + small top-k snapshot on the training split only.

    The held-out fold is never read during training; proper test-fold
    evaluation happens after the run.
    """
    rows: list[int] = []
    labels: list[str] = []
    per_id = max(2, _DIAG_CAP // max(1, len(images)))
    for iid in sorted(images):
        for image_id in images[iid][:per_id]:
            rows.append(row_of[(iid, image_id)])
            labels.append(iid)
    emb = net.embed_pixels(params, config.model, pixels[rows])
    report = verification_metrics(emb, labels)

    counts = {iid: labels.count(iid) for iid in set(labels)}
    m = min(2, min(counts.values()) - 1)
    topk: dict[int, float] = {}
    if m >= 1:
        k_list = tuple(k for k in (1, 5, 10) if k <= len(counts)) or (1,)
        snapshot = topk_from_embeddings(
            np.zeros((0, emb.shape[1]), dtype=np.float32),
            [],
            emb,
            labels,
            EvalProtocolConfig(
                gallery_matches_per_individual=m, repetitions=1, k_list=k_list, seed=0
            ),
        )
        topk = snapshot.mean
    return EvalRecord(step=step, tpr_at_far=report.tpr_at_far, auc=report.auc, topk=topk)


def _abort(
    params: dict[str, np.ndarray],
    config: TrainConfig,
    checkpoint_path: Path | None,
    step: int,
    loss: float,
) -> None:
    saved = ""
    if checkpoint_path is not None:
        rescue = Path(str(checkpoint_path) + ".lastgood")
        net.save_checkpoint(params, config.model, rescue)
        saved = f"; last good parameters saved to {rescue}"
    raise RuntimeAbort(f"non-finite loss {loss} at step {step}{saved}")


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    checkpoint_path: Path | None = None,
    log_path: Path | None = None,
) -> TrainResult:
    """Train on the manifest's training split for the configured fold."""
    config.validate()
    train_ids, _ = split_by_individual(manifest, config.fold)
    if not train_ids:
        raise DataError(f"fold {config.fold}: training split is empty")
    pixels, _, keys = load_split_arrays(manifest, train_ids)
    row_of = {key: i for i, key in enumerate(keys)}
    images = {iid: list(manifest.images[iid]) for iid in train_ids}
    result = fit_images(pixels, images, row_of, config, checkpoint_path=checkpoint_path)
    if log_path is not None:
        result.log.save(log_path)
    return result


@dataclass
class CrossvalReport:
    folds: list[FoldEvaluation]
    summary: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "summary": self.summary,
        }


def run_crossval(
    manifest: DatasetManifest,
    config: TrainConfig,
    protocol: EvalProtocolConfig,
    workdir: Path | None = None,
) -> CrossvalReport:
    """Train one model per fold and evaluate each on its held-out fold.

    Per-fold seeds derive from the master seed, so a re-run reproduces the
    summary exactly. The summary carries mean and sample std per metric.
    """
    evaluations: list[FoldEvaluation] = []
    for fold in range(manifest.folds):
        fold_config = replace(
            config, fold=fold, seed=_stream_seed(config.seed, _FOLD_STREAM, fold)
        )
        checkpoint = None
        if workdir is not None:
            checkpoint = Path(workdir) / f"fold{fold}.pidm"
        try:
            result = train(manifest, fold_config, checkpoint_path=checkpoint)
        except (DataError, RuntimeAbort) as exc:
            raise type(exc)(f"fold {fold}: {exc}") from exc
        evaluations.append(
            evaluate_fold(result.params, config.model, manifest, fold, protocol)
        )

    summary: dict[str, dict[str, float]] = {}
    def _stat(name: str, values: list[float]) -> None:
        arr = np.asarray(values, dtype=np.float64)
        summary[name] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        }

    _stat("auc", [e.verification.auc for e in evaluations])
    _stat("tpr_at_far", [e.verification.tpr_at_far for e in evaluations])
    for k in protocol.k_list:
        _stat(f"top{k}", [e.topk.mean[k] for e in evaluations])
    return CrossvalReport(folds=evaluations, summary=summary)


def _stream_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])
