"""Ablation harness: train config variants and tabulate their metrics.

Four axes: embedding l2-normalization on/off, embedding dimension,
augmentation level, and gallery size m (the last re-evaluates one trained
model instead of retraining). Directional outcomes are reported, never
asserted: the tables state which variant won each metric.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patternid import net
from patternid.corpus import DatasetManifest, load_split_arrays, split_by_individual
from patternid.metrics import EvalProtocolConfig, vary_gallery_size
from patternid.train import TrainConfig, train
from patternid.metrics import evaluate_fold

AXES = ("l2_normalize", "embedding_dim", "augmentation", "gallery_m")


@dataclass
class VariantResult:
    name: str
    metrics: dict[str, float]


@dataclass
class AxisReport:
    axis: str
    variants: list[VariantResult]
    best_by_metric: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "variants": [{"name": v.name, "metrics": v.metrics} for v in self.variants],
            "best_by_metric": self.best_by_metric,
        }

    def table(self) -> str:
        metric_names = list(self.variants[0].metrics)
        header = ["variant"] + metric_names
        rows = [[v.name] + [f"{v.metrics[m]:.4f}" for m in metric_names] for v in self.variants]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        def fmt(row): return "  ".join(cell.ljust(w) for cell, w in zip(row, widths))
        lines = [f"axis: {self.axis}", fmt(header), fmt(["-" * w for w in widths])]
        lines += [fmt(r) for r in rows]
        lines.append(
            "best: " + ", ".join(f"{m} -> {v}" for m, v in self.best_by_metric.items())
        )
        return "\n".join(lines)


def _metrics_of(evaluation) -> dict[str, float]:
    out = {f"top{k}": v for k, v in evaluation.topk.mean.items()}
    out["tpr_at_far"] = evaluation.verification.tpr_at_far
    out["auc"] = evaluation.verification.auc
    return out


def run_ablations(
    manifest: DatasetManifest,
    base: TrainConfig,
    protocol: EvalProtocolConfig,
    m_list: tuple[int, ...] = (1, 2, 3, 4, 5),
    embedding_dims: tuple[int, ...] = (128, 256, 512),
    out_dir: Path | None = None,
) -> list[AxisReport]:
    """Run every axis end-to-end and emit per-axis comparison tables."""
    cache: dict[str, tuple] = {}

    def train_and_eval(config: TrainConfig):
        key = repr(config)
        if key not in cache:
            result = train(manifest, config)
            cache[key] = (
                result.params,
                evaluate_fold(result.params, config.model, manifest, config.fold, protocol),
            )
        return cache[key]

    reports: list[AxisReport] = []

    variants = []
    for flag in (False, True):
        config = dataclasses.replace(
            base, model=dataclasses.replace(base.model, l2_normalize=flag)
        )
        _, evaluation = train_and_eval(config)
        variants.append(VariantResult(name="on" if flag else "off", metrics=_metrics_of(evaluation)))
    reports.append(_axis_report("l2_normalize", variants))

    variants = []
    for dim in embedding_dims:
        config = dataclasses.replace(
            base, model=dataclasses.replace(base.model, embedding_dim=dim)
        )
        _, evaluation = train_and_eval(config)
        variants.append(VariantResult(name=str(dim), metrics=_metrics_of(evaluation)))
    reports.append(_axis_report("embedding_dim", variants))

    variants = []
    for level in ("small", "extensive"):
        config = dataclasses.replace(base, augmentation=level)
        _, evaluation = train_and_eval(config)
        variants.append(VariantResult(name=level, metrics=_metrics_of(evaluation)))
    reports.append(_axis_report("augmentation", variants))

    # Gallery-size axis re-evaluates the baseline model at each m.
    params, _ = train_and_eval(base)
    train_ids, test_ids = split_by_individual(manifest, base.fold)
    train_px, train_lab, _ = load_split_arrays(manifest, train_ids)
    test_px, test_lab, _ = load_split_arrays(manifest, test_ids)
    train_e = net.embed_pixels(params, base.model, train_px)
    test_e = net.embed_pixels(params, base.model, test_px)
    sweep = vary_gallery_size(
        train_e,
        [train_ids[i] for i in train_lab],
        test_e,
        [test_ids[i] for i in test_lab],
        list(m_list),
        protocol,
    )
    variants = [
        VariantResult(
            name=f"m={m}",
            metrics={f"top{k}": v for k, v in sweep[m].mean.items()},
        )
        for m in m_list
    ]
    reports.append(_axis_report("gallery_m", variants))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {r.axis: r.to_dict() for r in reports}
        (out_dir / "ablations.json").write_text(
            json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8"
        )
        (out_dir / "ablations.txt").write_text(
            "\n\n".join(r.table() for r in reports) + "\n", encoding="utf-8"
        )
    return reports


def _axis_report(axis: str, variants: list[VariantResult]) -> AxisReport:
    best: dict[str, str] = {}
    for metric in variants[0].metrics:
        idx = int(np.argmax([v.metrics[metric] for v in variants]))
        best[metric] = variants[idx].name
    return AxisReport(axis=axis, variants=variants, best_by_metric=best)
