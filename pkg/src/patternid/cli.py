"""Command-line lifecycle: generate, train, eval, embed, match, serve.

Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from patternid import database, metrics, net
from patternid.config import load_run_config
from patternid.corpus import build_dataset, load_manifest, load_split_arrays, read_pgm, split_by_individual
from patternid.errors import ConfigError, DataError, PatternIdError, RuntimeAbort
from patternid.train import run_crossval, train


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (RuntimeAbort, PatternIdError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patternid",
        description="Re-identify individuals by their unique markings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic marking corpus")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="dataset root directory")
    p.add_argument("--individuals", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the embedding network")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--log", type=Path, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss", choices=("triplet", "contrastive"), default=None)
    p.add_argument(
        "--mining", choices=("semi_hard", "batch_hard", "random"), default=None
    )
    p.add_argument("--augmentation", choices=("extensive", "small", "none"), default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument(
        "--folds",
        type=int,
        default=None,
        help="run k-fold cross-validation over all manifest folds",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="verification and top-k evaluation")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--m", type=int, default=None, help="gallery matches per query individual")
    p.add_argument("--k", type=str, default=None, help="comma list of ranks, e.g. 1,5,10")
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--vary-m", type=str, default=None, help="range like 1..5")
    p.add_argument("--out", type=Path, default=None, help="write the JSON report here")
    p.add_argument("--roc-csv", type=Path, default=None)
    p.add_argument("--export-embeddings", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="embed corpus images into a database")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="database file to write")
    p.add_argument(
        "--split",
        choices=("all", "train", "test"),
        default="all",
        help="which individuals to embed (train/test need --fold)",
    )
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--csv", type=Path, default=None, help="also export embeddings as CSV")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("match", help="query a database with one image")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--db", type=Path, default=None)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("-k", type=int, default=10)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("serve", help="run the HTTP review service")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--db", type=Path, default=None)
    p.add_argument("--host", type=str, default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--frontend", type=Path, default=None, help="static UI bundle directory")
    p.set_defaults(func=cmd_serve)
    return parser


def _overrides(pairs: dict[str, object]) -> dict[str, object]:
    return {key: value for key, value in pairs.items() if value is not None}


def cmd_generate(args) -> int:
    run = load_run_config(
        args.config,
        _overrides(
            {
                "corpus.individuals": args.individuals,
                "corpus.views_per_individual": args.views,
                "corpus.seed": args.seed,
                "corpus.folds": args.folds,
            }
        ),
    )
    root = args.out if args.out is not None else Path(run.paths.dataset_root)
    manifest = build_dataset(run.corpus, root)
    summary = {
        "root": str(root),
        "individuals": len(manifest.individual_ids),
        "images": sum(len(v) for v in manifest.images.values()),
        "image_size": list(manifest.image_size),
        "folds": manifest.folds,
        "seed": manifest.seed,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    overrides = _overrides(
        {
            "train.seed": args.seed,
            "train.loss": args.loss,
            "mining.strategy": args.mining,
            "train.augmentation": args.augmentation,
            "train.fold": args.fold,
        }
    )
    if args.steps is not None:
        # Shortening the run pulls the eval cadence in with it.
        base = load_run_config(args.config, overrides)
        overrides["train.steps"] = args.steps
        overrides["train.eval_every"] = min(base.train.eval_every, args.steps)
    run = load_run_config(args.config, overrides)
    dataset = args.dataset if args.dataset is not None else Path(run.paths.dataset_root)
    manifest = load_manifest(dataset)
    checkpoint = args.checkpoint if args.checkpoint is not None else Path(run.paths.checkpoint)
    log_path = args.log if args.log is not None else Path(run.paths.train_log)

    if args.folds is not None:
        if args.folds != manifest.folds:
            raise ConfigError(
                f"--folds {args.folds} does not match the manifest's {manifest.folds}"
            )
        report = run_crossval(manifest, run.train, run.eval, workdir=checkpoint.parent)
        out = Path(run.paths.reports_dir) / "crossval.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        print(json.dumps(report.summary, sort_keys=True))
        return 0

    result = train(manifest, run.train, checkpoint_path=checkpoint, log_path=log_path)
    digest = net.fingerprint_file(checkpoint)
    last = result.log.steps[-1]
    print(
        json.dumps(
            {
                "checkpoint": str(checkpoint),
                "checkpoint_hash": digest,
                "steps": last.step,
                "final_loss": last.loss,
            },
            sort_keys=True,
        )
    )
    return 0


def _parse_k_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--k expects a comma list of integers, got {text!r}") from exc


def _parse_m_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            return list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigError(f"--vary-m expects e.g. 1..5, got {text!r}") from exc
    try:
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--vary-m expects a range or comma list, got {text!r}") from exc


def cmd_eval(args) -> int:
    run = load_run_config(
        args.config,
        _overrides(
            {
                "eval.gallery_matches_per_individual": args.m,
                "eval.repetitions": args.repetitions,
                "train.fold": args.fold,
            }
        ),
    )
    protocol = run.eval
    if args.k is not None:
        protocol = dataclasses.replace(protocol, k_list=_parse_k_list(args.k))
    dataset = args.dataset if args.dataset is not None else Path(run.paths.dataset_root)
    checkpoint = args.checkpoint if args.checkpoint is not None else Path(run.paths.checkpoint)
    manifest = load_manifest(dataset)
    fold = run.train.fold
    params, model_config = net.load_checkpoint(checkpoint)

    train_ids, test_ids = split_by_individual(manifest, fold)
    train_px, train_lab, _ = load_split_arrays(manifest, train_ids)
    test_px, test_lab, test_keys = load_split_arrays(manifest, test_ids)
    train_e = net.embed_pixels(params, model_config, train_px)
    test_e = net.embed_pixels(params, model_config, test_px)
    train_labels = [train_ids[i] for i in train_lab]
    test_labels = [test_ids[i] for i in test_lab]

    verification = metrics.verification_metrics(test_e, test_labels)
    topk = metrics.topk_from_embeddings(train_e, train_labels, test_e, test_labels, protocol)
    report: dict = {
        "fold": fold,
        "checkpoint": str(checkpoint),
        "verification": verification.to_dict(),
        "topk": topk.to_dict(),
    }
    if args.vary_m is not None:
        sweep = metrics.vary_gallery_size(
            train_e, train_labels, test_e, test_labels, _parse_m_range(args.vary_m), protocol
        )
        report["vary_m"] = {str(m): r.to_dict() for m, r in sweep.items()}

    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    print(text)

    if args.roc_csv is not None:
        args.roc_csv.parent.mkdir(parents=True, exist_ok=True)
        args.roc_csv.write_text(verification.roc_csv(), encoding="utf-8")
    if args.export_embeddings is not None:
        _write_embedding_csv(args.export_embeddings, test_labels, test_keys, test_e)
    return 0


def _write_embedding_csv(path: Path, labels: list[str], keys, embeddings: np.ndarray) -> None:
    dim = embeddings.shape[1]
    lines = ["individual_id,image_id," + ",".join(f"e{i}" for i in range(dim))]
    for label, (_, image_id), vec in zip(labels, keys, embeddings):
        lines.append(f"{label},{image_id}," + ",".join(repr(float(v)) for v in vec))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_embed(args) -> int:
    run = load_run_config(args.config, _overrides({"train.fold": args.fold}))
    dataset = args.dataset if args.dataset is not None else Path(run.paths.dataset_root)
    checkpoint = args.checkpoint if args.checkpoint is not None else Path(run.paths.checkpoint)
    out = args.out if args.out is not None else Path(run.paths.database)
    manifest = load_manifest(dataset)

    ids = None
    if args.split != "all":
        train_ids, test_ids = split_by_individual(manifest, run.train.fold)
        ids = train_ids if args.split == "train" else test_ids
    db = database.build_database(checkpoint, manifest, individual_ids=ids)
    database.save_db(db, out)
    if args.csv is not None:
        labels = [r.individual_id for r in db.records]
        keys = [(r.individual_id, r.image_id) for r in db.records]
        _write_embedding_csv(args.csv, labels, keys, db.matrix)
    print(
        json.dumps(
            {
                "database": str(out),
                "records": len(db),
                "individuals": len(db.individual_ids()),
                "fingerprint": db.fingerprint,
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_match(args) -> int:
    run = load_run_config(args.config, {})
    checkpoint = args.checkpoint if args.checkpoint is not None else Path(run.paths.checkpoint)
    db_path = args.db if args.db is not None else Path(run.paths.database)

    data = Path(checkpoint).read_bytes()
    params, model_config = net.parse_checkpoint(data)
    db = database.load_db(db_path)
    if db.fingerprint != net.fingerprint(data):
        raise DataError(
            f"database fingerprint {db.fingerprint} does not match checkpoint "
            f"{net.fingerprint(data)}"
        )
    pixels = read_pgm(args.image)
    vector = net.embed_pixels(params, model_config, pixels[None, :, :])[0]
    result = database.knn_query(db, vector, args.k)
    for rank, entry in enumerate(result.entries, start=1):
        print(f"{rank},{entry.individual_id},{entry.image_id},{entry.distance:.6f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from patternid.service import create_app

    run = load_run_config(args.config, {})
    checkpoint = args.checkpoint if args.checkpoint is not None else Path(run.paths.checkpoint)
    db_path = args.db if args.db is not None else Path(run.paths.database)
    app = create_app(checkpoint, db_path, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
