"""HTTP review service: query the database, confirm matches, add individuals.

Readers work against immutable database snapshots; all mutations serialize
through one writer lock and persist to disk before they are acknowledged.
"""

from __future__ import annotations

import io
import os
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import HTMLResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from patternid import __version__, net
from patternid.corpus import parse_pgm, read_pgm, write_pgm
from patternid.database import (
    EmbeddingDatabase,
    EmbeddingRecord,
    add_record,
    db_bytes,
    knn_query,
    load_db,
)
from patternid.errors import DataError, FingerprintMismatch

TOKEN_TTL_SECONDS = 24 * 3600


@dataclass
class Snapshot:
    db: EmbeddingDatabase
    version: int


@dataclass
class PendingQuery:
    token: str
    pixels: np.ndarray
    embedding: np.ndarray
    created_at: float
    path: Path


class ReviewStore:
    """Shared service state: model, database snapshot, pending queries."""

    def __init__(
        self,
        checkpoint_path: Path,
        db_path: Path,
        clock: Callable[[], float] = time.time,
    ):
        data = Path(checkpoint_path).read_bytes()
        self.params, self.model_config = net.parse_checkpoint(data)
        self.fingerprint = net.fingerprint(data)
        db = load_db(db_path)
        if db.fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"database {db_path} was built with model {db.fingerprint}, "
                f"checkpoint is {self.fingerprint}"
            )
        self.db_path = Path(db_path)
        self.pending_dir = self.db_path.parent / "pending"
        self.confirmed_dir = self.db_path.parent / "confirmed"
        self.snapshot = Snapshot(db=db, version=0)
        self.pending: dict[str, PendingQuery] = {}
        self.lock = threading.Lock()
        self.clock = clock

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        return net.embed_pixels(self.params, self.model_config, pixels[None, :, :])[0]

    def register_query(self, pixels: np.ndarray) -> PendingQuery:
        token = uuid.uuid4().hex
        path = self.pending_dir / f"{token}.pgm"
        write_pgm(path, pixels)
        entry = PendingQuery(
            token=token,
            pixels=pixels,
            embedding=self.embed(pixels),
            created_at=self.clock(),
            path=path,
        )
        with self.lock:
            self.pending[token] = entry
            self._prune_locked()
        return entry

    def _prune_locked(self) -> None:
        deadline = self.clock() - TOKEN_TTL_SECONDS
        for token in [t for t, p in self.pending.items() if p.created_at < deadline]:
            entry = self.pending.pop(token)
            entry.path.unlink(missing_ok=True)

    def take_pending(self, token: str) -> PendingQuery:
        with self.lock:
            entry = self.pending.get(token)
            if entry is None:
                raise HTTPException(status_code=404, detail="unknown query token")
            if entry.created_at < self.clock() - TOKEN_TTL_SECONDS:
                self.pending.pop(token)
                entry.path.unlink(missing_ok=True)
                raise HTTPException(status_code=410, detail="query token expired; re-query")
            return entry

    def commit(self, token: str, individual_id: str, fresh: bool) -> tuple[dict, int]:
        """Append the pending query as a record; persist before acknowledging."""
        with self.lock:
            entry = self.pending.get(token)
            if entry is None:
                raise HTTPException(status_code=404, detail="unknown query token")
            if entry.created_at < self.clock() - TOKEN_TTL_SECONDS:
                self.pending.pop(token)
                entry.path.unlink(missing_ok=True)
                raise HTTPException(status_code=410, detail="query token expired; re-query")
            db = self.snapshot.db
            if fresh and db.has_individual(individual_id):
                raise HTTPException(
                    status_code=409, detail=f"individual {individual_id!r} already exists"
                )
            if not fresh and not db.has_individual(individual_id):
                raise HTTPException(
                    status_code=404, detail=f"unknown individual {individual_id!r}"
                )
            image_id = f"q{token[:12]}"
            self.confirmed_dir.mkdir(parents=True, exist_ok=True)
            stored = self.confirmed_dir / f"{image_id}.pgm"
            write_pgm(stored, entry.pixels)
            record = EmbeddingRecord(
                individual_id=individual_id,
                image_id=image_id,
                vector=entry.embedding,
                source=str(stored),
                added_at=self.clock(),
            )
            new_db = add_record(db, record)
            self._persist(new_db)
            self.snapshot = Snapshot(db=new_db, version=self.snapshot.version + 1)
            self.pending.pop(token, None)
            entry.path.unlink(missing_ok=True)
            return (
                {
                    "individual_id": record.individual_id,
                    "image_id": record.image_id,
                    "source": record.source,
                },
                self.snapshot.version,
            )

    def _persist(self, db: EmbeddingDatabase) -> None:
        tmp = self.db_path.with_suffix(".tmp")
        tmp.write_bytes(db_bytes(db))
        os.replace(tmp, self.db_path)


def decode_gray_image(data: bytes) -> np.ndarray:
    """Decode an uploaded image (PGM or anything Pillow reads) to gray uint8."""
    if data[:2] == b"P5":
        try:
            return parse_pgm(data, name="<upload>")
        except DataError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"unreadable image: {exc}") from exc


def create_app(
    checkpoint_path: Path,
    db_path: Path,
    frontend_dir: Path | None = None,
    clock: Callable[[], float] = time.time,
) -> FastAPI:
    store = ReviewStore(checkpoint_path, db_path, clock=clock)
    app = FastAPI(title="patternid review service")
    app.state.store = store

    @app.exception_handler(DataError)
    async def _data_error(_, exc: DataError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/api/health")
    def health():
        snap = store.snapshot
        return {
            "version": __version__,
            "db_version": snap.version,
            "record_count": len(snap.db),
        }

    @app.get("/api/individuals")
    def individuals():
        snap = store.snapshot
        return [
            {"individual_id": iid, "image_count": count}
            for iid, count in snap.db.image_counts().items()
        ]

    @app.get("/api/image/{image_id}")
    def image(image_id: str):
        snap = store.snapshot
        record = snap.db.find_record(image_id)
        if record is None or not record.source:
            raise HTTPException(status_code=404, detail=f"no image {image_id!r}")
        try:
            pixels = read_pgm(Path(record.source))
        except (DataError, OSError) as exc:
            raise HTTPException(status_code=404, detail=f"image unavailable: {exc}") from exc
        buf = io.BytesIO()
        Image.fromarray(pixels, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/api/query")
    async def query(image: UploadFile = File(...), k: int = Form(10)):
        if k < 1:
            raise HTTPException(status_code=400, detail="k must be >= 1")
        pixels = decode_gray_image(await image.read())
        entry = store.register_query(pixels)
        snap = store.snapshot
        result = knn_query(snap.db, entry.embedding, k)
        return {
            "query_token": entry.token,
            "db_version": snap.version,
            "candidates": [
                {
                    "individual_id": e.individual_id,
                    "image_id": e.image_id,
                    "distance": e.distance,
                    "thumbnail": f"/api/image/{e.image_id}",
                }
                for e in result.entries
            ],
        }

    @app.post("/api/confirm")
    def confirm(body: dict):
        token = body.get("query_token")
        individual_id = body.get("individual_id")
        if not token or not individual_id:
            raise HTTPException(
                status_code=400, detail="body needs query_token and individual_id"
            )
        record, version = store.commit(token, individual_id, fresh=False)
        return {"new_record": record, "db_version": version}

    @app.post("/api/individuals")
    def create_individual(body: dict):
        token = body.get("query_token")
        individual_id = body.get("new_individual_id")
        if not token or not individual_id:
            raise HTTPException(
                status_code=400, detail="body needs query_token and new_individual_id"
            )
        record, version = store.commit(token, individual_id, fresh=True)
        return {"individual_id": individual_id, "new_record": record, "db_version": version}

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")
    else:

        @app.get("/", response_class=HTMLResponse)
        def index():
            return (
                "<!doctype html><title>patternid</title>"
                "<p>Review UI bundle is not installed; the JSON API is live under /api/.</p>"
            )

    return app
