"""Embedding database: exact kNN matching, identity updates, persistence.

The database is an immutable snapshot; mutating operations return a new
snapshot so concurrent readers never observe partial writes. Records are
bound to the model that produced them through a checkpoint fingerprint.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from patternid.errors import ConfigError, DataError, FingerprintMismatch, FormatError
from patternid import net
from patternid.corpus import DatasetManifest, read_pgm

logger = logging.getLogger(__name__)

DB_MAGIC = b"PIDB"
DB_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    individual_id: str
    image_id: str
    vector: np.ndarray  # (embedding_dim,) float32
    source: str = ""
    added_at: float = 0.0


@dataclass
class MatchEntry:
    individual_id: str
    image_id: str
    distance: float


@dataclass
class MatchResult:
    """Ranked nearest records, ascending distance; ties keep insertion order."""

    entries: list[MatchEntry]
    query: np.ndarray


class EmbeddingDatabase:
    """Ordered embedding records with an exact linear-scan kNN index.

    The scan is exact and fast enough for the intended scale; the query path
    goes through `_ranked_order` so an approximate backend could be swapped
    in behind the same interface.
    """

    def __init__(self, embedding_dim: int, fingerprint: str, records: list[EmbeddingRecord] = ()):
        self.embedding_dim = int(embedding_dim)
        self.fingerprint = fingerprint
        self.records: list[EmbeddingRecord] = []
        self._rows: list[np.ndarray] = []
        self._by_individual: dict[str, list[int]] = {}
        self._keys: set[tuple[str, str]] = set()
        self._matrix: np.ndarray | None = None
        for record in records:
            self._append(record)

    def _append(self, record: EmbeddingRecord) -> None:
        vec = np.asarray(record.vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.embedding_dim:
            raise DataError(
                f"record {record.individual_id}/{record.image_id}: vector length "
                f"{vec.shape[0]} != embedding_dim {self.embedding_dim}"
            )
        key = (record.individual_id, record.image_id)
        if key in self._keys:
            raise DataError(f"duplicate record {key}")
        self._keys.add(key)
        self._by_individual.setdefault(record.individual_id, []).append(len(self.records))
        self.records.append(replace(record, vector=vec))
        self._rows.append(vec)
        self._matrix = None

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self._rows:
                self._matrix = np.stack(self._rows)
            else:
                self._matrix = np.zeros((0, self.embedding_dim), dtype=np.float32)
        return self._matrix

    def __len__(self) -> int:
        return len(self.records)

    def individual_ids(self) -> list[str]:
        return sorted(self._by_individual)

    def image_counts(self) -> dict[str, int]:
        return {iid: len(rows) for iid, rows in sorted(self._by_individual.items())}

    def has_individual(self, individual_id: str) -> bool:
        return individual_id in self._by_individual

    def find_record(self, image_id: str) -> EmbeddingRecord | None:
        for record in self.records:
            if record.image_id == image_id:
                return record
        return None

    def copy(self) -> "EmbeddingDatabase":
        return EmbeddingDatabase(self.embedding_dim, self.fingerprint, list(self.records))


def ranked_distances(matrix: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact unsquared Euclidean distances and the stable ascending order."""
    diff = matrix.astype(np.float64) - np.asarray(query, dtype=np.float64)
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(dists, kind="stable")
    return dists, order


def knn_query(db: EmbeddingDatabase, query: np.ndarray, k: int) -> MatchResult:
    """Top-k nearest records by Euclidean distance; clamps k to the db size."""
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != db.embedding_dim:
        raise DataError(
            f"query length {q.shape[0]} does not match embedding_dim {db.embedding_dim}"
        )
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    dists, order = ranked_distances(db.matrix, q)
    top = order[: min(k, len(db))]
    entries = [
        MatchEntry(
            individual_id=db.records[i].individual_id,
            image_id=db.records[i].image_id,
            distance=float(dists[i]),
        )
        for i in top
    ]
    return MatchResult(entries=entries, query=q)


def add_record(db: EmbeddingDatabase, record: EmbeddingRecord) -> EmbeddingDatabase:
    """Return a new snapshot with the record appended."""
    out = db.copy()
    out._append(record)
    return out


def _check_fingerprint(db: EmbeddingDatabase, checkpoint_fingerprint: str) -> None:
    if db.fingerprint != checkpoint_fingerprint:
        raise FingerprintMismatch(
            f"database was built with model {db.fingerprint}, query model is "
            f"{checkpoint_fingerprint}; rebuild the database or retrain"
        )


def confirm_identity(
    db: EmbeddingDatabase,
    pixels: np.ndarray,
    individual_id: str,
    image_id: str,
    params: dict[str, np.ndarray],
    model_config: net.ModelConfig,
    checkpoint_fingerprint: str,
    source: str = "",
    added_at: float = 0.0,
) -> EmbeddingDatabase:
    """Attach a confirmed query image to an existing individual."""
    _check_fingerprint(db, checkpoint_fingerprint)
    if not db.has_individual(individual_id):
        raise DataError(f"unknown individual {individual_id!r}; use create_individual")
    vector = net.embed_pixels(params, model_config, pixels[None, :, :])[0]
    return add_record(
        db,
        EmbeddingRecord(individual_id, image_id, vector, source=source, added_at=added_at),
    )


def create_individual(
    db: EmbeddingDatabase,
    pixels: np.ndarray,
    individual_id: str,
    image_id: str,
    params: dict[str, np.ndarray],
    model_config: net.ModelConfig,
    checkpoint_fingerprint: str,
    source: str = "",
    added_at: float = 0.0,
) -> EmbeddingDatabase:
    """Create a fresh individual from a query image."""
    _check_fingerprint(db, checkpoint_fingerprint)
    if db.has_individual(individual_id):
        raise DataError(f"individual {individual_id!r} already exists; use confirm_identity")
    vector = net.embed_pixels(params, model_config, pixels[None, :, :])[0]
    return add_record(
        db,
        EmbeddingRecord(individual_id, image_id, vector, source=source, added_at=added_at),
    )


def build_database(
    checkpoint_path: Path,
    manifest: DatasetManifest,
    individual_ids: list[str] | None = None,
) -> EmbeddingDatabase:
    """Embed every image of the given individuals with the checkpointed model.

    Unreadable images are skipped with a warning. Deterministic: rebuilding
    from the same inputs yields a byte-identical database file.
    """
    data = Path(checkpoint_path).read_bytes()
    params, config = net.parse_checkpoint(data)
    fp = net.fingerprint(data)
    ids = sorted(individual_ids) if individual_ids is not None else manifest.individual_ids

    db = EmbeddingDatabase(config.embedding_dim, fp)
    pixels: list[np.ndarray] = []
    meta: list[tuple[str, str, str]] = []
    skipped = 0
    for iid in ids:
        for image_id in manifest.images[iid]:
            path = manifest.image_path(iid, image_id)
            try:
                pixels.append(read_pgm(path))
            except (DataError, OSError) as exc:
                logger.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            meta.append((iid, image_id, str(path)))
    if skipped:
        logger.warning("skipped %d unreadable images", skipped)
    if pixels:
        # One image per forward pass: stored vectors are bit-identical to a
        # later single-image embedding of the same file (BLAS accumulation
        # orders differ across batch shapes, so batching would break that).
        vectors = net.embed_pixels(params, config, np.stack(pixels), chunk=1)
        for (iid, image_id, source), vec in zip(meta, vectors):
            db._append(EmbeddingRecord(iid, image_id, vec, source=source))
    return db


def db_bytes(db: EmbeddingDatabase) -> bytes:
    """Serialize a database snapshot into its versioned container."""
    header = json.dumps(
        {
            "embedding_dim": db.embedding_dim,
            "fingerprint": db.fingerprint,
            "count": len(db),
            "records": [
                {
                    "individual_id": r.individual_id,
                    "image_id": r.image_id,
                    "source": r.source,
                    "added_at": r.added_at,
                }
                for r in db.records
            ],
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    out = bytearray()
    out += DB_MAGIC
    out += np.array(DB_VERSION, dtype="<u4").tobytes()
    out += np.array(len(header), dtype="<u8").tobytes()
    out += header
    out += np.ascontiguousarray(db.matrix, dtype="<f4").tobytes()
    return bytes(out)


def save_db(db: EmbeddingDatabase, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(db_bytes(db))


def parse_db(data: bytes) -> EmbeddingDatabase:
    if len(data) < 16:
        raise FormatError(f"database truncated at offset {len(data)}: no header")
    if data[:4] != DB_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at offset 0")
    version = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if version != DB_VERSION:
        raise FormatError(f"unsupported database version {version} at offset 4")
    header_len = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    if 16 + header_len > len(data):
        raise FormatError(f"header claims {header_len} bytes but file ends at {len(data)}")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt database header at offset 16: {exc}") from exc
    dim = int(header["embedding_dim"])
    count = int(header["count"])
    base = 16 + header_len
    expected = base + count * dim * 4
    if expected != len(data):
        raise FormatError(
            f"payload size mismatch: expected file of {expected} bytes, got {len(data)}"
        )
    matrix = np.frombuffer(data[base:], dtype="<f4").reshape(count, dim)
    if len(header["records"]) != count:
        raise FormatError(
            f"record list has {len(header['records'])} entries, header count is {count}"
        )
    records = [
        EmbeddingRecord(
            individual_id=entry["individual_id"],
            image_id=entry["image_id"],
            vector=matrix[i].copy(),
            source=entry.get("source", ""),
            added_at=float(entry.get("added_at", 0.0)),
        )
        for i, entry in enumerate(header["records"])
    ]
    return EmbeddingDatabase(dim, header["fingerprint"], records)


def load_db(path: Path) -> EmbeddingDatabase:
    return parse_db(Path(path).read_bytes())
