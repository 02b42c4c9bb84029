"""Synthetic marking corpus: individuals, rendered views, manifest, folds.

Each individual is a unique constellation of elliptical dark spots inside a
body silhouette. Views are rendered under projective, photometric and
occlusion perturbations and stored as binary PGM files with a JSON manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from patternid.errors import ConfigError, DataError, GenerationError, RenderError
from patternid.warps import (
    BACKGROUND_LEVEL,
    BODY_LEVEL,
    RenderParams,
    apply_homography,
    derive_rng,
    finish_view,
    identity_params,
    pixel_grid,
    sample_view_params,
)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Spot columns: cx, cy, radius_major, radius_minor, rotation, intensity.
SPOT_FIELDS = ("cx", "cy", "radius_major", "radius_minor", "rotation", "intensity")

# Two patterns with equal spot counts are near-duplicates when every
# (sorted) spot center agrees within this canvas distance.
DUPLICATE_THRESHOLD = 0.05

# Gray range removed from the body level at full spot intensity.
SPOT_DEPTH = 175.0

# Internal stream tags so pattern, view and fold draws never collide.
_PATTERN_STREAM = 101
_VIEW_STREAM = 102


@dataclass
class SpotPattern:
    """One individual's marking: spots (n, 6) plus body silhouette half-axes."""

    individual_id: str
    spots: np.ndarray
    silhouette: tuple[float, float]

    def validate(self) -> None:
        spots = np.asarray(self.spots, dtype=np.float64)
        if spots.ndim != 2 or spots.shape[1] != len(SPOT_FIELDS):
            raise DataError(f"spots must be (n, {len(SPOT_FIELDS)}), got {spots.shape}")
        n = spots.shape[0]
        if not 4 <= n <= 25:
            raise DataError(f"{self.individual_id}: spot count {n} outside [4, 25]")
        radii = spots[:, 2:4]
        if np.any(radii < 0.02 - 1e-12) or np.any(radii > 0.12 + 1e-12):
            raise DataError(f"{self.individual_id}: spot radii outside [0.02, 0.12]")
        ax, ay = self.silhouette
        dx = (spots[:, 0] - 0.5) / ax
        dy = (spots[:, 1] - 0.5) / ay
        if np.any(dx * dx + dy * dy > 1.0):
            raise DataError(f"{self.individual_id}: spot center outside silhouette")


@dataclass
class ImageSample:
    """One rendered grayscale view of an individual."""

    individual_id: str
    image_id: str
    pixels: np.ndarray  # (H, W) uint8


@dataclass
class CorpusConfig:
    """Generation settings for a synthetic corpus."""

    individuals: int = 50
    views_per_individual: int = 10
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    folds: int = 5
    spot_count_range: tuple[int, int] = (4, 25)
    spot_radius_range: tuple[float, float] = (0.03, 0.10)
    intensity_range: tuple[float, float] = (0.35, 1.0)
    silhouette_ax_range: tuple[float, float] = (0.36, 0.44)
    silhouette_ay_range: tuple[float, float] = (0.28, 0.36)
    view_level: str = "extensive"
    # Spread of the stored views. Training augmentation applies the full
    # extensive ranges on top of these, so the corpus keeps a moderate
    # baseline: varied but not adversarial viewpoints and photometrics.
    view_brightness_range: tuple[float, float] = (0.75, 1.3)
    view_noise_sigma_max: float = 6.0
    view_max_occluders: int = 2
    view_rotation_max_deg: float = 90.0
    view_allow_flips: bool = True
    view_projective_max_per_px: float = 0.0015
    view_zoom_range: tuple[float, float] = (1.0, 1.1)
    view_translation_max_px: float = 10.0

    def validate(self) -> None:
        if self.individuals < 1:
            raise ConfigError(f"individuals must be >= 1, got {self.individuals}")
        if self.views_per_individual < 3:
            raise ConfigError(
                f"views_per_individual must be >= 3, got {self.views_per_individual}"
            )
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.individuals < self.folds:
            raise ConfigError(
                f"need at least one individual per fold ({self.individuals} < {self.folds})"
            )
        lo, hi = self.spot_count_range
        if not 4 <= lo <= hi <= 25:
            raise ConfigError(f"spot_count_range {self.spot_count_range} outside [4, 25]")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image_size too small: {self.image_size}")


@dataclass
class DatasetManifest:
    """Index of a corpus on disk: individuals, views, folds, provenance."""

    root: Path
    image_size: tuple[int, int]
    seed: int
    folds: int
    fold_of: dict[str, int]
    images: dict[str, list[str]]  # individual_id -> ordered image ids
    patterns: dict[str, SpotPattern]
    config: CorpusConfig

    @property
    def individual_ids(self) -> list[str]:
        return sorted(self.images)

    def image_path(self, individual_id: str, image_id: str) -> Path:
        return self.root / "images" / individual_id / f"{image_id}.pgm"

    def validate(self) -> None:
        if set(self.fold_of) != set(self.images):
            raise DataError("fold assignment does not cover exactly the corpus individuals")
        for iid, fold in self.fold_of.items():
            if not 0 <= fold < self.folds:
                raise DataError(f"{iid}: fold {fold} outside [0, {self.folds})")
        for iid, ids in self.images.items():
            if len(ids) < 3:
                raise DataError(f"{iid}: only {len(ids)} images, need >= 3")


def pattern_distance(a: SpotPattern, b: SpotPattern) -> float:
    """Dissimilarity of two markings: inf on count mismatch, else the largest
    center offset after sorting spots lexicographically by center."""
    sa = np.asarray(a.spots, dtype=np.float64)
    sb = np.asarray(b.spots, dtype=np.float64)
    if sa.shape[0] != sb.shape[0]:
        return float("inf")
    ka = sa[np.lexsort((sa[:, 1], sa[:, 0]))][:, :2]
    kb = sb[np.lexsort((sb[:, 1], sb[:, 0]))][:, :2]
    return float(np.max(np.hypot(*(ka - kb).T)))


def generate_individual(
    seed: int,
    config: CorpusConfig,
    individual_id: str | None = None,
    existing: tuple[SpotPattern, ...] = (),
) -> SpotPattern:
    """Draw one marking; redraw on near-duplicates against `existing`.

    Deterministic in (seed, config, existing). Raises GenerationError when
    1000 consecutive draws collide with an existing pattern.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    iid = individual_id if individual_id is not None else f"ind{seed:08d}"
    last_collision = ""
    for _ in range(1000):
        pattern = _draw_pattern(rng, config, iid)
        collision = next(
            (p.individual_id for p in existing if pattern_distance(pattern, p) <= DUPLICATE_THRESHOLD),
            None,
        )
        if collision is None:
            pattern.validate()
            return pattern
        last_collision = collision
    raise GenerationError(
        f"could not draw a distinct pattern for {iid} in 1000 attempts; "
        f"kept colliding with {last_collision}"
    )


def _draw_pattern(rng: np.random.Generator, config: CorpusConfig, iid: str) -> SpotPattern:
    ax = float(rng.uniform(*config.silhouette_ax_range))
    ay = float(rng.uniform(*config.silhouette_ay_range))
    lo, hi = config.spot_count_range
    n = int(rng.integers(lo, hi + 1))
    spots = np.empty((n, 6), dtype=np.float64)
    for i in range(n):
        # Uniform over the silhouette ellipse by area.
        r = np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2 * np.pi)
        spots[i, 0] = 0.5 + ax * r * np.cos(phi)
        spots[i, 1] = 0.5 + ay * r * np.sin(phi)
        major = float(rng.uniform(*config.spot_radius_range))
        spots[i, 2] = major
        spots[i, 3] = float(rng.uniform(0.02, major))
        spots[i, 4] = float(rng.uniform(0.0, np.pi))
        spots[i, 5] = float(rng.uniform(*config.intensity_range))
    return SpotPattern(individual_id=iid, spots=spots, silhouette=(ax, ay))


def render_view(pattern: SpotPattern, params: RenderParams) -> ImageSample:
    """Rasterize a pattern under a view transform; deterministic.

    Spots render dark on the light body; the warp places the canonical
    pattern on the canvas; photometrics finish the view.
    """
    pattern.validate()
    params.validate()
    ax, ay = pattern.silhouette
    if params.occluder_area() >= 0.2 * np.pi * ax * ay:
        raise ConfigError("occluders cover >= 20% of the silhouette area")

    h, w = params.image_size
    inv = np.linalg.inv(np.asarray(params.warp, dtype=np.float64))
    uv = apply_homography(inv, pixel_grid(params.image_size))
    u, v = uv[0], uv[1]

    du = (u - 0.5) / ax
    dv = (v - 0.5) / ay
    body = du * du + dv * dv <= 1.0
    if not body.any():
        raise RenderError("silhouette warped entirely outside the frame")

    raster = np.full(h * w, BACKGROUND_LEVEL, dtype=np.float64)
    spots = np.asarray(pattern.spots, dtype=np.float64)
    dx = u[None, :] - spots[:, 0:1]
    dy = v[None, :] - spots[:, 1:2]
    cos_t = np.cos(spots[:, 4:5])
    sin_t = np.sin(spots[:, 4:5])
    ru = (dx * cos_t + dy * sin_t) / spots[:, 2:3]
    rv = (-dx * sin_t + dy * cos_t) / spots[:, 3:4]
    rho = np.sqrt(ru * ru + rv * rv)
    # Soft edge roughly one canvas pixel wide, scaled by spot size.
    r_geo = np.sqrt(spots[:, 2:3] * spots[:, 3:4])
    cover = np.clip((1.0 - rho) * r_geo / (0.75 / w), 0.0, 1.0)
    darkening = np.max(cover * spots[:, 5:6], axis=0)
    raster[body] = BODY_LEVEL - SPOT_DEPTH * darkening[body]

    pixels = finish_view(raster.reshape(h, w), params)
    return ImageSample(individual_id=pattern.individual_id, image_id="", pixels=pixels)


def canonical_view(pattern: SpotPattern, image_size: tuple[int, int] = (64, 64)) -> ImageSample:
    """The unperturbed straight-on rendering of a pattern."""
    return render_view(pattern, identity_params(image_size))


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Write a binary (P5) PGM with maxval 255."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise DataError(f"PGM writer expects 2-D uint8, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary (P5) PGM into a (H, W) uint8 array."""
    return parse_pgm(Path(path).read_bytes(), name=str(path))


def parse_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode binary (P5) PGM bytes into a (H, W) uint8 array."""
    path = name
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (missing P5 magic)")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raw = data[pos : pos + w * h]
    if len(raw) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def build_dataset(config: CorpusConfig, root: Path) -> DatasetManifest:
    """Generate a corpus on disk and return its manifest.

    Layout: `<root>/images/<individual_id>/<image_id>.pgm` plus
    `<root>/manifest.json`. Refuses to overwrite an existing corpus.
    """
    config.validate()
    root = Path(root)
    if (root / MANIFEST_NAME).exists():
        raise DataError(f"{root}: already contains a corpus (found {MANIFEST_NAME})")
    root.mkdir(parents=True, exist_ok=True)

    patterns: dict[str, SpotPattern] = {}
    images: dict[str, list[str]] = {}
    fold_of: dict[str, int] = {}
    existing: list[SpotPattern] = []
    for i in range(config.individuals):
        iid = f"ind{i:04d}"
        pattern_seed = _stream_seed(config.seed, _PATTERN_STREAM, i)
        pattern = generate_individual(
            pattern_seed, config, individual_id=iid, existing=tuple(existing)
        )
        existing.append(pattern)
        patterns[iid] = pattern
        fold_of[iid] = i % config.folds

        ids: list[str] = []
        for v in range(config.views_per_individual):
            params = _corpus_view_params(config, i, v)
            sample = render_view(pattern, params)
            image_id = f"{iid}_v{v:03d}"
            write_pgm(root / "images" / iid / f"{image_id}.pgm", sample.pixels)
            ids.append(image_id)
        images[iid] = ids

    manifest = DatasetManifest(
        root=root,
        image_size=config.image_size,
        seed=config.seed,
        folds=config.folds,
        fold_of=fold_of,
        images=images,
        patterns=patterns,
        config=config,
    )
    manifest.validate()
    _write_manifest(manifest)
    return manifest


def _corpus_view_params(config: CorpusConfig, individual_index: int, view_index: int) -> RenderParams:
    # Per-(individual, view) stream: parallel generation stays deterministic.
    rng = derive_rng(config.seed, _VIEW_STREAM, individual_index, view_index)
    return sample_view_params(
        rng,
        config.view_level,
        image_size=config.image_size,
        brightness_range=config.view_brightness_range,
        noise_sigma_max=config.view_noise_sigma_max,
        max_occluders=config.view_max_occluders,
        rotation_max_deg=config.view_rotation_max_deg,
        allow_flips=config.view_allow_flips,
        projective_max_per_px=config.view_projective_max_per_px,
        zoom_range=config.view_zoom_range,
        translation_max_px=config.view_translation_max_px,
    )


def _stream_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _write_manifest(manifest: DatasetManifest) -> None:
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "image_size": list(manifest.image_size),
        "seed": manifest.seed,
        "folds": manifest.folds,
        "fold_of": manifest.fold_of,
        "individuals": [
            {"individual_id": iid, "image_ids": manifest.images[iid]}
            for iid in sorted(manifest.images)
        ],
        "patterns": {
            iid: {
                "silhouette": list(p.silhouette),
                "spots": np.asarray(p.spots).tolist(),
            }
            for iid, p in sorted(manifest.patterns.items())
        },
        "config": _config_doc(manifest.config),
    }
    text = json.dumps(doc, sort_keys=True, indent=1)
    (manifest.root / MANIFEST_NAME).write_text(text, encoding="utf-8")


def _config_doc(config: CorpusConfig) -> dict:
    doc = asdict(config)
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = list(value)
    return doc


def load_manifest(root_or_file: Path) -> DatasetManifest:
    """Load a corpus manifest; `root_or_file` may be the root or the JSON."""
    path = Path(root_or_file)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"{path}: no manifest found")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(
            f"{path}: unsupported manifest schema {doc.get('schema_version')!r}"
        )
    cfg_doc = dict(doc["config"])
    for key, value in cfg_doc.items():
        if isinstance(value, list):
            cfg_doc[key] = tuple(value)
    config = CorpusConfig(**cfg_doc)
    patterns = {
        iid: SpotPattern(
            individual_id=iid,
            spots=np.asarray(p["spots"], dtype=np.float64),
            silhouette=tuple(p["silhouette"]),
        )
        for iid, p in doc["patterns"].items()
    }
    manifest = DatasetManifest(
        root=path.parent,
        image_size=tuple(doc["image_size"]),
        seed=doc["seed"],
        folds=doc["folds"],
        fold_of=dict(doc["fold_of"]),
        images={entry["individual_id"]: list(entry["image_ids"]) for entry in doc["individuals"]},
        patterns=patterns,
        config=config,
    )
    manifest.validate()
    return manifest


def split_by_individual(manifest: DatasetManifest, fold: int) -> tuple[list[str], list[str]]:
    """Partition individuals: the given fold is the test set, the rest train."""
    if not 0 <= fold < manifest.folds:
        raise ConfigError(f"fold {fold} outside [0, {manifest.folds})")
    test = sorted(iid for iid, f in manifest.fold_of.items() if f == fold)
    train = sorted(iid for iid, f in manifest.fold_of.items() if f != fold)
    return train, test


def load_split_arrays(
    manifest: DatasetManifest, ids: list[str]
) -> tuple[np.ndarray, np.ndarray, list[tuple[str, str]]]:
    """Load all images of the given individuals.

    Returns (pixels (N, H, W) uint8, labels (N,) of individual indices into
    `ids`, and the (individual_id, image_id) pair per row).
    """
    pixel_list: list[np.ndarray] = []
    labels: list[int] = []
    keys: list[tuple[str, str]] = []
    for idx, iid in enumerate(ids):
        for image_id in manifest.images[iid]:
            pixel_list.append(read_pgm(manifest.image_path(iid, image_id)))
            labels.append(idx)
            keys.append((iid, image_id))
    if not pixel_list:
        raise DataError("no images in split")
    return np.stack(pixel_list), np.asarray(labels, dtype=np.int64), keys
