"""Projective view transforms and photometric perturbations.

All geometry lives in a unit-square coordinate frame: a point (x, y) in
[0,1]^2 maps to pixel column x*W - 0.5 and row y*H - 0.5. A view warp is a
3x3 homography taking canonical pattern coordinates to canvas coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patternid.errors import ConfigError

# Gray level used outside the body silhouette and as warp fill.
BACKGROUND_LEVEL = 90.0
# Gray level of the unmarked body interior before photometrics.
BODY_LEVEL = 225.0

AUGMENT_LEVELS = ("extensive", "small")

# Photometric ranges at the extensive level.
BRIGHTNESS_RANGE_EXTENSIVE = (0.5, 1.5)
NOISE_SIGMA_MAX_EXTENSIVE = 8.0
MAX_OCCLUDERS_EXTENSIVE = 2
OCCLUDER_RADIUS_RANGE = (0.03, 0.08)

ROTATION_MAX_EXTENSIVE_DEG = 90.0
ROTATION_MAX_SMALL_DEG = 10.0
TRANSLATION_MAX_PX = 10.0
ZOOM_RANGE = (1.0, 1.1)
# Perturbation of the two projective coefficients, per pixel.
PROJECTIVE_MAX_PER_PX = 0.0015


@dataclass(frozen=True)
class Occluder:
    """Disk drawn over the rendered view, in canvas unit coordinates."""

    cx: float
    cy: float
    radius: float
    intensity: float  # gray level fraction in [0, 1]


@dataclass
class RenderParams:
    """Everything that turns one pattern (or stored image) into one view."""

    image_size: tuple[int, int]  # (height, width)
    warp: np.ndarray  # 3x3 homography, canonical -> canvas unit coords
    brightness_scale: float = 1.0
    noise_sigma: float = 0.0
    occluders: tuple[Occluder, ...] = ()
    flip_h: bool = False
    flip_v: bool = False
    noise_seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        m = np.asarray(self.warp, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigError(f"warp must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ConfigError("warp is not invertible (|det| <= 1e-6)")
        if not 0.0 < self.brightness_scale:
            raise ConfigError(f"brightness_scale must be > 0, got {self.brightness_scale}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def occluder_area(self) -> float:
        """Total occluder disk area in canvas units (overlaps double-counted)."""
        return float(sum(np.pi * o.radius**2 for o in self.occluders))


def identity_params(image_size: tuple[int, int] = (64, 64)) -> RenderParams:
    """Canonical view: identity warp, neutral photometrics."""
    return RenderParams(image_size=image_size, warp=np.eye(3))


def compose_warp(
    rotation_deg: float = 0.0,
    translate: tuple[float, float] = (0.0, 0.0),
    zoom: float = 1.0,
    projective: tuple[float, float] = (0.0, 0.0),
    center: tuple[float, float] = (0.5, 0.5),
) -> np.ndarray:
    """Build a homography about `center` in unit coordinates.

    Applied right-to-left: projective perturbation, zoom, rotation, then
    translation. `translate` and `projective` are in unit coordinates.
    """
    cx, cy = center
    theta = np.deg2rad(rotation_deg)
    c, s = np.cos(theta), np.sin(theta)
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    proj = np.array([[1, 0, 0], [0, 1, 0], [projective[0], projective[1], 1]], dtype=np.float64)
    scale = np.array([[zoom, 0, 0], [0, zoom, 0], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    back = np.array(
        [[1, 0, cx + translate[0]], [0, 1, cy + translate[1]], [0, 0, 1]], dtype=np.float64
    )
    return back @ rot @ scale @ proj @ to_origin


def sample_view_params(
    rng: np.random.Generator,
    level: str,
    image_size: tuple[int, int] = (64, 64),
    brightness_range: tuple[float, float] | None = None,
    noise_sigma_max: float | None = None,
    max_occluders: int | None = None,
    rotation_max_deg: float | None = None,
    allow_flips: bool | None = None,
    projective_max_per_px: float | None = None,
    zoom_range: tuple[float, float] | None = None,
    translation_max_px: float | None = None,
) -> RenderParams:
    """Draw one random view transform at the named augmentation level.

    `extensive` covers rotations up to +-90 degrees, flips, shifts up to 10
    pixels, zoom-in up to 10%, mild projective skew and the full photometric
    range. `small` is rotation up to +-10 degrees only. Keyword overrides
    narrow individual distributions (used by corpus rendering, which has its
    own view spread).
    """
    if level not in AUGMENT_LEVELS:
        raise ConfigError(f"unknown augmentation level {level!r}; expected one of {AUGMENT_LEVELS}")
    h, w = image_size

    if level == "extensive":
        if rotation_max_deg is None:
            rotation_max_deg = ROTATION_MAX_EXTENSIVE_DEG
        if allow_flips is None:
            allow_flips = True
        if projective_max_per_px is None:
            projective_max_per_px = PROJECTIVE_MAX_PER_PX
        if zoom_range is None:
            zoom_range = ZOOM_RANGE
        if translation_max_px is None:
            translation_max_px = TRANSLATION_MAX_PX
        rotation = float(rng.uniform(-rotation_max_deg, rotation_max_deg))
        flip_h = bool(rng.random() < 0.5) and allow_flips
        flip_v = bool(rng.random() < 0.5) and allow_flips
        tx = float(rng.uniform(-translation_max_px, translation_max_px)) / w
        ty = float(rng.uniform(-translation_max_px, translation_max_px)) / h
        zoom = float(rng.uniform(*zoom_range))
        pg = float(rng.uniform(-projective_max_per_px, projective_max_per_px)) * w
        ph = float(rng.uniform(-projective_max_per_px, projective_max_per_px)) * h
        if brightness_range is None:
            brightness_range = BRIGHTNESS_RANGE_EXTENSIVE
        if noise_sigma_max is None:
            noise_sigma_max = NOISE_SIGMA_MAX_EXTENSIVE
        if max_occluders is None:
            max_occluders = MAX_OCCLUDERS_EXTENSIVE
    else:  # small
        rotation = float(rng.uniform(-ROTATION_MAX_SMALL_DEG, ROTATION_MAX_SMALL_DEG))
        flip_h = flip_v = False
        tx = ty = 0.0
        zoom = 1.0
        pg = ph = 0.0
        brightness_range = (1.0, 1.0)
        noise_sigma_max = 0.0
        max_occluders = 0

    brightness = float(rng.uniform(*brightness_range))
    sigma = float(rng.uniform(0.0, noise_sigma_max)) if noise_sigma_max > 0 else 0.0

    occluders: list[Occluder] = []
    if max_occluders > 0:
        n_occ = int(rng.choice(np.arange(max_occluders + 1), p=_occ_probs(max_occluders)))
        for _ in range(n_occ):
            occluders.append(
                Occluder(
                    cx=float(rng.uniform(0.1, 0.9)),
                    cy=float(rng.uniform(0.1, 0.9)),
                    radius=float(rng.uniform(*OCCLUDER_RADIUS_RANGE)),
                    intensity=float(rng.uniform(0.0, 1.0)),
                )
            )

    params = RenderParams(
        image_size=image_size,
        warp=compose_warp(rotation, (tx, ty), zoom, (pg, ph)),
        brightness_scale=brightness,
        noise_sigma=sigma,
        occluders=tuple(occluders),
        flip_h=flip_h,
        flip_v=flip_v,
        noise_seed=int(rng.integers(0, 2**63)),
    )
    params.validate()
    return params


def _occ_probs(max_occluders: int) -> np.ndarray:
    # Most views unoccluded; tail thins out for heavier occlusion counts.
    weights = np.array([2.0] + [1.0 / (i + 1) for i in range(max_occluders)])
    return weights / weights.sum()


def pixel_grid(image_size: tuple[int, int]) -> np.ndarray:
    """Homogeneous canvas unit coordinates of all pixel centers, shape (3, H*W)."""
    h, w = image_size
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    xs = (cols.ravel() + 0.5) / w
    ys = (rows.ravel() + 0.5) / h
    return np.stack([xs, ys, np.ones(h * w)], axis=0)


def apply_homography(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to homogeneous points (3, N) -> cartesian (2, N)."""
    mapped = matrix @ points
    return mapped[:2] / mapped[2]


def finish_view(raster: np.ndarray, params: RenderParams) -> np.ndarray:
    """Apply brightness, occluders, noise and flips; clamp to uint8.

    `raster` is a float (H, W) gray image on the [0, 255] scale.
    """
    h, w = params.image_size
    out = raster * params.brightness_scale

    if params.occluders:
        grid = pixel_grid(params.image_size)
        xs, ys = grid[0].reshape(h, w), grid[1].reshape(h, w)
        for occ in params.occluders:
            d = np.hypot(xs - occ.cx, ys - occ.cy)
            # Soft half-pixel edge keeps the disk boundary alias-free.
            cover = np.clip((occ.radius - d) / (0.5 / w) * 0.5 + 0.5, 0.0, 1.0)
            out = out * (1 - cover) + cover * (255.0 * occ.intensity)

    if params.noise_sigma > 0:
        noise_rng = np.random.default_rng(params.noise_seed)
        out = out + noise_rng.normal(0.0, params.noise_sigma, size=out.shape)

    if params.flip_h:
        out = out[:, ::-1]
    if params.flip_v:
        out = out[::-1, :]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def warp_image(image: np.ndarray, params: RenderParams) -> np.ndarray:
    """Augment a stored grayscale view: warp the pixels, then photometrics.

    Treats the input image as the canonical pattern; out-of-frame samples
    take the background fill.
    """
    return warp_batch(np.asarray(image)[None, :, :], [params])[0]


def warp_batch(images: np.ndarray, params_list: list[RenderParams]) -> np.ndarray:
    """Warp + photometrically finish a batch of equally sized gray images."""
    for p in params_list:
        p.validate()
    n, h, w = images.shape
    if len(params_list) != n:
        raise ConfigError(f"{n} images but {len(params_list)} parameter sets")
    grid = pixel_grid((h, w))
    invs = np.stack(
        [np.linalg.inv(np.asarray(p.warp, dtype=np.float64)) for p in params_list], axis=0
    )
    mapped = np.einsum("bij,jn->bin", invs, grid)
    uv = mapped[:, :2] / mapped[:, 2:3]

    imgs = images.astype(np.float64)
    px = uv[:, 0] * w - 0.5
    py = uv[:, 1] * h - 0.5
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    valid = (px > -1.0) & (px < w) & (py > -1.0) & (py < h)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    bidx = np.arange(n)[:, None]
    top = imgs[bidx, y0c, x0c] * (1 - fx) + imgs[bidx, y0c, x1c] * fx
    bot = imgs[bidx, y1c, x0c] * (1 - fx) + imgs[bidx, y1c, x1c] * fx
    sampled = top * (1 - fy) + bot * fy
    sampled = np.where(valid, sampled, BACKGROUND_LEVEL).reshape(n, h, w)

    out = np.empty((n, h, w), dtype=np.uint8)
    for i, p in enumerate(params_list):
        out[i] = finish_view(sampled[i], p)
    return out


def derive_rng(*entropy: int) -> np.random.Generator:
    """Deterministic generator from a tuple of integer entropy terms."""
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))
