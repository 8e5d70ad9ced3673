"""Deterministic procedural scene renderer, label oracle, and dataset factory.

A scene is a foreshortened base disc with a crust ring and a set of colored
ingredient primitives, drawn on a dark background. The geometry is chosen so
every label can be recovered from pixels in closed form:

* camera angle squashes the disc vertically by cos(angle), so the fitted
  ellipse aspect ratio encodes the angle;
* zoom scale multiplies the disc radius linearly, so the major axis encodes
  the scale;
* x/y shift translates the disc, so the centroid encodes the shifts;
* every ingredient category owns one exact RGB color, so presence is a
  color-mask count.

Transform order: foreshorten (squash), then scale, then shift; the dataset
manifest header records this order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import (
    INGREDIENT_COUNT,
    SHIFT_FRAME,
    TAXONOMY,
    TAXONOMY_VERSION,
    VIEW_RANGES,
    AttributeVector,
    ConfigError,
    IngredientVector,
    RangeViolation,
    ViewAttributes,
)

SUPPORTED_RESOLUTIONS = (32, 64, 128, 256)

# Disc geometry: semi-axis = DISC_RADIUS_FRAC * scale * resolution.
DISC_RADIUS_FRAC = 0.14
SUPERSAMPLE = 4
CRUST_INNER = 0.84
INSTANCES_PER_CATEGORY = 3

DISC_COLOR = np.array([225, 190, 140], dtype=np.float64)
CRUST_COLOR = np.array([190, 140, 90], dtype=np.float64)

# Oracle constants.
FOREGROUND_THRESHOLD = 100.0 / 255.0  # on the max RGB channel
COLOR_MATCH_TOL = 40.0  # uint8 max-norm distance for ingredient masks
PRESENCE_SCALE = 1.15  # visible-area fraction that saturates the estimate
PRESENCE_THRESHOLD = 0.18  # estimate level that reads as "present"
NEIGHBOR_OCCLUSION = 0.15  # area lost to each present later-drawn sector neighbor
SELF_OVERLAP = 0.24  # same-category overlap strength, grows with presence value
MIN_EXPECTED_PX = 16.0  # pixel floor (at 64^2) against stray-blend false positives

# Calibrated fraction of a category's naive area that survives same-category
# instance overlap, measured per shape on large unforeshortened discs.
OVERLAP_FACTOR = {
    "bar": 0.813,
    "diamond": 0.78,
    "ellipse": 0.785,
    "triangle": 0.79,
    "disc": 0.78,
    "square": 0.78,
    "hexagon": 0.785,
    "crescent": 0.79,
}
# Pixels lost to anti-aliased borders: effective half-extents shrink by this
# many pixels on each axis before the exact color match succeeds.
EDGE_LOSS_PX = 0.0


class AnalysisFailure(RuntimeError):
    """The oracle could not find the disc (blank or fully out-of-frame)."""


@dataclass(frozen=True)
class SceneSpec:
    """Complete ground truth for one rendered scene.

    ``appearance_seed`` drives everything not captured by the attributes:
    base-disc hue, crust texture phase, placement jitter, and background.
    """

    ingredients: IngredientVector
    view: ViewAttributes
    appearance_seed: int

    def attributes(self) -> AttributeVector:
        return AttributeVector(self.ingredients, self.view)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3 floats in [0, 1], quantized to the uint8 grid
    spec: SceneSpec

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


def _seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    counter = (list(stream) + [0, 0, 0, 0])[:4]
    return np.random.Generator(
        np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF), counter=counter)
    )


# ---------------------------------------------------------------------------
# Primitive shape masks (unit coordinates, half-extent 1)
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Shapes are kept compact (no thin features) so most of each instance
    # rasterizes to fully covered pixels the color oracle can match exactly.
    if shape == "disc":
        return p * p + q * q <= 1.0
    if shape == "crescent":
        outer = p * p + q * q <= 1.0
        inner = (p - 0.62) ** 2 + q * q <= 0.62 ** 2
        return outer & ~inner
    if shape == "square":
        return np.maximum(np.abs(p), np.abs(q)) <= 0.82
    if shape == "triangle":
        # Equilateral, apex up, inscribed in the unit circle.
        return (q <= 0.5) & (q >= -1.0 + np.abs(p) * math.sqrt(3.0))
    if shape == "hexagon":
        return (
            (np.abs(p) <= 0.87)
            & (np.abs(0.5 * p + 0.866 * q) <= 0.87)
            & (np.abs(0.5 * p - 0.866 * q) <= 0.87)
        )
    if shape == "bar":
        return (np.abs(p) <= 0.85) & (np.abs(q) <= 0.55)
    if shape == "diamond":
        return np.abs(p) + np.abs(q) <= 1.1
    if shape == "ellipse":
        return (p / 1.15) ** 2 + (q / 0.72) ** 2 <= 1.0
    raise ValueError(f"unknown primitive shape {shape!r}")


def _unit_area(shape: str) -> float:
    """Area of the unit-coordinate shape mask, in units of half-extent^2."""
    n = 512
    c = (np.arange(n) + 0.5) / n * 3.0 - 1.5
    p, q = np.meshgrid(c, c)
    return float(_shape_mask(shape, p, q).mean() * 9.0)


_UNIT_AREAS = {p.shape: _unit_area(p.shape) for p in TAXONOMY}


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _disc_geometry(view: ViewAttributes, resolution: int) -> tuple[float, float, float, float]:
    """Return (cx, cy, a, b): disc center and semi-axes in pixel units."""
    a = DISC_RADIUS_FRAC * view.scale * resolution
    b = a * math.cos(math.radians(view.angle))
    cx = resolution / 2.0 + view.dx * resolution / SHIFT_FRAME
    cy = resolution / 2.0 + view.dy * resolution / SHIFT_FRAME
    return cx, cy, a, b


def _placement(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-instance slot positions on the unit disc plus rotations.

    Each category owns one angular sector (jittered global rotation), with
    INSTANCES_PER_CATEGORY slots inside it: one inner, the rest outer. Only
    index-adjacent categories can ever share a boundary, which both bounds
    occlusion and lets the palette guarantee blend separability.
    """
    n_cat = len(TAXONOMY)
    rot0 = rng.uniform(0, 2 * math.pi)
    sector = 2 * math.pi / n_cat
    rho = np.empty(n_cat * INSTANCES_PER_CATEGORY)
    phi = np.empty_like(rho)
    for c in range(n_cat):
        center = rot0 + c * sector
        offsets = np.linspace(-0.22, 0.22, INSTANCES_PER_CATEGORY) * sector
        base_rho = np.array([0.62, 0.34, 0.62][:INSTANCES_PER_CATEGORY])
        sl = slice(c * INSTANCES_PER_CATEGORY, (c + 1) * INSTANCES_PER_CATEGORY)
        phi[sl] = center + offsets + rng.uniform(-0.02, 0.02, INSTANCES_PER_CATEGORY)
        rho[sl] = base_rho * rng.uniform(0.98, 1.02, INSTANCES_PER_CATEGORY)
    # One orientation per category and scene: instances of a category stay
    # aligned, which keeps their mutual overlap (and thus the visible-area
    # calibration) stable across seeds.
    rot = np.repeat(rng.uniform(0, 2 * math.pi, n_cat), INSTANCES_PER_CATEGORY)
    return rho, phi, rot


def render_scene(spec: SceneSpec, resolution: int) -> LabeledImage:
    """Render one scene; a pure function of (spec, resolution).

    Ingredient values may be fractional (traversal rendering): a value v
    places v * INSTANCES_PER_CATEGORY worth of primitive area, the last
    instance shrunk to the fractional remainder.
    """
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigError(
            f"resolution {resolution} unsupported; expected one of {SUPPORTED_RESOLUTIONS}"
        )

    rng = _seeded_rng(spec.appearance_seed, 0)
    ss = SUPERSAMPLE
    n = resolution * ss
    coord = (np.arange(n) + 0.5) / ss  # pixel units at full resolution
    gx, gy = np.meshgrid(coord, coord)

    # Background: dark seeded color (max channel kept well under the
    # oracle's foreground threshold).
    hue = rng.uniform(0, 1)
    sat = rng.uniform(0.2, 0.6)
    val = rng.uniform(0.10, 0.25)
    bg = np.array(_hsv_to_rgb(hue, sat, val)) * 255.0
    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = bg

    cx, cy, a, b = _disc_geometry(spec.view, resolution)
    u = (gx - cx) / a
    v = (gy - cy) / b
    r2 = u * u + v * v

    disc_color = DISC_COLOR + rng.uniform(-8, 8, 3)
    img[r2 <= 1.0] = disc_color

    # Crust ring with a seeded angular texture.
    ring = (r2 <= 1.0) & (r2 >= CRUST_INNER ** 2)
    theta = np.arctan2(v, u)
    phase = rng.uniform(0, 2 * math.pi)
    texture = 1.0 + 0.10 * np.sin(6.0 * theta + phase)
    crust = CRUST_COLOR[None, :] * texture[ring, None]
    img[ring] = np.clip(crust, 0, 255)

    rho, phi, rot = _placement(rng)
    slot_x = rho * np.cos(phi)
    slot_y = rho * np.sin(phi)

    for prim in TAXONOMY:
        value = spec.ingredients.values[prim.index]
        mass = value * INSTANCES_PER_CATEGORY
        n_full = int(mass + 1e-9)
        fracs = [1.0] * n_full
        remainder = mass - n_full
        if remainder > 1e-6:
            fracs.append(remainder)
        color = np.asarray(prim.color, dtype=np.float64)
        for j, frac in enumerate(fracs):
            s = prim.index * INSTANCES_PER_CATEGORY + j
            icx = cx + a * slot_x[s]
            icy = cy + b * slot_y[s]
            half = prim.size_frac * a * math.sqrt(frac)
            ca, sa = math.cos(rot[s]), math.sin(rot[s])
            # Surface coordinates: rotate, with the vertical axis
            # foreshortened together with the disc.
            px = (gx - icx) / half
            py = (gy - icy) / (half * (b / a))
            pr = ca * px + sa * py
            qr = -sa * px + ca * py
            mask = _shape_mask(prim.shape, pr, qr)
            img[mask] = color

    # Box-downsample the supersampled canvas, then quantize to the uint8
    # grid so rendering and lossless 8-bit storage are bit-identical.
    img = img.reshape(resolution, ss, resolution, ss, 3).mean(axis=(1, 3))
    img = np.round(img) / 255.0
    return LabeledImage(pixels=img.astype(np.float32), spec=spec)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


# ---------------------------------------------------------------------------
# Closed-form label oracle
# ---------------------------------------------------------------------------

def _dilate(mask: np.ndarray) -> np.ndarray:
    """8-neighborhood binary dilation."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    return out


def _profile_fit(profile: np.ndarray, valid: np.ndarray) -> tuple[float, float, float] | None:
    """Fit squared chord lengths to the ellipse profile law.

    For a filled ellipse, the chord length at offset t from the center obeys
    L(t)^2 = 4 * semi_perp^2 * (1 - (t - center)^2 / semi_along^2), a
    quadratic in t. Returns (center, semi_along, semi_perp) or None.
    """
    t = np.nonzero(valid)[0].astype(np.float64) + 0.5
    if t.size < 6:
        return None
    y = profile[valid] ** 2
    c2, c1, c0 = np.polyfit(t, y, 2, w=profile[valid])
    if c2 >= -1e-9:
        return None
    center = -c1 / (2.0 * c2)
    perp_sq = (c0 - c2 * center * center) / 4.0
    if perp_sq <= 0:
        return None
    semi_perp = math.sqrt(perp_sq)
    semi_along = math.sqrt(-4.0 * perp_sq / c2)
    return center, semi_along, semi_perp


def analyze_image(pixels: np.ndarray) -> tuple[IngredientVector, ViewAttributes]:
    """Recover labels from rendered pixels, independent of any learned model.

    The foreground mask of a scene is a filled (possibly clipped) ellipse.
    Column sums of the mask are vertical chords and row sums horizontal
    chords; fitting each profile to the ellipse chord law recovers center
    and semi-axes using only chords that stay inside the frame, so partial
    clipping degrades gracefully. Aspect ratio then encodes the camera
    angle, the major axis the zoom scale, and the center the shifts.
    Ingredient presence is an exact color-mask count normalized by the
    expected primitive area.

    Raises :class:`AnalysisFailure` when no disc is visible.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
        raise RangeViolation(f"expected square HxWx3 pixels, got shape {pixels.shape}")
    res = pixels.shape[0]
    img = np.asarray(pixels, dtype=np.float64)
    maxc = img.max(axis=2)
    img8 = np.round(img * 255.0)

    # Hard color matches per category plus a subpixel refinement: pixels
    # bordering a hard match are coverage blends of the category color with
    # the disc, so 1 - dist/D recovers their coverage fraction exactly.
    category_masks = []
    category_counts = []
    for prim in TAXONOMY:
        color = np.asarray(prim.color, dtype=np.float64)
        dist = np.abs(img8 - color).max(axis=2)
        hard = dist <= COLOR_MATCH_TOL
        category_masks.append(hard)
        d_disc = float(np.abs(color - DISC_COLOR).max())
        near = _dilate(hard) & ~hard & (dist <= 0.75 * d_disc)
        soft = np.clip(1.0 - dist[near] / d_disc, 0.0, 1.0).sum()
        category_counts.append(float(hard.sum()) + float(soft))

    # Background level from the image corners (the disc cannot cover all
    # four corners anywhere in the supported attribute ranges).
    corners = np.concatenate([
        maxc[:3, :3].ravel(), maxc[:3, -3:].ravel(),
        maxc[-3:, :3].ravel(), maxc[-3:, -3:].ravel(),
    ])
    bg_level = float(np.median(corners))
    # Brightness ramp calibrated on the darkest crust the renderer can
    # produce, so crust interiors saturate at weight 1 and rim pixels get
    # approximately their coverage fraction. Primitive interiors darker
    # than the crust are restored via their exact color masks.
    crust_floor = 0.90 * CRUST_COLOR.max() / 255.0
    denom = max(crust_floor - bg_level, 0.15)
    weights = np.clip((maxc - bg_level) / denom, 0.0, 1.0)
    weights[maxc < FOREGROUND_THRESHOLD * 0.85] = 0.0
    for mask in category_masks:
        weights[mask] = 1.0

    if float(weights.sum()) < 12.0 * (res / 64.0) ** 2:
        raise AnalysisFailure("no disc found in image")

    col = weights.sum(axis=0)
    row = weights.sum(axis=1)
    # A chord is usable only when it does not touch the frame border.
    col_valid = (col > 0.6) & (weights[0, :] < 0.02) & (weights[-1, :] < 0.02)
    row_valid = (row > 0.6) & (weights[:, 0] < 0.02) & (weights[:, -1] < 0.02)

    col_fit = _profile_fit(col, col_valid)  # (cx, a, b)
    row_fit = _profile_fit(row, row_valid)  # (cy, b, a)
    if col_fit is None and row_fit is None:
        raise AnalysisFailure("disc profile could not be fitted")

    coords = np.arange(res, dtype=np.float64) + 0.5
    n_c = int(col_valid.sum())
    n_r = int(row_valid.sum())

    # Unclipped chord midpoints locate the orthogonal center coordinate.
    cx_parts, cy_parts, a_parts, b_parts = [], [], [], []
    if col_fit is not None:
        cx_f, a_f, b_f = col_fit
        cx_parts.append((n_c, cx_f))
        a_parts.append((n_c, a_f))
        b_parts.append((n_c, b_f))
        mid_y = (weights[:, col_valid] * coords[:, None]).sum(axis=0) / col[col_valid]
        cy_parts.append((n_c, float(np.average(mid_y, weights=col[col_valid]))))
    if row_fit is not None:
        cy_f, b_f, a_f = row_fit
        cy_parts.append((n_r, cy_f))
        a_parts.append((n_r, a_f))
        b_parts.append((n_r, b_f))
        mid_x = (weights[row_valid, :] * coords[None, :]).sum(axis=1) / row[row_valid]
        cx_parts.append((n_r, float(np.average(mid_x, weights=row[row_valid]))))

    def _combine(parts):
        total_w = sum(w for w, _ in parts)
        return sum(w * v for w, v in parts) / total_w

    cx, cy = _combine(cx_parts), _combine(cy_parts)
    a, b = _combine(a_parts), _combine(b_parts)

    # When the disc is fully inside the frame the summed weights measure
    # its area to subpixel accuracy, giving a second, sharper estimate of
    # the minor axis: b = area / (pi * a).
    border = float(
        weights[0, :].sum() + weights[-1, :].sum()
        + weights[:, 0].sum() + weights[:, -1].sum()
    )
    if border < 0.5:
        b_area = float(weights.sum()) / (math.pi * a)
        b = 0.5 * (b + b_area)

    aspect = min(b / a, 1.0) if a > 0 else 1.0
    angle = math.degrees(math.acos(min(max(aspect, 0.0), 1.0)))
    scale = a / (DISC_RADIUS_FRAC * res)
    dx = (cx - res / 2.0) * SHIFT_FRAME / res
    dy = (cy - res / 2.0) * SHIFT_FRAME / res

    view = ViewAttributes(
        angle=float(np.clip(angle, *VIEW_RANGES["angle"])),
        scale=float(np.clip(scale, *VIEW_RANGES["scale"])),
        dx=float(np.clip(dx, *VIEW_RANGES["dx"])),
        dy=float(np.clip(dy, *VIEW_RANGES["dy"])),
    )

    px_floor = MIN_EXPECTED_PX * (res / 64.0) ** 2
    expected = [max(_expected_visible(prim, a, b), px_floor) for prim in TAXONOMY]
    raw = [
        px / (PRESENCE_SCALE * exp) for px, exp in zip(category_counts, expected)
    ]
    # Second pass: categories are drawn in index order into adjacent
    # sectors, so each category loses area to later-drawn sector neighbors.
    # Compensate in proportion to the first-pass neighbor estimates, then
    # invert the quadratic visible-area law caused by same-category overlap
    # growing with the presence value.
    n_cat = len(TAXONOMY)
    estimates = []
    for prim, px, exp in zip(TAXONOMY, category_counts, expected):
        c = prim.index
        occluders = [n for n in ((c + 1) % n_cat, (c - 1) % n_cat) if n > c]
        keep = 1.0
        for n in occluders:
            keep *= 1.0 - NEIGHBOR_OCCLUSION * min(max(raw[n], 0.0), 1.0)
        est = min(px / (PRESENCE_SCALE * exp * keep), 1.0)
        s = SELF_OVERLAP
        est = (1.0 - math.sqrt(max(1.0 - 4.0 * s * (1.0 - s) * est, 0.0))) / (2.0 * s)
        estimates.append(min(est, 1.0))
    return IngredientVector(tuple(estimates)), view


def _expected_visible(prim, a: float, b: float) -> float:
    """Expected matched pixel count for a fully present category."""
    b = max(b, 1e-6)
    sx = prim.size_frac * a
    sy = prim.size_frac * b
    naive = INSTANCES_PER_CATEGORY * _UNIT_AREAS[prim.shape] * sx * sy
    erosion = max(1.0 - EDGE_LOSS_PX / max(sx, 1e-6), 0.05) * max(
        1.0 - EDGE_LOSS_PX / max(sy, 1e-6), 0.05
    )
    return max(naive * OVERLAP_FACTOR[prim.shape] * erosion, 1.0)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

VIEW_DISTRIBUTIONS = ("uniform", "natural")

# Natural mode mimics a photo corpus whose subjects sit near the canonical
# view: a truncated Gaussian per attribute, strictly narrower than uniform.
_NATURAL_PARAMS = {
    "angle": (18.0, 9.0),
    "scale": (1.35, 0.22),
    "dx": (0.0, 4.5),
    "dy": (0.0, 4.5),
}


def sample_scene_spec(
    seed: int,
    index: int,
    view_distribution: str = "uniform",
    ingredient_p: float = 0.3,
) -> SceneSpec:
    """Deterministic per-index scene sampling (counter-based, order-free)."""
    rng = _seeded_rng(seed, 1, index)
    ingredients = IngredientVector(
        tuple((rng.uniform(0, 1, INGREDIENT_COUNT) < ingredient_p).astype(float))
    )
    fields = {}
    for name in ("angle", "scale", "dx", "dy"):
        lo, hi = VIEW_RANGES[name]
        if view_distribution == "uniform":
            fields[name] = float(rng.uniform(lo, hi))
        elif view_distribution == "natural":
            mu, sigma = _NATURAL_PARAMS[name]
            value = rng.normal(mu, sigma)
            for _ in range(100):
                if lo <= value <= hi:
                    break
                value = rng.normal(mu, sigma)
            fields[name] = float(np.clip(value, lo, hi))
        else:
            raise ConfigError(
                f"view_distribution {view_distribution!r} not in {VIEW_DISTRIBUTIONS}"
            )
    appearance_seed = int(rng.integers(0, 2 ** 63 - 1))
    return SceneSpec(ingredients, ViewAttributes(**fields), appearance_seed)


def _pixel_sha(pixels: np.ndarray) -> str:
    img8 = np.round(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    return hashlib.sha256(img8.tobytes()).hexdigest()


def _spec_record(index: int, spec: SceneSpec, filename: str, pixel_sha: str) -> dict:
    return {
        "index": index,
        "file": filename,
        "ingredients": [int(v) if v in (0.0, 1.0) else v for v in spec.ingredients.values],
        "angle": spec.view.angle,
        "scale": spec.view.scale,
        "dx": spec.view.dx,
        "dy": spec.view.dy,
        "appearance_seed": spec.appearance_seed,
        "pixel_sha": pixel_sha,
    }


def _render_one(args) -> tuple[int, dict]:
    index, seed, resolution, view_distribution, ingredient_p, out_dir = args
    spec = sample_scene_spec(seed, index, view_distribution, ingredient_p)
    image = render_scene(spec, resolution)
    filename = f"img_{index:06d}.png"
    save_png(image.pixels, Path(out_dir) / filename)
    return index, _spec_record(index, spec, filename, _pixel_sha(image.pixels))


def save_png(pixels: np.ndarray, path: Path | str) -> None:
    img8 = np.round(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(path, format="PNG")


def load_png(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass(frozen=True)
class DatasetManifest:
    resolution: int
    count: int
    taxonomy_version: str
    view_distribution: str
    seed: int
    ingredient_p: float
    checksum: str
    records: tuple[dict, ...]
    root: Path

    @property
    def header(self) -> dict:
        return {
            "kind": "dataset-manifest",
            "version": 1,
            "taxonomy": self.taxonomy_version,
            "resolution": self.resolution,
            "count": self.count,
            "view_distribution": self.view_distribution,
            "seed": self.seed,
            "ingredient_p": self.ingredient_p,
            "transform_order": "squash-scale-shift",
            "ranges": {k: list(v) for k, v in VIEW_RANGES.items()},
            "shift_frame": SHIFT_FRAME,
            "checksum": self.checksum,
        }


def _dataset_checksum(records: Sequence[dict]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec["pixel_sha"].encode())
        h.update(json.dumps(
            {k: rec[k] for k in ("index", "ingredients", "angle", "scale", "dx", "dy")},
            sort_keys=True,
        ).encode())
    return h.hexdigest()


def generate_dataset(
    n: int,
    resolution: int,
    seed: int,
    out_dir: Path | str,
    view_distribution: str = "uniform",
    ingredient_p: float = 0.3,
    workers: int = 1,
) -> DatasetManifest:
    """Render ``n`` labeled scenes and write images plus a manifest.

    Per-sample seeds are derived by counter, so the manifest is byte
    identical for any worker count.
    """
    if n < 1:
        raise ConfigError(f"n={n} must be >= 1")
    if view_distribution not in VIEW_DISTRIBUTIONS:
        raise ConfigError(f"view_distribution {view_distribution!r} not in {VIEW_DISTRIBUTIONS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(i, seed, resolution, view_distribution, ingredient_p, str(out)) for i in range(n)]
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_render_one, jobs, chunksize=32)
    else:
        results = [_render_one(job) for job in jobs]
    results.sort(key=lambda item: item[0])
    records = tuple(rec for _, rec in results)

    checksum = _dataset_checksum(records)
    manifest = DatasetManifest(
        resolution=resolution,
        count=n,
        taxonomy_version=TAXONOMY_VERSION,
        view_distribution=view_distribution,
        seed=seed,
        ingredient_p=ingredient_p,
        checksum=checksum,
        records=records,
        root=out,
    )
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(manifest.header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != "dataset-manifest":
        raise ConfigError(f"{path} is not a dataset manifest")
    header = lines[0]
    if header["taxonomy"] != TAXONOMY_VERSION:
        raise ConfigError(
            f"manifest taxonomy {header['taxonomy']!r} does not match {TAXONOMY_VERSION!r}"
        )
    records = tuple(lines[1:])
    if len(records) != header["count"]:
        raise ConfigError(
            f"manifest lists {header['count']} samples but has {len(records)} records"
        )
    return DatasetManifest(
        resolution=header["resolution"],
        count=header["count"],
        taxonomy_version=header["taxonomy"],
        view_distribution=header["view_distribution"],
        seed=header["seed"],
        ingredient_p=header.get("ingredient_p", 0.3),
        checksum=header["checksum"],
        records=records,
        root=path.parent,
    )


def verify_manifest(manifest: DatasetManifest) -> bool:
    """Recompute the content checksum from stored images."""
    records = []
    for rec in manifest.records:
        pixels = load_png(manifest.root / rec["file"])
        fresh = dict(rec)
        fresh["pixel_sha"] = _pixel_sha(pixels)
        records.append(fresh)
    return _dataset_checksum(records) == manifest.checksum


class SceneDataset:
    """Array-backed access to a generated dataset for training and judging.

    Images are cached as uint8 to keep 10k-sample datasets comfortably in
    memory; batches convert to float on the way out.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.resolution = manifest.resolution
        self._images: np.ndarray | None = None
        recs = manifest.records
        self.ingredients = np.array([r["ingredients"] for r in recs], dtype=np.float32)
        self.views = np.array(
            [[r["angle"], r["scale"], r["dx"], r["dy"]] for r in recs], dtype=np.float32
        )
        self.pseudo_views = None
        if recs and "pseudo_view" in recs[0]:
            self.pseudo_views = np.array([r["pseudo_view"] for r in recs], dtype=np.float32)

    def __len__(self) -> int:
        return self.manifest.count

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            imgs = np.empty((len(self), self.resolution, self.resolution, 3), dtype=np.uint8)
            for i, rec in enumerate(self.manifest.records):
                imgs[i] = np.round(load_png(self.manifest.root / rec["file"]) * 255.0)
            self._images = imgs
        return self._images

    def image_batch(self, indices: Sequence[int]) -> np.ndarray:
        """Float32 images in [0, 1], shape (B, H, W, 3)."""
        return self.images[np.asarray(indices)].astype(np.float32) / 255.0

    def normalized_views(self, pseudo: bool = False) -> np.ndarray:
        """Views mapped onto [-1, 1] per field, shape (N, 4)."""
        src = self.pseudo_views if pseudo else self.views
        if src is None:
            raise ConfigError("dataset has no pseudo view labels; run pseudo-labeling first")
        out = np.empty_like(src)
        for j, name in enumerate(("angle", "scale", "dx", "dy")):
            lo, hi = VIEW_RANGES[name]
            out[:, j] = 2.0 * (src[:, j] - lo) / (hi - lo) - 1.0
        return out


def attach_pseudo_views(manifest: DatasetManifest, pseudo: np.ndarray) -> DatasetManifest:
    """Return a manifest whose records carry imputed view labels.

    Ground-truth views stay untouched in their original fields for audit.
    """
    if pseudo.shape != (manifest.count, 4):
        raise RangeViolation(f"pseudo views shape {pseudo.shape}, expected ({manifest.count}, 4)")
    records = []
    for rec, row in zip(manifest.records, pseudo):
        new = dict(rec)
        new["pseudo_view"] = [float(x) for x in row]
        records.append(new)
    return replace(manifest, records=tuple(records))
