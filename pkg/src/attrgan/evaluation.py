"""Quantitative judgments: FID, mAP, RMSE, conditional metrics, dependency
analysis, and traversal grids.

Feature extraction for FID uses the penultimate features of the trained
ingredient classifier by default (pluggable); desk-scale FID values are
internally comparable only, so every report also carries the real-vs-real
floor and names its extractor.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import (
    INGREDIENT_NAMES,
    VIEW_COUNT,
    VIEW_NAMES,
    VIEW_RANGES,
    NumericError,
    RangeViolation,
)
from .networks import Generator
from .regularizers import (
    IngredientClassifier,
    ViewRegressor,
    predict_ingredients,
    predict_view_batch,
    _to_torch_images,
)

ATTR_NAMES = tuple(INGREDIENT_NAMES) + VIEW_NAMES


# ---------------------------------------------------------------------------
# Frechet distance and FID
# ---------------------------------------------------------------------------

def _psd_sqrt_trace(product: np.ndarray, clip_floor: float = -1e-8) -> float:
    """Trace of the PSD square root via eigendecomposition of the
    symmetrized product; small negative eigenvalues are clipped, larger
    ones are a numeric error."""
    sym = (product + product.T) / 2.0
    eigvals = np.linalg.eigvalsh(sym)
    if eigvals.min() < clip_floor * max(1.0, abs(eigvals.max())):
        raise NumericError(
            f"matrix square root failed: eigenvalue {eigvals.min():.3e} below "
            f"clip floor"
        )
    return float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())


def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray,
                     mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) for Gaussian fits.

    Tr((S1 S2)^(1/2)) is computed as Tr((S1^(1/2) S2 S1^(1/2))^(1/2)), which
    is symmetric PSD for PSD inputs.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise RangeViolation("mean/covariance shapes do not match")

    s1_eigvals, s1_vecs = np.linalg.eigh((sigma1 + sigma1.T) / 2.0)
    if s1_eigvals.min() < -1e-8 * max(1.0, abs(s1_eigvals.max())):
        raise NumericError(f"covariance not PSD: eigenvalue {s1_eigvals.min():.3e}")
    root1 = s1_vecs @ np.diag(np.sqrt(np.clip(s1_eigvals, 0.0, None))) @ s1_vecs.T
    trace_root = _psd_sqrt_trace(root1 @ sigma2 @ root1)

    value = float(
        np.sum((mu1 - mu2) ** 2) + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_root
    )
    if value < -1e-6:
        raise NumericError(f"Frechet distance {value:.3e} below tolerance")
    return max(value, 0.0)


class FeatureExtractor:
    """Frozen embedding network mapping images to d-dim features."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int, name: str):
        self.fn = fn
        self.dim = dim
        self.name = name

    def __call__(self, images: np.ndarray) -> np.ndarray:
        feats = self.fn(images)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise RangeViolation(f"extractor returned shape {feats.shape}, "
                                 f"expected (B, {self.dim})")
        return feats

    @classmethod
    def from_classifier(cls, classifier: IngredientClassifier) -> "FeatureExtractor":
        def fn(images: np.ndarray) -> np.ndarray:
            outs = []
            with torch.no_grad():
                for start in range(0, len(images), 256):
                    batch = _to_torch_images(images[start:start + 256])
                    outs.append(classifier.features(batch).cpu().numpy())
            return np.concatenate(outs, axis=0)

        return cls(fn, classifier.backbone.feature_dim, "ingredient-classifier-penultimate")


def gaussian_fit(features: np.ndarray, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    if eps > 0:
        sigma = sigma + eps * np.eye(sigma.shape[0])
    return mu, sigma


def fid(extractor: FeatureExtractor, real_images: np.ndarray,
        fake_images: np.ndarray, warn: Callable[[str], None] | None = None,
        eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of extracted features.

    A small eps * I regularizer is always recorded on the covariances to
    guard near-degenerate fits.
    """
    for name, batch in (("real", real_images), ("fake", fake_images)):
        if len(batch) < 2 * extractor.dim and warn is not None:
            warn(f"fid: only {len(batch)} {name} samples for {extractor.dim}-dim "
                 f"features; estimate will be noisy")
    mu_r, sig_r = gaussian_fit(extractor(real_images), eps)
    mu_f, sig_f = gaussian_fit(extractor(fake_images), eps)
    return frechet_distance(mu_r, sig_r, mu_f, sig_f)


def fid_from_features(real_features: np.ndarray, fake_features: np.ndarray,
                      eps: float = 1e-6) -> float:
    mu_r, sig_r = gaussian_fit(real_features, eps)
    mu_f, sig_f = gaussian_fit(fake_features, eps)
    return frechet_distance(mu_r, sig_r, mu_f, sig_f)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean of precision at each positive's rank, descending scores, stable
    ties (input order)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise RangeViolation("scores and labels must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise RangeViolation("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise RangeViolation("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cum_pos = np.cumsum(ranked)
    precision_at = cum_pos / np.arange(1, len(ranked) + 1)
    return float(precision_at[ranked == 1].mean())


def mean_ap(score_matrix: np.ndarray, label_matrix: np.ndarray,
            warn: Callable[[str], None] | None = None) -> tuple[dict[str, float | None], float]:
    """Per-category AP plus mean over categories with positives.

    Categories without positives are skipped and flagged with None.
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise RangeViolation(f"score/label matrices must match, got {scores.shape} "
                             f"vs {labels.shape}")
    per_category: dict[str, float | None] = {}
    values = []
    for j in range(scores.shape[1]):
        name = INGREDIENT_NAMES[j] if j < len(INGREDIENT_NAMES) else f"cat{j}"
        if labels[:, j].sum() == 0:
            per_category[name] = None
            if warn is not None:
                warn(f"mean_ap: category {name} has no positives; skipped")
            continue
        ap = average_precision(scores[:, j], labels[:, j])
        per_category[name] = ap
        values.append(ap)
    if not values:
        raise RangeViolation("no category had positives")
    return per_category, float(np.mean(values))


# ---------------------------------------------------------------------------
# View RMSE
# ---------------------------------------------------------------------------

def view_rmse(regressor: ViewRegressor, images: np.ndarray,
              intended_views: np.ndarray) -> dict[str, float]:
    """Per-attribute RMSE (native units) between intended and predicted."""
    intended = np.asarray(intended_views, dtype=np.float64)
    if intended.ndim != 2 or intended.shape[1] != VIEW_COUNT:
        raise RangeViolation(f"intended views shape {intended.shape}, expected (B, 4)")
    preds = predict_view_batch(regressor, images)
    return {
        name: float(np.sqrt(np.mean((preds[:, j] - intended[:, j]) ** 2)))
        for j, name in enumerate(VIEW_NAMES)
    }


# ---------------------------------------------------------------------------
# Generation helpers
# ---------------------------------------------------------------------------

def _sample_conditioning(rng: np.random.Generator, n: int,
                         source_attrs: np.ndarray | None,
                         ingredient_p: float = 0.3) -> np.ndarray:
    """Flat (n, 14) conditioning: resampled rows of real conditioning when
    available, else Bernoulli ingredients with uniform normalized views."""
    if source_attrs is not None:
        idx = rng.integers(0, len(source_attrs), size=n)
        return source_attrs[idx].copy()
    ing = (rng.uniform(0, 1, (n, 10)) < ingredient_p).astype(np.float64)
    views = rng.uniform(-1, 1, (n, VIEW_COUNT))
    return np.concatenate([ing, views], axis=1)


def generate_batch(generator: Generator, attrs: np.ndarray, rng: np.random.Generator,
                   batch: int = 32) -> np.ndarray:
    """Images in [0, 1], (N, H, W, 3); z drawn from rng; frozen pixel noise."""
    outs = []
    generator.eval()
    with torch.no_grad():
        for start in range(0, len(attrs), batch):
            chunk = attrs[start:start + batch]
            z = rng.standard_normal((len(chunk), generator.config.noise_dim))
            raw = generator(
                torch.as_tensor(chunk, dtype=torch.float32),
                torch.as_tensor(z, dtype=torch.float32),
                noise_mode="frozen",
            )
            outs.append(((raw + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1).numpy())
    return np.concatenate(outs, axis=0)


def normalize_view_value(name: str, value: float) -> float:
    lo, hi = VIEW_RANGES[name]
    return 2.0 * (value - lo) / (hi - lo) - 1.0


# ---------------------------------------------------------------------------
# Conditional metrics (per-attribute grids)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionalResult:
    attr_name: str
    metric: str
    range_mode: str
    grid: tuple[float, ...]
    per_value: tuple[float, ...]
    average: float
    samples_per_value: int
    clipped: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def attribute_grid(attr_name: str, range_mode: str,
                   predicted_values: np.ndarray | None = None,
                   n_values: int = 10) -> tuple[np.ndarray, bool]:
    """10 evenly spaced values (endpoints inclusive) over the targeting
    range, or over mean +/- 3 sigma of a Gaussian fitted to the predicted
    histogram (clipped to the physical range, flagged)."""
    lo, hi = VIEW_RANGES[attr_name]
    clipped = False
    if range_mode == "targeting":
        a, b = lo, hi
    elif range_mode == "3sigma":
        if predicted_values is None:
            raise RangeViolation("3sigma mode needs predicted values for the Gaussian fit")
        mu = float(np.mean(predicted_values))
        sd = float(np.std(predicted_values))
        a, b = mu - 3 * sd, mu + 3 * sd
        if a < lo or b > hi:
            clipped = True
            a, b = max(a, lo), min(b, hi)
    else:
        raise RangeViolation(f"range_mode {range_mode!r} not in {{targeting, 3sigma}}")
    return np.linspace(a, b, n_values), clipped


def conditional_metric(
    generator: Generator,
    attr_name: str,
    metric: str,
    range_mode: str = "targeting",
    samples_per_value: int = 512,
    seed: int = 0,
    real_features: np.ndarray | None = None,
    extractor: FeatureExtractor | None = None,
    classifier: IngredientClassifier | None = None,
    source_attrs: np.ndarray | None = None,
    predicted_values: np.ndarray | None = None,
    n_values: int = 10,
) -> ConditionalResult:
    """Average FID or mAP over a grid of fixed values of one view attribute;
    other attributes and the style noise are sampled randomly per image."""
    if attr_name not in VIEW_NAMES:
        raise RangeViolation(f"unknown view attribute {attr_name!r}")
    if metric not in ("fid", "map"):
        raise RangeViolation(f"metric {metric!r} not in {{fid, map}}")
    if metric == "fid" and (real_features is None or extractor is None):
        raise RangeViolation("fid mode needs real_features and extractor")
    if metric == "map" and classifier is None:
        raise RangeViolation("map mode needs a classifier")

    grid, clipped = attribute_grid(attr_name, range_mode, predicted_values, n_values)
    attr_idx = 10 + VIEW_NAMES.index(attr_name)
    per_value = []
    for vi, value in enumerate(grid):
        rng = np.random.Generator(np.random.Philox(key=[seed, vi]))
        attrs = _sample_conditioning(rng, samples_per_value, source_attrs)
        attrs[:, attr_idx] = normalize_view_value(attr_name, float(value))
        fakes = generate_batch(generator, attrs, rng)
        if metric == "fid":
            fake_features = extractor(fakes)
            per_value.append(fid_from_features(real_features, fake_features))
        else:
            scores = predict_ingredients(classifier, fakes)
            _, m = mean_ap(scores, attrs[:, :10] >= 0.5)
            per_value.append(m)
    return ConditionalResult(
        attr_name=attr_name, metric=metric, range_mode=range_mode,
        grid=tuple(float(v) for v in grid),
        per_value=tuple(float(v) for v in per_value),
        average=float(np.mean(per_value)), samples_per_value=samples_per_value,
        clipped=clipped,
    )


# ---------------------------------------------------------------------------
# Dependency (disentanglement) analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DependencyResult:
    matrix: np.ndarray  # (14 controls, 14 judged outputs)
    scatter: dict  # {control_name: {"values": [...], "outputs": (n, 14) list}}
    degenerate: tuple[tuple[str, str], ...]

    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix)

    def off_diagonal(self) -> np.ndarray:
        mask = ~np.eye(len(ATTR_NAMES), dtype=bool)
        return self.matrix[mask]


def dependency_analysis(
    judge: Callable[[np.ndarray], np.ndarray],
    render: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    values_per_attr: int = 16,
    images_per_value: int = 24,
    seed: int = 0,
    nuisance: str = "random",
    source_attrs: np.ndarray | None = None,
) -> DependencyResult:
    """Correlations between each controlling attribute and every judged one.

    ``render`` maps flat (n, 14) conditioning to images; ``judge`` maps
    images to (n, 14) outputs (10 ingredient scores + 4 view predictions in
    native units). Each of the 14 attributes is traversed over its input
    range (``values_per_attr`` steps, ``images_per_value`` images each);
    Pearson correlation is computed over all raw (control value, judge
    output) pairs. Zero-variance outputs record correlation 0 with a
    degeneracy flag. ``nuisance``: ``random`` resamples other attributes
    per image (protocol default), ``fixed`` pins them at mid-range
    (self-test mode).
    """
    if nuisance not in ("random", "fixed"):
        raise RangeViolation(f"nuisance {nuisance!r} not in {{random, fixed}}")
    matrix = np.zeros((len(ATTR_NAMES), len(ATTR_NAMES)))
    scatter: dict = {}
    degenerate: list[tuple[str, str]] = []

    fixed_base = np.concatenate([
        np.zeros(10),
        [normalize_view_value("angle", 20.0), normalize_view_value("scale", 1.8), 0.0, 0.0],
    ])

    for ci, control in enumerate(ATTR_NAMES):
        rng = np.random.Generator(np.random.Philox(key=[seed, ci]))
        values = np.linspace(0.0, 1.0, values_per_attr) if ci < 10 else \
            np.linspace(-1.0, 1.0, values_per_attr)
        xs, outputs = [], []
        for value in values:
            n = images_per_value
            if nuisance == "random":
                attrs = _sample_conditioning(rng, n, source_attrs)
            else:
                attrs = np.tile(fixed_base, (n, 1))
            attrs[:, ci] = value
            images = render(attrs, rng)
            outputs.append(judge(images))
            xs.extend([value] * n)
        xs = np.asarray(xs)
        ys = np.concatenate(outputs, axis=0)
        control_native = xs if ci < 10 else _denorm_column(ci - 10, xs)
        scatter[control] = {
            "values": control_native.tolist(),
            "outputs": np.round(ys, 5).tolist(),
        }
        for ji in range(len(ATTR_NAMES)):
            col = ys[:, ji]
            if col.std() < 1e-12 or xs.std() < 1e-12:
                matrix[ci, ji] = 0.0
                degenerate.append((control, ATTR_NAMES[ji]))
            else:
                matrix[ci, ji] = float(np.corrcoef(xs, col)[0, 1])
    return DependencyResult(matrix=matrix, scatter=scatter,
                            degenerate=tuple(degenerate))


def _denorm_column(view_index: int, values: np.ndarray) -> np.ndarray:
    lo, hi = VIEW_RANGES[VIEW_NAMES[view_index]]
    return lo + (values + 1.0) * (hi - lo) / 2.0


def oracle_judge(images: np.ndarray) -> np.ndarray:
    """Closed-form judge: analyze each image, returning (B, 14)."""
    from .synthdata import analyze_image, AnalysisFailure

    rows = []
    for img in images:
        try:
            ing, view = analyze_image(img)
            rows.append(list(ing.values) + [view.angle, view.scale, view.dx, view.dy])
        except AnalysisFailure:
            rows.append([0.0] * 10 + [0.0, 1.0, 0.0, 0.0])
    return np.asarray(rows)


def model_judge(classifier: IngredientClassifier,
                regressor: ViewRegressor) -> Callable[[np.ndarray], np.ndarray]:
    def judge(images: np.ndarray) -> np.ndarray:
        ing = predict_ingredients(classifier, images)
        views = predict_view_batch(regressor, images)
        return np.concatenate([ing, views], axis=1)

    return judge


def heatmap_image(matrix: np.ndarray, path: Path | str) -> None:
    """Correlation heat map with attribute labels on both axes."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7.5, 6.5))
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="RdBu_r")
    ax.set_xticks(range(len(ATTR_NAMES)), ATTR_NAMES, rotation=90, fontsize=7)
    ax.set_yticks(range(len(ATTR_NAMES)), ATTR_NAMES, fontsize=7)
    ax.set_xlabel("judged attribute")
    ax.set_ylabel("controlling attribute")
    fig.colorbar(im, ax=ax, label="Pearson correlation")
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Traversal grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraversalAxis:
    """What varies across grid columns: one ingredient (by name, 0 -> 1) or
    one view attribute (over its full range)."""

    name: str

    def __post_init__(self) -> None:
        if self.name not in ATTR_NAMES:
            raise RangeViolation(f"unknown attribute {self.name!r}")

    @property
    def index(self) -> int:
        return ATTR_NAMES.index(self.name)

    def values(self, steps: int) -> np.ndarray:
        if self.index < 10:
            return np.linspace(0.0, 1.0, steps)
        return np.linspace(-1.0, 1.0, steps)


def traversal_grid(
    generator: Generator,
    axis: TraversalAxis,
    steps: int,
    base_attrs: np.ndarray | None = None,
    rows: int | None = None,
    seed: int = 0,
    out_path: Path | str | None = None,
) -> tuple[np.ndarray, dict]:
    """Render a rows x steps traversal grid; rows vary the style noise.

    Returns the grid image (H, W, 3) and a sidecar record of every input.
    Legends (axis value per column, style index per row) are drawn inside
    the tiles so the grid stays exactly rows*res by steps*res.
    """
    if steps < 2:
        raise RangeViolation(f"steps={steps} must be >= 2")
    rows = rows if rows is not None else steps
    res = generator.config.image_resolution
    rng = np.random.Generator(np.random.Philox(key=seed))
    if base_attrs is None:
        base_attrs = np.concatenate([
            np.zeros(10),
            [normalize_view_value("angle", 20.0), normalize_view_value("scale", 1.8),
             0.0, 0.0],
        ])
    zs = rng.standard_normal((rows, generator.config.noise_dim))
    values = axis.values(steps)

    grid = np.zeros((rows * res, steps * res, 3), dtype=np.float32)
    record = {"axis": axis.name, "values": values.tolist(), "rows": rows,
              "steps": steps, "seed": seed, "base_attrs": base_attrs.tolist(),
              "inputs": []}
    generator.eval()
    with torch.no_grad():
        for r in range(rows):
            attrs = np.tile(base_attrs, (steps, 1))
            attrs[:, axis.index] = values
            z = np.tile(zs[r], (steps, 1))
            raw = generator(
                torch.as_tensor(attrs, dtype=torch.float32),
                torch.as_tensor(z, dtype=torch.float32),
                noise_mode="frozen",
            )
            imgs = ((raw + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1).numpy()
            for c in range(steps):
                grid[r * res:(r + 1) * res, c * res:(c + 1) * res] = imgs[c]
                record["inputs"].append({
                    "row": r, "col": c, "attrs": attrs[c].tolist(),
                    "z_row": r,
                })
    if out_path is not None:
        _save_grid_with_legend(grid, values, axis.name, rows, res, out_path)
        sidecar = Path(out_path).with_suffix(".json")
        sidecar.write_text(json.dumps(record, indent=1))
    return grid, record


def _save_grid_with_legend(grid: np.ndarray, values: np.ndarray, axis_name: str,
                           rows: int, res: int, path: Path | str) -> None:
    from PIL import Image, ImageDraw

    img = Image.fromarray(np.round(grid * 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    for c, v in enumerate(values):
        draw.text((c * res + 2, 2), f"{axis_name}={v:.2f}", fill=(255, 255, 0))
    for r in range(rows):
        draw.text((2, r * res + res - 10), f"z{r}", fill=(255, 255, 0))
    img.save(path)


# ---------------------------------------------------------------------------
# Metrics report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Every number with the exact configuration that produced it."""

    fid: float | None = None
    fid_floor: float | None = None
    map_per_category: dict = field(default_factory=dict)
    map_mean: float | None = None
    oracle_map_per_category: dict = field(default_factory=dict)
    oracle_map_mean: float | None = None
    view_rmse: dict = field(default_factory=dict)
    conditional: list = field(default_factory=list)
    dependency_diag_mean: float | None = None
    dependency_offdiag_mean: float | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        return cls(**data)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path | str) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())
