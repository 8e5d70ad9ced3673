"""Attribute domain types, normalization, and experiment configuration.

All types here are immutable values and safe to share between threads.
The attribute layout is fixed across the whole package: 10 ingredient
indicators followed by 4 view attributes (angle, scale, dx, dy), each view
field normalized affinely onto [-1, 1].
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Shifts are expressed in a fixed canonical frame: half the view judge's
# input resolution on either side of center (here the desk-scale 64; the
# full-scale analog would be 224 with shifts in [-112, 112]). Renderers
# working at a different resolution rescale shifts proportionally, so a
# shift of SHIFT_FRAME/4 always moves the disc a quarter-frame.
SHIFT_FRAME = 64

INGREDIENT_COUNT = 10
VIEW_COUNT = 4
ATTRIBUTE_COUNT = INGREDIENT_COUNT + VIEW_COUNT

ANGLE_RANGE = (0.0, 75.0)
SCALE_RANGE = (1.0, 3.0)
SHIFT_RANGE = (-SHIFT_FRAME / 2.0, SHIFT_FRAME / 2.0)

VIEW_NAMES = ("angle", "scale", "dx", "dy")
VIEW_RANGES = {
    "angle": ANGLE_RANGE,
    "scale": SCALE_RANGE,
    "dx": SHIFT_RANGE,
    "dy": SHIFT_RANGE,
}


class RangeViolation(ValueError):
    """An attribute field falls outside its declared closed range."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class StateError(RuntimeError):
    """Operation attempted on an uninitialized or frozen component."""


class ShapeError(ValueError):
    """Array input has the wrong shape for the operation."""


class NumericError(RuntimeError):
    """A numeric computation produced non-finite or invalid results."""


class CapabilityError(RuntimeError):
    """The backend lacks a capability required by the requested mode."""


# ---------------------------------------------------------------------------
# Ingredient taxonomy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrimitiveSpec:
    """One ingredient category: a named colored primitive.

    Colors are exact uint8 RGB values and double as detection keys for the
    closed-form label oracle, so they must stay pairwise well separated and
    bright relative to any background the renderer can produce.
    """

    index: int
    name: str
    color: tuple[int, int, int]
    shape: str
    size_frac: float  # primitive half-extent relative to the disc semi-axis


TAXONOMY_VERSION = "disc-primitives-v2"

# Categories draw into consecutive angular sectors of the disc, so only
# index-adjacent categories ever share a boundary. The palette and this
# ordering are chosen together: every pure color is > 80 (uint8 max-norm)
# from every other, and no boundary blend of adjacent scene colors comes
# near a third category's color. Max channel >= 150 everywhere keeps all
# primitives above the oracle's brightness threshold.
TAXONOMY: tuple[PrimitiveSpec, ...] = (
    PrimitiveSpec(0, "pink_bar", (255, 140, 205), "bar", 0.249),
    PrimitiveSpec(1, "cyan_diamond", (60, 230, 230), "diamond", 0.219),
    PrimitiveSpec(2, "blue_drop", (50, 90, 235), "ellipse", 0.211),
    PrimitiveSpec(3, "purple_triangle", (150, 50, 235), "triangle", 0.299),
    PrimitiveSpec(4, "magenta_pebble", (210, 30, 150), "disc", 0.192),
    PrimitiveSpec(5, "red_disc", (230, 40, 40), "disc", 0.192),
    PrimitiveSpec(6, "yellow_square", (250, 230, 50), "square", 0.207),
    PrimitiveSpec(7, "white_hexagon", (250, 250, 250), "hexagon", 0.21),
    PrimitiveSpec(8, "green_crescent", (60, 200, 70), "crescent", 0.232),
    PrimitiveSpec(9, "olive_wedge", (150, 160, 0), "triangle", 0.299),
)

INGREDIENT_NAMES = tuple(p.name for p in TAXONOMY)


def _norm(value: float, lo: float, hi: float) -> float:
    return 2.0 * (value - lo) / (hi - lo) - 1.0


def _denorm(value: float, lo: float, hi: float) -> float:
    return lo + (value + 1.0) * (hi - lo) / 2.0


def _check_range(name: str, value: float, lo: float, hi: float, tol: float = 0.0) -> None:
    if not math.isfinite(value) or value < lo - tol or value > hi + tol:
        raise RangeViolation(f"{name}={value!r} outside [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# Attribute vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IngredientVector:
    """10 presence indicators in [0, 1].

    Training-time vectors are binary; intermediate values are permitted only
    for traversal rendering and network conditioning.
    """

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if len(vals) != INGREDIENT_COUNT:
            raise RangeViolation(
                f"ingredient vector has length {len(vals)}, expected {INGREDIENT_COUNT}"
            )
        for i, v in enumerate(vals):
            _check_range(f"ingredients[{i}]", v, 0.0, 1.0)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls) -> "IngredientVector":
        return cls((0.0,) * INGREDIENT_COUNT)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "IngredientVector":
        wanted = set(names)
        unknown = wanted - set(INGREDIENT_NAMES)
        if unknown:
            raise RangeViolation(f"unknown ingredient names: {sorted(unknown)}")
        return cls(tuple(1.0 if n in wanted else 0.0 for n in INGREDIENT_NAMES))

    @property
    def is_binary(self) -> bool:
        return all(v in (0.0, 1.0) for v in self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def names(self) -> tuple[str, ...]:
        return tuple(n for n, v in zip(INGREDIENT_NAMES, self.values) if v >= 0.5)


@dataclass(frozen=True)
class ViewAttributes:
    """Geometric view quadruple: camera angle, zoom scale, x/y shift.

    Shifts live in the canonical frame (+/- SHIFT_FRAME/2 around center);
    down and right are positive.
    """

    angle: float
    scale: float
    dx: float
    dy: float

    def __post_init__(self) -> None:
        _check_range("angle", float(self.angle), *ANGLE_RANGE)
        _check_range("scale", float(self.scale), *SCALE_RANGE)
        _check_range("dx", float(self.dx), *SHIFT_RANGE)
        _check_range("dy", float(self.dy), *SHIFT_RANGE)
        for name in VIEW_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def canonical(cls) -> "ViewAttributes":
        return cls(0.0, 1.0, 0.0, 0.0)

    def normalized(self) -> np.ndarray:
        """Affine map of each field onto [-1, 1]."""
        return np.array(
            [_norm(getattr(self, n), *VIEW_RANGES[n]) for n in VIEW_NAMES],
            dtype=np.float64,
        )

    @classmethod
    def from_normalized(cls, values: Sequence[float], clip: bool = False) -> "ViewAttributes":
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != (VIEW_COUNT,):
            raise RangeViolation(f"normalized view vector has shape {vals.shape}, expected (4,)")
        if clip:
            vals = np.clip(vals, -1.0, 1.0)
        fields = {}
        for name, v in zip(VIEW_NAMES, vals):
            _check_range(f"normalized {name}", float(v), -1.0, 1.0, tol=1e-12)
            fields[name] = _denorm(float(v), *VIEW_RANGES[name])
        return cls(**fields)

    def as_array(self) -> np.ndarray:
        return np.array([self.angle, self.scale, self.dx, self.dy], dtype=np.float64)


@dataclass(frozen=True)
class AttributeVector:
    """Full conditioning input: ingredients followed by view attributes."""

    ingredients: IngredientVector
    view: ViewAttributes

    @classmethod
    def make(
        cls,
        ingredients: Sequence[float] | IngredientVector,
        view: ViewAttributes | Sequence[float] | None = None,
    ) -> "AttributeVector":
        if not isinstance(ingredients, IngredientVector):
            ingredients = IngredientVector(tuple(ingredients))
        if view is None:
            view = ViewAttributes.canonical()
        elif not isinstance(view, ViewAttributes):
            view = ViewAttributes(*view)
        return cls(ingredients, view)


def flatten_attributes(attrs: AttributeVector) -> np.ndarray:
    """Flatten to the fixed length-14 layout: ingredients, then normalized view."""
    return np.concatenate([attrs.ingredients.as_array(), attrs.view.normalized()])


def unflatten_attributes(v: Sequence[float]) -> AttributeVector:
    """Exact inverse of :func:`flatten_attributes`."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (ATTRIBUTE_COUNT,):
        raise RangeViolation(
            f"attribute vector has shape {arr.shape}, expected ({ATTRIBUTE_COUNT},)"
        )
    ingredients = IngredientVector(tuple(arr[:INGREDIENT_COUNT]))
    view = ViewAttributes.from_normalized(arr[INGREDIENT_COUNT:])
    return AttributeVector(ingredients, view)


# ---------------------------------------------------------------------------
# Style noise
# ---------------------------------------------------------------------------

NOISE_DIM = 256


@dataclass(frozen=True)
class StyleNoise:
    """Visual-style input: 256 i.i.d. standard normal values."""

    z: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.z)
        if len(vals) != NOISE_DIM:
            raise RangeViolation(f"style noise has length {len(vals)}, expected {NOISE_DIM}")
        object.__setattr__(self, "z", vals)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "StyleNoise":
        return cls(tuple(rng.standard_normal(NOISE_DIM)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.z, dtype=np.float64)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Global experiment knobs shared by all pipeline stages.

    ``scale_list`` is derived: the doubling chain 4, 8, ..., image_resolution.
    """

    image_resolution: int = 64
    ingredient_count: int = INGREDIENT_COUNT
    embedding_dim: int = 256
    noise_dim: int = NOISE_DIM
    mapping_layers: int = 4
    fmap_max: int = 256
    fmap_base: int = 4096
    lambda_ingr: float = 1.0
    lambda_view: float = 1.0
    lambda_r1: float = 10.0
    r1_interval: int = 16
    learning_rate: float = 0.002
    batch_size: int = 16
    random_seed: int = 0
    ema_decay: float = 0.999
    loss_form: str = "logistic"  # {logistic, raw}
    view_labels: str = "pseudo"  # {pseudo, oracle}
    conditioning: str = "multi_scale"  # {multi_scale, shared, premap}
    r1_mode: str = "autograd"  # {autograd, finite_diff}
    path_length_reg: bool = False
    style_mixing: bool = False

    def __post_init__(self) -> None:
        res = self.image_resolution
        if res < 4 or res & (res - 1) != 0:
            raise ConfigError(f"image_resolution={res} must be a power of two >= 4")
        for name in ("lambda_ingr", "lambda_view", "lambda_r1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.r1_interval < 1:
            raise ConfigError("r1_interval must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        if self.loss_form not in ("logistic", "raw"):
            raise ConfigError(f"loss_form={self.loss_form!r} not in {{logistic, raw}}")
        if self.view_labels not in ("pseudo", "oracle"):
            raise ConfigError(f"view_labels={self.view_labels!r} not in {{pseudo, oracle}}")
        if self.conditioning not in ("multi_scale", "shared", "premap"):
            raise ConfigError(
                f"conditioning={self.conditioning!r} not in {{multi_scale, shared, premap}}"
            )
        if self.r1_mode not in ("autograd", "finite_diff"):
            raise ConfigError(f"r1_mode={self.r1_mode!r} not in {{autograd, finite_diff}}")

    @property
    def scale_list(self) -> tuple[int, ...]:
        scales = []
        s = 4
        while s <= self.image_resolution:
            scales.append(s)
            s *= 2
        return tuple(scales)

    @property
    def attribute_dim(self) -> int:
        return self.ingredient_count + VIEW_COUNT

    @property
    def style_dim(self) -> int:
        """Width of the per-scale modulation input (embedding + mapped noise)."""
        return self.embedding_dim + self.noise_dim

    def channels(self, resolution: int) -> int:
        """Feature-map width at a given resolution; halves as resolution doubles."""
        return int(min(self.fmap_max, self.fmap_base // resolution))

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    # -- flat key/value serialization -------------------------------------

    def to_kv_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv_text(cls, text: str) -> "ExperimentConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if key in kwargs:
                raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
            kwargs[key] = _parse_kv_value(key, value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def desk_profile(cls, seed: int = 0) -> "ExperimentConfig":
        """The fixed scaled-down acceptance configuration (resolution 64)."""
        return cls(image_resolution=64, fmap_max=128, fmap_base=2048, random_seed=seed)


_BOOL_NAMES = {"path_length_reg", "style_mixing"}
_STR_NAMES = {"loss_form", "view_labels", "conditioning", "r1_mode"}
_FLOAT_NAMES = {
    "lambda_ingr", "lambda_view", "lambda_r1", "learning_rate", "ema_decay",
}


def _parse_kv_value(key: str, value: str):
    if key in _STR_NAMES:
        return value
    if key in _BOOL_NAMES:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected boolean, got {value!r}")
    try:
        if key in _FLOAT_NAMES:
            return float(value)
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: bad value {value!r}") from exc
