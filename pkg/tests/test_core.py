import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrgan.core import (
    ANGLE_RANGE,
    INGREDIENT_NAMES,
    SCALE_RANGE,
    SHIFT_FRAME,
    SHIFT_RANGE,
    TAXONOMY,
    AttributeVector,
    ConfigError,
    ExperimentConfig,
    IngredientVector,
    RangeViolation,
    StyleNoise,
    ViewAttributes,
    flatten_attributes,
    unflatten_attributes,
)


def make_attrs(ingredients, angle=0.0, scale=1.0, dx=0.0, dy=0.0):
    return AttributeVector(
        IngredientVector(tuple(ingredients)), ViewAttributes(angle, scale, dx, dy)
    )


class TestFlatten:
    def test_lower_bounds(self):
        attrs = make_attrs([0.0] * 10, angle=0, scale=1, dx=0, dy=0)
        flat = flatten_attributes(attrs)
        assert flat.shape == (14,)
        np.testing.assert_allclose(flat, [0.0] * 10 + [-1.0, -1.0, 0.0, 0.0])

    def test_upper_bounds(self):
        attrs = make_attrs([1.0] * 10, angle=75, scale=3,
                           dx=SHIFT_FRAME / 2, dy=SHIFT_FRAME / 2)
        flat = flatten_attributes(attrs)
        np.testing.assert_allclose(flat, [1.0] * 10 + [1.0, 1.0, 1.0, 1.0])

    def test_angle_midpoint(self):
        attrs = make_attrs([0.0] * 10, angle=37.5)
        assert flatten_attributes(attrs)[10] == pytest.approx(0.0)

    def test_out_of_range_names_field(self):
        with pytest.raises(RangeViolation, match="angle"):
            ViewAttributes(76.0, 1.0, 0.0, 0.0)
        with pytest.raises(RangeViolation, match="scale"):
            ViewAttributes(0.0, 0.5, 0.0, 0.0)
        with pytest.raises(RangeViolation, match="dx"):
            ViewAttributes(0.0, 1.0, SHIFT_FRAME, 0.0)


class TestUnflatten:
    def test_inverse_of_flatten(self):
        flat = np.array([0.0] * 10 + [-1.0, -1.0, 0.0, 0.0])
        attrs = unflatten_attributes(flat)
        assert attrs.ingredients.values == (0.0,) * 10
        assert attrs.view.angle == pytest.approx(0.0)
        assert attrs.view.scale == pytest.approx(1.0)
        assert attrs.view.dx == pytest.approx(0.0)

    def test_wrong_length(self):
        with pytest.raises(RangeViolation):
            unflatten_attributes([0.0] * 13)

    def test_out_of_range_entry(self):
        bad = [0.0] * 10 + [1.5, 0.0, 0.0, 0.0]
        with pytest.raises(RangeViolation):
            unflatten_attributes(bad)


@settings(max_examples=1000, deadline=None)
@given(
    ingredients=st.lists(st.floats(0, 1), min_size=10, max_size=10),
    angle=st.floats(*ANGLE_RANGE),
    scale=st.floats(*SCALE_RANGE),
    dx=st.floats(*SHIFT_RANGE),
    dy=st.floats(*SHIFT_RANGE),
)
def test_flatten_roundtrip(ingredients, angle, scale, dx, dy):
    attrs = make_attrs(ingredients, angle, scale, dx, dy)
    back = unflatten_attributes(flatten_attributes(attrs))
    np.testing.assert_allclose(back.ingredients.values, attrs.ingredients.values,
                               atol=1e-12)
    np.testing.assert_allclose(back.view.as_array(), attrs.view.as_array(),
                               atol=1e-9)


def test_normalization_monotone_and_endpoints():
    lows = ViewAttributes(0, 1, -SHIFT_FRAME / 2, -SHIFT_FRAME / 2).normalized()
    highs = ViewAttributes(75, 3, SHIFT_FRAME / 2, SHIFT_FRAME / 2).normalized()
    np.testing.assert_allclose(lows, [-1.0] * 4)
    np.testing.assert_allclose(highs, [1.0] * 4)
    grid = np.linspace(0, 1, 11)
    angles = [ViewAttributes(75 * t, 1, 0, 0).normalized()[0] for t in grid]
    assert all(b > a for a, b in zip(angles, angles[1:]))


class TestVectors:
    def test_ingredient_length(self):
        with pytest.raises(RangeViolation):
            IngredientVector((0.0,) * 9)

    def test_ingredient_range(self):
        with pytest.raises(RangeViolation):
            IngredientVector((0.0,) * 9 + (1.2,))

    def test_binary_flag(self):
        assert IngredientVector((0.0, 1.0) * 5).is_binary
        assert not IngredientVector((0.5,) + (0.0,) * 9).is_binary

    def test_from_names(self):
        vec = IngredientVector.from_names([INGREDIENT_NAMES[2], INGREDIENT_NAMES[5]])
        assert vec.values[2] == 1.0 and vec.values[5] == 1.0
        assert sum(vec.values) == 2.0
        with pytest.raises(RangeViolation):
            IngredientVector.from_names(["nonexistent"])

    def test_style_noise_length(self):
        StyleNoise(tuple(np.zeros(256)))
        with pytest.raises(RangeViolation):
            StyleNoise(tuple(np.zeros(255)))


class TestConfig:
    def test_scale_list_256(self):
        cfg = ExperimentConfig(image_resolution=256)
        assert cfg.scale_list == (4, 8, 16, 32, 64, 128, 256)

    def test_scale_list_64(self):
        cfg = ExperimentConfig(image_resolution=64)
        assert cfg.scale_list == (4, 8, 16, 32, 64)

    def test_non_power_of_two(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(image_resolution=96)

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(lambda_ingr=-0.1)

    def test_r1_interval(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(r1_interval=0)

    def test_kv_roundtrip(self):
        cfg = ExperimentConfig(image_resolution=32, lambda_view=0.5, batch_size=4,
                               conditioning="premap")
        back = ExperimentConfig.from_kv_text(cfg.to_kv_text())
        assert back == cfg

    def test_unknown_key_rejected(self):
        text = ExperimentConfig().to_kv_text() + "mystery_knob = 3\n"
        with pytest.raises(ConfigError, match="mystery_knob"):
            ExperimentConfig.from_kv_text(text)

    def test_duplicate_key_rejected(self):
        text = ExperimentConfig().to_kv_text() + "batch_size = 8\n"
        with pytest.raises(ConfigError, match="duplicate"):
            ExperimentConfig.from_kv_text(text)

    def test_style_dim(self):
        cfg = ExperimentConfig()
        assert cfg.style_dim == cfg.embedding_dim + cfg.noise_dim == 512

    def test_channels_halve(self):
        cfg = ExperimentConfig(fmap_max=128, fmap_base=2048)
        assert cfg.channels(4) == 128
        assert cfg.channels(32) == 64
        assert cfg.channels(64) == 32


class TestTaxonomy:
    def test_ten_named_categories(self):
        assert len(TAXONOMY) == 10
        assert len({p.name for p in TAXONOMY}) == 10
        assert [p.index for p in TAXONOMY] == list(range(10))

    def test_pairwise_color_separation(self):
        # Exact-color detection at tolerance 40 needs pure colors more than
        # 80 apart in max-norm.
        colors = [np.array(p.color, dtype=float) for p in TAXONOMY]
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.abs(colors[i] - colors[j]).max() > 80

    def test_adjacent_blend_clearance(self):
        # Only sector-adjacent categories can share a boundary; their color
        # blends must stay far from every third category's color.
        colors = [np.array(p.color, dtype=float) for p in TAXONOMY]
        for i in range(10):
            a, b = colors[i], colors[(i + 1) % 10]
            for t in np.linspace(0, 1, 41):
                mix = t * a + (1 - t) * b
                for k in range(10):
                    if k in (i, (i + 1) % 10):
                        continue
                    assert np.abs(mix - colors[k]).max() > 45

    def test_brightness_floor(self):
        for p in TAXONOMY:
            assert max(p.color) >= 120
