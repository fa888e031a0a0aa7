"""
STF-Token encoding: patch features, patch selection, metric fusion, text rendering
"""
import numpy as np
import pytest

from app.core.exceptions import DimensionMismatch, EmptyRegion
from app.models.geometry import Mask
from app.services.simulator import instantiate, render
from app.services.stf_encoder import (
    build_token,
    format_number,
    parse_token_text,
    patch_feature_grid,
    select_patches,
    serialize_token,
)

from conftest import library_task, make_token


def _grid(width: int = 32, height: int = 16, grid_n: int = 4, colour=(255, 0, 0)):
    rgb = np.zeros((height, width, 3), dtype=np.uint8)
    rgb[...] = colour
    return patch_feature_grid(rgb, grid_n)


class TestPatchFeatures:

    def test_grid_shape_and_colour(self):
        grid = _grid()
        assert grid.features.shape == (4, 4, 5)
        np.testing.assert_allclose(grid.features[0, 0, :3], [1.0, 0.0, 0.0])

    def test_patch_centres_are_normalised(self):
        grid = _grid()
        assert grid.features[0, 0, 3] == pytest.approx(2.0 / 16)
        assert grid.features[0, 0, 4] == pytest.approx(4.0 / 32)

    def test_rejects_grayscale_image(self):
        with pytest.raises(DimensionMismatch):
            patch_feature_grid(np.zeros((16, 16), dtype=np.uint8), 4)


class TestPatchSelection:

    def test_fully_covered_patch_is_selected(self):
        bits = np.zeros((16, 32), dtype=bool)
        bits[:4, :8] = True
        evidence = select_patches(_grid(), Mask(bits), 0.5)
        assert [(p.row, p.col) for p in evidence.selected_patches] == [(0, 0)]
        assert not evidence.fallback

    def test_threshold_is_strict(self):
        bits = np.zeros((16, 32), dtype=bool)
        bits[:2, :8] = True
        evidence = select_patches(_grid(), Mask(bits), 0.5)
        assert evidence.fallback
        assert len(evidence.selected_patches) == 1

    def test_tiny_mask_falls_back_to_best_patch(self):
        bits = np.zeros((16, 32), dtype=bool)
        bits[9, 20] = True
        evidence = select_patches(_grid(), Mask(bits), 0.5)
        assert evidence.fallback
        assert [(p.row, p.col) for p in evidence.selected_patches] == [(2, 2)]

    def test_aggregate_is_mean_of_selected(self):
        bits = np.zeros((16, 32), dtype=bool)
        bits[:8, :8] = True
        evidence = select_patches(_grid(), Mask(bits), 0.5)
        assert len(evidence.selected_patches) == 2
        assert evidence.aggregate[3] == pytest.approx((2.0 / 16 + 6.0 / 16) / 2)

    def test_higher_threshold_never_adds_patches(self):
        rng = np.random.default_rng(31)
        grid = _grid()
        for _ in range(100):
            bits = rng.random((16, 32)) < rng.uniform(0.05, 0.95)
            chosen = [
                {(p.row, p.col) for p in select_patches(grid, Mask(bits), threshold).selected_patches}
                for threshold in (0.0, 0.25, 0.5, 0.75, 1.0)
            ]
            for low, high in zip(chosen, chosen[1:]):
                assert high <= low

    def test_grid_and_mask_dimensions_must_agree(self):
        with pytest.raises(DimensionMismatch):
            select_patches(_grid(), Mask.empty(16, 16), 0.5)


class TestBuildToken:

    @pytest.fixture
    def frame(self, cfg):
        world = instantiate(library_task("stack-3"), 0, cfg)
        return world, render(world, cfg)

    def test_centroid_lies_within_noise_bound(self, cfg, frame):
        world, obs = frame
        grid = patch_feature_grid(obs.rgb, cfg.STF_GRID_N)
        for object_id, obj in world.objects.items():
            token = build_token(
                object_id, obj.descriptor, obs.masks[object_id], obs.depth, obs.cam, grid, 0, cfg,
            )
            error = np.abs(token.centroid.as_array() - obj.center)
            assert np.all(error <= cfg.CENTROID_NOISE_BOUND)
            assert token.centroid_in_box(cfg.STF_BOX_EPS)
            assert token.provenance == object_id

    def test_degraded_geometry_uses_fixed_depth(self, cfg, frame):
        world, obs = frame
        grid = patch_feature_grid(obs.rgb, cfg.STF_GRID_N)
        token = build_token(
            "red_cube", "red cube", obs.masks["red_cube"], obs.depth, obs.cam, grid, 0, cfg,
            degrade_geometry=True,
        )
        assert token.centroid.y == pytest.approx(cfg.NAIVE_DEPTH - cfg.RENDER_CAMERA_DISTANCE)
        assert token.shape.x.sigma == 0.0

    def test_empty_mask_raises(self, cfg, frame):
        _, obs = frame
        grid = patch_feature_grid(obs.rgb, cfg.STF_GRID_N)
        with pytest.raises(EmptyRegion):
            build_token("ghost", "ghost", Mask.empty(obs.width, obs.height), obs.depth, obs.cam, grid, 0, cfg)


class TestTokenText:

    def test_half_even_rounding_and_negative_zero(self):
        assert format_number(0.00005, 4) == "0.0000"
        assert format_number(0.00015, 4) == "0.0002"
        assert format_number(-0.00001, 4) == "0.0000"

    def test_serialized_token_recovers_fields(self):
        token = make_token("red-cube-0", "red cube", (0.1, 0.0, 0.025), t=4)
        text = serialize_token(token, 4)
        assert text.splitlines()[0] == "stf/1"
        summary = parse_token_text(text)
        assert summary.object_id == "red-cube-0"
        assert summary.timestamp == 4
        assert summary.centroid.as_tuple() == (0.1, 0.0, 0.025)
        assert summary.shape.x.max == pytest.approx(0.125)
        assert summary.patch_count == 1
        assert not summary.fallback

    def test_serialization_is_deterministic(self):
        token = make_token("red-cube-0", "red cube", (0.1, 0.0, 0.025))
        assert serialize_token(token, 4) == serialize_token(token.model_copy(), 4)

    def test_round_trip_is_within_the_printed_precision(self):
        rng = np.random.default_rng(37)
        for i in range(200):
            center = tuple(float(v) for v in rng.uniform(-0.3, 0.3, size=3))
            summary = parse_token_text(serialize_token(make_token(f"obj-{i}", "red cube", center), 4))
            np.testing.assert_allclose(summary.centroid.as_array(), center, atol=1e-4)

    def test_distinct_tokens_give_distinct_text(self):
        tokens = [
            make_token("red-cube-0", "red cube", (0.001 * i, 0.0, 0.025)) for i in range(50)
        ] + [
            make_token(f"red-cube-{i}", "red cube", (0.0, 0.0, 0.025)) for i in range(1, 50)
        ]
        texts = {serialize_token(token, 4) for token in tokens}
        assert len(texts) == len(tokens)

    def test_malformed_text_raises(self):
        with pytest.raises(ValueError):
            parse_token_text("stf/1\nobject_id: a\ncentroid: 1 2")
