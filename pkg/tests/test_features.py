"""Feature pyramid, ROI pooling, positional table, and fused embedding."""

import numpy as np
import pytest

from retrack.exceptions import ValidationError
from retrack.features import (
    N_CHANNELS,
    STRIDES,
    build_pyramid,
    fuse_backward,
    fuse_embedding,
    init_projection,
    positional_table,
    roi_align,
)
from retrack.geometry import BBox


def random_grid(rng, h, w, c=N_CHANNELS):
    return rng.uniform(-1, 1, size=(h, w, c))


class TestBuildPyramid:
    def test_level_shapes_at_full_resolution(self):
        frame = np.zeros((540, 960))
        pyr = build_pyramid(frame)
        assert pyr.levels[3].shape == (68, 120, 4)
        assert pyr.levels[4].shape == (34, 60, 4)
        assert pyr.levels[5].shape == (17, 30, 4)
        assert pyr.dims.w == 960 and pyr.dims.h == 540

    def test_ceiling_division_on_ragged_sizes(self):
        pyr = build_pyramid(np.zeros((50, 70)))
        assert pyr.levels[3].shape == (7, 9, 4)
        assert pyr.levels[5].shape == (2, 3, 4)

    def test_constant_frame_channels(self):
        pyr = build_pyramid(np.full((64, 64), 0.6))
        for level in (3, 4, 5):
            grid = pyr.levels[level]
            assert np.allclose(grid[:, :, 0], 0.6, atol=1e-12)
            assert np.allclose(grid[:, :, 1], 0.0, atol=1e-12)
            assert np.allclose(grid[:, :, 2], 0.0, atol=1e-12)
            assert np.allclose(grid[:, :, 3], 0.0, atol=1e-9)

    def test_vertical_edge_excites_x_gradient_only(self):
        frame = np.zeros((64, 64))
        frame[:, 32:] = 1.0
        pyr = build_pyramid(frame)
        level = pyr.levels[3]
        # The x-gradient channel carries the edge response.
        assert level[:, :, 1].max() > 0.01
        assert np.allclose(level[:, :, 2], 0.0, atol=1e-12)
        edge_col = np.argmax(level[4, :, 1])
        assert abs(edge_col - 32 / 8) <= 1

    def test_horizontal_edge_excites_y_gradient_only(self):
        frame = np.zeros((64, 64))
        frame[32:, :] = 1.0
        pyr = build_pyramid(frame)
        level = pyr.levels[3]
        assert level[:, :, 2].max() > 0.01
        assert np.allclose(level[:, :, 1], 0.0, atol=1e-12)

    def test_rejects_out_of_range_frame(self):
        with pytest.raises(ValidationError):
            build_pyramid(np.full((16, 16), 1.5))
        with pytest.raises(ValidationError):
            build_pyramid(np.full((16, 16), -0.1))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValidationError):
            build_pyramid(np.zeros((8, 8, 3)))

    def test_deterministic(self):
        rng = np.random.default_rng(50)
        frame = rng.uniform(0, 1, size=(48, 64))
        a = build_pyramid(frame)
        b = build_pyramid(frame)
        for level in (3, 4, 5):
            assert np.array_equal(a.levels[level], b.levels[level])


class TestRoiAlign:
    def test_single_cell_box_reads_that_cell(self):
        rng = np.random.default_rng(51)
        grid = random_grid(rng, 10, 12)
        box = BBox(cx=5.5, cy=3.5, w=1.0, h=1.0)
        patch = roi_align(grid, box, 1)
        assert np.allclose(patch[0, 0], grid[3, 5], atol=1e-12)

    def test_box_between_two_cells_averages(self):
        rng = np.random.default_rng(52)
        grid = random_grid(rng, 10, 12)
        box = BBox(cx=6.0, cy=3.5, w=1.0, h=1.0)
        patch = roi_align(grid, box, 1)
        assert np.allclose(patch[0, 0], 0.5 * (grid[3, 5] + grid[3, 6]), atol=1e-12)

    def test_full_grid_box_recovers_cells(self):
        rng = np.random.default_rng(53)
        grid = random_grid(rng, 8, 8)
        box = BBox(cx=4.0, cy=4.0, w=8.0, h=8.0)
        patch = roi_align(grid, box, 8)
        assert np.allclose(patch, grid, atol=1e-12)

    def test_linearity_in_grid(self):
        rng = np.random.default_rng(54)
        grid = random_grid(rng, 9, 9)
        box = BBox(cx=4.3, cy=4.9, w=3.7, h=2.2)
        base = roi_align(grid, box, 3)
        assert np.allclose(roi_align(2.5 * grid, box, 3), 2.5 * base, atol=1e-9)
        other = random_grid(rng, 9, 9)
        assert np.allclose(
            roi_align(grid + other, box, 3),
            base + roi_align(other, box, 3),
            atol=1e-9,
        )

    def test_translation_consistency(self):
        rng = np.random.default_rng(55)
        grid = random_grid(rng, 12, 12)
        shifted = np.roll(grid, shift=-1, axis=1)
        box = BBox(cx=5.0, cy=6.0, w=2.0, h=2.0)
        moved = BBox(cx=6.0, cy=6.0, w=2.0, h=2.0)
        assert np.allclose(
            roi_align(grid, moved, 2), roi_align(shifted, box, 2), atol=1e-12
        )

    def test_border_clamp_keeps_values_finite(self):
        rng = np.random.default_rng(56)
        grid = random_grid(rng, 6, 6)
        patch = roi_align(grid, BBox(cx=0.0, cy=0.0, w=4.0, h=4.0), 3)
        assert np.all(np.isfinite(patch))
        assert patch.shape == (3, 3, N_CHANNELS)

    def test_rejects_flat_grid(self):
        with pytest.raises(ValidationError):
            roi_align(np.zeros((6, 6)), BBox(3.0, 3.0, 2.0, 2.0), 2)


class TestPositionalTable:
    def test_shape_and_range(self):
        table = positional_table(3)
        assert table.shape == (3, 3, N_CHANNELS)
        assert np.all(np.abs(table) <= 1.0)

    def test_axis_split(self):
        table = positional_table(4)
        half = N_CHANNELS // 2
        for c in range(half):
            # x-coded channels are constant down each column.
            assert np.allclose(table[:, :, c], table[0:1, :, c], atol=1e-15)
        for c in range(half, N_CHANNELS):
            assert np.allclose(table[:, :, c], table[:, 0:1, c], atol=1e-15)

    def test_sin_cos_values(self):
        table = positional_table(2)
        coords = (np.arange(2) + 0.5) / 2
        assert np.allclose(table[0, :, 0], np.sin(np.pi * coords), atol=1e-15)
        assert np.allclose(table[0, :, 1], np.cos(np.pi * coords), atol=1e-15)


class TestFusedEmbedding:
    def make_pyramid(self, rng, w=96, h=64):
        frame = rng.uniform(0, 1, size=(h, w))
        return build_pyramid(frame)

    def test_projection_init_bounds(self):
        rng = np.random.default_rng(57)
        proj = init_projection(rng, d_emb=16, pool=3)
        fan_in = 3 * 3 * N_CHANNELS
        for level in (3, 4, 5):
            w = proj.weights[level]
            assert w.shape == (16, fan_in)
            assert np.all(np.abs(w) <= 1.0 / np.sqrt(fan_in))
        assert proj.d_emb == 16
        assert proj.posenc.shape == (3, 3, N_CHANNELS)

    def test_embedding_shape_and_determinism(self):
        rng = np.random.default_rng(58)
        pyr = self.make_pyramid(rng)
        proj = init_projection(np.random.default_rng(0), d_emb=8, pool=3)
        box = BBox(cx=40.0, cy=30.0, w=20.0, h=16.0)
        e1, _ = fuse_embedding(pyr, box, proj)
        e2, _ = fuse_embedding(pyr, box, proj)
        assert e1.shape == (8,)
        assert np.array_equal(e1, e2)

    def test_linear_in_features_with_zero_posenc(self):
        rng = np.random.default_rng(59)
        pyr = self.make_pyramid(rng)
        proj = init_projection(np.random.default_rng(1), d_emb=8, pool=3)
        proj.posenc = np.zeros_like(proj.posenc)
        box = BBox(cx=40.0, cy=30.0, w=20.0, h=16.0)
        base, _ = fuse_embedding(pyr, box, proj)
        scaled = type(pyr)(
            levels={k: 3.0 * v for k, v in pyr.levels.items()}, dims=pyr.dims
        )
        out, _ = fuse_embedding(scaled, box, proj)
        assert np.allclose(out, 3.0 * base, atol=1e-9)

    def test_distinct_boxes_give_distinct_embeddings(self):
        rng = np.random.default_rng(60)
        pyr = self.make_pyramid(rng)
        proj = init_projection(np.random.default_rng(2), d_emb=8, pool=3)
        a, _ = fuse_embedding(pyr, BBox(20.0, 20.0, 16.0, 16.0), proj)
        b, _ = fuse_embedding(pyr, BBox(70.0, 40.0, 16.0, 16.0), proj)
        assert not np.allclose(a, b, atol=1e-6)

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(61)
        pyr = self.make_pyramid(rng)
        proj = init_projection(np.random.default_rng(3), d_emb=6, pool=3)
        box = BBox(cx=48.0, cy=32.0, w=24.0, h=18.0)
        upstream = rng.normal(size=6)
        _, cache = fuse_embedding(pyr, box, proj)
        grads = fuse_backward(cache, upstream)
        eps = 1e-6
        for level in (3, 4, 5):
            probe = np.zeros_like(proj.weights[level])
            probe[2, 5] = 1.0
            for sign in (1.0, -1.0):
                proj.weights[level] += sign * eps * probe
                val = float(upstream @ fuse_embedding(pyr, box, proj)[0])
                proj.weights[level] -= sign * eps * probe
                if sign > 0:
                    plus = val
                else:
                    minus = val
            numeric = (plus - minus) / (2 * eps)
            assert grads[level][2, 5] == pytest.approx(numeric, abs=1e-6)

    def test_strides_table(self):
        assert STRIDES == {3: 8, 4: 16, 5: 32}
