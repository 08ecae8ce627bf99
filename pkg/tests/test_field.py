"""Distance transform, normal field, trilinear sampling, and field io tests."""

import numpy as np
import pytest

from fieldprobe.errors import FormatError
from fieldprobe.field import (
    ROLE_DISTANCE,
    ROLE_GENERIC,
    ROLE_NORMAL_X,
    ROLE_NORMAL_Z,
    Field3D,
    distance_field,
    field_from_occupancy,
    normal_field,
    read_field,
    sample_field,
    squared_distance_transform,
    write_field,
)
from fieldprobe.ingest import OccupancyGrid


def occupancy_from_coords(r, coords):
    bits = np.zeros((r, r, r), dtype=bool)
    for z, y, x in coords:
        bits[z, y, x] = True
    return OccupancyGrid(r, bits)


def brute_force_squared(occ):
    """Reference: minimum over occupied voxels of integer squared offsets."""
    occupied = np.argwhere(occ.bits)
    grid = np.indices(occ.bits.shape).reshape(3, -1).T
    d2 = ((grid[:, None, :] - occupied[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    return d2.reshape(occ.bits.shape)


def random_occupancy(r, rng, fill=0.05):
    bits = rng.random((r, r, r)) < fill
    if not bits.any():
        bits[tuple(rng.integers(0, r, size=3))] = True
    return OccupancyGrid(r, bits)


class TestSquaredDistance:
    def test_single_site_hand_values(self):
        occ = occupancy_from_coords(8, [(4, 3, 2)])
        sq = squared_distance_transform(occ)
        assert sq[4, 3, 2] == 0
        assert sq[0, 0, 0] == 16 + 9 + 4
        assert sq[4, 3, 3] == 1
        assert sq[7, 7, 7] == 9 + 16 + 25

    def test_two_sites_take_nearer(self):
        occ = occupancy_from_coords(8, [(0, 0, 0), (0, 0, 6)])
        sq = squared_distance_transform(occ)
        assert sq[0, 0, 2] == 4
        assert sq[0, 0, 4] == 4
        assert sq[0, 0, 3] == 9

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        for r in (4, 8, 12):
            for _ in range(5):
                occ = random_occupancy(r, rng)
                np.testing.assert_array_equal(
                    squared_distance_transform(occ), brute_force_squared(occ)
                )

    def test_integer_dtype(self):
        occ = occupancy_from_coords(4, [(1, 1, 1)])
        assert squared_distance_transform(occ).dtype == np.int64

    def test_empty_grid_rejected(self):
        occ = OccupancyGrid(4, np.zeros((4, 4, 4), dtype=bool))
        with pytest.raises(ValueError, match="empty"):
            squared_distance_transform(occ)

    def test_distance_is_sqrt(self):
        rng = np.random.default_rng(23)
        occ = random_occupancy(8, rng)
        np.testing.assert_array_equal(
            distance_field(occ), np.sqrt(squared_distance_transform(occ).astype(np.float64))
        )

    def test_lipschitz_on_nodes(self):
        # |d(u) - d(v)| <= |u - v| for any node pair of a metric projection
        rng = np.random.default_rng(31)
        occ = random_occupancy(12, rng, fill=0.02)
        d = distance_field(occ)
        for _ in range(300):
            u = rng.integers(0, 12, size=3)
            v = rng.integers(0, 12, size=3)
            gap = abs(d[tuple(u)] - d[tuple(v)])
            assert gap <= np.linalg.norm(u - v) + 1e-9


class TestNormalField:
    def test_single_plane_points_away(self):
        occ = OccupancyGrid(8, np.zeros((8, 8, 8), dtype=bool))
        occ.bits[0] = True
        normals = normal_field(distance_field(occ))
        # distance grows with z, so the gradient is +z everywhere
        np.testing.assert_allclose(normals[2], 1.0)
        np.testing.assert_allclose(normals[:2], 0.0)

    def test_unit_norm_or_zero(self):
        rng = np.random.default_rng(41)
        occ = random_occupancy(12, rng)
        normals = normal_field(distance_field(occ))
        norm = np.sqrt((normals**2).sum(axis=0))
        is_zero = norm < 1e-12
        np.testing.assert_allclose(norm[~is_zero], 1.0, atol=1e-12)

    def test_ridge_gets_zero_vector(self):
        # two parallel sheets: midway voxels see equal pull both ways
        occ = OccupancyGrid(8, np.zeros((8, 8, 8), dtype=bool))
        occ.bits[0] = True
        occ.bits[4] = True
        normals = normal_field(distance_field(occ))
        np.testing.assert_array_equal(normals[:, 2], 0.0)

    def test_gradient_components_are_xyz(self):
        # occupied plane x = 0 makes distance = x, so component 0 carries it
        occ = OccupancyGrid(8, np.zeros((8, 8, 8), dtype=bool))
        occ.bits[:, :, 0] = True
        normals = normal_field(distance_field(occ))
        np.testing.assert_allclose(normals[0], 1.0)
        np.testing.assert_allclose(normals[1:], 0.0)


class TestField3D:
    def test_validation(self):
        with pytest.raises(ValueError, match="T, R, R, R"):
            Field3D(np.zeros((4, 4, 4)), [0])
        with pytest.raises(ValueError, match="T, R, R, R"):
            Field3D(np.zeros((1, 4, 4, 5)), [0])
        with pytest.raises(ValueError, match="roles"):
            Field3D(np.zeros((2, 4, 4, 4)), [0])
        with pytest.raises(ValueError, match="role code"):
            Field3D(np.zeros((1, 4, 4, 4)), [7])

    def test_gradient_cache_hand_values(self):
        r = 6
        x = np.arange(r, dtype=np.float64)
        vals = np.broadcast_to(x**2, (r, r, r)).copy()  # varies along x only
        fld = Field3D(vals[None], [ROLE_GENERIC])
        gx = fld.gradients[0, 0]
        # central differences: ((i+1)^2 - (i-1)^2) / 2 = 2i in the interior
        np.testing.assert_allclose(gx[:, :, 1:-1], np.broadcast_to(2.0 * x[1:-1], (r, r, r - 2)))
        np.testing.assert_allclose(gx[:, :, 0], 1.0)  # one-sided: 1 - 0
        np.testing.assert_allclose(gx[:, :, -1], 2 * r - 3.0)
        np.testing.assert_allclose(fld.gradients[0, 1:], 0.0)

    def test_standard_stack(self):
        occ = occupancy_from_coords(8, [(4, 4, 4)])
        fld = field_from_occupancy(occ)
        assert fld.channel_count == 4
        assert list(fld.roles) == [0, 1, 2, 3]
        assert fld.values.dtype == np.float32
        assert fld.values[0, 4, 4, 4] == 0.0


def trilinear_closed_form(coef, pts):
    """Evaluate a + bx + cy + dz + e xy + f xz + g yz + h xyz."""
    a, b, c, d, e, f, g, h = coef
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return a + b * x + c * y + d * z + e * x * y + f * x * z + g * y * z + h * x * y * z


def field_from_closed_form(coef, r, dtype=np.float64):
    z, y, x = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    pts = np.column_stack([x.ravel(), y.ravel(), z.ravel()]).astype(np.float64)
    vals = trilinear_closed_form(coef, pts).reshape(r, r, r)
    return Field3D(vals[None].astype(dtype), [ROLE_GENERIC])


class TestSampling:
    def test_exact_on_trilinear_family(self):
        # interpolation must reproduce any function of the one-per-cell
        # trilinear family to float64 roundoff
        rng = np.random.default_rng(53)
        for _ in range(10):
            coef = rng.uniform(-2, 2, size=8)
            fld = field_from_closed_form(coef, 8)
            pts = rng.uniform(0, 7, size=(50, 3))
            vals, _ = sample_field(fld, pts, with_gradients=False)
            np.testing.assert_allclose(
                vals[:, 0], trilinear_closed_form(coef, pts), rtol=0, atol=1e-9
            )

    def test_nodes_reproduced_exactly(self):
        rng = np.random.default_rng(59)
        vals = rng.standard_normal((2, 6, 6, 6)).astype(np.float32)
        fld = Field3D(vals, [ROLE_DISTANCE, ROLE_GENERIC])
        nodes = rng.integers(0, 6, size=(40, 3))
        sampled, _ = sample_field(fld, nodes.astype(np.float64), with_gradients=False)
        for k, (x, y, z) in enumerate(nodes):
            assert sampled[k, 0] == np.float64(vals[0, z, y, x])
            assert sampled[k, 1] == np.float64(vals[1, z, y, x])

    def test_corner_node_exact(self):
        # p = R-1 exercises the clamped base cell with fraction exactly 1
        vals = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
        fld = Field3D(vals, [ROLE_GENERIC])
        sampled, _ = sample_field(fld, [[1.0, 1.0, 1.0]], with_gradients=False)
        assert sampled[0, 0] == 7.0

    def test_out_of_hull_points_clamped(self):
        rng = np.random.default_rng(61)
        fld = Field3D(rng.standard_normal((1, 5, 5, 5)), [ROLE_GENERIC])
        far, _ = sample_field(fld, [[-3.0, 2.2, 99.0]], with_gradients=False)
        edge, _ = sample_field(fld, [[0.0, 2.2, 4.0]], with_gradients=False)
        assert far[0, 0] == edge[0, 0]

    def test_midpoint_hand_value(self):
        vals = np.zeros((1, 2, 2, 2))
        vals[0, 1, 1, 1] = 8.0
        fld = Field3D(vals, [ROLE_GENERIC])
        sampled, _ = sample_field(fld, [[0.5, 0.5, 0.5]], with_gradients=False)
        assert sampled[0, 0] == pytest.approx(1.0)  # 8 / 2^3

    def test_gradients_of_linear_field_are_constant(self):
        coef = np.array([1.0, 2.0, 3.0, -1.0, 0, 0, 0, 0])
        fld = field_from_closed_form(coef, 8)
        rng = np.random.default_rng(67)
        pts = rng.uniform(0, 7, size=(30, 3))
        _, grads = sample_field(fld, pts)
        np.testing.assert_allclose(grads[:, 0, 0], 2.0, atol=1e-12)
        np.testing.assert_allclose(grads[:, 0, 1], 3.0, atol=1e-12)
        np.testing.assert_allclose(grads[:, 0, 2], -1.0, atol=1e-12)

    def test_gradients_interpolate_gradient_stack(self):
        # the reported gradient is the interpolated precomputed stack, so at
        # a node it equals the central difference there, not the cell slope
        rng = np.random.default_rng(71)
        vals = rng.standard_normal((1, 6, 6, 6))
        fld = Field3D(vals, [ROLE_GENERIC])
        _, grads = sample_field(fld, [[2.0, 3.0, 1.0]])
        gz, gy, gx = np.gradient(vals[0])
        np.testing.assert_allclose(grads[0, 0], [gx[1, 3, 2], gy[1, 3, 2], gz[1, 3, 2]], atol=1e-12)

    def test_single_point_accepted(self):
        fld = Field3D(np.zeros((1, 4, 4, 4)), [ROLE_GENERIC])
        vals, grads = sample_field(fld, [1.0, 2.0, 3.0])
        assert vals.shape == (1, 1) and grads.shape == (1, 1, 3)

    def test_gradient_skip_path(self):
        fld = Field3D(np.zeros((1, 4, 4, 4)), [ROLE_GENERIC])
        vals, grads = sample_field(fld, [[1, 1, 1]], with_gradients=False)
        assert grads is None


class TestFieldIo:
    def make_field(self, seed=0):
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal((4, 5, 5, 5)).astype(np.float32)
        return Field3D(vals, [ROLE_DISTANCE, ROLE_NORMAL_X, 2, ROLE_NORMAL_Z])

    def test_round_trip_values(self):
        fld = self.make_field()
        back = read_field(write_field(fld))
        np.testing.assert_array_equal(back.values, fld.values)
        np.testing.assert_array_equal(back.roles, fld.roles)

    def test_round_trip_bytes_identical(self):
        blob = write_field(self.make_field())
        assert write_field(read_field(blob)) == blob

    def test_float64_storage_written_as_float32(self):
        fld = Field3D(np.full((1, 4, 4, 4), 1 / 3), [ROLE_GENERIC])
        back = read_field(write_field(fld))
        assert back.values.dtype == np.float32
        assert back.values[0, 0, 0, 0] == np.float32(1 / 3)

    def test_header_layout(self):
        blob = write_field(self.make_field())
        assert blob[:4] == b"FPF1"
        assert int.from_bytes(blob[4:8], "little") == 5
        assert int.from_bytes(blob[8:12], "little") == 4
        assert list(blob[12:16]) == [0, 1, 2, 3]
        assert len(blob) == 16 + 4 * 4 * 125

    def test_bad_magic(self):
        blob = write_field(self.make_field())
        with pytest.raises(FormatError, match="magic"):
            read_field(b"XXXX" + blob[4:])

    def test_truncated(self):
        blob = write_field(self.make_field())
        with pytest.raises(FormatError, match="truncated"):
            read_field(blob[:30])
        with pytest.raises(FormatError, match="truncated"):
            read_field(blob[:8])

    def test_trailing_garbage(self):
        blob = write_field(self.make_field())
        with pytest.raises(FormatError, match="trailing"):
            read_field(blob + b"\x00")

    def test_bad_role_byte(self):
        blob = bytearray(write_field(self.make_field()))
        blob[12] = 9
        with pytest.raises(FormatError, match="role"):
            read_field(bytes(blob))

    def test_nan_payload(self):
        blob = bytearray(write_field(self.make_field()))
        blob[16:20] = np.float32(np.nan).tobytes()
        with pytest.raises(FormatError, match="finite"):
            read_field(bytes(blob))

    def test_write_rejects_non_finite(self):
        fld = Field3D(np.full((1, 4, 4, 4), np.inf), [ROLE_GENERIC])
        with pytest.raises(ValueError, match="finite"):
            write_field(fld)

    def test_implausible_header(self):
        blob = b"FPF1" + (0).to_bytes(4, "little") + (1).to_bytes(4, "little")
        with pytest.raises(FormatError, match="implausible"):
            read_field(blob)

    def test_file_round_trip(self, tmp_path):
        from fieldprobe.field import load_field, save_field

        fld = self.make_field(3)
        save_field(fld, tmp_path / "f.field")
        back = load_field(tmp_path / "f.field")
        np.testing.assert_array_equal(back.values, fld.values)
