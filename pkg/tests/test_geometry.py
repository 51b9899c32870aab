import math

import numpy as np
import pytest

from tokentraj import geometry as geo
from tokentraj.errors import ConfigError, DomainError


def random_pose(rng):
    return geo.Pose2D(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-np.pi, np.pi))


class TestWrapAngle:
    def test_interval_is_half_open(self):
        assert geo.wrap_angle(np.pi) == pytest.approx(np.pi)
        assert geo.wrap_angle(-np.pi) == pytest.approx(np.pi)
        assert geo.wrap_angle(3 * np.pi) == pytest.approx(np.pi)

    def test_random_values_land_in_interval(self):
        rng = np.random.default_rng(0)
        for theta in rng.uniform(-50, 50, size=200):
            w = geo.wrap_angle(theta)
            assert -np.pi < w <= np.pi
            assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-12)
            assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-12)


class TestRelativeTransform:
    def test_identity(self):
        p = geo.Pose2D(3, 4, 0.7)
        rel = geo.relative_transform(p, p)
        assert (rel.dx, rel.dy, rel.dtheta) == (0.0, 0.0, 0.0)

    def test_rotated_frame_hand_case(self):
        rel = geo.relative_transform(geo.Pose2D(0, 0, np.pi / 2), geo.Pose2D(0, 1, np.pi / 2))
        assert np.allclose([rel.dx, rel.dy, rel.dtheta], [1, 0, 0])

    def test_translation_hand_case(self):
        rel = geo.relative_transform(geo.Pose2D(1, 1, 0), geo.Pose2D(2, 3, np.pi))
        assert np.allclose([rel.dx, rel.dy, rel.dtheta], [1, 2, np.pi])

    def test_non_finite_rejected(self):
        with pytest.raises(DomainError):
            geo.Pose2D(np.nan, 0, 0)
        with pytest.raises(DomainError):
            geo.relative_transform_array(np.array([[0, 0, np.inf]]), np.zeros((1, 3)))

    def test_se2_invariance_under_global_motion(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b, motion = random_pose(rng), random_pose(rng), random_pose(rng)
            rel = geo.relative_transform(a, b)
            rel_moved = geo.relative_transform(
                geo.transform_pose(motion, a), geo.transform_pose(motion, b)
            )
            assert abs(rel.dx - rel_moved.dx) < 1e-9
            assert abs(rel.dy - rel_moved.dy) < 1e-9
            assert abs(geo.wrap_angle(rel.dtheta - rel_moved.dtheta)) < 1e-9

    def test_global_delta_breaks_invariance(self):
        a = geo.Pose2D(0, 0, 0.3)
        b = geo.Pose2D(5, 1, 1.0)
        motion = geo.Pose2D(0, 0, np.pi / 2)
        rel = geo.relative_transform(a, b, global_delta=True)
        rel_moved = geo.relative_transform(
            geo.transform_pose(motion, a), geo.transform_pose(motion, b), global_delta=True
        )
        assert abs(rel.dx - rel_moved.dx) > 1e-3

    def test_inverse_consistency(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            fwd = geo.relative_transform(a, b)
            back = geo.relative_transform(b, a)
            # composing the two displacements in a's frame returns to origin
            c, s = math.cos(fwd.dtheta), math.sin(fwd.dtheta)
            round_x = fwd.dx + c * back.dx - s * back.dy
            round_y = fwd.dy + s * back.dx + c * back.dy
            assert abs(round_x) < 1e-9 and abs(round_y) < 1e-9
            assert abs(geo.wrap_angle(fwd.dtheta + back.dtheta)) < 1e-9

    def test_array_variant_matches_scalar(self):
        rng = np.random.default_rng(3)
        src = np.array([random_pose(rng).as_array() for _ in range(20)])
        dst = np.array([random_pose(rng).as_array() for _ in range(20)])
        batch = geo.relative_transform_array(src, dst)
        for i in range(20):
            rel = geo.relative_transform(geo.Pose2D(*src[i]), geo.Pose2D(*dst[i]))
            assert np.allclose(batch[i], [rel.dx, rel.dy, rel.dtheta])


class TestApplyPose:
    def test_identity_frame(self):
        assert geo.apply_pose(geo.Pose2D(0, 0, 0), (5, 6)) == (5.0, 6.0)

    def test_hand_rotation(self):
        out = geo.apply_pose(geo.Pose2D(1, 0, np.pi / 2), (1, 0))
        assert np.allclose(out, (1, 1))

    def test_inverse_pair(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            f = random_pose(rng)
            q = (rng.uniform(-30, 30), rng.uniform(-30, 30))
            back = geo.apply_pose(f, geo.to_local(f, q))
            assert np.allclose(back, q, atol=1e-9)


class TestFourierEncode:
    def test_zero_input(self):
        out = geo.fourier_encode(geo.RelativeTransform(0, 0, 0), [1.0, 2.0, 4.0])
        assert np.allclose(out[0::2], 0.0)
        assert np.allclose(out[1::2], 1.0)

    def test_hand_value(self):
        out = geo.fourier_encode(geo.RelativeTransform(np.pi, 0, 0), [1.0])
        assert out[0] == pytest.approx(math.sin(math.pi))
        assert out[1] == pytest.approx(-1.0)

    def test_shape_law(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            n = int(rng.integers(1, 9))
            freqs = rng.uniform(0.01, 2.0, size=n)
            out = geo.fourier_encode(geo.RelativeTransform(*rng.normal(size=3)), freqs)
            assert out.shape == (2 * n * 3,)

    def test_empty_frequencies_rejected(self):
        with pytest.raises(ConfigError):
            geo.fourier_encode(geo.RelativeTransform(0, 0, 0), [])

    def test_injective_on_grid_within_lowest_period(self):
        freqs = geo.geometric_frequencies()
        period = 2 * np.pi / freqs[0]
        xs = np.linspace(-period / 2 + 1e-3, period / 2 - 1e-3, 41)
        rels = np.zeros((41, 3))
        rels[:, 0] = xs
        enc = geo.fourier_encode(rels, freqs)
        for i in range(41):
            for j in range(i + 1, 41):
                assert not np.allclose(enc[i], enc[j], atol=1e-9)


class TestSpatialPosEmbed:
    def test_zero_weights_give_zero(self):
        from tokentraj.nn import ParamStore

        store = ParamStore(np.random.default_rng(0))
        layers = store.mlp("pos", [6, 8, 8])
        for layer in layers:
            layer.w.data[:] = 0.0
        out = geo.spatial_pos_embed(geo.RelativeTransform(1, 2, 0.3), [1.0], layers)
        assert np.allclose(out.data, 0.0)

    def test_deterministic(self):
        from tokentraj.nn import ParamStore

        store = ParamStore(np.random.default_rng(1))
        layers = store.mlp("pos", [6, 8, 8])
        rel = geo.RelativeTransform(1, 2, 0.3)
        a = geo.spatial_pos_embed(rel, [1.0], layers).data
        b = geo.spatial_pos_embed(rel, [1.0], layers).data
        assert np.array_equal(a, b)

    def test_gradient_matches_finite_differences(self):
        from tokentraj import autograd as ag
        from tokentraj.nn import ParamStore
        from tokentraj.numdiff import check_gradients

        rng = np.random.default_rng(2)
        store = ParamStore(rng)
        layers = store.mlp("pos", [6, 8, 8])
        rel = geo.RelativeTransform(1.5, -2.0, 0.4)

        def loss():
            out = geo.spatial_pos_embed(rel, [0.5], layers)
            return ag.mean_all(ag.mul(out, out))

        tensors = [l.w for l in layers] + [l.b for l in layers]
        worst = check_gradients(loss, tensors, rng, probes_per_tensor=4, rel_tol=1e-4)
        assert worst < 1e-4
