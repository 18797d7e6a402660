import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bapa_lab.errors import ShapeError
from bapa_lab.rope import RopeParams, apply_rotation, make_thetas, rotate, rotated_dot, rotated_dot_forms


def mp_thetas(d, base):
    with mpmath.workdps(40):
        return [float(mpmath.power(mpmath.mpf(base), -mpmath.mpf(2 * m) / d)) for m in range(d // 2)]


class TestThetas:
    def test_d4(self):
        np.testing.assert_allclose(make_thetas(4, 10000).thetas, [1.0, 0.01], atol=1e-15, rtol=0)

    @pytest.mark.parametrize("d", [2, 8, 16, 64, 128])
    def test_high_precision(self, d):
        np.testing.assert_allclose(make_thetas(d).thetas, mp_thetas(d, 10000), rtol=1e-14, atol=0)

    @pytest.mark.parametrize("d", [4, 8, 16, 64])
    def test_monotone(self, d):
        assert np.all(np.diff(make_thetas(d).thetas) < 0)

    @pytest.mark.parametrize("d", [0, 3, 7])
    def test_bad_dim(self, d):
        with pytest.raises(ShapeError):
            make_thetas(d)

    def test_read_only(self):
        with pytest.raises(ValueError):
            make_thetas(8).thetas[0] = 2.0


class TestRotation:
    def test_zero_position_is_identity(self, rng):
        v = rng.normal(size=16)
        np.testing.assert_array_equal(apply_rotation(RopeParams(16), 0, v), v)

    def test_half_turn(self):
        np.testing.assert_allclose(apply_rotation(RopeParams(2), np.pi, [1.0, 0.0]), [-1.0, 0.0], atol=1e-15)

    def test_plane_rotation_closed_form(self):
        out = apply_rotation(RopeParams(2), 0.3, [2.0, -1.0])
        c, s = np.cos(0.3), np.sin(0.3)
        np.testing.assert_allclose(out, [2 * c + s, 2 * s - c], atol=1e-15)

    def test_length_check(self):
        with pytest.raises(ShapeError):
            apply_rotation(RopeParams(8), 1, np.ones(6))

    def test_composition(self, rng):
        p = RopeParams(8)
        v = rng.normal(size=8)
        np.testing.assert_allclose(apply_rotation(p, 3, apply_rotation(p, 4, v)), apply_rotation(p, 7, v), atol=1e-12)

    def test_batched_matches_single(self, rng):
        p = RopeParams(8)
        x = rng.normal(size=(5, 8))
        pos = np.array([0, 1, 1, 7, 30])
        out = rotate(x, pos, p.thetas)
        for t in range(5):
            np.testing.assert_allclose(out[t], apply_rotation(p, pos[t], x[t]), atol=1e-14)

    @settings(max_examples=50)
    @given(st.sampled_from([2, 4, 16, 64]), st.floats(-1000, 1000), st.integers(0, 2**31))
    def test_isometry(self, d, pos, seed):
        v = np.random.default_rng(seed).normal(size=d)
        assert abs(np.linalg.norm(apply_rotation(RopeParams(d), pos, v)) - np.linalg.norm(v)) < 1e-9


class TestRelativeForm:
    @settings(max_examples=100)
    @given(st.sampled_from([4, 16, 64]), st.integers(0, 2048), st.integers(-512, 512), st.integers(-1000, 1000),
           st.integers(0, 2**31))
    def test_relative_and_shift(self, d, p, dq, shift, seed):
        r = np.random.default_rng(seed)
        u, v = r.normal(size=d), r.normal(size=d)
        params = RopeParams(d)
        q = p + dq
        direct, rel = rotated_dot_forms(params, p, u, q, v)
        assert abs(direct - rel) < 1e-6
        shifted, _ = rotated_dot_forms(params, p + shift, u, q + shift, v)
        assert abs(shifted - direct) < 1e-6

    def test_check_flag_passes(self, rng):
        u, v = rng.normal(size=16), rng.normal(size=16)
        assert rotated_dot(RopeParams(16), 5, u, 9, v, check=True) == pytest.approx(
            float(np.dot(u, apply_rotation(RopeParams(16), 4, v))), abs=1e-9)
