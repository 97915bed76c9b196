import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from volsr.errors import CorruptionError, DegenerateInputError, FormatError, ValidationError
from volsr.volgrid import (
    Volume,
    ZScoreStats,
    decode_volume,
    encode_volume,
    read_volume,
    rotation_matrix,
    trilinear_resample,
    write_volume,
    zscore_denormalize,
    zscore_normalize,
)

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


class TestVolume:
    def test_invariants(self):
        with pytest.raises(ValidationError):
            Volume(np.array([[[np.nan]]]))
        with pytest.raises(ValidationError):
            Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
        with pytest.raises(ValidationError):
            Volume(np.zeros((2, 2)))

    def test_immutable(self):
        v = Volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1


class TestIO:
    def test_ramp_round_trip(self, tmp_path):
        v = Volume(np.arange(32, dtype=np.float32).reshape((4, 4, 2)), (0.5, 0.5, 2.0))
        write_volume(v, tmp_path / "a.vol")
        raw = (tmp_path / "a.vol").read_bytes()
        back = read_volume(tmp_path / "a.vol")
        assert back == v
        write_volume(back, tmp_path / "b.vol")
        assert (tmp_path / "b.vol").read_bytes() == raw

    def test_layout_is_x_fastest(self):
        x = np.arange(8, dtype=np.float64).reshape((2, 2, 2))
        buf = encode_volume(Volume(x))
        (hlen,) = struct.unpack("<I", buf[4:8])
        payload = np.frombuffer(buf[8 + hlen :], dtype="<f4")
        assert list(payload[:2]) == [x[0, 0, 0], x[1, 0, 0]]

    def test_paper_geometry_spacing(self, tmp_path):
        v = Volume(np.zeros((192, 192, 40), dtype=np.float32), (0.802, 0.802, 2.5))
        write_volume(v, tmp_path / "hr.vol")
        back = read_volume(tmp_path / "hr.vol")
        assert back.spacing == (0.802, 0.802, 2.5)
        assert back.dims == (192, 192, 40)

    def test_short_payload_is_corruption(self):
        buf = encode_volume(Volume(np.ones((4, 4, 2))))
        with pytest.raises(CorruptionError):
            decode_volume(buf[:-4])

    def test_bad_magic(self):
        buf = encode_volume(Volume(np.ones((2, 2, 2))))
        with pytest.raises(FormatError):
            decode_volume(b"VOL2" + buf[4:])

    def test_bad_header(self):
        header = b"{not json"
        with pytest.raises(FormatError):
            decode_volume(b"VOL1" + struct.pack("<I", len(header)) + header)

    def test_non_finite_payload(self):
        buf = bytearray(encode_volume(Volume(np.ones((2, 2, 2)))))
        buf[-4:] = struct.pack("<f", float("inf"))
        with pytest.raises(ValidationError):
            decode_volume(bytes(buf))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)), elements=f32),
           st.tuples(*[st.floats(0.1, 10.0)] * 3))
    def test_round_trip_property(self, data, spacing):
        v = Volume(data, spacing)
        buf = encode_volume(v)
        assert encode_volume(decode_volume(buf)) == buf
        assert decode_volume(buf) == v


class TestZScore:
    def test_constant_rejected(self):
        with pytest.raises(DegenerateInputError):
            zscore_normalize(Volume(np.full((2, 2, 2), 4.0)))
        with pytest.raises(DegenerateInputError):
            ZScoreStats(0.0, 0.0)

    def test_alternating(self):
        x = np.indices((2, 2, 2)).sum(axis=0) % 2
        out, stats = zscore_normalize(Volume(x.astype(float)))
        assert (stats.mean, stats.stddev) == (0.5, 0.5)
        np.testing.assert_array_equal(np.abs(out.data), 1.0)

    def test_phantom_moments(self):
        from volsr.phantom import PhantomSpec, generate_subject

        v = generate_subject(PhantomSpec(dims=(32, 32, 16)), 3)[0]
        out, stats = zscore_normalize(v)
        assert abs(out.data.mean()) < 1e-6
        assert abs(out.data.std() - 1) < 1e-5
        back = zscore_denormalize(out, stats)
        np.testing.assert_allclose(back.data, v.data, rtol=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 3, 2), elements=st.floats(-1e3, 1e3)))
    def test_property(self, x):
        if np.ptp(x) < 1e-3:
            return
        out, stats = zscore_normalize(Volume(x))
        assert abs(out.data.mean()) < 1e-6
        assert abs(out.data.std() - 1) < 1e-5
        np.testing.assert_allclose(zscore_denormalize(out, stats).data, x, rtol=1e-5, atol=1e-5 * np.abs(x).max())


class TestTrilinear:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((5, 4, 3))
        v = Volume(x, (0.8, 0.8, 2.5))
        assert trilinear_resample(v, v.dims) == v
        assert trilinear_resample(v, v.dims, (0.0, 0.0)) == v

    def test_ramp_upsample(self):
        x = np.arange(8, dtype=float)[:, None, None] * np.ones((8, 4, 4))
        out = trilinear_resample(Volume(x), (16, 8, 8)).data
        i = np.arange(16)
        expected = (i + 0.5) / 2 - 0.5
        interior = slice(1, 15)
        np.testing.assert_allclose(out[interior, 2, 2], expected[interior], atol=1e-5)

    def test_upsample_spacing(self):
        out = trilinear_resample(Volume(np.ones((4, 4, 2)), (2.0, 2.0, 5.0)), (8, 8, 4))
        assert out.spacing == (1.0, 1.0, 2.5)

    def test_rotation_90_is_permutation(self):
        x = np.random.default_rng(1).standard_normal((8, 8, 4))
        out = trilinear_resample(Volume(x), (8, 8, 4), (90.0, 0.0)).data
        # output(p) = input(R^-1 p): about the centre c = 3.5, (i, j) <- (j, 7 - i)
        expected = np.empty_like(x)
        for i in range(8):
            for j in range(8):
                expected[i, j] = x[j, 7 - i]
        np.testing.assert_allclose(out[1:-1, 1:-1], expected[1:-1, 1:-1], atol=1e-5)

    def test_rotation_axes(self):
        r = rotation_matrix(90, 0)
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)
        r = rotation_matrix(0, 90)
        np.testing.assert_allclose(r @ [0, 1, 0], [0, 0, 1], atol=1e-12)

    def test_out_of_bounds_zero(self):
        out = trilinear_resample(Volume(np.ones((8, 8, 8))), (8, 8, 8), (45.0, 0.0)).data
        assert out[0, 0, 4] == 0.0
        assert out[4, 4, 4] == pytest.approx(1.0)

    def test_rotate_back_and_forth(self):
        from scipy.ndimage import gaussian_filter

        x = gaussian_filter(np.random.default_rng(2).standard_normal((24, 24, 6)), 2.0)
        x /= x.std()
        v = Volume(x)
        back = trilinear_resample(trilinear_resample(v, v.dims, (10.0, 0.0)), v.dims, (-10.0, 0.0)).data
        interior = (slice(5, -5), slice(5, -5), slice(None))
        rms = np.sqrt(np.mean((back[interior] - x[interior]) ** 2))
        assert rms < 5e-2

    def test_bad_target(self):
        with pytest.raises(ValidationError):
            trilinear_resample(Volume(np.ones((2, 2, 2))), (0, 2, 2))
        with pytest.raises(ValidationError):
            trilinear_resample(Volume(np.ones((2, 2, 2))), (2, 2, 2), (float("nan"), 0.0))
