import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mantis.core import (MAGIC, BadMagicError, ContainerError, EchoSeries, KSpaceSet, ParamMaps,
                         ShapeMismatchError, TruncatedPayloadError, normalize_dataset, read_container,
                         read_raw, write_container, write_raw)
from mantis.metrics import EvalReport
from mantis.network import NetSpec, init_params
from mantis.sampling import make_mask_library, make_maskset


def _series(rng, t=3, ny=4, nx=5, dtype=np.complex64):
    data = (rng.standard_normal((t, ny, nx)) + 1j * rng.standard_normal((t, ny, nx))).astype(dtype)
    return EchoSeries(np.arange(1, t + 1) * 7.5, data)


class TestEchoSeries:
    def test_valid(self):
        s = _series(np.random.default_rng(0))
        assert (s.t, s.ny, s.nx) == (3, 4, 5)
        assert not s.data.flags.writeable

    def test_real_input_becomes_complex(self):
        s = EchoSeries([1.0, 2.0], np.ones((2, 2, 2)))
        assert np.iscomplexobj(s.data)

    @pytest.mark.parametrize("te", [[2.0, 1.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 3.0]])
    def test_bad_echo_times(self, te):
        with pytest.raises(ValueError):
            EchoSeries(te, np.ones((2, 2, 2)))

    def test_single_echo_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            EchoSeries([1.0], np.ones((1, 2, 2)))

    def test_non_finite_rejected(self):
        d = np.ones((2, 2, 2))
        d[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            EchoSeries([1.0, 2.0], d)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            EchoSeries([1.0, 2.0, 3.0], np.ones((2, 2, 2)))


class TestKSpaceSet:
    def test_unsampled_lines_must_be_zero(self):
        m = make_maskset(16, 2, 4.0, seed=1)
        data = np.ones((2, 16, 4), complex)
        with pytest.raises(ValueError, match="exactly zero"):
            KSpaceSet(data, m, [1.0, 2.0])
        ok = data * m.lines[:, :, None]
        assert KSpaceSet(ok, m, [1.0, 2.0]).data.shape == (2, 16, 4)

    def test_shape_must_match_mask(self):
        m = make_maskset(16, 2, 4.0, seed=1)
        with pytest.raises(ValueError):
            KSpaceSet(np.zeros((2, 8, 4), complex), m, [1.0, 2.0])


class TestParamMaps:
    def test_default_labels(self):
        i0 = np.array([[0.0, 1.0], [0.5, 0.0]])
        m = ParamMaps(i0, np.full((2, 2), 40.0))
        np.testing.assert_array_equal(m.roi_labels, [[0, 1], [1, 0]])

    def test_t2_range_enforced_on_foreground_only(self):
        i0 = np.array([[0.0, 1.0]])
        ParamMaps(i0, np.array([[0.0, 40.0]]))
        with pytest.raises(ValueError):
            ParamMaps(i0, np.array([[40.0, 0.5]]))
        with pytest.raises(ValueError):
            ParamMaps(i0, np.array([[40.0, 2500.0]]))

    def test_negative_i0(self):
        with pytest.raises(ValueError):
            ParamMaps(np.array([[-0.1]]), np.array([[40.0]]))

    def test_labels_zero_on_background(self):
        with pytest.raises(ValueError, match="roi_labels"):
            ParamMaps(np.array([[0.0, 1.0]]), np.full((1, 2), 40.0), np.array([[1, 1]]))


class TestNormalize:
    def test_divides_by_max(self):
        data = np.zeros((2, 2, 2))
        data[1, 0, 1] = -4.0
        data[0, 1, 1] = 2.0
        out, scale = normalize_dataset(EchoSeries([1.0, 2.0], data))
        assert scale == 4.0
        np.testing.assert_array_equal(out.data, data / 4.0)

    def test_unit_max_is_identity(self):
        s = EchoSeries([1.0, 2.0], np.array([[[1.0, 0.5]], [[0.25, 0.1]]]))
        out, scale = normalize_dataset(s)
        assert scale == 1.0
        np.testing.assert_array_equal(out.data, s.data)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate dataset"):
            normalize_dataset(EchoSeries([1.0, 2.0], np.zeros((2, 3, 3))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_scale_equivariance_and_idempotence(self, seed, c):
        s = _series(np.random.default_rng(seed), dtype=np.complex128)
        a, sa = normalize_dataset(s)
        b, sb = normalize_dataset(EchoSeries(s.te_ms, s.data * c))
        np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-15)
        assert sb == pytest.approx(c * sa, rel=1e-12)
        again, s2 = normalize_dataset(a)
        assert s2 == pytest.approx(1.0, rel=1e-15)


class TestContainer:
    def test_echo_roundtrip_2x2x2(self, tmp_path):
        s = _series(np.random.default_rng(1), t=2, ny=2, nx=2)
        write_container(tmp_path / "e.qmt", s, seed=3)
        back = read_container(tmp_path / "e.qmt")
        np.testing.assert_array_equal(back.data, s.data)
        np.testing.assert_array_equal(back.te_ms, s.te_ms)

    def test_te_full_precision(self, tmp_path):
        te = [7.123456789012345, 16.000000000000004]
        s = EchoSeries(te, np.ones((2, 1, 1), np.complex64))
        write_container(tmp_path / "e.qmt", s)
        assert list(read_container(tmp_path / "e.qmt").te_ms) == te

    def test_layout(self, tmp_path):
        write_raw(tmp_path / "r.qmt", "maps", np.arange(6, dtype=np.float32).reshape(1, 2, 3))
        raw = (tmp_path / "r.qmt").read_bytes()
        assert raw[:4] == MAGIC
        (hlen,) = struct.unpack("<I", raw[4:8])
        payload = raw[8 + hlen:]
        assert len(payload) == 6 * 4
        np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), np.arange(6))

    def test_complex_interleaved(self, tmp_path):
        arr = np.array([[[1 + 2j, 3 - 4j]]], np.complex64)
        write_raw(tmp_path / "c.qmt", "echoes", arr)
        raw = (tmp_path / "c.qmt").read_bytes()
        (hlen,) = struct.unpack("<I", raw[4:8])
        np.testing.assert_array_equal(np.frombuffer(raw[8 + hlen:], "<f4"), [1, 2, 3, -4])

    def test_kspace_roundtrip(self, tmp_path):
        from mantis.encoding import undersample
        m = make_maskset(8, 3, 2.0, seed=4)
        k, _ = undersample(_series(np.random.default_rng(2), ny=8), m)
        write_container(tmp_path / "k.qmt", k)
        back = read_container(tmp_path / "k.qmt")
        np.testing.assert_array_equal(back.data, k.data.astype(np.complex64))
        assert back.mask_ref == m

    def test_maskset_and_library_roundtrip(self, tmp_path):
        m = make_maskset(32, 4, 4.0, seed=9)
        write_container(tmp_path / "m.qmt", m)
        assert read_container(tmp_path / "m.qmt") == m
        lib = make_mask_library(5, 32, 4, 4.0, seed=2)
        write_container(tmp_path / "l.qmt", lib)
        assert read_container(tmp_path / "l.qmt") == lib

    def test_maps_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        i0 = rng.random((6, 7)).astype(np.float32)
        i0[0] = 0
        t2 = rng.uniform(1, 200, (6, 7)).astype(np.float32)
        lab = np.where(i0 > 0, rng.integers(1, 4, (6, 7)), 0)
        m = ParamMaps(i0, t2, lab)
        write_container(tmp_path / "p.qmt", m)
        back = read_container(tmp_path / "p.qmt")
        for f in ("i0", "t2_ms", "roi_labels"):
            np.testing.assert_array_equal(getattr(back, f), getattr(m, f))

    def test_netparams_roundtrip(self, tmp_path):
        p = init_params(NetSpec(in_channels=2, levels=1, base_filters=2), seed=1)
        p.step = 7
        p.extra["r"] = 5.0
        write_container(tmp_path / "n.qmt", p)
        back = read_container(tmp_path / "n.qmt")
        assert back.spec == p.spec and back.step == 7 and back.extra == {"r": 5.0}
        np.testing.assert_array_equal(back.to_flat(), p.to_flat())

    def test_report_roundtrip(self, tmp_path):
        r = EvalReport()
        r.add("glr", 5.0, "nrmse", "all", 0.1 + 0.2, 1 / 3, 6)
        write_container(tmp_path / "r.qmt", r)
        assert read_container(tmp_path / "r.qmt").equals(r)

    def test_bad_magic(self, tmp_path):
        write_raw(tmp_path / "x.qmt", "maps", np.zeros((1, 1, 1), np.float32))
        raw = bytearray((tmp_path / "x.qmt").read_bytes())
        raw[:4] = b"QMT0"
        (tmp_path / "x.qmt").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match="bad magic"):
            read_container(tmp_path / "x.qmt")

    def test_truncated(self, tmp_path):
        write_raw(tmp_path / "x.qmt", "maps", np.zeros((3, 2, 2), np.float32))
        raw = (tmp_path / "x.qmt").read_bytes()
        (tmp_path / "x.qmt").write_bytes(raw[:-1])
        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            read_raw(tmp_path / "x.qmt")
        (tmp_path / "x.qmt").write_bytes(raw[:6])
        with pytest.raises(TruncatedPayloadError):
            read_raw(tmp_path / "x.qmt")

    def test_length_mismatch(self, tmp_path):
        write_raw(tmp_path / "x.qmt", "maps", np.zeros((3, 2, 2), np.float32))
        raw = (tmp_path / "x.qmt").read_bytes()
        (tmp_path / "x.qmt").write_bytes(raw + b"\0\0\0\0")
        with pytest.raises(ShapeMismatchError):
            read_raw(tmp_path / "x.qmt")

    def test_error_codes_distinct(self):
        codes = {BadMagicError.code, TruncatedPayloadError.code, ShapeMismatchError.code}
        assert len(codes) == 3

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ContainerError):
            write_raw(tmp_path / "x.qmt", "volume", np.zeros(1))

    def test_unserializable(self, tmp_path):
        with pytest.raises(ContainerError):
            write_container(tmp_path / "x.qmt", {"a": 1})

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(allow_nan=False, width=32)))
    def test_float32_bit_exact(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("rt") / "a.qmt"
        write_raw(path, "maps", arr)
        _, back = read_raw(path)
        assert back.tobytes() == arr.astype("<f4").tobytes()
