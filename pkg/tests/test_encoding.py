import numpy as np
import pytest

from mantis.core import EchoSeries, KSpaceSet
from mantis.encoding import (EncodingOp, adjoint, adjoint_array, apply_mask, fft2_centered, forward,
                             forward_array, ifft2_centered, undersample)
from mantis.metrics import nrmse
from mantis.phantom import KNEE_TE_MS, PhantomSpec, make_phantom, synthesize_echoes
from mantis.sampling import MaskSet, make_maskset


def _cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_delta_at_center():
    x = np.zeros((6, 10), complex)
    x[3, 5] = 1
    np.testing.assert_allclose(fft2_centered(x), np.full((6, 10), 1 / np.sqrt(60)), atol=1e-15)


def test_parseval_and_roundtrip():
    rng = np.random.default_rng(0)
    x = _cplx(rng, (8, 8))
    k = fft2_centered(x)
    assert np.linalg.norm(k) == pytest.approx(np.linalg.norm(x), rel=1e-10)
    np.testing.assert_allclose(ifft2_centered(k), x, rtol=1e-6, atol=1e-12)


def test_odd_sizes_and_empty():
    x = _cplx(np.random.default_rng(1), (7, 5))
    np.testing.assert_allclose(ifft2_centered(fft2_centered(x)), x, atol=1e-12)
    with pytest.raises(ValueError):
        fft2_centered(np.zeros((0, 4)))


def test_full_mask_forward_is_fft():
    rng = np.random.default_rng(2)
    s = EchoSeries([1.0, 2.0], _cplx(rng, (2, 8, 6)))
    m = make_maskset(8, 2, 1.0)
    k = forward(EncodingOp(8, 6, m), s)
    np.testing.assert_allclose(k.data, fft2_centered(s.data), atol=1e-12)
    np.testing.assert_allclose(adjoint(EncodingOp(8, 6, m), k).data, s.data, atol=1e-12)


def test_center_only_mask_energy():
    lines = np.zeros((2, 16), np.uint8)
    lines[:, 7:9] = 1
    m = MaskSet(lines, 8.0, 0.125, 0)
    k = forward_array(_cplx(np.random.default_rng(3), (2, 16, 4)), lines)
    assert np.all(k[:, lines[0] == 0] == 0)
    assert np.all(np.abs(k[:, 7:9]) > 0)
    assert isinstance(KSpaceSet(k, m, [1.0, 2.0]), KSpaceSet)


def test_zero_kspace_zero_image():
    m = make_maskset(8, 2, 2.0)
    k = KSpaceSet(np.zeros((2, 8, 8), complex), m, [1.0, 2.0])
    assert np.all(adjoint(EncodingOp(8, 8, m), k).data == 0)


def test_adjoint_identity():
    rng = np.random.default_rng(4)
    m = make_maskset(32, 3, 5.0, seed=1)
    x = _cplx(rng, (3, 32, 16))
    y = _cplx(rng, (3, 32, 16)) * m.lines[:, :, None]
    lhs = np.vdot(y, forward_array(x, m.lines))
    rhs = np.vdot(adjoint_array(y, m.lines), x)
    assert abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)) < 1e-6


def test_mask_idempotent_and_normal_operator():
    rng = np.random.default_rng(5)
    m = make_maskset(16, 2, 4.0, seed=2)
    k = _cplx(rng, (2, 16, 8))
    once = apply_mask(k, m.lines)
    np.testing.assert_array_equal(apply_mask(once, m.lines), once)
    x = _cplx(rng, (2, 16, 8))
    fx = forward_array(x, m.lines)
    np.testing.assert_allclose(forward_array(adjoint_array(fx, m.lines), m.lines), fx, atol=1e-12)


def test_shape_checks():
    m = make_maskset(16, 2, 4.0)
    with pytest.raises(ValueError):
        EncodingOp(8, 8, m)
    op = EncodingOp(16, 8, m)
    with pytest.raises(ValueError):
        forward(op, EchoSeries([1.0, 2.0, 3.0], np.ones((3, 16, 8))))


def test_undersampled_phantom_has_aliasing():
    truth = make_phantom(PhantomSpec(seed=3))
    full = synthesize_echoes(truth, KNEE_TE_MS, 0.0)
    k, zf = undersample(full, make_maskset(64, 8, 5.0, seed=1))
    assert np.all(k.data[k.mask_ref.lines == 0] == 0)
    err = nrmse(np.abs(zf.data[0]), np.abs(full.data[0]), truth.roi_labels > 0)
    assert err > 1.0
