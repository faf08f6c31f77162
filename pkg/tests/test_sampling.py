import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mantis.sampling import (achieved_acceleration, center_block, density_weights, line_budget,
                             make_mask_library, make_maskset)


def test_knee_grid_counts():
    m = make_maskset(256, 8, 5.0, 0.05, seed=0)
    assert np.all(m.lines.sum(axis=1) == 51)
    center = center_block(256, 0.05)
    assert center.size == 13
    assert np.all(m.lines[:, center] == 1)
    assert achieved_acceleration(m) == pytest.approx(256 / 51)


def test_full_sampling():
    m = make_maskset(32, 4, 1.0, seed=3)
    assert np.all(m.lines == 1)
    assert achieved_acceleration(m) == 1.0


def test_seeds_differ_outside_center():
    a = make_maskset(64, 8, 8.0, seed=1)
    b = make_maskset(64, 8, 8.0, seed=2)
    assert np.any(a.lines != b.lines)


def test_r8_acceleration():
    m = make_maskset(64, 8, 8.0, seed=0)
    assert 7.5 <= achieved_acceleration(m) <= 8.5


def test_center_exceeds_budget():
    with pytest.raises(ValueError, match="center exceeds budget"):
        make_maskset(64, 2, 32.0, center_frac=0.2)


def test_invalid_r():
    with pytest.raises(ValueError):
        make_maskset(64, 2, 0.5)


def test_density_weights_shape():
    w = density_weights(64)
    assert w[32] == 1.0
    assert np.all(w > 0)
    assert np.all(np.diff(w[32:]) < 0) and np.all(np.diff(w[:33]) > 0)


def test_library():
    lib = make_mask_library(100, 64, 8, 5.0, seed=3)
    assert len(lib) == 100
    keys = {m.lines.tobytes() for m in lib}
    assert len(keys) == 100
    again = make_mask_library(100, 64, 8, 5.0, seed=3)
    assert all(a == b for a, b in zip(lib, again))
    assert len(make_mask_library(1, 64, 8, 5.0)) == 1
    with pytest.raises(ValueError):
        make_mask_library(0, 64, 8, 5.0)


@settings(max_examples=60, deadline=None)
@given(ny=st.integers(16, 300), r=st.floats(1.0, 10.0), frac=st.floats(0.0, 0.1),
       seed=st.integers(0, 2**32 - 1), t=st.integers(1, 10))
def test_budget_and_center_invariants(ny, r, frac, seed, t):
    budget = line_budget(ny, r)
    center = center_block(ny, frac)
    if budget < center.size:
        with pytest.raises(ValueError):
            make_maskset(ny, t, r, frac, seed)
        return
    m = make_maskset(ny, t, r, frac, seed)
    assert m.lines.shape == (t, ny)
    assert np.all(m.lines.sum(axis=1) == budget)
    assert np.all(m.lines[:, center] == 1)


def test_ky_t_incoherence():
    for seed in range(100):
        m = make_maskset(64, 8, 5.0, seed=seed)
        union = m.lines.max(axis=0).sum()
        assert union > m.lines.sum(axis=1).max()
