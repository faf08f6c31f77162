"""Mono-exponential T2 decay model, its Jacobian and pixelwise least-squares fitting."""

from __future__ import annotations

import numpy as np

from .core import T2_MAX, T2_MIN, EchoSeries, ParamMaps

T2_FLOOR = 1.0


def _echo_axis(te_ms, like):
    te = np.asarray(te_ms, dtype=np.float64)
    return te.reshape(te.shape + (1,) * np.ndim(like))


def model_signal(i0, t2_ms, te_ms, t2_floor: float = T2_FLOOR) -> np.ndarray:
    """s_j = i0 * exp(-TE_j / t2); echoes on the leading axis of the result."""
    i0 = np.asarray(i0, dtype=np.float64)
    t2 = np.maximum(np.asarray(t2_ms, dtype=np.float64), t2_floor)
    te = _echo_axis(te_ms, np.broadcast(i0, t2))
    return i0 * np.exp(-te / t2)


def model_jacobian(i0, t2_ms, te_ms, t2_floor: float = T2_FLOOR):
    """Return (ds/di0, ds/dt2), each shaped like :func:`model_signal`.

    Below the floor the model is evaluated at the floor; the returned partials
    are those at the floor point.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    t2 = np.maximum(np.asarray(t2_ms, dtype=np.float64), t2_floor)
    te = _echo_axis(te_ms, np.broadcast(i0, t2))
    e = np.exp(-te / t2)
    return e, i0 * e * te / t2**2


def _loglinear_init(y, te, valid):
    """Least-squares line through log(y) against TE, per pixel (columns of y)."""
    logy = np.log(np.maximum(y, 1e-12 * np.maximum(y.max(axis=0), 1e-300)))
    tm = te.mean()
    tc = te - tm
    slope = (tc[:, None] * (logy - logy.mean(axis=0))).sum(axis=0) / (tc**2).sum()
    intercept = logy.mean(axis=0) - slope * tm
    with np.errstate(divide="ignore"):
        t2 = np.where(slope < 0, -1.0 / np.where(slope < 0, slope, -1.0), T2_MAX)
    t2 = np.clip(t2, T2_MIN, T2_MAX)
    i0 = np.where(valid, np.exp(intercept), 0.0)
    return i0, t2


def lm_fit(y: np.ndarray, te_ms, max_iter: int = 50, gtol: float = 1e-10,
           t2_floor: float = T2_FLOOR):
    """Vectorized Levenberg-Marquardt for columns of ``y`` ([t, npix]).

    Returns (i0, t2) arrays of length npix, t2 confined to [t2_floor, T2_MAX].
    """
    te = np.asarray(te_ms, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = np.ones(y.shape[1], dtype=bool)
    i0, t2 = _loglinear_init(y, te, valid)
    t2 = np.clip(t2, t2_floor, T2_MAX)
    mu = np.full(y.shape[1], 1e-3)

    def cost(a, b):
        r = model_signal(a, b, te, t2_floor) - y
        return r, (r**2).sum(axis=0)

    r, c = cost(i0, t2)
    active = np.ones(y.shape[1], dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        ja, jb = model_jacobian(i0, t2, te, t2_floor)
        a11 = (ja * ja).sum(0)
        a12 = (ja * jb).sum(0)
        a22 = (jb * jb).sum(0)
        g1 = (ja * r).sum(0)
        g2 = (jb * r).sum(0)
        active &= np.hypot(g1, g2) > gtol
        # Marquardt scaling: damp along the diagonal of J^T J
        d11 = a11 * (1 + mu) + 1e-300
        d22 = a22 * (1 + mu) + 1e-300
        det = d11 * d22 - a12 * a12
        det = np.where(det > 0, det, np.inf)
        da = -(d22 * g1 - a12 * g2) / det
        db = -(d11 * g2 - a12 * g1) / det
        na = np.where(active, i0 + da, i0)
        nb = np.where(active, np.clip(t2 + db, t2_floor, T2_MAX), t2)
        nr, nc = cost(na, nb)
        better = active & (nc < c)
        i0 = np.where(better, na, i0)
        t2 = np.where(better, nb, t2)
        r = np.where(better, nr, r)
        c = np.where(better, nc, c)
        mu = np.where(better, mu / 10, np.where(active, mu * 10, mu))
        # step rejected with huge damping: no further progress possible
        active &= mu < 1e12
    return i0, t2


def fit_pixelwise(series: EchoSeries | np.ndarray, mask_threshold: float = 0.02,
                  te_ms=None, max_iter: int = 50, gtol: float = 1e-10,
                  roi_labels=None) -> ParamMaps:
    """Fit I0 and T2 to echo magnitudes at every pixel.

    Pixels whose mean magnitude is at or below ``mask_threshold`` times the
    dataset maximum are treated as background (i0 = 0, t2 = floor). When
    ``roi_labels`` is given, label-0 pixels are background as well and the
    labels are carried into the result.
    """
    if isinstance(series, EchoSeries):
        mag, te = series.magnitude(), series.te_ms
    else:
        mag, te = np.abs(np.asarray(series)), np.asarray(te_ms, dtype=np.float64)
    if mag.ndim != 3 or mag.shape[0] < 2:
        raise ValueError("need at least 2 echoes to fit")
    t, ny, nx = mag.shape
    y = mag.reshape(t, -1).astype(np.float64)
    peak = y.max() if y.size else 0.0
    fg = y.mean(axis=0) > mask_threshold * peak if peak > 0 else np.zeros(ny * nx, bool)
    if roi_labels is not None:
        fg &= np.asarray(roi_labels).ravel() > 0

    i0 = np.zeros(ny * nx)
    t2 = np.full(ny * nx, T2_FLOOR)
    if fg.any():
        a, b = lm_fit(y[:, fg], te, max_iter=max_iter, gtol=gtol)
        ok = a > 0
        idx = np.flatnonzero(fg)
        i0[idx[ok]] = a[ok]
        t2[idx[ok]] = np.clip(b[ok], T2_MIN, T2_MAX)
    i0 = i0.reshape(ny, nx)
    t2 = t2.reshape(ny, nx)
    labels = (i0 > 0).astype(np.int32)
    if roi_labels is not None:
        labels = np.where(i0 > 0, roi_labels, 0)
    return ParamMaps(i0, t2, labels)
