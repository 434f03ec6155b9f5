"""First-order separability: S statistics, permutation nulls and the test.

The statistic compares the space-time intensity against the separable
factorization built from the marginal estimates,

    S(x, t) = n * lambda_st(x, t) / (lambda_s(x) * lambda_t(t)),

which is identically 1 under first-order separability.  Null replicates
pair the observed locations with permuted observed times, so the marginal
patterns (and therefore the marginal estimates) are unchanged, and under
the null the replicate curves are exchangeable with the observed one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GridSpec, ScalarField, SpaceTimePattern, project, substream
from .inference import CurveSet, EnvelopeResult, combined_erl_test
from .intensity import (
    IntensityEstimate,
    KernelSpec,
    _axis_factors,
    _gauss_factors,
    _corrections_from_factors,
    temporal_corrections,
)

__all__ = [
    "SeparabilityStats",
    "compute_S",
    "permute_null",
    "separability_test",
]


@dataclass
class SeparabilityStats:
    """S statistics on the estimation grids: 3D field plus its averages."""

    s_st: ScalarField
    s_s: ScalarField
    s_t: ScalarField
    expected_count: float


def _safe_ratio(num, den):
    """num/den with the a/0 = 0 convention."""
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    ok = den > 0
    np.divide(num, den, out=out, where=ok)
    return out


def compute_S(
    pattern: SpaceTimePattern,
    lam_st: IntensityEstimate,
    lam_s: IntensityEstimate,
    lam_t: IntensityEstimate,
    include_zero_cells: bool = True,
) -> SeparabilityStats:
    """Cellwise S statistics from plugged-in intensity estimates.

    The three estimates must share grids: ``lam_st`` on (nx, ny, nt),
    ``lam_s`` on (nx, ny) and ``lam_t`` on (nt,).  The expected total
    count is estimated by the observed n.  Averages over W and T use the
    masked grid quadrature; cells zeroed by the a/0 = 0 convention are
    included by default, or dropped from the averaging measure with
    ``include_zero_cells=False``.
    """
    f3, f2, f1 = lam_st.field, lam_s.field, lam_t.field
    if f3.grid.shape[:2] != f2.grid.shape or f3.grid.shape[2] != f1.grid.shape[0]:
        raise ValueError("intensity estimates live on incompatible grids")
    n = float(len(pattern))
    den = f2.values[:, :, None] * f1.values[None, None, :]
    s_st = n * _safe_ratio(f3.values, den)
    mask2d = f2.mask
    s_st = np.where(mask2d[:, :, None], s_st, 0.0)
    cell_area = f2.grid.cell_volume
    dt = f1.grid.cell_volume
    if include_zero_cells:
        area = mask2d.sum() * cell_area
        duration = f1.grid.shape[0] * dt
        s_t = s_st.sum(axis=(0, 1)) * cell_area / area
        s_s = s_st.sum(axis=2) * dt / duration
    else:
        defined = (den > 0) & mask2d[:, :, None]
        with np.errstate(invalid="ignore"):
            s_t = s_st.sum(axis=(0, 1)) / np.maximum(defined.sum(axis=(0, 1)), 1)
            s_s = s_st.sum(axis=2) / np.maximum(defined.sum(axis=2), 1)
    return SeparabilityStats(
        ScalarField(f3.grid, s_st, f3.mask),
        ScalarField(f2.grid, np.where(mask2d, s_s, 0.0), mask2d),
        ScalarField(f1.grid, s_t),
        n,
    )


def permute_null(pattern: SpaceTimePattern, B: int, seed) -> list[SpaceTimePattern]:
    """B null replicates pairing fixed locations with permuted times."""
    if B < 1:
        raise ValueError("B must be >= 1")
    out = []
    for b in range(B):
        rng = substream(seed, b)
        perm = rng.permutation(len(pattern))
        pts = np.column_stack([pattern.x, pattern.t[perm]])
        rep = SpaceTimePattern.__new__(SpaceTimePattern)
        rep.points = pts[np.lexsort((pts[:, 1], pts[:, 0], pts[:, 2]))]
        rep.window = pattern.window
        rep.points.setflags(write=False)
        out.append(rep)
    return out


class _SeparabilityEngine:
    """Shared kernel matrices for fast S_t / S_s curves over permutations.

    The spatial kernel rows (and their corrections) depend only on
    locations and the temporal rows only on times, so a permutation
    replicate just re-pairs rows.  Curves then reduce to one matrix-vector
    product per replicate instead of a full 3D field.
    """

    def __init__(self, pattern, kernel_s, kernel_t, grid):
        window = pattern.window
        nx, ny, nt = grid.shape
        self.grid = grid
        spatial = GridSpec.spatial(window, nx, ny)
        temporal = GridSpec((window.t_range[0],), (window.duration / nt,), (nt,))
        mask2d = None
        if window.mask is not None:
            mask2d = window.mask.raster(spatial.centers(0), spatial.centers(1))
        sp, tp = project(pattern)
        n = len(pattern)
        lam_s = _kernel_field_2d(sp.points, spatial, mask2d, kernel_s.bandwidth)
        lam_t_est, T = _kernel_field_1d(pattern.t, temporal, window, kernel_t.bandwidth)
        gx, gy = _axis_factors(pattern.x, spatial, kernel_s.bandwidth)
        e_s = _corrections_from_factors(gx, gy, mask2d)
        cell_area = spatial.cell_volume
        S = (gx / (e_s[:, None] * cell_area))[:, :, None] * gy[:, None, :]
        self.S = S.reshape(n, nx * ny)
        self.T = T
        self.n = n
        if mask2d is None:
            mask2d = np.ones(spatial.shape, dtype=bool)
        self.mask2d = mask2d
        area = mask2d.sum() * cell_area
        lam_s_flat = np.where(mask2d, lam_s, 0.0).ravel()
        w_s = np.zeros_like(lam_s_flat)
        np.divide(cell_area * n / area, lam_s_flat, out=w_s, where=lam_s_flat > 0)
        self.u = self.S @ w_s
        dt = temporal.cell_volume
        w_t = np.zeros(nt)
        np.divide(dt * n / window.duration, lam_t_est, out=w_t, where=lam_t_est > 0)
        self.v = self.T @ w_t
        self.inv_lam_t = _safe_ratio(np.ones(nt), lam_t_est)
        self.inv_lam_s = _safe_ratio(np.ones(nx * ny), lam_s_flat)
        self.t_args = temporal.centers(0)
        self.lam_s = lam_s
        self.lam_t = lam_t_est

    def curves(self, perm=None):
        """S_t and S_s curves for the (permuted) pairing of rows."""
        T = self.T if perm is None else self.T[perm]
        v = self.v if perm is None else self.v[perm]
        s_t = (self.u @ T) * self.inv_lam_t
        s_s = (self.S.T @ v) * self.inv_lam_s
        return s_t, s_s[self.mask2d.ravel()]


def _kernel_field_2d(xy, grid, mask2d, b):
    gx, gy = _axis_factors(xy, grid, b)
    e = _corrections_from_factors(gx, gy, mask2d)
    values = (gx / (e[:, None] * grid.cell_volume)).T @ gy
    if mask2d is not None:
        values = np.where(mask2d, values, 0.0)
    return values


def _kernel_field_1d(times, grid, window, b):
    e = temporal_corrections(times, window, b)
    T = _gauss_factors(times, grid.centers(0), 1.0, b) / e[:, None]
    return T.sum(axis=0), T


def separability_test(
    pattern: SpaceTimePattern,
    kernel_s: KernelSpec,
    kernel_t: KernelSpec,
    B: int = 199,
    alpha: float = 0.05,
    grid: GridSpec | None = None,
    seed=0,
) -> EnvelopeResult:
    """Permutation test of first-order separability.

    Estimates the marginal intensities once (permutation leaves them
    unchanged), re-estimates the space-time intensity for the observed
    pairing and for B permutation replicates with the same bandwidths, and
    runs a combined global envelope test on the S_t and S_s summaries.
    """
    if grid is None:
        grid = GridSpec.spacetime(pattern.window, 32, 32, 100)
    engine = _SeparabilityEngine(pattern, kernel_s, kernel_t, grid)
    s_t_obs, s_s_obs = engine.curves()
    n = len(pattern)
    st_reps = np.empty((B, len(s_t_obs)))
    ss_reps = np.empty((B, len(s_s_obs)))
    for b in range(B):
        rng = substream(seed, b)
        perm = rng.permutation(n)
        st_reps[b], ss_reps[b] = engine.curves(perm)
    cs_t = CurveSet(engine.t_args, s_t_obs, st_reps)
    cs_s = CurveSet(np.arange(len(s_s_obs), dtype=float), s_s_obs, ss_reps)
    return combined_erl_test([cs_t, cs_s], alpha=alpha)
