"""Space-time inhomogeneous Ripley K function and related diagnostics.

``estimate_K`` implements the translation-corrected pair-sum estimator on
rectangular windows,

    K_hat(r, tau) = sum over ordered pairs y != y' of
        1 / ( lambda(y) lambda(y') |W ^ W_h| |T ^ T_v| )

restricted to pairs inside the cylinder {||x - x'|| <= r, |t - t'| <= tau};
under a Poisson model K(r, tau) equals the cylinder volume 2 tau pi r^2.
The one-dimensional averages calibrate to 2 tau and pi r^2 under Poisson.

The truncated series and residual checks quantify how constant-retention
thinning pushes the empty-space / nearest-neighbour summaries toward their
Poisson forms: the first-order-corrected J residual shrinks like the
square of the retention probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SpaceTimePattern, Window, ball_volume, substream
from .intensity import IntensityEstimate
from .simulate import ClusterModel, IntensityModel, RetentionSpec, simulate_cluster, simulate_poisson, thin

__all__ = [
    "KGrid",
    "KEstimate",
    "SeriesDiagnostics",
    "estimate_K",
    "average_K",
    "poisson_series_fgj",
    "j_residual_ratio",
    "empirical_fgj",
]


@dataclass
class KGrid:
    """Evaluation grid for K(r, tau).

    Defaults follow the usual rules of thumb: 50 radii up to 20% of
    sqrt(|W|) and 50 lags up to 0.75% of |T|.
    """

    r: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        for name, v in (("r", self.r), ("tau", self.tau)):
            if v.ndim != 1 or len(v) < 2 or (np.diff(v) <= 0).any() or v[0] < 0:
                raise ValueError(f"{name} values must be nonnegative strictly increasing")

    @classmethod
    def default(cls, window: Window, n_r: int = 50, n_tau: int = 50) -> "KGrid":
        r_max = 0.2 * math.sqrt(window.area)
        tau_max = 0.0075 * window.duration
        return cls(np.linspace(0.0, r_max, n_r), np.linspace(0.0, tau_max, n_tau))


@dataclass
class KEstimate:
    """K surface on a KGrid plus bookkeeping about the correction."""

    k: np.ndarray  # (len(r), len(tau))
    grid: KGrid
    edge_correction: str = "translation"
    winsorized_pairs: int = 0
    n_points: int = 0


def _lambda_at_events(lam, pattern: SpaceTimePattern, floor_quantile: float) -> np.ndarray:
    """Intensity values at the events, floored away from zero.

    ``lam`` may be a constant, an array of per-event values, a ScalarField
    or an IntensityEstimate (looked up at event coordinates).
    """
    n = len(pattern)
    if np.isscalar(lam):
        vals = np.full(n, float(lam))
    elif isinstance(lam, IntensityEstimate):
        vals = _lambda_at_events(lam.field, pattern, floor_quantile)
    elif isinstance(lam, np.ndarray) and lam.ndim == 1 and len(lam) == n:
        vals = lam.astype(float)
    else:  # ScalarField on W, T or W x T
        grid = lam.grid
        if grid.ndim == 3:
            coords = pattern.points
        elif grid.ndim == 2:
            coords = pattern.x
        else:
            coords = pattern.t
        vals = lam.value_at(coords)
    if (vals <= 0).any():
        positive = vals[vals > 0]
        if len(positive) == 0:
            raise ValueError("intensity vanishes at every event")
        vals = np.maximum(vals, np.quantile(positive, floor_quantile))
    return vals


def estimate_K(
    pattern: SpaceTimePattern,
    lam,
    grid: KGrid | None = None,
    correction: str = "translation",
    correction_cap: float = 20.0,
    floor_quantile: float = 0.01,
) -> KEstimate:
    """Inhomogeneous space-time K estimate.

    ``correction="translation"`` (rectangular windows only) weights each
    pair by the reciprocal overlap of the window with its shifted self and
    is exactly unbiased; ``correction="border"`` restricts reference
    points to the eroded window and also works on masked windows.

    ``lam`` is the intensity plugged into the pair weights (constant,
    per-event array, field or estimate); values at events are floored at
    the given quantile of the positive values to stop weight explosions.
    Pairs whose translation correction exceeds ``correction_cap`` are
    winsorized at the cap and counted.
    """
    window = pattern.window
    if grid is None:
        grid = KGrid.default(window)
    if correction == "border":
        return _estimate_K_border(pattern, lam, grid, floor_quantile)
    if correction != "translation":
        raise ValueError(f"unknown edge correction {correction!r}")
    if window.mask is not None:
        raise ValueError(
            "translation correction requires a rectangular window; "
            "use correction='border' on masked windows"
        )
    n = len(pattern)
    k = np.zeros((len(grid.r), len(grid.tau)))
    if n < 2:
        return KEstimate(k, grid, n_points=n)
    lam_vals = _lambda_at_events(lam, pattern, floor_quantile)
    r_max = grid.r[-1]
    tau_max = grid.tau[-1]

    if n <= 512:
        # direct pairwise enumeration beats tree construction at this size
        iu, ju = np.triu_indices(n, k=1)
        d2 = ((pattern.x[iu] - pattern.x[ju]) ** 2).sum(axis=1)
        near = d2 <= r_max * r_max
        pairs = np.column_stack([iu[near], ju[near]])
    else:
        from scipy.spatial import cKDTree

        tree = cKDTree(pattern.x)
        pairs = tree.query_pairs(r_max, output_type="ndarray")
    if len(pairs) == 0:
        return KEstimate(k, grid, n_points=n)
    i, j = pairs[:, 0], pairs[:, 1]
    dt = np.abs(pattern.t[i] - pattern.t[j])
    close = dt <= tau_max
    i, j, dt = i[close], j[close], dt[close]
    if len(i) == 0:
        return KEstimate(k, grid, n_points=n)
    dx = np.abs(pattern.x[i] - pattern.x[j])
    ds = np.hypot(dx[:, 0], dx[:, 1])
    lx = window.x_range[1] - window.x_range[0]
    ly = window.y_range[1] - window.y_range[0]
    lt = window.duration
    overlap = (lx - dx[:, 0]) * (ly - dx[:, 1]) * (lt - dt)
    e = window.volume / overlap
    winsorized = int((e > correction_cap).sum())
    e = np.minimum(e, correction_cap)
    w = 2.0 * e / (lam_vals[i] * lam_vals[j]) / window.volume  # ordered pairs
    ir = np.searchsorted(grid.r, ds, side="left")
    it = np.searchsorted(grid.tau, dt, side="left")
    keep = (ir < len(grid.r)) & (it < len(grid.tau))
    hist = np.zeros((len(grid.r), len(grid.tau)))
    np.add.at(hist, (ir[keep], it[keep]), w[keep])
    k = hist.cumsum(axis=0).cumsum(axis=1)
    return KEstimate(k, grid, winsorized_pairs=winsorized, n_points=n)


def _boundary_distances(pattern: SpaceTimePattern):
    """Spatial and temporal distances of each event to the window boundary."""
    window = pattern.window
    x, y, t = pattern.x[:, 0], pattern.x[:, 1], pattern.t
    d_t = np.minimum(t - window.t_range[0], window.t_range[1] - t)
    d_rect = np.minimum(
        np.minimum(x - window.x_range[0], window.x_range[1] - x),
        np.minimum(y - window.y_range[0], window.y_range[1] - y),
    )
    if window.mask is None:
        return d_rect, d_t
    dist, _, (sx, sy) = _mask_boundary_raster(window)
    res = dist.shape[0]
    i = np.clip(((x - window.x_range[0]) / sx).astype(int), 0, res - 1)
    j = np.clip(((y - window.y_range[0]) / sy).astype(int), 0, res - 1)
    return np.minimum(d_rect, dist[i, j]), d_t


def _eroded_areas(window: Window, radii: np.ndarray) -> np.ndarray:
    """|{x in W : distance to the boundary >= r}| for each r."""
    if window.mask is None:
        lx = window.x_range[1] - window.x_range[0] - 2 * radii
        ly = window.y_range[1] - window.y_range[0] - 2 * radii
        return np.maximum(lx, 0.0) * np.maximum(ly, 0.0)
    dist, grid, (sx, sy) = _mask_boundary_raster(window)
    flat = np.sort(dist[grid].ravel())
    counts = len(flat) - np.searchsorted(flat, radii, side="left")
    return counts * sx * sy


def _mask_boundary_raster(window: Window, res: int = 512):
    """Distance to the window boundary on a raster: EDT of the mask,
    additionally capped by the distance to the enclosing rectangle (the
    array edge carries no mask information)."""
    from scipy.ndimage import distance_transform_edt

    sx = (window.x_range[1] - window.x_range[0]) / res
    sy = (window.y_range[1] - window.y_range[0]) / res
    xs = window.x_range[0] + (np.arange(res) + 0.5) * sx
    ys = window.y_range[0] + (np.arange(res) + 0.5) * sy
    grid = window.mask.raster(xs, ys)
    dist = distance_transform_edt(grid, sampling=(sx, sy))
    rect_x = np.minimum(xs - window.x_range[0], window.x_range[1] - xs)
    rect_y = np.minimum(ys - window.y_range[0], window.y_range[1] - ys)
    dist = np.minimum(dist, np.minimum(rect_x[:, None], rect_y[None, :]))
    return dist, grid, (sx, sy)


def _estimate_K_border(pattern, lam, grid: KGrid, floor_quantile: float) -> KEstimate:
    """Reduced-sample estimator: reference points from the eroded window.

    Not exactly monotone in (r, tau) because the eligible reference set
    shrinks as the arguments grow.
    """
    n = len(pattern)
    n_r, n_t = len(grid.r), len(grid.tau)
    k = np.zeros((n_r, n_t))
    window = pattern.window
    areas = _eroded_areas(window, grid.r)
    lts = np.maximum(window.duration - 2 * grid.tau, 0.0)
    volumes = areas[:, None] * lts[None, :]
    if n < 2:
        k[volumes <= 0] = np.nan
        return KEstimate(k, grid, edge_correction="border", n_points=n)
    lam_vals = _lambda_at_events(lam, pattern, floor_quantile)
    d_s, d_t = _boundary_distances(pattern)
    r_max, tau_max = grid.r[-1], grid.tau[-1]

    from scipy.spatial import cKDTree

    tree = cKDTree(pattern.x)
    pairs = tree.query_pairs(r_max, output_type="ndarray")
    hist = np.zeros((n_r + 1, n_t + 1))
    if len(pairs):
        i = np.concatenate([pairs[:, 0], pairs[:, 1]])  # ordered pairs
        j = np.concatenate([pairs[:, 1], pairs[:, 0]])
        dt = np.abs(pattern.t[i] - pattern.t[j])
        near = dt <= tau_max
        i, j, dt = i[near], j[near], dt[near]
        ds = np.hypot(*(pattern.x[i] - pattern.x[j]).T)
        w = 1.0 / (lam_vals[i] * lam_vals[j])
        # pair (i, j) enters cell (a, b) iff ds <= r_a <= d_s[i] and
        # dt <= tau_b <= d_t[i]: a contiguous block, applied by
        # inclusion-exclusion on a difference array
        a_lo = np.searchsorted(grid.r, ds, side="left")
        b_lo = np.searchsorted(grid.tau, dt, side="left")
        a_hi = np.searchsorted(grid.r, d_s[i], side="right") - 1
        b_hi = np.searchsorted(grid.tau, d_t[i], side="right") - 1
        ok = (a_lo <= a_hi) & (b_lo <= b_hi) & (a_lo < n_r) & (b_lo < n_t)
        a_lo, b_lo = a_lo[ok], b_lo[ok]
        a_hi, b_hi = a_hi[ok], b_hi[ok]
        w = w[ok]
        np.add.at(hist, (a_lo, b_lo), w)
        np.add.at(hist, (a_hi + 1, b_lo), -w)
        np.add.at(hist, (a_lo, b_hi + 1), -w)
        np.add.at(hist, (a_hi + 1, b_hi + 1), w)
    sums = hist.cumsum(axis=0).cumsum(axis=1)[:n_r, :n_t]
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(volumes > 0, sums / np.where(volumes > 0, volumes, 1.0), np.nan)
    return KEstimate(k, grid, edge_correction="border", n_points=n)


def average_K(est: KEstimate, grid: KGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-dimensional K averages, calibrated to the Poisson identities.

    K_t(tau) integrates the surface over r with weight 3 / (pi (r_M^3 -
    r_m^3)); K_s(r) integrates over tau with weight 1 / (tau_M^2 -
    tau_m^2).  Plugging the Poisson surface 2 tau pi r^2 returns 2 tau and
    pi r^2 up to trapezoid error.
    """
    grid = grid or est.grid
    r, tau = grid.r, grid.tau
    if len(r) < 3 or len(tau) < 3:
        raise ValueError("need at least 3 grid values per axis to average")
    k_t = np.trapezoid(est.k, r, axis=0) * 3.0 / (math.pi * (r[-1] ** 3 - r[0] ** 3))
    k_s = np.trapezoid(est.k, tau, axis=1) / (tau[-1] ** 2 - tau[0] ** 2)
    return k_t, k_s


@dataclass
class SeriesDiagnostics:
    """Inputs of the truncated F/G/J series under the Poisson reference.

    ``lam_floor`` plays the role of the lower intensity bound; on real
    data only an estimated floor is available, which this type flags.
    """

    lam_floor: float
    pi0: float
    order: int = 30
    estimated_floor: bool = False

    def __post_init__(self):
        if self.lam_floor < 0:
            raise ValueError("intensity floor must be nonnegative")
        if not (0 < self.pi0 <= 1):
            raise ValueError("pi0 must be in (0, 1]")
        if self.order < 2:
            raise ValueError("truncation order must be >= 2")

    def poisson_integrals(self, r: float, tau: float) -> np.ndarray:
        """The k-fold reference integrals |B(r, tau)|^k, k = 1..order."""
        return ball_volume(r, tau) ** np.arange(1, self.order + 1)


def poisson_series_fgj(diag: SeriesDiagnostics, r: float, tau: float):
    """Truncated F/G/J series evaluated under the Poisson substitution.

    With the k-fold integrals replaced by their Poisson values |B|^k the
    alternating series for 1-F and 1-G both truncate the exponential
    exp(-lam pi0 |B|), and J is exactly 1.  Raises if the proxy for the
    series convergence condition fails (last term ratio >= 1).
    """
    vol = ball_volume(r, tau)
    x = diag.lam_floor * diag.pi0 * vol
    terms = np.empty(diag.order + 1)
    terms[0] = 1.0
    for kk in range(1, diag.order + 1):
        terms[kk] = terms[kk - 1] * (-x) / kk
    if diag.order >= 1 and x / (diag.order + 1) >= 1.0:
        raise ValueError(
            "series terms are not decaying at the requested order; "
            "increase the order or reduce lam*pi0*volume"
        )
    one_minus_f = float(terms.sum())
    one_minus_g = one_minus_f  # same integrals under the Poisson substitution
    j = one_minus_g / one_minus_f if one_minus_f != 0 else math.nan
    return 1.0 - one_minus_f, 1.0 - one_minus_g, j


def empirical_fgj(
    pattern: SpaceTimePattern,
    r: float,
    tau: float,
    n_test: int = 4096,
    seed=0,
):
    """Border-corrected empirical F, G and J at a single (r, tau).

    F is the fraction of uniformly drawn test points whose cylindrical
    neighbourhood {||dx|| <= r, |dt| <= tau} contains an event; G is the
    same fraction over the events themselves (excluding the event).  Both
    use plain border correction: only reference points at least r from the
    spatial boundary and tau from the temporal boundary count.
    """
    window = pattern.window
    if window.mask is not None:
        raise ValueError("empirical summaries need a rectangular window")
    rng = substream(seed, 977)
    xy = np.column_stack(
        [
            rng.uniform(window.x_range[0] + r, window.x_range[1] - r, n_test),
            rng.uniform(window.y_range[0] + r, window.y_range[1] - r, n_test),
        ]
    )
    tt = rng.uniform(window.t_range[0] + tau, window.t_range[1] - tau, n_test)
    if window.x_range[1] - window.x_range[0] <= 2 * r or window.duration <= 2 * tau:
        raise ValueError("window too small for the requested (r, tau)")
    f_hat = _covered_fraction(pattern, xy, tt, r, tau, exclude_self=False)
    inner = (
        (pattern.x[:, 0] >= window.x_range[0] + r)
        & (pattern.x[:, 0] <= window.x_range[1] - r)
        & (pattern.x[:, 1] >= window.y_range[0] + r)
        & (pattern.x[:, 1] <= window.y_range[1] - r)
        & (pattern.t >= window.t_range[0] + tau)
        & (pattern.t <= window.t_range[1] - tau)
    )
    if inner.sum() < 10:
        raise ValueError(f"only {int(inner.sum())} interior events; need >= 10")
    g_hat = _covered_fraction(pattern, pattern.x[inner], pattern.t[inner], r, tau, True)
    if f_hat >= 1.0:
        raise ValueError("empty-space function saturated; reduce (r, tau)")
    j_hat = (1.0 - g_hat) / (1.0 - f_hat)
    return f_hat, g_hat, j_hat


def _covered_fraction(pattern, xy, tt, r, tau, exclude_self):
    from scipy.spatial import cKDTree

    tree = cKDTree(pattern.x)
    neighbours = tree.query_ball_point(xy, r)
    counts = np.fromiter((len(nb) for nb in neighbours), dtype=np.int64, count=len(xy))
    if counts.sum() == 0:
        return 0.0
    flat = np.concatenate([nb for nb in neighbours if nb]).astype(np.int64)
    owner = np.repeat(np.arange(len(xy)), counts)
    ok = np.abs(pattern.t[flat] - tt[owner]) <= tau
    hits = np.bincount(owner[ok], minlength=len(xy))
    # a reference event is always its own cylindrical neighbour
    threshold = 2 if exclude_self else 1
    return float((hits >= threshold).mean())


def j_residual_ratio(
    model,
    p: float = 0.05,
    r: float = 0.1,
    tau: float = 0.05,
    window: Window | None = None,
    seeds=range(200),
    thinnings: int = 4,
    n_test: int = 4096,
):
    """Order-of-convergence check for the thinning expansion of J.

    For retention levels p and p/2 (nested thinnings of common patterns)
    the first-order-corrected residual

        J_hat(pi0) - 1 + lam * pi0 * (K_hat - |B|)

    is averaged over seeds; its magnitude should scale like pi0^2, so the
    returned ratio (residual at p over residual at p/2) targets 4.

    ``model`` is a ClusterModel or IntensityModel with constant intensity;
    K_hat is estimated from each unthinned pattern with the true constant
    intensity plugged in.
    """
    if not (0 < p < 1):
        raise ValueError("p must be in (0, 1)")
    if window is None:
        window = Window((0, 1), (0, 1), (0, 1))
    if isinstance(model, ClusterModel):
        lam_const = model.intensity
        draw = lambda rng: simulate_cluster(model, window, rng)
    elif isinstance(model, IntensityModel) and model.constant is not None:
        lam_const = model.constant
        draw = lambda rng: simulate_poisson(model, window, rng)
    else:
        raise ValueError("model must be a ClusterModel or constant IntensityModel")
    vol = ball_volume(r, tau)
    kgrid = KGrid(np.array([0.0, r]), np.array([0.0, tau]))
    levels = (p, p / 2.0)
    # F and G are averaged across replicates before forming J: the ratio
    # (1 - G)/(1 - F) of the means is what the expansion describes, and it
    # avoids the plug-in ratio bias a per-replicate J would carry
    f_sum = {lv: 0.0 for lv in levels}
    g_sum = {lv: 0.0 for lv in levels}
    count = {lv: 0 for lv in levels}
    k_sum = 0.0
    n_seeds = 0
    for s in seeds:
        rng = substream(s, 11)
        pat = draw(rng)
        k_sum += estimate_K(pat, lam_const, kgrid).k[-1, -1]
        n_seeds += 1
        for lv in levels:
            for m in range(thinnings):
                # one substream per (seed, thinning): the same uniforms decide
                # both levels, so the p/2 subsample nests inside the p one
                sub = thin(pat, RetentionSpec.constant(lv), substream(s, 13, m))
                if len(sub) < 50:
                    raise ValueError(
                        f"retention {lv:g} left only {len(sub)} points (need >= 50)"
                    )
                f_hat, g_hat, _ = empirical_fgj(sub, r, tau, n_test=n_test, seed=(s, m))
                f_sum[lv] += f_hat
                g_sum[lv] += g_hat
                count[lv] += 1
    k_mean = k_sum / n_seeds
    residuals = {}
    for lv in levels:
        f_bar = f_sum[lv] / count[lv]
        g_bar = g_sum[lv] / count[lv]
        j_bar = (1.0 - g_bar) / (1.0 - f_bar)
        residuals[lv] = abs(j_bar - 1.0 + lam_const * lv * (k_mean - vol))
    if residuals[levels[1]] == 0:
        raise ValueError("residual at the finer retention vanished; cannot form ratio")
    return {
        "ratio": residuals[levels[0]] / residuals[levels[1]],
        "residuals": residuals,
        "levels": levels,
    }
