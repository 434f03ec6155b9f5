"""Poisson and cluster pattern generators plus independent Bernoulli thinning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RasterMask, ScalarField, SpaceTimePattern, SpatialPattern, Window

__all__ = [
    "IntensityModel",
    "ClusterModel",
    "RetentionSpec",
    "simulate_poisson",
    "simulate_poisson_spatial",
    "simulate_cluster",
    "thin",
    "thin_spatial",
]


class IntensityModel:
    """First-order intensity over W x T.

    One of: a constant rate, an analytic function ``lam(x1, x2, t)`` with a
    declared finite upper bound, or a cell-constant :class:`ScalarField`.
    """

    def __init__(self, constant=None, function=None, bound=None, field=None):
        given = sum(v is not None for v in (constant, function, field))
        if given != 1:
            raise ValueError("specify exactly one of constant, function, field")
        if constant is not None and constant < 0:
            raise ValueError("constant intensity must be nonnegative")
        if function is not None:
            if bound is None or not np.isfinite(bound) or bound < 0:
                raise ValueError("analytic models need a finite nonnegative bound")
        if field is not None:
            if (field.values[field.mask] < 0).any():
                raise ValueError("intensity field must be nonnegative")
            bound = float(field.values[field.mask].max()) if field.mask.any() else 0.0
        self.constant = constant
        self.function = function
        self.field = field
        self.bound = float(bound) if bound is not None else None

    @classmethod
    def const(cls, lam: float) -> "IntensityModel":
        return cls(constant=float(lam))

    def max_rate(self) -> float:
        return self.constant if self.constant is not None else self.bound

    def rate_at(self, xy, t) -> np.ndarray:
        if self.constant is not None:
            return np.full(len(t), self.constant)
        if self.function is not None:
            return np.asarray(self.function(xy[:, 0], xy[:, 1], t), dtype=float)
        coords = np.column_stack([xy, t]) if self.field.grid.ndim == 3 else xy
        vals = self.field.value_at(coords)
        vals = np.where(self.field.mask_at(coords), vals, 0.0)
        return vals


@dataclass(frozen=True)
class ClusterModel:
    """Space-time Thomas process: Poisson parents, Gaussian offspring clouds.

    ``kappa`` parents per unit volume, ``mean_offspring`` points per parent,
    isotropic spatial sd ``sigma`` and temporal sd ``sigma_t``.  The
    stationary intensity is ``kappa * mean_offspring``.
    """

    kappa: float
    mean_offspring: float
    sigma: float
    sigma_t: float

    def __post_init__(self):
        if min(self.kappa, self.mean_offspring, self.sigma, self.sigma_t) <= 0:
            raise ValueError("all cluster parameters must be positive")

    @property
    def intensity(self) -> float:
        return self.kappa * self.mean_offspring

    def k_function(self, r, tau) -> np.ndarray:
        """Exact K(r, tau) of the stationary process.

        2*tau*pi*r^2 plus the within-cluster excess
        (1/kappa) * (1 - exp(-r^2/(4 sigma^2))) * erf(tau / (2 sigma_t)).
        """
        from scipy.special import erf

        r = np.asarray(r, dtype=float)
        tau = np.asarray(tau, dtype=float)
        excess = (1.0 - np.exp(-(r**2) / (4 * self.sigma**2))) * erf(
            tau / (2 * self.sigma_t)
        )
        return 2 * tau * np.pi * r**2 + excess / self.kappa


def _uniform_in_window(n: int, window: Window, rng) -> np.ndarray:
    """Uniform spatial draws inside the (possibly masked) window."""
    if window.mask is None:
        x = rng.uniform(window.x_range[0], window.x_range[1], n)
        y = rng.uniform(window.y_range[0], window.y_range[1], n)
        return np.column_stack([x, y])
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        m = max(2 * (n - filled), 64)
        x = rng.uniform(window.x_range[0], window.x_range[1], m)
        y = rng.uniform(window.y_range[0], window.y_range[1], m)
        cand = np.column_stack([x, y])
        cand = cand[window.mask.contains(cand)]
        take = min(len(cand), n - filled)
        out[filled : filled + take] = cand[:take]
        filled += take
    return out


def simulate_poisson(model: IntensityModel, window: Window, seed) -> SpaceTimePattern:
    """Draw an (in)homogeneous Poisson pattern on the window.

    Homogeneous models sample Poisson(lam * |W| * |T|) uniform events;
    inhomogeneous models draw a dominating homogeneous pattern at the
    declared bound and keep each proposal with probability lam(y)/bound.
    A proposal where lam exceeds the bound is a hard error.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lam_max = model.max_rate()
    if lam_max == 0:
        return SpaceTimePattern(np.empty((0, 3)), window)
    n = rng.poisson(lam_max * window.volume)
    xy = _uniform_in_window(n, window, rng)
    t = rng.uniform(window.t_range[0], window.t_range[1], n)
    if model.constant is None:
        rate = model.rate_at(xy, t)
        if (rate > lam_max * (1 + 1e-12)).any():
            raise ValueError("intensity exceeds its declared upper bound at a proposal")
        keep = rng.uniform(size=n) < rate / lam_max
        xy, t = xy[keep], t[keep]
    return SpaceTimePattern(np.column_stack([xy, t]), window)


def simulate_poisson_spatial(lam, window: Window, seed) -> SpatialPattern:
    """Homogeneous or analytic planar Poisson pattern (no time component).

    ``lam`` is either a constant or a pair ``(func, bound)`` with
    ``func(x1, x2)`` dominated by ``bound``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(lam, tuple):
        func, bound = lam
        n = rng.poisson(bound * window.area)
        xy = _uniform_in_window(n, window, rng)
        rate = np.asarray(func(xy[:, 0], xy[:, 1]), dtype=float)
        if (rate > bound * (1 + 1e-12)).any():
            raise ValueError("intensity exceeds its declared upper bound at a proposal")
        xy = xy[rng.uniform(size=n) < rate / bound]
    else:
        n = rng.poisson(float(lam) * window.area)
        xy = _uniform_in_window(n, window, rng)
    return SpatialPattern(xy, window)


def simulate_cluster(model: ClusterModel, window: Window, seed) -> SpaceTimePattern:
    """Draw a space-time Thomas pattern clipped to the window.

    Parents live on the window dilated by 4 sigma (4 sigma_t in time) so
    that the clipped pattern has the stationary mean count
    kappa * mean_offspring * |W| * |T| up to Gaussian tail mass.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dx = 4.0 * model.sigma
    dt = 4.0 * model.sigma_t
    px = (window.x_range[0] - dx, window.x_range[1] + dx)
    py = (window.y_range[0] - dx, window.y_range[1] + dx)
    pt = (window.t_range[0] - dt, window.t_range[1] + dt)
    vol = (px[1] - px[0]) * (py[1] - py[0]) * (pt[1] - pt[0])
    n_parents = rng.poisson(model.kappa * vol)
    parents = np.column_stack(
        [
            rng.uniform(px[0], px[1], n_parents),
            rng.uniform(py[0], py[1], n_parents),
            rng.uniform(pt[0], pt[1], n_parents),
        ]
    )
    counts = rng.poisson(model.mean_offspring, n_parents)
    centers = np.repeat(parents, counts, axis=0)
    m = len(centers)
    off = np.column_stack(
        [
            rng.normal(0.0, model.sigma, m),
            rng.normal(0.0, model.sigma, m),
            rng.normal(0.0, model.sigma_t, m),
        ]
    )
    pts = centers + off
    keep = (
        window.contains_xy(pts[:, :2]) & window.contains_t(pts[:, 2])
        if m
        else np.zeros(0, dtype=bool)
    )
    return SpaceTimePattern(pts[keep], window)


class RetentionSpec:
    """Retention probabilities for independent thinning.

    ``RetentionSpec.constant(p)`` keeps every event with the same
    probability; ``RetentionSpec.field(f)`` looks the probability up in a
    cell-constant field whose mask defines the support region.
    """

    def __init__(self, pi0=None, field: ScalarField | None = None):
        if (pi0 is None) == (field is None):
            raise ValueError("specify exactly one of pi0 and field")
        if pi0 is not None and not (0.0 <= pi0 <= 1.0):
            raise ValueError(f"retention probability must be in [0, 1], got {pi0}")
        if field is not None:
            vals = field.values[field.mask]
            if len(vals) and (vals.min() < 0 or vals.max() > 1):
                raise ValueError("retention field values must lie in [0, 1]")
        self.pi0 = pi0
        self.prob_field = field

    @classmethod
    def constant(cls, pi0: float) -> "RetentionSpec":
        return cls(pi0=float(pi0))

    @classmethod
    def field(cls, f: ScalarField) -> "RetentionSpec":
        return cls(field=f)

    def prob_at(self, xy, t=None) -> np.ndarray:
        n = len(xy) if t is None else len(t)
        if self.pi0 is not None:
            return np.full(n, self.pi0)
        f = self.prob_field
        if f.grid.ndim == 1:
            coords = np.asarray(t, dtype=float)
        elif f.grid.ndim == 2:
            coords = np.asarray(xy, dtype=float)
        else:
            coords = np.column_stack([xy, t])
        if not f.mask_at(coords).all():
            raise ValueError("retention field undefined at some event locations")
        return f.value_at(coords)


def thin(pattern: SpaceTimePattern, retention: RetentionSpec, seed) -> SpaceTimePattern:
    """Keep each event independently with its retention probability.

    For a constant retention the output keeps the input window; for a
    field the support of the field becomes the window mask.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(pattern) == 0:
        keep = np.zeros(0, dtype=bool)
    else:
        p = retention.prob_at(pattern.x, pattern.t)
        keep = rng.uniform(size=len(pattern)) < p
    window = _support_window(pattern.window, retention)
    out = SpaceTimePattern.__new__(SpaceTimePattern)
    out.points = pattern.points[keep]
    out.window = window
    out.points.setflags(write=False)
    return out


def _support_window(window: Window, retention: RetentionSpec) -> Window:
    """Window of a thinned pattern: field retention restricts it to the support."""
    f = retention.prob_field
    if f is None or f.grid.ndim != 2:
        return window
    xs, ys = f.grid.centers(0), f.grid.centers(1)
    mask = RasterMask(xs, ys, f.mask, f.grid.cell_volume)
    return Window(window.x_range, window.y_range, window.t_range, mask)


def thin_spatial(pattern: SpatialPattern, retention: RetentionSpec, seed) -> SpatialPattern:
    """Planar analogue of :func:`thin`."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(pattern) == 0:
        keep = np.zeros(0, dtype=bool)
    else:
        p = retention.prob_at(pattern.points)
        keep = rng.uniform(size=len(pattern)) < p
    out = SpatialPattern.__new__(SpatialPattern)
    out.points = pattern.points[keep]
    out.window = _support_window(pattern.window, retention)
    out.points.setflags(write=False)
    return out
