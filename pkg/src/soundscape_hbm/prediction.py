"""Posterior-predictive composition sampling at new locations, 29-minute
aggregation and raster output."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import N_MINUTES, N_TIMES, TIMES_OF_DAY
from .gibbs import PosteriorDraws
from .model_core import EPS, inv_logit

MIN_STABLE_SAMPLES = 100


@dataclass(frozen=True)
class PredictiveDraws:
    """Per-minute predictive samples shaped ``(n_locations, M, n_times, 29)``."""

    values: np.ndarray
    times: tuple = TIMES_OF_DAY
    variable: str = "alpha"

    @property
    def n_locations(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def totals(self) -> np.ndarray:
        """Sum over the 29 minutes: ``(n_locations, M, n_times)``."""
        return self.values.sum(axis=-1)

    def select(self, times) -> "PredictiveDraws":
        idx = [self.times.index(t) for t in times]
        return PredictiveDraws(self.values[:, :, idx], tuple(times), self.variable)

    def plugin_median(self) -> "PredictiveDraws":
        """Every sample replaced by the per-cell median across samples."""
        med = np.median(self.values, axis=1, keepdims=True)
        return PredictiveDraws(np.broadcast_to(med, self.values.shape).copy(), self.times, self.variable)


def _times_index(times):
    times = TIMES_OF_DAY if times is None else tuple(times)
    bad = [t for t in times if t not in TIMES_OF_DAY]
    if bad:
        raise ValueError(f"unknown time of day {bad}")
    return times, [TIMES_OF_DAY.index(t) for t in times]


def draw_effects(draws: PosteriorDraws, rng) -> np.ndarray:
    """Fresh prior random effects for every pooled iteration: ``(M, 3, 29)``."""
    rho = draws.pooled("rho")
    if "lambda" in draws.params:
        lam = draws.pooled("lambda")
    elif "sigma2" in draws.params:
        lam = draws.pooled("sigma2")[:, None, None] * np.eye(N_TIMES)
    else:
        raise ValueError("posterior draws carry no variance parameters")
    m = rho.size
    z = rng.standard_normal((m, N_TIMES, N_MINUTES))
    e = np.empty_like(z)
    e[..., 0] = z[..., 0]
    c = np.sqrt(1.0 - rho**2)[:, None]
    r = rho[:, None]
    for t in range(1, N_MINUTES):
        e[..., t] = r * e[..., t - 1] + c * z[..., t]
    return np.einsum("mab,mbt->mat", np.linalg.cholesky(lam), e)


def _beta_draw(rng, mu, phi):
    return np.clip(rng.beta(mu * phi, (1.0 - mu) * phi), EPS, 1.0 - EPS)


def _default_seed(draws):
    return int(draws.seeds[0]) if draws.seeds else 0


def predict_alpha(rc, stage1: PosteriorDraws, times=None, seed: int | None = None) -> PredictiveDraws:
    """Anthropogenic-noise predictive draws at new road-covariate values.

    Location ``i`` uses its own generator seeded by ``(seed, 0, i)``, so results
    do not depend on how locations are batched.
    """
    rc = np.atleast_1d(np.asarray(rc, dtype=float))
    times, tidx = _times_index(times)
    seed = _default_seed(stage1) if seed is None else seed
    spec = stage1.spec
    beta = stage1.pooled("beta")
    zb = stage1.basis.design(rc) @ beta.T  # (L, M)
    out = np.empty((rc.size, beta.shape[0], len(times), N_MINUTES))
    for i, x in enumerate(rc):
        rng = np.random.default_rng([seed, 0, i])
        w = draw_effects(stage1, rng)
        mu = inv_logit(zb[i][:, None, None] + w)
        if spec.precision_kind == "split":
            phi = stage1.pooled("phi_l" if x < spec.threshold else "phi_u")
        else:
            phi = stage1.pooled("phi")
        out[i] = _beta_draw(rng, mu, phi[:, None, None])[:, tidx]
    return PredictiveDraws(out, times, "alpha")


def predict_y(alpha_draws: PredictiveDraws, stage2: PosteriorDraws, seed: int | None = None) -> PredictiveDraws:
    """Biological-sound predictive draws; sample ``m`` uses alpha sample ``m``
    as its covariate together with stage-2 iteration ``m``."""
    m_total = stage2.n_chains * stage2.n_retained
    if alpha_draws.n_samples != m_total:
        raise ValueError(
            f"iteration mismatch: {alpha_draws.n_samples} alpha samples vs {m_total} stage-2 draws"
        )
    if alpha_draws.times != TIMES_OF_DAY:
        raise ValueError("stage-2 prediction needs alpha draws for all three times of day")
    seed = _default_seed(stage2) if seed is None else seed
    spec = stage2.spec
    beta = stage2.pooled("beta")
    out = np.empty_like(alpha_draws.values)
    for i in range(alpha_draws.n_locations):
        rng = np.random.default_rng([seed, 1, i])
        a = alpha_draws.values[i]
        zb = np.einsum("mktp,mp->mkt", stage2.basis.design(a), beta)
        mu = inv_logit(zb + draw_effects(stage2, rng))
        if spec.precision_kind == "exp":
            phi = stage2.pooled("phi_1")[:, None, None] + stage2.pooled("phi_2")[:, None, None] * np.exp(a)
        else:
            phi = stage2.pooled("phi")[:, None, None]
        out[i] = _beta_draw(rng, mu, phi)
    return PredictiveDraws(out, TIMES_OF_DAY, "y")


@dataclass(frozen=True)
class PredictiveRaster:
    """Quantile summaries ``(n_variables, n_cells, n_times)`` of 29-minute totals."""

    coords: np.ndarray
    times: tuple
    variables: tuple
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def ci_width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "time_of_day", "variable", "median", "lower95", "upper95", "ci_width"])
            for v, var in enumerate(self.variables):
                for c, (x, y) in enumerate(self.coords):
                    for k, tod in enumerate(self.times):
                        lo, md, hi = self.lower[v, c, k], self.median[v, c, k], self.upper[v, c, k]
                        w.writerow([f"{x:.10g}", f"{y:.10g}", tod, var, f"{md:.10g}", f"{lo:.10g}",
                                    f"{hi:.10g}", f"{hi - lo:.10g}"])

    def to_ascii_grids(self, out_dir, cellsize: float, nodata: float = -9999.0) -> list[Path]:
        """One ESRI ASCII grid per variable, statistic and time of day."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        xs = np.unique(self.coords[:, 0])
        ys = np.unique(self.coords[:, 1])
        col = np.rint((self.coords[:, 0] - xs[0]) / cellsize).astype(int)
        row = np.rint((ys[-1] - self.coords[:, 1]) / cellsize).astype(int)
        ncols, nrows = col.max() + 1, row.max() + 1
        header = (
            f"ncols {ncols}\nnrows {nrows}\nxllcorner {xs[0] - cellsize / 2:.10g}\n"
            f"yllcorner {ys[0] - cellsize / 2:.10g}\ncellsize {cellsize:.10g}\nNODATA_value {nodata:g}\n"
        )
        paths = []
        stats = {"median": self.median, "lower95": self.lower, "upper95": self.upper, "ci_width": self.ci_width}
        for v, var in enumerate(self.variables):
            for sname, arr in stats.items():
                for k, tod in enumerate(self.times):
                    grid = np.full((nrows, ncols), nodata)
                    grid[row, col] = arr[v, :, k]
                    p = out_dir / f"{var}_{sname}_{tod}.asc"
                    with open(p, "w") as fh:
                        fh.write(header)
                        for line in grid:
                            fh.write(" ".join(f"{val:.10g}" for val in line) + "\n")
                    paths.append(p)
        return paths


def summarize_totals(totals, level: float = 0.95):
    """Empirical (type 7) quantiles over the sample axis 1 of ``totals``."""
    totals = np.asarray(totals, dtype=float)
    if totals.shape[1] < MIN_STABLE_SAMPLES:
        warnings.warn(f"unstable quantiles: only {totals.shape[1]} samples per cell", RuntimeWarning, stacklevel=2)
    a = (1 - level) / 2
    q = np.quantile(totals, [a, 0.5, 1 - a], axis=1)
    return q[1], q[0], q[2]


def aggregate_and_rasterize(draws, grid) -> PredictiveRaster:
    """Quantile raster of 29-minute totals.

    ``draws`` is one :class:`PredictiveDraws` or a sequence of them (one per
    variable); ``grid`` gives the cell centres as an ``(n, 2)`` array or as
    objects with ``x`` and ``y`` attributes.
    """
    if isinstance(draws, PredictiveDraws):
        draws = [draws]
    coords = np.array([(g.x, g.y) if hasattr(g, "x") else tuple(g) for g in grid], dtype=float).reshape(-1, 2)
    times = draws[0].times
    med, lo, hi = [], [], []
    for d in draws:
        if d.n_locations != len(coords):
            raise ValueError("draws and grid have different numbers of cells")
        if d.times != times:
            raise ValueError("all variables must cover the same times of day")
        m, l, u = summarize_totals(d.totals())
        med.append(m)
        lo.append(l)
        hi.append(u)
    return PredictiveRaster(coords, times, tuple(d.variable for d in draws), np.stack(med), np.stack(lo), np.stack(hi))
