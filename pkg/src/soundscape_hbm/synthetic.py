"""Synthetic data with known parameters, drawn from the two-stage model itself.

Mean curves are polynomials of degree at most three on the logit scale, so a
cubic spline fit is correctly specified.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import N_MINUTES, N_TIMES, TIMES_OF_DAY
from .acoustic_features import MINUTE_S, AudioClip
from .data import SoundData
from .model_core import EPS, ar1_covariance, inv_logit
from .road_grid import RoadSegment, rasterize, road_covariates, scale_attributes


@dataclass
class StageTruth:
    """Generating values for one stage.

    ``curve`` holds polynomial coefficients (highest power first) of the
    logit mean in the stage covariate.  ``lam`` overrides the scalar
    ``sigma2`` with a time-of-day covariance.  ``precision`` is one of
    ``{"phi": v}``, ``{"phi_l": a, "phi_u": b}`` or ``{"phi_1": a, "phi_2": b}``.
    """

    curve: tuple
    sigma2: float
    rho: float
    precision: dict
    lam: list | None = None

    def covariance(self) -> np.ndarray:
        return np.asarray(self.lam, dtype=float) if self.lam is not None else self.sigma2 * np.eye(N_TIMES)


@dataclass
class SyntheticTruth:
    stage1: StageTruth
    stage2: StageTruth
    rc: list = field(default_factory=list)
    threshold: float = 2.0

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def default_truth(variant: int = 1, rc=None) -> SyntheticTruth:
    """Well-specified generating values for each model variant.

    Stage 1 is increasing in the road covariate, stage 2 decreasing in
    anthropogenic noise.
    """
    rc = [] if rc is None else [float(v) for v in rc]
    lam1 = [[0.6, 0.2, 0.1], [0.2, 0.5, 0.15], [0.1, 0.15, 0.7]]
    lam2 = [[0.4, 0.1, 0.05], [0.1, 0.3, 0.1], [0.05, 0.1, 0.5]]
    if variant == 1:
        s1 = StageTruth((0.3, -1.5), 0.6, 0.85, {"phi": 10000.0})
        s2 = StageTruth((-3.0, 0.0), 0.4, 0.8, {"phi": 1500.0})
    elif variant == 2:
        s1 = StageTruth((0.3, -1.5), 0.6, 0.85, {"phi": 10000.0}, lam1)
        s2 = StageTruth((-3.0, 0.0), 0.4, 0.8, {"phi": 1500.0}, lam2)
    elif variant == 3:
        s1 = StageTruth((0.3, -1.5), 0.6, 0.85, {"phi_l": 4000.0, "phi_u": 20000.0}, lam1)
        s2 = StageTruth((-3.0, 0.0), 0.4, 0.8, {"phi_1": 500.0, "phi_2": 3000.0}, lam2)
    else:
        raise ValueError("variant must be 1, 2 or 3")
    return SyntheticTruth(s1, s2, rc)


def draw_effects(rng, n_sites: int, lam, rho) -> np.ndarray:
    """``(n_sites, 3, 29)`` draws from ``N(0, lam (x) R(rho))``."""
    L_t = np.linalg.cholesky(np.asarray(lam, dtype=float))
    L_r = np.linalg.cholesky(ar1_covariance(1.0, rho, N_MINUTES))
    z = rng.standard_normal((n_sites, N_TIMES, N_MINUTES))
    return np.einsum("ab,jbs,ts->jat", L_t, z, L_r)


def _precision(prec: dict, cov, threshold):
    if "phi" in prec:
        return np.full(np.shape(cov), prec["phi"])
    if "phi_l" in prec:
        return np.where(cov < threshold, prec["phi_l"], prec["phi_u"])
    return prec["phi_1"] + prec["phi_2"] * np.exp(cov)


def _draw_response(rng, truth: StageTruth, cov, threshold):
    n_sites = cov.shape[0]
    eta = np.polyval(truth.curve, cov) + draw_effects(rng, n_sites, truth.covariance(), truth.rho)
    mu = inv_logit(eta)
    phi = _precision(truth.precision, cov, threshold)
    return mu, np.clip(rng.beta(mu * phi, (1 - mu) * phi), EPS, 1 - EPS)


def simulate(truth: SyntheticTruth, seed: int = 0, site_ids=None) -> tuple[SoundData, dict]:
    """Draw both responses; the stage-2 covariate is the true stage-1 mean.

    Returns the data and the latent means ``{"alpha_mean", "y_mean"}``.
    """
    rc = np.asarray(truth.rc, dtype=float)
    rng = np.random.default_rng([seed, 11])
    rc_grid = np.broadcast_to(rc[:, None, None], (rc.size, N_TIMES, N_MINUTES))
    alpha_mean, alpha = _draw_response(rng, truth.stage1, rc_grid, truth.threshold)
    y_mean, y = _draw_response(rng, truth.stage2, alpha_mean, truth.threshold)
    ids = tuple(range(1, rc.size + 1)) if site_ids is None else tuple(site_ids)
    return SoundData(ids, rc, alpha, y), {"alpha_mean": alpha_mean, "y_mean": y_mean}


def synthetic_rc(n_sites: int = 18, seed: int = 0, low: float = -3.0, high: float = 6.0) -> np.ndarray:
    """Road covariate values spread evenly over ``[low, high]`` in shuffled order."""
    rng = np.random.default_rng([seed, 12])
    return rng.permutation(np.linspace(low, high, n_sites))


def synthetic_landscape(n_sites: int = 18, seed: int = 0, extent: float = 3000.0):
    """Straight roads across a square study area and random site locations.

    Returns ``(segments, bbox, site_xy, rc)`` with ``rc`` computed by the
    road-grid pipeline.
    """
    rng = np.random.default_rng([seed, 13])
    segs = [
        RoadSegment(np.array([[0.0, 0.3 * extent], [extent, 0.35 * extent]]), 12000.0, 90.0, 12.0),
        RoadSegment(np.array([[0.6 * extent, 0.0], [0.55 * extent, extent]]), 3000.0, 60.0, 5.0),
        RoadSegment(np.array([[0.0, 0.8 * extent], [0.5 * extent, 0.9 * extent]]), 600.0, 50.0, 2.0),
    ]
    bbox = (0.0, 0.0, extent, extent)
    sites = rng.uniform(0.05 * extent, 0.95 * extent, size=(n_sites, 2))
    table = rasterize(segs, bbox)
    scaling = scale_attributes(table, sites)
    rc = road_covariates(sites, table, scaling)
    return segs, bbox, sites, rc, table, scaling


def synthetic_clip(features, sample_rate: int = 22050, channels: int = 1, seed: int = 0,
                   noise: float = 1e-3) -> AudioClip:
    """A 29-minute recording whose minute ``m`` carries a 1.25 kHz tone of
    amplitude ``features[m, 0]`` and a 5.75 kHz tone of amplitude
    ``features[m, 1]`` over low white noise."""
    rng = np.random.default_rng([seed, 14])
    feats = np.asarray(features, dtype=float).reshape(N_MINUTES, 2)
    per_min = MINUTE_S * sample_rate
    t = np.arange(per_min) / sample_rate
    tone_a = np.sin(2 * np.pi * 1250.0 * t).astype(np.float32)
    tone_b = np.sin(2 * np.pi * 5750.0 * t).astype(np.float32)
    out = np.empty((channels, N_MINUTES * per_min), dtype=np.float32)
    for m in range(N_MINUTES):
        seg = feats[m, 0] * tone_a + feats[m, 1] * tone_b
        sl = slice(m * per_min, (m + 1) * per_min)
        for c in range(channels):
            out[c, sl] = seg + noise * rng.standard_normal(per_min).astype(np.float32)
    return AudioClip(np.clip(out, -1.0, 1.0), sample_rate)


def recording_names(site_ids) -> list[tuple[int, str]]:
    return [(s, tod) for s in site_ids for tod in TIMES_OF_DAY]
