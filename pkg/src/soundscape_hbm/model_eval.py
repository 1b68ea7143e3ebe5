"""Out-of-sample scoring: CRPS, ELPD and interval coverage under k-fold
cross-validation of the two-stage model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import SoundData
from .gibbs import ModelSpec
from .model_core import EPS, _beta_logpdf
from .two_stage import fit_two_stage


def crps_empirical(samples, observed):
    """Sample-based CRPS ``E|X - y| - E|X - X'| / 2``.

    ``samples`` has the draws on its last axis; ``observed`` broadcasts
    against the remaining axes.  The pair term uses the sorted-sample
    identity ``sum_{i,j} |x_i - x_j| = 2 sum_i (2i - M - 1) x_(i)``.
    """
    x = np.asarray(samples, dtype=float)
    if x.shape[-1] == 0:
        raise ValueError("empty predictive sample")
    obs = np.asarray(observed, dtype=float)
    m = x.shape[-1]
    abs_err = np.mean(np.abs(x - obs[..., None]), axis=-1)
    xs = np.sort(x, axis=-1)
    w = 2.0 * np.arange(1, m + 1) - m - 1
    pair = 2.0 * np.sum(w * xs, axis=-1) / m**2
    out = abs_err - 0.5 * pair
    return float(out) if out.ndim == 0 else out


def beta_pointwise_logpdf(y, mu, phi):
    y = np.asarray(y, dtype=float)
    if np.any((y <= 0) | (y >= 1)):
        raise ValueError("held-out observation outside (0, 1)")
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return _beta_logpdf(np.log(y), np.log1p(-y), mu * phi, (1 - mu) * phi)


def elpd(held_out, mu, phi) -> float:
    """Sum over points of the log of the iteration-averaged beta density.

    ``mu`` and ``phi`` are ``(M, n)`` (``phi`` may broadcast).
    """
    lp = beta_pointwise_logpdf(np.asarray(held_out)[None, :], mu, phi)
    m = lp.shape[0]
    return float(np.sum(logsumexp(lp, axis=0) - np.log(m)))


def coverage(samples, observed, level: float = 0.95) -> float:
    """Percent of observations inside their central ``level`` sample interval."""
    a = (1 - level) / 2
    lo, hi = np.quantile(np.asarray(samples, dtype=float), [a, 1 - a], axis=-1)
    obs = np.asarray(observed, dtype=float)
    return float(100.0 * np.mean((obs >= lo) & (obs <= hi)))


@dataclass(frozen=True)
class FoldPlan:
    """Fold id per ``(site, time_of_day)`` block, or per cell when ``per_minute``."""

    k: int
    assignment: np.ndarray
    seed: int
    per_minute: bool = False
    literal_small_train: bool = False

    @classmethod
    def make(cls, shape, k: int = 6, seed: int = 0, per_minute: bool = False,
             literal_small_train: bool = False) -> "FoldPlan":
        units = tuple(shape) if per_minute else tuple(shape[:2])
        n = int(np.prod(units))
        if k < 2 or k > n:
            raise ValueError("k must be between 2 and the number of units")
        rng = np.random.default_rng([seed, 6])
        assign = np.empty(n, dtype=int)
        assign[rng.permutation(n)] = np.arange(n) % k
        return cls(k, assign.reshape(units), seed, per_minute, literal_small_train)

    def test_mask(self, fold: int, shape) -> np.ndarray:
        a = self.assignment == fold
        if not self.per_minute:
            a = np.broadcast_to(a[:, :, None], tuple(shape))
        return np.array(a)

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.ravel(), minlength=self.k)


@dataclass
class ScoreReport:
    model: str
    folds: list = field(default_factory=list)  # (fold, elpd, crps, coverage95, n)
    total_elpd: float = 0.0
    mean_crps: float = 0.0
    coverage95: float = 0.0

    def rows(self) -> list:
        out = [(self.model, f, e, c, v) for f, e, c, v, _ in self.folds]
        out.append((self.model, "total", self.total_elpd, self.mean_crps, self.coverage95))
        return out


def write_scores(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "elpd", "crps", "coverage95"])
        for r in reports:
            for model, fold, e, c, v in r.rows():
                w.writerow([model, fold, f"{e:.10g}", f"{c:.10g}", f"{v:.10g}"])


def _sites_spanned(mask) -> int:
    return int(np.sum(mask.any(axis=(1, 2))))


def heldout_predictive(result, cells):
    """Per-iteration ``(mu, phi)`` of stage 2 at flattened grid ``cells``: ``(M, n)`` each."""
    s2 = result.stage2
    spec = s2.spec
    mu = s2.pooled_fitted()[:, cells]
    if spec.precision_kind == "exp":
        rows = result.stage1_fits.rows[s2.covariate_rows.ravel()][:, cells]
        phi = s2.pooled("phi_1")[:, None] + s2.pooled("phi_2")[:, None] * np.exp(rows)
    else:
        phi = np.broadcast_to(s2.pooled("phi")[:, None], mu.shape)
    return mu, phi


def kfold_validate(spec1: ModelSpec, spec2: ModelSpec, data: SoundData, plan: FoldPlan,
                   name: str | None = None) -> ScoreReport:
    """Refit both stages per fold and score held-out biological sound."""
    name = name or f"model{spec2.variant}"
    observed = ~np.isnan(data.y)
    report = ScoreReport(name)
    all_crps, all_cov_hits, total_elpd = [], [], 0.0
    for fold in range(plan.k):
        fold_mask = plan.test_mask(fold, data.shape)
        test = fold_mask & observed
        if plan.literal_small_train:
            test = ~fold_mask & observed
        train_data = data.masked(test)
        if _sites_spanned(test) < 2 or _sites_spanned(~np.isnan(train_data.y)) < 2:
            raise ValueError(f"fold too small: fold {fold} spans fewer than 2 sites")
        result = fit_two_stage(spec1, spec2, train_data)
        cells = np.flatnonzero(test.ravel())
        y_obs = data.y.ravel()[cells]
        mu, phi = heldout_predictive(result, cells)
        rng = np.random.default_rng([plan.seed, fold, 3])
        draws = np.clip(rng.beta(mu * phi, (1 - mu) * phi), EPS, 1 - EPS).T  # (n, M)
        fold_elpd = elpd(y_obs, mu, phi)
        crps = crps_empirical(draws, y_obs)
        a = 0.025
        lo, hi = np.quantile(draws, [a, 1 - a], axis=1)
        hits = (y_obs >= lo) & (y_obs <= hi)
        report.folds.append((fold, fold_elpd, float(np.mean(crps)), float(100 * np.mean(hits)), cells.size))
        all_crps.append(crps)
        all_cov_hits.append(hits)
        total_elpd += fold_elpd
    report.total_elpd = total_elpd
    report.mean_crps = float(np.mean(np.concatenate(all_crps)))
    report.coverage95 = float(100 * np.mean(np.concatenate(all_cov_hits)))
    return report


def compare_models(models: dict, data: SoundData, plan: FoldPlan) -> list[ScoreReport]:
    """``models`` maps a label to a ``(spec1, spec2)`` pair; same folds for all."""
    return [kfold_validate(s1, s2, data, plan, name) for name, (s1, s2) in models.items()]
