"""Two-stage fit: anthropogenic noise on the road covariate, then biological
sound on sampled stage-1 fitted values so that stage-1 uncertainty carries
into stage 2."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import SoundData
from .gibbs import ModelSpec, PosteriorDraws, StageData, run_chains
from .model_core import SplineBasis, inv_logit


@dataclass(frozen=True)
class StageOneFits:
    """Pooled stage-1 fitted means, one row per retained iteration.

    Columns follow the canonical ``(site, time, minute)`` order over the full
    grid.  ``source[r]`` is the ``(chain, iteration)`` a row came from.
    """

    rows: np.ndarray  # (R, n)
    source: np.ndarray  # (R, 2)
    grid_shape: tuple

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def grid_rows(self) -> np.ndarray:
        return self.rows.reshape((-1,) + tuple(self.grid_shape))

    def median(self) -> np.ndarray:
        return np.median(self.rows, axis=0)


@dataclass
class TwoStageResult:
    stage1: PosteriorDraws
    stage1_fits: StageOneFits
    stage2: PosteriorDraws

    @property
    def pairing(self) -> np.ndarray:
        """``(chain, iteration) -> stage-1 fits row`` for every retained stage-2 draw."""
        return self.stage2.covariate_rows


def fitted_means(draws: PosteriorDraws, covariate) -> np.ndarray:
    """``inv_logit(Z beta + w)`` recomputed from stored coefficients and effects.

    ``covariate`` is the flattened design covariate for every grid cell.
    Returns ``(n_chains, M, n)``.
    """
    Z = draws.basis.design(np.asarray(covariate, dtype=float).ravel())
    return inv_logit(np.einsum("np,cmp->cmn", Z, draws.params["beta"]) + draws.effects)


def extract_fits(stage1: PosteriorDraws, n_needed: int | None = None, rng=None) -> StageOneFits:
    """Pool the per-iteration fitted means across chains.

    With ``n_needed`` set, exactly that many rows are drawn uniformly
    without replacement, in random order.
    """
    c, m, n = stage1.fitted.shape
    rows = stage1.fitted.reshape(c * m, n)
    source = np.stack(np.meshgrid(np.arange(c), np.arange(m), indexing="ij"), axis=-1).reshape(-1, 2)
    if n_needed is not None:
        if n_needed > c * m:
            raise ValueError(f"insufficient stage-1 samples: have {c * m}, need {n_needed}")
        rng = np.random.default_rng(rng)
        pick = rng.choice(c * m, size=n_needed, replace=False)
        rows, source = rows[pick], source[pick]
    return StageOneFits(rows, source, tuple(stage1.grid_shape))


def stage2_basis(pool, n_coefficients: int) -> SplineBasis:
    """Knots from the pooled range and quantiles of all fitted alpha values.

    A pool with too few distinct values (a degenerate stage 1) falls back to
    equally spaced knots on the range widened by 0.5 either side.
    """
    pool = np.asarray(pool, dtype=float)
    try:
        return SplineBasis.from_data(pool, n_coefficients)
    except ValueError:
        lo, hi = float(pool.min()) - 0.5, float(pool.max()) + 0.5
        n_int = max(n_coefficients - 4, 0)
        interior = tuple(np.linspace(lo, hi, n_int + 2)[1:-1]) if n_coefficients > 1 else ()
        return SplineBasis((lo, hi), interior, n_coefficients)


def fit_stage2(spec2: ModelSpec, data: SoundData, fits: StageOneFits, seed: int | None = None) -> PosteriorDraws:
    """Stage 2 with the covariate row switched every ``thin`` iterations.

    Retained iteration ``m`` of chain ``c`` uses fits row
    ``c * M + m`` of a seeded random permutation; burn-in uses rows drawn
    at random with replacement.
    """
    mc = spec2.mcmc
    need = mc.n_chains * mc.n_retained
    if fits.n_rows < need:
        raise ValueError(f"insufficient stage-1 samples: have {fits.n_rows}, need {need}")
    if spec2.basis is None:
        spec2 = replace(spec2, basis=stage2_basis(fits.rows, spec2.n_coefficients))
    rng = np.random.default_rng([mc.seed if seed is None else seed, 2])
    order = rng.permutation(fits.n_rows)[:need].reshape(mc.n_chains, mc.n_retained)
    grid = fits.grid_rows()
    return run_chains(spec2, StageData.stage2(data, grid[order[0, 0]]), grid, list(order))


def fit_two_stage(spec1: ModelSpec, spec2: ModelSpec, data: SoundData) -> TwoStageResult:
    if spec1.variant != spec2.variant:
        raise ValueError("both stages must use the same model variant")
    if spec1.stage != 1 or spec2.stage != 2:
        raise ValueError("spec1 must be a stage-1 spec and spec2 a stage-2 spec")
    stage1 = run_chains(spec1, StageData.stage1(data))
    fits = extract_fits(stage1)
    stage2 = fit_stage2(spec2, data, fits)
    return TwoStageResult(stage1, fits, stage2)


def fit_plugin(spec2: ModelSpec, data: SoundData, fits: StageOneFits) -> PosteriorDraws:
    """Stage 2 refit at the per-cell posterior median of the stage-1 fits."""
    if spec2.basis is None:
        spec2 = replace(spec2, basis=stage2_basis(fits.rows, spec2.n_coefficients))
    return run_chains(spec2, StageData.stage2(data, fits.median()))
