"""Adaptive Metropolis-within-Gibbs sampler for the stage models.

Every variant is written in the Kronecker form ``lam (x) R(rho)`` for the
per-site random effects; Model 1 is the special case ``lam = sigma2 * I``.
The sampler runs on the centred parameterisation ``eta = Z beta + w``,
which keeps ``beta`` conjugate (Gaussian full conditional) while the
beta likelihood only touches ``eta``.  Random effects are updated one
coordinate at a time with per-coordinate adaptive proposal scales; all
coordinates that are conditionally independent given the rest (same
time-of-day and same minute parity, since the AR(1) precision is
tridiagonal) are proposed and accepted together in one vectorised sweep.
Recording blocks with no observations at all are drawn exactly from their
Gaussian conditional instead.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.linalg import cho_solve, solve_triangular
from scipy.ndimage import uniform_filter1d
from scipy.special import polygamma

from . import N_MINUTES, N_TIMES
from .data import SoundData
from .model_core import (
    KroneckerCov,
    SplineBasis,
    _beta_logpdf,
    apply_ar1_precision,
    ar1_crossprods,
    ar1_inner,
    inv_logit,
    logit,
)

log = logging.getLogger(__name__)

TARGET_SCALAR = 0.44
TARGET_VECTOR = 0.234


# ---------------------------------------------------------------------------
# specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Priors:
    beta_var: float = 1e4
    phi_shape: float = 2.0
    phi_scale: float = 20000.0
    sigma2_shape: float = 2.0
    sigma2_scale: float = 5.0
    rho_lower: float = 0.1
    rho_upper: float = 1.0
    iw_df: float = 3.0
    iw_scale: float = 0.1
    phi_uniform_upper: float = 1e4

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "Priors":
        base = {1: dict(phi_scale=20000.0, sigma2_scale=5.0), 2: dict(phi_scale=2000.0, sigma2_scale=2.0)}
        return cls(**{**base[stage], **overrides})


@dataclass(frozen=True)
class MCMCSettings:
    iterations: int = 50_000
    burn_in: int = 25_000
    thin: int = 10
    n_chains: int = 3
    seed: int = 0
    batch: int = 50
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be positive")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass(frozen=True)
class ModelSpec:
    """Which model to fit and how.

    ``variant`` 1 has a scalar effect variance and constant precision;
    2 replaces the variance with a 3x3 time-of-day covariance; 3 adds the
    heteroskedastic precision (split on the road covariate in stage 1,
    exponential in fitted anthropogenic noise in stage 2).
    """

    variant: int
    stage: int
    priors: Priors = None
    n_coefficients: int = None
    mcmc: MCMCSettings = field(default_factory=MCMCSettings)
    threshold: float = 2.0
    basis: SplineBasis | None = None

    def __post_init__(self):
        if self.variant not in (1, 2, 3):
            raise ValueError("variant must be 1, 2 or 3")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.priors is None:
            object.__setattr__(self, "priors", Priors.for_stage(self.stage))
        if self.n_coefficients is None:
            object.__setattr__(self, "n_coefficients", 5 if self.stage == 1 else 8)

    @property
    def precision_kind(self) -> str:
        if self.variant < 3:
            return "constant"
        return "split" if self.stage == 1 else "exp"

    @property
    def precision_names(self) -> tuple:
        return {"constant": ("phi",), "split": ("phi_l", "phi_u"), "exp": ("phi_1", "phi_2")}[self.precision_kind]

    @property
    def scalar_variance(self) -> bool:
        return self.variant == 1

    def with_mcmc(self, **kw) -> "ModelSpec":
        return replace(self, mcmc=replace(self.mcmc, **kw))

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = {
            "variant": self.variant,
            "stage": self.stage,
            "priors": asdict(self.priors),
            "n_coefficients": self.n_coefficients,
            "mcmc": asdict(self.mcmc),
            "threshold": self.threshold,
        }
        if self.basis is not None:
            d["basis"] = self.basis.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        basis = SplineBasis.from_dict(d["basis"]) if d.get("basis") else None
        return cls(
            variant=int(d["variant"]),
            stage=int(d["stage"]),
            priors=Priors(**d["priors"]),
            n_coefficients=int(d["n_coefficients"]),
            mcmc=MCMCSettings(**d["mcmc"]),
            threshold=float(d["threshold"]),
            basis=basis,
        )


@dataclass(frozen=True)
class StageData:
    """Response on the ``(J, 3, 29)`` grid (NaN = unobserved) and its covariate."""

    response: np.ndarray
    covariate: np.ndarray

    @classmethod
    def stage1(cls, data: SoundData) -> "StageData":
        return cls(data.alpha, data.rc_grid())

    @classmethod
    def stage2(cls, data: SoundData, alpha_hat=None) -> "StageData":
        cov = np.full(data.shape, 0.5) if alpha_hat is None else np.asarray(alpha_hat, dtype=float).reshape(data.shape)
        return cls(data.y, cov)

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.response)


@dataclass
class State:
    beta: np.ndarray
    effects: np.ndarray  # (J, 3, 29)
    rho: float
    lam: np.ndarray  # 3x3; sigma2 * I for Model 1
    precision: dict

    @property
    def sigma2(self) -> float:
        return float(self.lam[0, 0])


def resolve_basis(spec: ModelSpec, data: StageData) -> SplineBasis:
    if spec.basis is not None:
        return spec.basis
    return SplineBasis.from_data(data.covariate, spec.n_coefficients)


def _precision_obs(spec: ModelSpec, prec: dict, cov):
    kind = spec.precision_kind
    if kind == "constant":
        return np.full(np.shape(cov), float(prec["phi"]))
    if kind == "split":
        return np.where(cov < spec.threshold, prec["phi_l"], prec["phi_u"])
    return prec["phi_1"] + prec["phi_2"] * np.exp(cov)


def log_posterior_terms(spec: ModelSpec, data: StageData, state: State, basis: SplineBasis | None = None) -> dict:
    """Normalised log density pieces of the joint posterior kernel.

    Out-of-support states give ``-inf`` in the offending term.
    """
    p = spec.priors
    basis = basis or resolve_basis(spec, data)
    terms = {}
    prec = state.precision
    lo, hi = p.rho_lower, p.rho_upper
    if not (lo <= state.rho < hi) or any(v <= 0 for v in prec.values()):
        return {"likelihood": -np.inf}
    mask = data.mask
    eta = (basis.design(data.covariate) @ state.beta) + state.effects
    mu = inv_logit(eta[mask])
    phi = _precision_obs(spec, prec, data.covariate[mask])
    v = data.response[mask]
    terms["likelihood"] = float(np.sum(_beta_logpdf(np.log(v), np.log1p(-v), mu * phi, (1 - mu) * phi)))
    try:
        cov = KroneckerCov(state.lam, state.rho, dim=np.shape(state.effects)[-1])
    except ValueError:
        terms["effects"] = -np.inf
        return terms
    terms["effects"] = float(cov.logpdf(state.effects))
    terms["beta_prior"] = float(np.sum(stats.norm.logpdf(state.beta, 0.0, np.sqrt(p.beta_var))))
    if spec.precision_kind == "exp":
        terms["precision_prior"] = float(
            sum(stats.uniform.logpdf(prec[n], 0.0, p.phi_uniform_upper) for n in spec.precision_names)
        )
    else:
        terms["precision_prior"] = float(
            sum(stats.invgamma.logpdf(prec[n], p.phi_shape, scale=p.phi_scale) for n in spec.precision_names)
        )
    if spec.scalar_variance:
        terms["variance_prior"] = float(stats.invgamma.logpdf(state.sigma2, p.sigma2_shape, scale=p.sigma2_scale))
    else:
        terms["variance_prior"] = float(
            stats.invwishart.logpdf(state.lam, df=p.iw_df, scale=p.iw_scale * np.eye(N_TIMES))
        )
    terms["rho_prior"] = float(stats.uniform.logpdf(state.rho, lo, hi - lo))
    return terms


def log_posterior(spec: ModelSpec, data: StageData, state: State, basis: SplineBasis | None = None) -> float:
    return float(sum(log_posterior_terms(spec, data, state, basis).values()))


# ---------------------------------------------------------------------------
# generic Metropolis machinery
# ---------------------------------------------------------------------------

def metropolis_accept(log_ratio, rng):
    """Accept with probability ``min(1, exp(log_ratio))``; NaN and -inf reject."""
    log_ratio = np.asarray(log_ratio, dtype=float)
    u = rng.random(log_ratio.shape)
    ok = np.log(u) < np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    return ok if ok.ndim else bool(ok)


def mh_step(x, log_target, scale, rng, current_lp=None):
    """One symmetric Gaussian random-walk step on an unconstrained block.

    ``log_target`` must already include any Jacobian of the transform.
    Returns ``(x_new, accepted, log_target(x_new))``.
    """
    x = np.asarray(x, dtype=float)
    if scale <= 0:
        raise ValueError("proposal scale must be positive")
    lp = log_target(x) if current_lp is None else current_lp
    prop = x + scale * rng.standard_normal(x.shape)
    lp_prop = log_target(prop)
    if metropolis_accept(lp_prop - lp, rng):
        return prop, True, lp_prop
    return x, False, lp


def adapt_scales(log_scales, accept_rate, batch_index: int, target=TARGET_SCALAR):
    """Batch adaptation of log proposal scales.

    Each log-scale moves by ``min(0.01, batch_index ** -0.5)`` up when the
    batch acceptance rate exceeds ``target`` and down when it falls short.
    """
    delta = min(0.01, batch_index ** -0.5)
    rate = np.asarray(accept_rate, dtype=float)
    return np.asarray(log_scales, dtype=float) + delta * np.sign(rate - target)


def to_rho(u, lo, hi):
    return lo + (hi - lo) / (1.0 + np.exp(-u))


def from_rho(rho, lo, hi):
    return logit((rho - lo) / (hi - lo))


def chol_params_to_lambda(theta):
    """Lower Cholesky factor with log diagonal: ``[d0, l10, d1, l20, l21, d2]``."""
    L = np.array(
        [[np.exp(theta[0]), 0.0, 0.0], [theta[1], np.exp(theta[2]), 0.0], [theta[3], theta[4], np.exp(theta[5])]]
    )
    return L


def lambda_to_chol_params(lam):
    L = np.linalg.cholesky(lam)
    return np.array([np.log(L[0, 0]), L[1, 0], np.log(L[1, 1]), L[2, 0], L[2, 1], np.log(L[2, 2])])


# ---------------------------------------------------------------------------
# single chain
# ---------------------------------------------------------------------------

def _ar1_paths(rng, shape, rho):
    """Unit-variance AR(1) paths along the last axis."""
    z = rng.standard_normal(shape)
    out = np.empty(shape)
    out[..., 0] = z[..., 0]
    c = np.sqrt(1.0 - rho**2)
    for t in range(1, shape[-1]):
        out[..., t] = rho * out[..., t - 1] + c * z[..., t]
    return out


class InitializationError(RuntimeError):
    pass


class _Chain:
    def __init__(self, spec: ModelSpec, data: StageData, basis: SplineBasis, seed,
                 covariate_rows=None, row_plan=None):
        self.spec = spec
        self.basis = basis
        self.rng = np.random.default_rng(seed)
        J = data.response.shape[0]
        self.J = J
        self.shape = (J, N_TIMES, N_MINUTES)
        self.N = J * N_TIMES * N_MINUTES
        obs = data.mask
        self.obs = obs.reshape(-1)
        self.obsf = self.obs.astype(float)
        v = np.where(obs, data.response, 0.5).reshape(-1)
        self.v = v
        self.log_v = np.log(v)
        self.log1m_v = np.log1p(-v)
        self.covariate_rows = covariate_rows
        self.row_plan = row_plan
        self.cov = np.asarray(data.covariate, dtype=float).reshape(-1).copy()
        self.split_low = self.cov < spec.threshold if spec.precision_kind == "split" else None

        # fully unobserved (site, time) blocks get exact conditional draws
        block_missing = ~obs.any(axis=2)
        self.patterns = []
        for pat in {tuple(row) for row in block_missing if row.any()}:
            sites = np.flatnonzero((block_missing == np.array(pat)).all(axis=1))
            self.patterns.append((sites, np.flatnonzero(pat), np.flatnonzero(~np.array(pat))))
        mh = ~np.repeat(block_missing[:, :, None], N_MINUTES, axis=2)
        k_idx, t_idx = np.meshgrid(np.arange(N_TIMES), np.arange(N_MINUTES), indexing="ij")
        k_full = np.broadcast_to(k_idx, self.shape).reshape(-1)
        t_full = np.broadcast_to(t_idx, self.shape).reshape(-1)
        mh_flat = mh.reshape(-1)
        self.groups = []
        tod_sets = [None] if spec.scalar_variance else list(range(N_TIMES))
        for k in tod_sets:
            for parity in (0, 1):
                sel = mh_flat & (t_full % 2 == parity)
                if k is not None:
                    sel &= k_full == k
                idx = np.flatnonzero(sel)
                if idx.size:
                    self.groups.append((idx, k_full[idx], t_full[idx]))

    # -- derived quantities ------------------------------------------------
    def _set_design(self):
        self.Z = self.basis.design(self.cov)
        self.phi_full = _precision_obs(self.spec, self.prec, self.cov)

    def _loglik(self, mu, phi, idx=None):
        if idx is None:
            return self.obsf * _beta_logpdf(self.log_v, self.log1m_v, mu * phi, (1 - mu) * phi)
        return self.obsf[idx] * _beta_logpdf(self.log_v[idx], self.log1m_v[idx], mu * phi, (1 - mu) * phi)

    def _refresh_all(self):
        self.r = self.eta - self.Z @ self.beta
        self.mu = inv_logit(self.eta)
        self.ll = self._loglik(self.mu, self.phi_full)

    def _A(self):
        if self.spec.scalar_variance:
            return np.eye(N_TIMES) / self.lam[0, 0]
        return np.linalg.inv(self.lam)

    def _apply_Q(self, r3, A):
        Rr = apply_ar1_precision(r3, self.rho, axis=2)
        if self.spec.scalar_variance:
            return Rr * A[0, 0]
        return np.einsum("kl,jlt...->jkt...", A, Rr)

    # -- initialisation ----------------------------------------------------
    def initialize(self):
        spec, p, rng = self.spec, self.spec.priors, self.rng
        Z = self.basis.design(self.cov)
        eta_obs = logit(np.clip(self.v, 1e-9, 1 - 1e-9))
        o = self.obs
        beta0, *_ = np.linalg.lstsq(Z[o], eta_obs[o], rcond=None)
        # smoothed start so effects do not begin by interpolating the noise
        filled = np.where(o, eta_obs, Z @ beta0).reshape(self.shape)
        smooth = uniform_filter1d(filled, size=5, axis=2, mode="nearest").reshape(-1)
        var0 = max(float(np.var(smooth[o] - Z[o] @ beta0)), 1e-3)
        m0 = inv_logit(smooth[o])
        phi0 = float(np.clip(np.mean(m0 * (1 - m0)) / np.mean((self.v[o] - m0) ** 2) - 1.0, 1.0, 1e6))
        if spec.precision_kind == "exp":
            each = phi0 / (1.0 + float(np.mean(np.exp(self.cov[o]))))
            prec0 = {n: float(np.clip(each, 1.0, 0.9 * p.phi_uniform_upper)) for n in spec.precision_names}
        else:
            prec0 = {n: phi0 for n in spec.precision_names}
        for _ in range(100):
            self.beta = beta0 + 0.1 * rng.standard_normal(beta0.shape)
            self.rho = float(np.clip(0.5 + rng.uniform(-0.2, 0.2), p.rho_lower + 1e-3, p.rho_upper - 1e-3))
            self.lam = var0 * np.exp(0.3 * rng.standard_normal()) * np.eye(N_TIMES)
            self.prec = {n: v * np.exp(0.3 * rng.standard_normal()) for n, v in prec0.items()}
            if spec.precision_kind == "exp":
                self.prec = {n: min(v, 0.99 * p.phi_uniform_upper) for n, v in self.prec.items()}
            eta = Z @ self.beta
            eta[o] = smooth[o] + 0.01 * rng.standard_normal(o.sum())
            self.eta = eta
            self._set_design()
            self._refresh_all()
            if np.isfinite(self.ll).all() and np.isfinite(self._lp_cov_terms()):
                break
        else:
            raise InitializationError("cannot initialize: non-finite log posterior after 100 draws")
        self._init_scales()

    def _lp_cov_terms(self):
        s = ar1_crossprods(self.r.reshape(self.shape))
        M = ar1_inner(s, self.rho)
        return -0.5 * np.trace(self._A() @ M)

    def _precondition(self):
        """Conditional sd of each effect: 1 / sqrt(Fisher information + prior precision)."""
        mu, phi = self.mu, self.phi_full
        a, b = mu * phi, (1 - mu) * phi
        info = self.obsf * (phi * mu * (1 - mu)) ** 2 * (polygamma(1, a) + polygamma(1, b))
        A = self._A()
        rinv = np.full(N_MINUTES, (1 + self.rho**2) / (1 - self.rho**2))
        rinv[0] = rinv[-1] = 1 / (1 - self.rho**2)
        qd = np.broadcast_to(np.diag(A)[:, None] * rinv[None, :], self.shape).reshape(-1)
        self.eff_sd = 1.0 / np.sqrt(info + qd)

    def _init_scales(self):
        self._precondition()
        self.eff_ls = np.full(self.N, np.log(2.4))
        self.eff_acc = np.zeros(self.N)
        n_eff = self.J * N_TIMES * N_MINUTES
        n_obs = max(int(self.obs.sum()), 1)
        self.scalar_names = list(self.spec.precision_names) + ["rho"]
        self.scalar_names += ["sigma2"] if self.spec.scalar_variance else [f"lam{i}" for i in range(6)]
        self.scalar_names += [f"ridge_{n}" for n in self.spec.precision_names]
        self.ls = {}
        for n in self.scalar_names:
            if n.startswith("ridge"):
                self.ls[n] = np.log(0.3)
                continue
            size = n_obs if n.startswith("phi") else (n_eff / N_TIMES if n.startswith("lam") else n_eff)
            self.ls[n] = np.log(2.4 * np.sqrt(2.0 / size))
        self.centre = logit(self.v)
        self.acc = {n: 0 for n in self.scalar_names}

    # -- updates -----------------------------------------------------------
    def _update_effects(self):
        A = self._A()
        rho = self.rho
        rinv = np.full(N_MINUTES, (1 + rho**2) / (1 - rho**2))
        rinv[0] = rinv[-1] = 1 / (1 - rho**2)
        dA = np.diag(A)
        rng = self.rng
        for idx, kk, tt in self.groups:
            Qr = self._apply_Q(self.r.reshape(self.shape), A).reshape(-1)
            qd = dA[kk] * rinv[tt]
            dr = self.eff_sd[idx] * np.exp(self.eff_ls[idx]) * rng.standard_normal(idx.size)
            d = -dr * Qr[idx] - 0.5 * qd * dr * dr
            prop = self.eta[idx] + dr
            mu_p = inv_logit(prop)
            ll_p = self._loglik(mu_p, self.phi_full[idx], idx)
            d += ll_p - self.ll[idx]
            ok = metropolis_accept(d, rng)
            sel = idx[ok]
            self.eta[sel] = prop[ok]
            self.r[sel] += dr[ok]
            self.mu[sel] = mu_p[ok]
            self.ll[sel] = ll_p[ok]
            self.eff_acc[idx] += ok
        if self.patterns:
            self._draw_missing_blocks()

    def _draw_missing_blocks(self):
        r3 = self.r.reshape(self.shape)
        lam = self.lam
        for sites, miss, seen in self.patterns:
            paths = _ar1_paths(self.rng, (sites.size, miss.size, N_MINUTES), self.rho)
            if seen.size and not self.spec.scalar_variance:
                B = np.linalg.solve(lam[np.ix_(seen, seen)], lam[np.ix_(seen, miss)]).T
                S = lam[np.ix_(miss, miss)] - B @ lam[np.ix_(seen, miss)]
                mean = np.einsum("ab,jbt->jat", B, r3[np.ix_(sites, seen)])
            else:
                S = lam[np.ix_(miss, miss)]
                mean = 0.0
            L = np.linalg.cholesky(S)
            draw = mean + np.einsum("ab,jbt->jat", L, paths)
            r3[np.ix_(sites, miss)] = draw
        eta3 = self.eta.reshape(self.shape)
        zb = (self.Z @ self.beta).reshape(self.shape)
        for sites, miss, _ in self.patterns:
            ix = np.ix_(sites, miss)
            eta3[ix] = zb[ix] + r3[ix]
        self.mu = inv_logit(self.eta)

    def _update_beta(self):
        p = self.Z.shape[1]
        A = self._A()
        Z4 = self.Z.reshape(self.shape + (p,))
        QZ = self._apply_Q(Z4, A).reshape(self.N, p)
        P = self.Z.T @ QZ + np.eye(p) / self.spec.priors.beta_var
        b = QZ.T @ self.eta
        L = np.linalg.cholesky(P)
        mean = cho_solve((L, True), b)
        self.beta = mean + solve_triangular(L.T, self.rng.standard_normal(p), lower=False)
        self.r = self.eta - self.Z @ self.beta

    def _scalar_mh(self, name, u, log_target):
        lp = log_target(u)
        u_new = u + np.exp(self.ls[name]) * self.rng.standard_normal()
        lp_new = log_target(u_new)
        ok = metropolis_accept(lp_new - lp, self.rng)
        self.acc[name] += ok
        return (u_new if ok else u), ok

    def _update_covariance(self):
        p = self.spec.priors
        J = self.J
        st = ar1_crossprods(self.r.reshape(self.shape))
        M = ar1_inner(st, self.rho)
        if self.spec.scalar_variance:
            trM = np.trace(M)
            n = J * N_TIMES * N_MINUTES

            def lt_s(u):
                s2 = np.exp(u)
                return -0.5 * trM / s2 - 0.5 * n * u - (p.sigma2_shape + 1) * u - p.sigma2_scale / s2 + u

            u, _ = self._scalar_mh("sigma2", np.log(self.lam[0, 0]), lt_s)
            self.lam = np.exp(u) * np.eye(N_TIMES)
        else:
            psi = p.iw_scale * np.eye(N_TIMES)
            c = J * N_MINUTES + p.iw_df + N_TIMES + 1
            MP = M + psi
            theta = lambda_to_chol_params(self.lam)
            jac = np.array([N_TIMES + 1, 0, N_TIMES, 0, 0, N_TIMES - 1], dtype=float)

            def lt_l(th):
                L = chol_params_to_lambda(th)
                Linv_MP = solve_triangular(L, MP, lower=True)
                tr = np.trace(solve_triangular(L, Linv_MP.T, lower=True))
                logdet = 2.0 * (th[0] + th[2] + th[5])
                return -0.5 * tr - 0.5 * c * logdet + jac @ th

            for i in range(6):
                def lt_i(u, i=i):
                    th = theta.copy()
                    th[i] = u
                    return lt_l(th)

                theta[i], _ = self._scalar_mh(f"lam{i}", theta[i], lt_i)
            L = chol_params_to_lambda(theta)
            self.lam = L @ L.T
        # rho
        A = self._A()
        lo, hi = p.rho_lower, p.rho_upper
        n_blocks = J * N_TIMES

        def lt_r(u):
            rho = to_rho(u, lo, hi)
            if not (lo < rho < hi):
                return -np.inf
            Mr = ar1_inner(st, rho)
            return (-0.5 * np.sum(A * Mr) - 0.5 * n_blocks * (N_MINUTES - 1) * np.log1p(-rho**2)
                    + np.log(rho - lo) + np.log(hi - rho))

        u, _ = self._scalar_mh("rho", from_rho(self.rho, lo, hi), lt_r)
        self.rho = float(to_rho(u, lo, hi))

    def _update_precision(self):
        p = self.spec.priors
        kind = self.spec.precision_kind
        for name in self.spec.precision_names:
            if kind == "split":
                sub = self.obs & (self.split_low if name == "phi_l" else ~self.split_low)
            else:
                sub = self.obs
            idx = np.flatnonzero(sub)
            mu = self.mu[idx]

            def phi_for(val):
                prec = dict(self.prec)
                prec[name] = val
                return _precision_obs(self.spec, prec, self.cov[idx])

            def lt(u):
                val = np.exp(u)
                if kind == "exp":
                    if val >= p.phi_uniform_upper:
                        return -np.inf
                    prior = 0.0
                else:
                    prior = -(p.phi_shape + 1) * u - p.phi_scale / val
                phi = phi_for(val)
                return np.sum(self._loglik(mu, phi, idx)) + prior + u

            u0 = np.log(self.prec[name])
            u, ok = self._scalar_mh(name, u0, lt)
            if ok:
                self.prec[name] = float(np.exp(u))
                self.phi_full[idx] = phi_for(self.prec[name])
                self.ll[idx] = self._loglik(mu, self.phi_full[idx], idx)

    def _update_precision_ridge(self):
        """Joint move of one precision and the observed linear predictors.

        The precision takes a log-scale random-walk step while each observed
        predictor's offset from ``logit(y)`` is rescaled by ``sqrt(phi / phi')``,
        so the pair slides along the ridge where tighter data noise means
        predictors closer to the data.
        """
        p = self.spec.priors
        kind = self.spec.precision_kind
        idx = np.flatnonzero(self.obs)
        lp_cov = self._lp_cov_terms()
        for name in self.spec.precision_names:
            key = f"ridge_{name}"
            u0 = np.log(self.prec[name])
            u1 = u0 + np.exp(self.ls[key]) * self.rng.standard_normal()
            val = float(np.exp(u1))
            if kind == "exp":
                if val >= p.phi_uniform_upper:
                    continue
                d_prior = 0.0
            else:
                d_prior = -(p.phi_shape + 1) * (u1 - u0) - p.phi_scale * (1.0 / val - 1.0 / self.prec[name])
            prec = dict(self.prec)
            prec[name] = val
            phi_new = _precision_obs(self.spec, prec, self.cov[idx])
            shrink = np.sqrt(self.phi_full[idx] / phi_new)
            eta_new = self.centre[idx] + (self.eta[idx] - self.centre[idx]) * shrink
            mu_new = inv_logit(eta_new)
            ll_new = self._loglik(mu_new, phi_new, idx)
            r_old = self.r[idx].copy()
            self.r[idx] = eta_new - self.Z[idx] @ self.beta
            lp_cov_new = self._lp_cov_terms()
            d = (np.sum(ll_new - self.ll[idx]) + lp_cov_new - lp_cov + d_prior + (u1 - u0)
                 + np.sum(np.log(shrink)))
            if metropolis_accept(d, self.rng):
                self.acc[key] += 1
                self.prec[name] = val
                self.phi_full[idx] = phi_new
                self.eta[idx] = eta_new
                self.mu[idx] = mu_new
                self.ll[idx] = ll_new
                lp_cov = lp_cov_new
            else:
                self.r[idx] = r_old

    def _adapt(self, batch_index):
        b = self.spec.mcmc.batch
        self.eff_ls = adapt_scales(self.eff_ls, self.eff_acc / b, batch_index)
        self._precondition()
        for n in self.scalar_names:
            self.ls[n] = float(adapt_scales(self.ls[n], self.acc[n] / b, batch_index))

    def _reset_batch(self):
        self.eff_acc[:] = 0
        for n in self.scalar_names:
            self.acc[n] = 0

    def _switch_row(self, row):
        self.cov = self.covariate_rows[row].reshape(-1)
        self._set_design()
        self._refresh_all()

    # -- driver --------------------------------------------------------------
    def run(self):
        mc = self.spec.mcmc
        M = mc.n_retained
        p = self.basis.n_coefficients
        stage2 = self.covariate_rows is not None
        if stage2:
            self.cov = self.covariate_rows[self.row_plan[0]].reshape(-1)
        self.initialize()
        out = {
            "beta": np.empty((M, p)),
            "rho": np.empty(M),
            "fitted": np.empty((M, self.N)),
            "effects": np.empty((M, self.N)),
        }
        if self.spec.scalar_variance:
            out["sigma2"] = np.empty(M)
        else:
            out["lambda"] = np.empty((M, N_TIMES, N_TIMES))
        for n in self.spec.precision_names:
            out[n] = np.empty(M)
        rows_used = np.empty(M, dtype=np.int64) if stage2 else None
        n_rows = 0 if not stage2 else len(self.covariate_rows)
        batch_index = 0
        for t in range(mc.iterations):
            if stage2:
                if t < mc.burn_in and t % mc.thin == 0:
                    self._switch_row(int(self.rng.integers(n_rows)))
                elif t >= mc.burn_in and (t - mc.burn_in) % mc.thin == 0:
                    m = (t - mc.burn_in) // mc.thin
                    if m < M:
                        self._switch_row(int(self.row_plan[m]))
            self._update_effects()
            self._update_beta()
            self._update_covariance()
            self._update_precision()
            self._update_precision_ridge()
            if t < mc.burn_in:
                if (t + 1) % mc.batch == 0:
                    batch_index += 1
                    self._adapt(batch_index)
                    self._reset_batch()
                elif t + 1 == mc.burn_in:
                    self._reset_batch()
            else:
                if (t - mc.burn_in + 1) % mc.thin == 0:
                    m = (t - mc.burn_in) // mc.thin
                    if m < M:
                        out["beta"][m] = self.beta
                        out["rho"][m] = self.rho
                        out["fitted"][m] = self.mu
                        out["effects"][m] = self.r
                        if self.spec.scalar_variance:
                            out["sigma2"][m] = self.lam[0, 0]
                        else:
                            out["lambda"][m] = self.lam
                        for n in self.spec.precision_names:
                            out[n][m] = self.prec[n]
                        if stage2:
                            rows_used[m] = self.row_plan[m]
        n_post = mc.iterations - mc.burn_in
        acceptance = {n: self.acc[n] / n_post for n in self.scalar_names}
        mh_coords = np.concatenate([g[0] for g in self.groups]) if self.groups else np.array([], int)
        acceptance["effects"] = float(np.mean(self.eff_acc[mh_coords]) / n_post) if mh_coords.size else float("nan")
        return out, acceptance, rows_used


# ---------------------------------------------------------------------------
# multi-chain driver and results
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """Retained draws of all chains, arrays shaped ``(n_chains, M, ...)``.

    ``fitted`` and ``effects`` cover every cell of the ``(J, 3, 29)`` grid in
    canonical order, including unobserved ones (whose values are predictive
    draws).
    """

    spec: ModelSpec
    basis: SplineBasis
    params: dict
    fitted: np.ndarray
    effects: np.ndarray
    acceptance: list
    seeds: list
    grid_shape: tuple
    covariate_rows: np.ndarray | None = None

    @property
    def n_chains(self) -> int:
        return self.fitted.shape[0]

    @property
    def n_retained(self) -> int:
        return self.fitted.shape[1]

    def pooled(self, name) -> np.ndarray:
        a = self.params[name]
        return a.reshape((-1,) + a.shape[2:])

    def pooled_fitted(self) -> np.ndarray:
        return self.fitted.reshape(-1, self.fitted.shape[-1])

    def pooled_effects(self) -> np.ndarray:
        return self.effects.reshape(-1, self.effects.shape[-1])

    def scalar_traces(self) -> dict:
        """Flattened per-parameter traces ``name -> (n_chains, M)``."""
        out = {}
        for name, a in self.params.items():
            if a.ndim == 2:
                out[name] = a
            elif name == "lambda":
                for i in range(N_TIMES):
                    for j in range(i + 1):
                        out[f"lambda[{i},{j}]"] = a[:, :, i, j]
            else:
                for i in range(a.shape[2]):
                    out[f"{name}[{i}]"] = a[:, :, i]
        return out

    def precision_model_at(self, chain: int, m: int) -> dict:
        return {n: float(self.params[n][chain, m]) for n in self.spec.precision_names}


def _run_one(args):
    spec, data, basis, seed, rows, plan = args
    chain = _Chain(spec, data, basis, seed, rows, plan)
    return chain.run()


def chain_seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_chains(spec: ModelSpec, data: StageData, covariate_rows=None, row_plans=None) -> PosteriorDraws:
    """Run ``spec.mcmc.n_chains`` independent chains.

    For stage 2, ``covariate_rows`` holds candidate fitted-alpha rows shaped
    ``(R, J, 3, 29)`` and ``row_plans[c]`` lists the row consumed by each
    retained iteration of chain ``c``.
    """
    mc = spec.mcmc
    if np.sum(data.mask) == 0:
        raise ValueError("no observations to fit")
    if covariate_rows is not None:
        covariate_rows = np.asarray(covariate_rows, dtype=float)
        if row_plans is None or len(row_plans) != mc.n_chains:
            raise ValueError("need one row plan per chain")
    basis = resolve_basis(spec, data)
    seeds = chain_seeds(mc.seed, mc.n_chains)
    jobs = [
        (spec, data, basis, s, covariate_rows, None if row_plans is None else np.asarray(row_plans[c]))
        for c, s in enumerate(seeds)
    ]
    if mc.n_jobs > 1 and mc.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(mc.n_jobs, mc.n_chains)) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    names = ["beta", "rho"] + (["sigma2"] if spec.scalar_variance else ["lambda"]) + list(spec.precision_names)
    params = {n: np.stack([r[0][n] for r in results]) for n in names}
    rows = None
    if covariate_rows is not None:
        rows = np.stack([r[2] for r in results])
    return PosteriorDraws(
        spec=replace(spec, basis=basis),
        basis=basis,
        params=params,
        fitted=np.stack([r[0]["fitted"] for r in results]),
        effects=np.stack([r[0]["effects"] for r in results]),
        acceptance=[r[1] for r in results],
        seeds=seeds,
        grid_shape=data.response.shape,
        covariate_rows=rows,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _param_columns(draws: PosteriorDraws):
    names, cols = [], []
    for name, a in draws.params.items():
        if a.ndim == 2:
            names.append(name)
            cols.append(a[..., None])
        elif name == "lambda":
            for i in range(N_TIMES):
                for j in range(i + 1):
                    names.append(f"lambda[{i},{j}]")
                    cols.append(a[:, :, i, j, None])
        else:
            names += [f"{name}[{i}]" for i in range(a.shape[2])]
            cols.append(a)
    return names, np.concatenate(cols, axis=2)


def write_draws(draws: PosteriorDraws, directory, prefix: str) -> list:
    """CSV of scalar/vector parameters plus npz of fitted means and effects
    and a JSON sidecar (spec, seeds, acceptance)."""
    import csv
    import json
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names, table = _param_columns(draws)
    csv_path = d / f"{prefix}_draws.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration"] + names)
        for c in range(table.shape[0]):
            for m in range(table.shape[1]):
                w.writerow([c, m] + [f"{v:.17g}" for v in table[c, m]])
    npz_path = d / f"{prefix}_latent.npz"
    extra = {} if draws.covariate_rows is None else {"covariate_rows": draws.covariate_rows}
    np.savez_compressed(npz_path, fitted=draws.fitted, effects=draws.effects, **extra)
    meta_path = d / f"{prefix}_meta.json"
    meta = {
        "spec": draws.spec.to_dict(),
        "seeds": [int(s) for s in draws.seeds],
        "acceptance": [{k: float(v) for k, v in a.items()} for a in draws.acceptance],
        "grid_shape": list(draws.grid_shape),
        "columns": names,
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return [csv_path, npz_path, meta_path]


def read_draws(directory, prefix: str) -> PosteriorDraws:
    import json
    from pathlib import Path

    d = Path(directory)
    with open(d / f"{prefix}_meta.json") as fh:
        meta = json.load(fh)
    spec = ModelSpec.from_dict(meta["spec"])
    raw = np.loadtxt(d / f"{prefix}_draws.csv", delimiter=",", skiprows=1, ndmin=2)
    n_chains = int(raw[:, 0].max()) + 1
    table = raw[:, 2:].reshape(n_chains, -1, raw.shape[1] - 2)
    cols = meta["columns"]
    params: dict = {}
    p = spec.basis.n_coefficients
    params["beta"] = table[:, :, [cols.index(f"beta[{i}]") for i in range(p)]]
    for name in ["rho", "sigma2", *spec.precision_names]:
        if name in cols:
            params[name] = table[:, :, cols.index(name)]
    if "lambda[0,0]" in cols:
        lam = np.empty(table.shape[:2] + (N_TIMES, N_TIMES))
        for i in range(N_TIMES):
            for j in range(i + 1):
                lam[:, :, i, j] = lam[:, :, j, i] = table[:, :, cols.index(f"lambda[{i},{j}]")]
        params["lambda"] = lam
    lat = np.load(d / f"{prefix}_latent.npz")
    return PosteriorDraws(
        spec=spec,
        basis=spec.basis,
        params=params,
        fitted=lat["fitted"],
        effects=lat["effects"],
        acceptance=meta["acceptance"],
        seeds=meta["seeds"],
        grid_shape=tuple(meta["grid_shape"]),
        covariate_rows=lat["covariate_rows"] if "covariate_rows" in lat.files else None,
    )
