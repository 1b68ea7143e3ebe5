"""Statistical building blocks shared by every model variant.

Beta likelihood in mean/precision form, the logit link, cubic B-spline
design matrices, AR(1) and Kronecker random-effect covariances and the
variant-specific precision functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, expit

EPS = 1e-12
DEGREE = 3


# ---------------------------------------------------------------------------
# link and likelihood
# ---------------------------------------------------------------------------

def inv_logit(z):
    """Inverse logit clamped to ``(EPS, 1 - EPS)``."""
    return np.clip(expit(z), EPS, 1.0 - EPS)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def build_mean(basis_row, beta, random_effect=0.0):
    """Mean of the beta likelihood: ``inv_logit(Z @ beta + w)``."""
    return inv_logit(np.asarray(basis_row, dtype=float) @ np.asarray(beta, dtype=float) + random_effect)


def beta_logdensity(v, mu, phi):
    """Log density of ``Beta(mu * phi, (1 - mu) * phi)`` evaluated at ``v``.

    Parameters
    ----------
    v : array_like
        Observations, strictly inside (0, 1).
    mu : array_like
        Means in (0, 1).
    phi : array_like
        Precisions, > 0.

    Raises
    ------
    ValueError
        If ``v`` is outside the open unit interval or a shape parameter is
        not positive.
    """
    v = np.asarray(v, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(~(v > 0.0) | ~(v < 1.0)):
        raise ValueError("observation outside beta support (0, 1)")
    a = mu * phi
    b = (1.0 - mu) * phi
    if np.any(~(a > 0.0)) or np.any(~(b > 0.0)):
        raise ValueError("beta shape parameters must be positive")
    return _beta_logpdf(np.log(v), np.log1p(-v), a, b)


def _beta_logpdf(log_v, log1m_v, a, b):
    # unchecked kernel used by the sampler hot loop
    return (a - 1.0) * log_v + (b - 1.0) * log1m_v - betaln(a, b)


# ---------------------------------------------------------------------------
# B-splines
# ---------------------------------------------------------------------------

def _bspline_eval(x, knots, degree=DEGREE):
    """Vectorised Cox-de Boor evaluation of every basis function.

    ``knots`` is the full (clamped) knot vector.  Returns an array of shape
    ``(len(x), len(knots) - degree - 1)``.  The right boundary is treated as
    belonging to the last non-empty knot span so the basis is a partition of
    unity on the closed interval.
    """
    x = np.asarray(x, dtype=float).ravel()
    t = np.asarray(knots, dtype=float)
    n_basis = len(t) - degree - 1
    lo, hi = t[degree], t[n_basis]
    # span index s with t[s] <= x < t[s+1]
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, degree, n_basis - 1)
    # degree-0 values live at span; build up triangular table in local coords
    local = np.zeros((x.size, degree + 1))
    local[:, 0] = 1.0
    left = np.empty((x.size, degree + 1))
    right = np.empty((x.size, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(x.size)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(denom != 0.0, local[:, r] / denom, 0.0)
            local[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        local[:, j] = saved
    out = np.zeros((x.size, n_basis))
    rows = np.arange(x.size)
    for r in range(degree + 1):
        out[rows, span - degree + r] = local[:, r]
    outside = (x < lo) | (x > hi)
    out[outside] = 0.0
    return out


@dataclass(frozen=True)
class SplineBasis:
    """Cubic B-spline basis with an explicit intercept.

    The design has ``n_coefficients`` columns: a column of ones followed by
    all but the first cubic basis function (the first is linearly dependent
    on the intercept together with the rest).  ``n_coefficients == 1`` is an
    intercept-only (constant mean) design.
    """

    boundary: tuple[float, float]
    interior: tuple[float, ...] = field(default=())
    n_coefficients: int = 5

    def __post_init__(self):
        if self.n_coefficients == 1:
            return
        if self.n_coefficients < 4:
            raise ValueError("n_coefficients must be 1 or at least 4")
        if len(self.interior) != self.n_coefficients - 4:
            raise ValueError(
                f"{self.n_coefficients} coefficients need {self.n_coefficients - 4} interior knots"
            )
        lo, hi = self.boundary
        pts = np.array([lo, *self.interior, hi])
        if not np.all(np.diff(pts) > 0):
            raise ValueError("knots must be strictly increasing")

    @classmethod
    def from_data(cls, x, n_coefficients: int) -> "SplineBasis":
        """Boundary knots at the data range, interior knots at equally spaced quantiles."""
        x = np.asarray(x, dtype=float).ravel()
        if n_coefficients == 1:
            return cls((float(x.min()), float(x.max())), (), 1)
        n_interior = n_coefficients - 4
        if np.unique(x).size < n_interior + 2:
            raise ValueError("fewer distinct covariate values than spline knots")
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = tuple(float(q) for q in np.quantile(x, probs))
        return cls((float(x.min()), float(x.max())), interior, n_coefficients)

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.concatenate([[lo] * (DEGREE + 1), self.interior, [hi] * (DEGREE + 1)])

    def clamp(self, x):
        lo, hi = self.boundary
        return np.clip(np.asarray(x, dtype=float), lo, hi)

    def basis(self, x) -> np.ndarray:
        """Full cubic basis (partition of unity) at clamped ``x``."""
        return _bspline_eval(self.clamp(x), self.knots)

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.ravel()
        if self.n_coefficients == 1:
            out = np.ones((flat.size, 1))
        else:
            out = np.empty((flat.size, self.n_coefficients))
            out[:, 0] = 1.0
            out[:, 1:] = self.basis(flat)[:, 1:]
        return out.reshape(x.shape + (self.n_coefficients,))

    def to_dict(self) -> dict:
        return {
            "boundary": list(self.boundary),
            "interior": list(self.interior),
            "n_coefficients": self.n_coefficients,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(tuple(d["boundary"]), tuple(d["interior"]), int(d["n_coefficients"]))


def bspline_design(x, n_coefficients: int, basis: SplineBasis | None = None) -> np.ndarray:
    """Design matrix for ``x``; knots derived from ``x`` unless ``basis`` is given."""
    if basis is None:
        basis = SplineBasis.from_data(x, n_coefficients)
    elif basis.n_coefficients != n_coefficients:
        raise ValueError("basis has a different number of coefficients")
    return basis.design(x)


# ---------------------------------------------------------------------------
# AR(1) and Kronecker covariances
# ---------------------------------------------------------------------------

def _check_rho(rho):
    if not (0.0 <= rho < 1.0):
        raise ValueError("AR(1) correlation must lie in [0, 1)")


def ar1_covariance(sigma2: float, rho: float, dim: int = 29) -> np.ndarray:
    """``sigma2 * rho**|a - b|``."""
    if sigma2 <= 0:
        raise ValueError("variance must be positive")
    _check_rho(rho)
    lag = np.abs(np.subtract.outer(np.arange(dim), np.arange(dim)))
    powers = np.array([math.pow(rho, k) for k in range(dim)])
    return sigma2 * powers[lag]


def ar1_precision(sigma2: float, rho: float, dim: int = 29) -> np.ndarray:
    """Closed-form tridiagonal inverse of :func:`ar1_covariance`."""
    _check_rho(rho)
    diag = np.full(dim, 1.0 + rho**2)
    diag[0] = diag[-1] = 1.0
    q = np.diag(diag) - rho * (np.eye(dim, k=1) + np.eye(dim, k=-1))
    return q / (sigma2 * (1.0 - rho**2))


def ar1_logdet(rho: float, dim: int = 29, sigma2: float = 1.0) -> float:
    return dim * np.log(sigma2) + (dim - 1) * np.log1p(-rho**2)


def apply_ar1_precision(r, rho, axis=-1):
    """Multiply ``r`` by the unit-variance AR(1) precision along ``axis``."""
    r = np.moveaxis(np.asarray(r, dtype=float), axis, -1)
    out = (1.0 + rho**2) * r
    out[..., 0] = r[..., 0]
    out[..., -1] = r[..., -1]
    out[..., 1:] -= rho * r[..., :-1]
    out[..., :-1] -= rho * r[..., 1:]
    out /= 1.0 - rho**2
    return np.moveaxis(out, -1, axis)


def ar1_crossprods(r):
    """Sufficient statistics of AR(1) quadratic forms across the last axis.

    ``r`` has shape ``(..., K, T)``.  Returns ``(S0, S1, E)`` as ``K x K``
    matrices summed over leading axes: lag-0 products, lag-1 products and the
    endpoint products.  For any ``rho`` the quadratic form
    ``sum_j tr(A W_j R(rho)^-1 W_j^T)`` equals
    ``tr(A (S0 + rho^2 (S0 - E) - rho (S1 + S1^T))) / (1 - rho^2)``.
    """
    r = np.asarray(r, dtype=float)
    k = r.shape[-2]
    flat = r.reshape(-1, k, r.shape[-1])
    s0 = np.einsum("jat,jbt->ab", flat, flat)
    s1 = np.einsum("jat,jbt->ab", flat[..., :-1], flat[..., 1:])
    e = np.einsum("ja,jb->ab", flat[..., 0], flat[..., 0]) + np.einsum(
        "ja,jb->ab", flat[..., -1], flat[..., -1]
    )
    return s0, s1, e


def ar1_inner(stats, rho):
    """``W R(rho)^-1 W^T`` (summed) from :func:`ar1_crossprods` output."""
    s0, s1, e = stats
    return (s0 + rho**2 * (s0 - e) - rho * (s1 + s1.T)) / (1.0 - rho**2)


@dataclass(frozen=True)
class KroneckerCov:
    """Per-site covariance ``lam (x) R(rho)`` over (time of day, minute)."""

    lam: np.ndarray
    rho: float
    dim: int = 29

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or not np.allclose(lam, lam.T):
            raise ValueError("lambda must be a symmetric square matrix")
        try:
            np.linalg.cholesky(lam)
        except np.linalg.LinAlgError:
            raise ValueError("lambda is not positive definite") from None
        _check_rho(self.rho)
        object.__setattr__(self, "lam", lam)

    def dense(self) -> np.ndarray:
        return np.kron(self.lam, ar1_covariance(1.0, self.rho, self.dim))

    def logdet(self) -> float:
        k = self.lam.shape[0]
        return self.dim * np.linalg.slogdet(self.lam)[1] + k * ar1_logdet(self.rho, self.dim)

    def logpdf(self, w) -> float:
        """MVN(0, lam (x) R) log density of ``w`` with shape ``(..., K, dim)``."""
        w = np.asarray(w, dtype=float)
        k = self.lam.shape[0]
        n_blocks = w.size // (k * self.dim)
        inner = ar1_inner(ar1_crossprods(w.reshape(n_blocks, k, self.dim)), self.rho)
        quad = np.trace(np.linalg.solve(self.lam, inner))
        return -0.5 * (quad + n_blocks * (self.logdet() + k * self.dim * np.log(2 * np.pi)))


def kron_covariance(lam, rho: float, dim: int = 29) -> KroneckerCov:
    return KroneckerCov(np.asarray(lam, dtype=float), rho, dim)


# ---------------------------------------------------------------------------
# precision models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrecisionModel:
    """Beta precision as a function of the covariate.

    ``kind`` is ``"constant"`` (``phi``), ``"split"`` (``phi_l`` below
    ``threshold``, ``phi_u`` otherwise) or ``"exp"``
    (``phi_1 + phi_2 * exp(alpha_hat)``).
    """

    kind: str
    params: dict
    threshold: float = 2.0

    def __post_init__(self):
        need = {"constant": ("phi",), "split": ("phi_l", "phi_u"), "exp": ("phi_1", "phi_2")}
        if self.kind not in need:
            raise ValueError(f"unknown precision model {self.kind!r}")
        missing = [p for p in need[self.kind] if p not in self.params]
        if missing:
            raise ValueError(f"missing precision parameters {missing}")

    def __call__(self, x):
        return precision_at(self, x)


def precision_at(pm: PrecisionModel, x):
    """Evaluate the precision at road covariate (split) or fitted alpha (exp)."""
    p = pm.params
    x = np.asarray(x, dtype=float)
    if pm.kind == "constant":
        out = np.full(x.shape, float(p["phi"]))
    elif pm.kind == "split":
        out = np.where(x < pm.threshold, p["phi_l"], p["phi_u"])
    else:
        out = p["phi_1"] + p["phi_2"] * np.exp(x)
    return out if out.ndim else float(out)
