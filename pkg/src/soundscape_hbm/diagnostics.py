"""Interval-based potential scale reduction factors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

INTERVAL = 0.8


def psrf_interval(traces, interval: float = INTERVAL) -> float:
    """Ratio of pooled to mean within-chain central-interval width.

    ``traces`` has shape ``(n_chains, n_draws)``.  The interval endpoints
    follow any increasing transform of the draws but their widths do not,
    so the ratio is only invariant under increasing affine maps.
    """
    x = np.asarray(traces, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two chains")
    if x.shape[1] < 50:
        raise ValueError("need at least 50 draws per chain")
    lo, hi = (1 - interval) / 2, (1 + interval) / 2
    q = np.quantile(x, [lo, hi], axis=1)
    within = float(np.mean(q[1] - q[0]))
    pooled_q = np.quantile(x.ravel(), [lo, hi])
    pooled = float(pooled_q[1] - pooled_q[0])
    if within <= 0.0:
        if pooled > 0.0:
            return float("inf")
        warnings.warn("constant trace: PSRF reported as 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return pooled / within


@dataclass
class ChainDiagnostics:
    psrf: dict
    acceptance: list = field(default_factory=list)
    threshold: float = 1.1

    def converged(self, skip_prefixes=("beta",)) -> bool:
        """True when every parameter outside ``skip_prefixes`` has PSRF below the threshold."""
        vals = [v for k, v in self.psrf.items() if not k.startswith(tuple(skip_prefixes))]
        return bool(all(v < self.threshold for v in vals))

    def to_dict(self) -> dict:
        return {
            "psrf": {k: float(v) for k, v in self.psrf.items()},
            "acceptance": self.acceptance,
            "converged": self.converged(),
        }


def psrf(draws, interval: float = INTERVAL) -> ChainDiagnostics:
    """PSRF for every scalar trace.

    ``draws`` is either a ``PosteriorDraws`` or a mapping ``name -> (C, M)``.
    """
    if hasattr(draws, "scalar_traces"):
        traces, acc = draws.scalar_traces(), list(draws.acceptance)
    else:
        traces, acc = dict(draws), []
    return ChainDiagnostics({name: psrf_interval(t, interval) for name, t in traces.items()}, acc)
