"""Observation containers and CSV I/O for sound bites and site covariates.

Observations live on a dense ``(site, time_of_day, minute)`` grid in the
canonical order site-major, then time of day, then minute.  Missing or
held-out cells are NaN.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import N_MINUTES, N_TIMES, TIMES_OF_DAY

SOUNDBITE_FIELDS = ("site_id", "time_of_day", "minute", "alpha", "y")


@dataclass(frozen=True)
class SoundBite:
    site_id: int
    time_of_day: str
    minute: int
    alpha: float
    y: float

    def __post_init__(self):
        if self.time_of_day not in TIMES_OF_DAY:
            raise ValueError(f"unknown time of day {self.time_of_day!r}")
        if not 1 <= self.minute <= N_MINUTES:
            raise ValueError(f"minute {self.minute} outside 1..{N_MINUTES}")


def squeeze(values, n: int):
    """Pull values off the 0/1 boundary: ``(v (n - 1) + 0.5) / n``."""
    return (np.asarray(values, dtype=float) * (n - 1) + 0.5) / n


@dataclass(frozen=True)
class SoundData:
    """Both responses for ``J`` sites plus the per-site road covariate."""

    site_ids: tuple
    rc: np.ndarray  # (J,)
    alpha: np.ndarray  # (J, 3, 29)
    y: np.ndarray  # (J, 3, 29)

    def __post_init__(self):
        j = len(self.site_ids)
        shape = (j, N_TIMES, N_MINUTES)
        if np.shape(self.rc) != (j,):
            raise ValueError("rc must have one value per site")
        if np.shape(self.alpha) != shape or np.shape(self.y) != shape:
            raise ValueError(f"responses must have shape {shape}")
        for name in ("alpha", "y"):
            v = getattr(self, name)
            obs = v[~np.isnan(v)]
            if np.any((obs <= 0) | (obs >= 1)):
                raise ValueError(f"{name} values must lie strictly inside (0, 1)")

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def shape(self) -> tuple:
        return self.alpha.shape

    @property
    def n_obs(self) -> int:
        return int(np.sum(~np.isnan(self.y)))

    def rc_grid(self) -> np.ndarray:
        return np.broadcast_to(self.rc[:, None, None], self.shape).astype(float)

    def masked(self, hold: np.ndarray) -> "SoundData":
        """Copy with cells where ``hold`` is True set to missing in both responses."""
        hold = np.asarray(hold, dtype=bool)
        a = self.alpha.copy()
        y = self.y.copy()
        a[hold] = np.nan
        y[hold] = np.nan
        return replace(self, alpha=a, y=y)

    def permuted(self, order) -> "SoundData":
        order = np.asarray(order)
        return SoundData(
            tuple(self.site_ids[i] for i in order), self.rc[order], self.alpha[order], self.y[order]
        )

    def soundbites(self) -> list[SoundBite]:
        out = []
        for j, sid in enumerate(self.site_ids):
            for k, tod in enumerate(TIMES_OF_DAY):
                for i in range(N_MINUTES):
                    if np.isnan(self.alpha[j, k, i]) or np.isnan(self.y[j, k, i]):
                        continue
                    out.append(SoundBite(sid, tod, i + 1, float(self.alpha[j, k, i]), float(self.y[j, k, i])))
        return out

    @classmethod
    def from_soundbites(cls, bites, rc_by_site: dict) -> "SoundData":
        bites = list(bites)
        sites = sorted({b.site_id for b in bites})
        missing = [s for s in sites if s not in rc_by_site]
        if missing:
            raise KeyError(f"no road covariate for sites {missing}")
        index = {s: j for j, s in enumerate(sites)}
        shape = (len(sites), N_TIMES, N_MINUTES)
        alpha = np.full(shape, np.nan)
        y = np.full(shape, np.nan)
        seen = set()
        for b in bites:
            key = (b.site_id, b.time_of_day, b.minute)
            if key in seen:
                raise ValueError(f"duplicate sound bite {key}")
            seen.add(key)
            cell = (index[b.site_id], TIMES_OF_DAY.index(b.time_of_day), b.minute - 1)
            alpha[cell] = b.alpha
            y[cell] = b.y
        rc = np.array([float(rc_by_site[s]) for s in sites])
        return cls(tuple(sites), rc, alpha, y)


def write_soundbites(path, bites) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOUNDBITE_FIELDS)
        for b in bites:
            w.writerow([b.site_id, b.time_of_day, b.minute, f"{b.alpha:.10g}", f"{b.y:.10g}"])


def read_soundbites(path) -> list[SoundBite]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(SOUNDBITE_FIELDS) - set(rows[0]):
        raise ValueError(f"{path}: expected columns {', '.join(SOUNDBITE_FIELDS)}")
    return [
        SoundBite(int(r["site_id"]), r["time_of_day"], int(r["minute"]), float(r["alpha"]), float(r["y"]))
        for r in rows
    ]


def write_site_covariates(path, site_ids, rc, xy=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if xy is None:
            w.writerow(["site_id", "rc"])
            for s, v in zip(site_ids, rc):
                w.writerow([s, f"{v:.10g}"])
        else:
            w.writerow(["site_id", "x", "y", "rc"])
            for s, (x, yy), v in zip(site_ids, xy, rc):
                w.writerow([s, f"{x:.10g}", f"{yy:.10g}", f"{v:.10g}"])


def read_site_covariates(path) -> dict:
    with open(path, newline="") as fh:
        return {int(r["site_id"]): float(r["rc"]) for r in csv.DictReader(fh)}


def read_sites(path) -> tuple[list[int], np.ndarray]:
    """Site locations: columns ``site_id,x,y``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r["site_id"]) for r in rows], np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)


def load_sound_data(soundbites_path, covariates_path) -> SoundData:
    return SoundData.from_soundbites(read_soundbites(Path(soundbites_path)), read_site_covariates(covariates_path))
