"""Command-line pipeline: extract, covariate, fit, predict, validate, diagnose, synth."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import re
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import TIMES_OF_DAY, __version__
from .acoustic_features import SEGMENT_LEN, OVERLAP, minute_features, read_wav, soundbites_from_features, write_wav
from .data import SoundData, load_sound_data, read_sites, write_site_covariates, write_soundbites
from .diagnostics import psrf
from .gibbs import InitializationError, MCMCSettings, ModelSpec, read_draws, write_draws
from .model_eval import FoldPlan, compare_models, write_scores
from .prediction import aggregate_and_rasterize, predict_alpha, predict_y
from .road_grid import (
    Scaling,
    grid_centres,
    rasterize,
    read_covariate_raster,
    read_segments,
    road_covariates,
    scale_attributes,
    write_covariate_raster,
    write_segments,
)
from .two_stage import StageOneFits, TwoStageResult, fit_two_stage

log = logging.getLogger("soundscape_hbm")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
WAV_NAME = re.compile(r"^(\d+)_(morning|afternoon|evening)\.wav$")

DEFAULTS = {
    "paths": {
        "audio_dir": "audio",
        "roads": "roads.csv",
        "sites": "sites.csv",
        "soundbites": "soundbites.csv",
        "covariates": "site_covariates.csv",
        "out_dir": "out",
    },
    "features": {"segment_len": str(SEGMENT_LEN), "overlap": str(OVERLAP), "normalization": "max"},
    "road": {"radius": "600", "bbox": ""},
    "model": {"variant": "1", "stage1_coefficients": "5", "stage2_coefficients": "8", "threshold": "2"},
    "mcmc": {"iterations": "50000", "burn_in": "25000", "thin": "10", "n_chains": "3"},
    "prediction": {"resolution": "250", "ascii_grids": "false"},
    "validation": {"k": "6", "variants": "1,2,3", "per_minute": "false", "literal_small_train": "false",
                   "broken_baseline": "false"},
    "run": {"seed": "0", "threads": "1"},
}


class MissingArtifact(Exception):
    pass


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    parser: configparser.ConfigParser
    base: Path

    def get(self, section, key) -> str:
        return self.parser.get(section, key)

    def path(self, key) -> Path:
        p = Path(self.get("paths", key))
        return p if p.is_absolute() else self.base / p

    def out(self, *parts) -> Path:
        p = self.path("out_dir").joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def seed(self) -> int:
        return self.parser.getint("run", "seed")

    @property
    def threads(self) -> int:
        return self.parser.getint("run", "threads")

    @property
    def variant(self) -> int:
        v = self.parser.getint("model", "variant")
        if v not in (1, 2, 3):
            raise InputError("model variant must be 1, 2 or 3")
        return v

    def mcmc(self, seed_offset: int = 0) -> MCMCSettings:
        s = self.parser["mcmc"]
        return MCMCSettings(
            iterations=int(s["iterations"]),
            burn_in=int(s["burn_in"]),
            thin=int(s["thin"]),
            n_chains=int(s["n_chains"]),
            seed=self.seed + seed_offset,
            n_jobs=self.threads,
        )

    def specs(self, variant: int | None = None) -> tuple[ModelSpec, ModelSpec]:
        v = self.variant if variant is None else variant
        m = self.parser["model"]
        thr = float(m["threshold"])
        s1 = ModelSpec(v, 1, n_coefficients=int(m["stage1_coefficients"]), mcmc=self.mcmc(0), threshold=thr)
        s2 = ModelSpec(v, 2, n_coefficients=int(m["stage2_coefficients"]), mcmc=self.mcmc(1), threshold=thr)
        return s1, s2

    def as_dict(self) -> dict:
        return {s: dict(self.parser[s]) for s in self.parser.sections()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config file not found: {path}")
        cp.read(path)
        base = path.resolve().parent
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cp.set(section, key, str(value))
    return RunConfig(cp, base)


def write_manifest(cfg: RunConfig, command: str, started: float, **extra) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.as_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "duration_s": round(time.time() - started, 3),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    p = cfg.out(f"{command}_manifest.json")
    with open(p, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
    return p


def _require(*paths: Path):
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifact(f"missing required artifact: {p}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_extract(cfg: RunConfig) -> int:
    t0 = time.time()
    audio = cfg.path("audio_dir")
    files = sorted(audio.glob("*.wav")) if audio.is_dir() else []
    f = cfg.parser["features"]
    feats, hashes, errors = [], {}, {}
    for path in files:
        m = WAV_NAME.match(path.name)
        if not m:
            errors[path.name] = "unparseable filename (expected <site>_<time_of_day>.wav)"
            log.error("%s: %s", path.name, errors[path.name])
            continue
        try:
            clip = read_wav(path)
            raw = minute_features(clip, int(f["segment_len"]), float(f["overlap"]), f["normalization"])
        except (ValueError, EOFError, OSError) as exc:
            errors[path.name] = str(exc)
            log.error("%s: %s", path.name, exc)
            continue
        feats.append((int(m.group(1)), m.group(2), raw))
        hashes[path.name] = _sha256(path)
    if not feats:
        raise InputError("no input recordings")
    n_total = sum(r.shape[0] for *_, r in feats)
    order = sorted(feats, key=lambda t: (t[0], TIMES_OF_DAY.index(t[1])))
    bites = [b for site, tod, raw in order for b in soundbites_from_features(raw, site, tod, n_total)]
    out = cfg.out("soundbites.csv")
    write_soundbites(out, bites)
    write_manifest(cfg, "extract", t0, inputs=hashes, errors=errors, n_soundbites=len(bites), output=str(out))
    print(f"wrote {len(bites)} sound bites to {out}")
    return EXIT_OK


def _bbox_from(cfg, segments=None, sites=None, pad=0.0):
    text = cfg.get("road", "bbox").strip()
    if text:
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 4:
            raise InputError("bbox must be x0,y0,x1,y1")
        return tuple(vals)
    pts = []
    if segments:
        pts += [s.polyline for s in segments]
    if sites is not None:
        pts.append(sites)
    allp = np.vstack(pts)
    return (*(allp.min(axis=0) - pad), *(allp.max(axis=0) + pad))


def cmd_covariate(cfg: RunConfig) -> int:
    t0 = time.time()
    roads, sites_path = cfg.path("roads"), cfg.path("sites")
    _require(roads, sites_path)
    segments = read_segments(roads)
    site_ids, xy = read_sites(sites_path)
    if not segments:
        raise InputError("road table is empty")
    radius = float(cfg.get("road", "radius"))
    raster_box = _bbox_from(cfg, segments, xy, pad=radius)
    table = rasterize(segments, raster_box)
    scaling = scale_attributes(table, xy, radius)
    scaling.save(cfg.out("scaling.json"))
    rc = road_covariates(xy, table, scaling)
    write_site_covariates(cfg.out("site_covariates.csv"), site_ids, rc, xy)
    res = float(cfg.get("prediction", "resolution"))
    grid_box = _bbox_from(cfg, segments, xy)
    centres = grid_centres(grid_box, res)
    grid_rc = road_covariates(centres, table, scaling)
    from .road_grid import CovariateValue

    write_covariate_raster(cfg.out("grid_covariates.csv"),
                           [CovariateValue(float(x), float(y), float(v)) for (x, y), v in zip(centres, grid_rc)])
    write_manifest(cfg, "covariate", t0, n_pixels=len(table), n_sites=len(site_ids), n_grid_cells=len(centres),
                   inputs={str(roads): _sha256(roads), str(sites_path): _sha256(sites_path)})
    print(f"road covariate for {len(site_ids)} sites and {len(centres)} grid cells")
    return EXIT_OK


def _load_data(cfg) -> SoundData:
    sb, cov = cfg.path("soundbites"), cfg.path("covariates")
    _require(sb, cov)
    return load_sound_data(sb, cov)


def _psrf_summary(draws):
    if draws.n_chains < 2 or draws.n_retained < 50:
        return None
    d = psrf(draws)
    return d.to_dict()


def cmd_fit(cfg: RunConfig) -> int:
    t0 = time.time()
    data = _load_data(cfg)
    spec1, spec2 = cfg.specs()
    result = fit_two_stage(spec1, spec2, data)
    fit_dir = cfg.out("fit", "x").parent
    write_draws(result.stage1, fit_dir, "stage1")
    write_draws(result.stage2, fit_dir, "stage2")
    np.savez_compressed(fit_dir / "stage1_fits.npz", rows=result.stage1_fits.rows, source=result.stage1_fits.source,
                        grid_shape=np.array(result.stage1_fits.grid_shape))
    with open(fit_dir / "pairing.csv", "w") as fh:
        fh.write("chain,iteration,stage1_row\n")
        for c, row in enumerate(result.pairing):
            for m, r in enumerate(row):
                fh.write(f"{c},{m},{int(r)}\n")
    with open(fit_dir / "sites.json", "w") as fh:
        json.dump({"site_ids": list(data.site_ids), "rc": data.rc.tolist()}, fh)
    summary = {"stage1": _psrf_summary(result.stage1), "stage2": _psrf_summary(result.stage2)}
    converged = all(s is not None and s["converged"] for s in summary.values())
    write_manifest(cfg, "fit", t0, psrf=summary, converged=converged, variant=spec1.variant,
                   seeds={"stage1": result.stage1.seeds, "stage2": result.stage2.seeds})
    print(f"fit model {spec1.variant}: converged={converged}")
    return EXIT_OK


def load_fit(fit_dir) -> TwoStageResult:
    fit_dir = Path(fit_dir)
    needed = [fit_dir / f for f in ("stage1_meta.json", "stage2_meta.json", "stage1_fits.npz")]
    _require(*needed)
    s1 = read_draws(fit_dir, "stage1")
    s2 = read_draws(fit_dir, "stage2")
    z = np.load(fit_dir / "stage1_fits.npz")
    fits = StageOneFits(z["rows"], z["source"], tuple(int(v) for v in z["grid_shape"]))
    return TwoStageResult(s1, fits, s2)


def cmd_predict(cfg: RunConfig) -> int:
    t0 = time.time()
    fit_dir = cfg.path("out_dir") / "fit"
    grid_path = cfg.path("out_dir") / "grid_covariates.csv"
    result = load_fit(fit_dir)
    _require(grid_path)
    grid = read_covariate_raster(grid_path)
    rc = np.array([g.rc for g in grid])
    m1 = result.stage1.n_chains * result.stage1.n_retained
    m2 = result.stage2.n_chains * result.stage2.n_retained
    if m1 < m2:
        raise InputError("insufficient stage-1 samples for prediction")
    alpha = predict_alpha(rc, result.stage1, seed=cfg.seed)
    if m1 > m2:
        pick = np.sort(np.random.default_rng([cfg.seed, 5]).choice(m1, m2, replace=False))
        alpha = replace(alpha, values=alpha.values[:, pick])
    y = predict_y(alpha, result.stage2, seed=cfg.seed)
    raster = aggregate_and_rasterize([alpha, y], grid)
    out = cfg.out("predictions.csv")
    raster.to_csv(out)
    files = [str(out)]
    if cfg.parser.getboolean("prediction", "ascii_grids"):
        files += [str(p) for p in raster.to_ascii_grids(cfg.out("grids", "x").parent,
                                                         float(cfg.get("prediction", "resolution")))]
    write_manifest(cfg, "predict", t0, n_cells=len(grid), n_samples=m2, outputs=files)
    print(f"predicted {len(grid)} cells to {out}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    t0 = time.time()
    data = _load_data(cfg)
    v = cfg.parser["validation"]
    plan = FoldPlan.make(data.shape, int(v["k"]), cfg.seed, cfg.parser.getboolean("validation", "per_minute"),
                         cfg.parser.getboolean("validation", "literal_small_train"))
    models = {}
    for var in [int(x) for x in v["variants"].split(",") if x.strip()]:
        models[f"model{var}"] = cfg.specs(var)
    if cfg.parser.getboolean("validation", "broken_baseline"):
        s1, s2 = cfg.specs(1)
        models["constant_mean"] = (s1, replace(s2, n_coefficients=1))
    reports = compare_models(models, data, plan)
    out = cfg.out("scores.csv")
    write_scores(out, reports)
    write_manifest(cfg, "validate", t0, k=plan.k, models=list(models),
                   totals={r.model: {"elpd": r.total_elpd, "crps": r.mean_crps, "coverage95": r.coverage95}
                           for r in reports})
    print(f"wrote {sum(len(r.rows()) for r in reports)} score rows to {out}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig) -> int:
    t0 = time.time()
    fit_dir = cfg.path("out_dir") / "fit"
    result = load_fit(fit_dir)
    out = {}
    for name, d in (("stage1", result.stage1), ("stage2", result.stage2)):
        if d.n_chains < 2:
            raise InputError("diagnostics need at least two chains")
        out[name] = psrf(d).to_dict()
    p = cfg.out("diagnostics.json")
    with open(p, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    write_manifest(cfg, "diagnose", t0, converged=all(v["converged"] for v in out.values()))
    for name, v in out.items():
        worst = max(v["psrf"].items(), key=lambda kv: kv[1])
        print(f"{name}: max PSRF {worst[1]:.3f} ({worst[0]}), converged={v['converged']}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, n_sites: int = 18, audio: int = 0) -> int:
    from .synthetic import default_truth, simulate, synthetic_clip, synthetic_landscape

    t0 = time.time()
    segs, bbox, xy, rc, _, _ = synthetic_landscape(n_sites, cfg.seed)
    truth = default_truth(cfg.variant, rc=rc)
    # stretch the default stage-1 curve (laid out for covariates in [-3, 6]) over the observed range
    a, b = truth.stage1.curve
    scale = 9.0 / (rc.max() - rc.min())
    truth.stage1.curve = (a * scale, b + a * (-3.0 - scale * rc.min()))
    data, _ = simulate(truth, cfg.seed)
    write_segments(cfg.out("roads.csv"), segs)
    with open(cfg.out("sites.csv"), "w") as fh:
        fh.write("site_id,x,y\n")
        for s, (x, y) in zip(data.site_ids, xy):
            fh.write(f"{s},{x:.10g},{y:.10g}\n")
    write_site_covariates(cfg.out("site_covariates.csv"), data.site_ids, rc, xy)
    write_soundbites(cfg.out("soundbites.csv"), data.soundbites())
    truth.to_json(cfg.out("truth.json"))
    if audio:
        rng_feats = np.random.default_rng([cfg.seed, 21])
        for site, tod in [(s, t) for s in data.site_ids for t in TIMES_OF_DAY][:audio]:
            feats = rng_feats.uniform(0.05, 0.5, size=(29, 2))
            write_wav(cfg.out("audio", f"{site}_{tod}.wav"), synthetic_clip(feats, channels=1, seed=site))
    write_manifest(cfg, "synth", t0, n_sites=n_sites, bbox=list(bbox), n_audio=audio)
    print(f"synthetic dataset with {n_sites} sites in {cfg.path('out_dir')}")
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "covariate": cmd_covariate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "validate": cmd_validate,
    "diagnose": cmd_diagnose,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soundscape", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="INI configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--model", type=int, choices=(1, 2, 3))
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            s.add_argument("--sites", type=int, default=18)
            s.add_argument("--audio", type=int, default=0, help="number of recordings to render as WAV")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {
        ("run", "seed"): args.seed,
        ("run", "threads"): args.threads,
        ("model", "variant"): args.model,
        ("paths", "out_dir"): None if args.out is None else str(args.out.resolve()),
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(cfg, args.sites, args.audio)
        return COMMANDS[args.command](cfg)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InitializationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
