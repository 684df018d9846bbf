"""Command-line interface: ``geoprofile {fit,profile,simulate,coverage}``.

Exit codes: 0 success, 2 input/data error, 3 convergence failure,
4 usage error (including unknown parameter names).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .model import DatasetError, read_csv, validate_dataset, write_csv
from .pipeline import RunConfig, run_pipeline, validate_params
from .profiles import ProfileError, write_ci_table

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE, EXIT_USAGE = 0, 2, 3, 4

log = logging.getLogger("geoprofile")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def bundled_dataset_path() -> Path:
    return Path(str(resources.files("geoprofile") / "data" / "synthetic_aniso.csv"))


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected NAME,NAME, got {text!r}")
    return tuple(parts)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with run settings (overridden by flags)")
    p.add_argument("--out", dest="outDir", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help="cap on kernel threads")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV with header x,y,response,<covariates> (default: bundled example)")
    p.add_argument("--covariates", type=lambda s: [c.strip() for c in s.split(",") if c.strip()],
                   help="comma-separated covariate columns (default: all)")
    p.add_argument("--mode", choices=("ML", "REML"))
    p.add_argument("--fix-kappa", dest="fixKappa", type=float, help="hold the shape fixed")
    p.add_argument("--fix-lambda", dest="fixLambda", type=float, help="hold the Box-Cox exponent fixed")
    p.add_argument("--no-transform", dest="transform", action="store_const", const=False,
                   help="model the raw response (no Box-Cox)")
    p.add_argument("--batch-size", dest="batchSize", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoprofile", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="maximum likelihood fit")
    _data_opts(f)
    _common(f)

    pr = sub.add_parser("profile", help="profile likelihood curves and interval table")
    _data_opts(pr)
    _common(pr)
    pr.add_argument("--params", type=lambda s: tuple(c.strip() for c in s.split(",") if c.strip()),
                    help="covariance parameters to profile")
    pr.add_argument("--pairs", type=_pair, action="append", help="2-D profile pair NAME,NAME (repeatable)")
    pr.add_argument("--alphas", type=_floats, help="contour levels for the main fit")
    pr.add_argument("--fixed-alphas", dest="fixedAlphas", type=_floats)
    pr.add_argument("--fixed-kappas", dest="fixedKappas", type=_floats)
    pr.add_argument("--points-main", dest="pointsMain", type=int)
    pr.add_argument("--points-fixed", dest="pointsFixed", type=int)
    pr.add_argument("--lambda-grid", dest="lambdaGridSize", type=int)
    pr.add_argument("--ci-level", dest="ciLevel", type=float)
    pr.add_argument("--precision", choices=("double", "single"))
    pr.add_argument("--write-grid", action="store_true", help="also write every evaluated likelihood")

    for name, helptext in (("simulate", "simulate datasets"), ("coverage", "interval coverage study")):
        s = sub.add_parser(name, help=helptext)
        _common(s)
        s.add_argument("--design", help="design JSON (default: isotropic benchmark)")
        s.add_argument("--study", choices=("A", "B"), default="B")
        s.add_argument("--replicates", type=int)
        s.add_argument("--n", type=int, help="locations per dataset")
        if name == "coverage":
            s.add_argument("--workers", type=int, default=1)
            s.add_argument("--ci-level", dest="ciLevel", type=float)
            s.add_argument("--points-main", dest="pointsMain", type=int,
                           help="points per contour (capped at 120 for coverage runs)")
            s.add_argument("--batch-size", dest="batchSize", type=int)
            s.add_argument("--inject-failures", type=lambda t: tuple(int(v) for v in t.split(",")),
                           help="replicate indices given a singular design (testing)")
    return parser


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read config {args.config}: {exc}") from None
        names = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise UsageError(f"unknown config keys {unknown}")
        cfg = replace(cfg, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()})
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            cfg = replace(cfg, **{f.name: v})
    if getattr(args, "pairs", None):
        cfg = replace(cfg, pairs=tuple(tuple(p) for p in args.pairs))
    return cfg


def _versions() -> dict:
    import numba
    import scipy

    return {"geoprofile": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _write_manifest(out: Path, command: str, cfg, argv, started, outputs, extra=None) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict() if hasattr(cfg, "to_dict") else cfg,
        "seed": getattr(cfg, "seed", None),
        "versions": _versions(),
        "pivotTolerance": "n * machine_eps * max|V|",
        "wallTimeSeconds": round(time.perf_counter() - started, 3),
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    (out / "run.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def _load_data(cfg: RunConfig):
    path = Path(cfg.data) if cfg.data else bundled_dataset_path()
    if not path.is_file():
        raise DatasetError(f"data file not found: {path}")
    d = read_csv(path, cfg.covariates)
    validate_dataset(d, require_positive=cfg.transform)
    return d, path


def _summary_text(fit) -> str:
    nat = fit.mleNatural
    lines = [
        f"mode: {fit.mode}   convergence: {fit.convergence}   iterations: {fit.nIter}   evaluations: {fit.nEvals}",
        f"log-likelihood at maximum: {fit.logLikAtMax:.6f}",
        "",
        "regression coefficients:",
    ]
    for name, b in zip(fit.covariateNames, fit.betaHat):
        lines.append(f"  {name:<16s} {b: .6g}")
    lines += [
        "",
        "covariance:",
        f"  sdSpatial        {fit.sigmaHat:.6g}",
        f"  phiX             {nat.phiX:.6g}",
        f"  phiY             {nat.phiY:.6g}",
        f"  anisoAngle       {nat.phiA:.6g}",
        f"  anisoRatio       {nat.anisoRatio:.6g}",
        f"  combinedRange    {nat.combinedRange:.6g}",
        f"  shape            {nat.kappa:.6g}",
        f"  nuggetSq         {nat.nuggetSq:.6g}",
        f"  boxcox           {fit.lambdaHat:.6g}",
    ]
    return "\n".join(lines) + "\n"


def cmd_fit(args, argv) -> int:
    from .mle import FitError, fit_mle

    started = time.perf_counter()
    cfg = resolve_config(args)
    out = Path(cfg.outDir)
    out.mkdir(parents=True, exist_ok=True)
    d, path = _load_data(cfg)
    outputs = []
    try:
        fit = fit_mle(d, cfg.mode, fix_kappa=cfg.fixKappa, fix_lambda=cfg.fixLambda,
                      transform=cfg.transform, batch_size=cfg.batchSize)
    except FitError as exc:
        (out / "fit_failure.json").write_text(json.dumps({
            "error": str(exc),
            "bestIterate": None if exc.best is None else np.asarray(exc.best).tolist(),
        }, indent=1), encoding="utf-8")
        _write_manifest(out, "fit", cfg, argv, started, ["fit_failure.json"], {"data": str(path)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    fit.to_json(out / "fit.json")
    (out / "fit_summary.txt").write_text(_summary_text(fit), encoding="utf-8")
    outputs += ["fit.json", "fit_summary.txt"]
    _write_manifest(out, "fit", cfg, argv, started, outputs, {"data": str(path)})
    print(_summary_text(fit), end="")
    return EXIT_CONVERGENCE if fit.convergence == "maxIter" else EXIT_OK


def cmd_profile(args, argv) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args)
    try:
        validate_params(cfg.params)
        for pair in cfg.pairs:
            validate_params(pair)
    except ProfileError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg.outDir)
    out.mkdir(parents=True, exist_ok=True)
    d, path = _load_data(cfg)
    res = run_pipeline(d, cfg)
    outputs = ["fit.json", "ci_table.csv", "representative_set.csv"]
    res.fit.to_json(out / "fit.json")
    for f in res.fixedFits:
        name = f"fit_kappa_{f.fixKappa:g}.json"
        f.to_json(out / name)
        outputs.append(name)
    write_ci_table(res.table, out / "ci_table.csv")
    res.repset.to_csv(out / "representative_set.csv")
    curves_dir = out / "curves"
    curves_dir.mkdir(exist_ok=True)
    for name, curve in res.curves.items():
        fname = f"curves/{_safe(name)}.csv"
        curve.to_csv(out / fname)
        outputs.append(fname)
    for pair, surf in res.surfaces.items():
        stem = f"{_safe(pair[0])}_{_safe(pair[1])}"
        surf.to_csv(out / f"surface_{stem}.csv")
        surf.contours_to_csv(out / f"contours_{stem}.csv")
        outputs += [f"surface_{stem}.csv", f"contours_{stem}.csv"]
    if args.write_grid:
        res.grid.to_csv(out / "likelihood_grid.csv", d.covariateNames)
        outputs += ["likelihood_grid.csv", "likelihood_grid.csv.json"]
    extra = {"data": str(path), "timings": {k: round(v, 3) for k, v in res.timings.items()},
             "representativeRows": len(res.repset), "convergence": res.fit.convergence}
    _write_manifest(out, "profile", cfg, argv, started, outputs, extra)
    print((out / "ci_table.csv").read_text(encoding="utf-8"), end="")
    return EXIT_CONVERGENCE if res.fit.convergence == "maxIter" else EXIT_OK


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def _design(args):
    from .sim import SimDesign, study_a_design, study_b_design

    if args.design:
        path = Path(args.design)
        if not path.is_file():
            raise DatasetError(f"design file not found: {path}")
        design = SimDesign.from_json(path)
    else:
        make = study_a_design if args.study == "A" else study_b_design
        kw = {}
        if args.n:
            kw["n"] = args.n
        design = make(seed=args.seed or 0, **kw)
    changes = {}
    if args.replicates:
        changes["replicates"] = args.replicates
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "ciLevel", None):
        changes["ciLevel"] = args.ciLevel
    if getattr(args, "inject_failures", None):
        changes["injectFailures"] = args.inject_failures
    return replace(design, **changes) if changes else design


def cmd_simulate(args, argv) -> int:
    from .sim import simulate_grf

    started = time.perf_counter()
    design = _design(args)
    out = Path(args.outDir or "out")
    out.mkdir(parents=True, exist_ok=True)
    design.to_json(out / "design.json")
    outputs = ["design.json"]
    width = max(3, len(str(design.replicates - 1)))
    for r in range(design.replicates):
        name = f"replicate_{r:0{width}d}.csv"
        write_csv(simulate_grf(design, r), out / name)
        outputs.append(name)
    _write_manifest(out, "simulate", {"design": "design.json", "seed": design.seed}, argv, started, outputs)
    print(f"wrote {design.replicates} datasets to {out}")
    return EXIT_OK


def cmd_coverage(args, argv) -> int:
    from .sim import run_coverage

    started = time.perf_counter()
    design = _design(args)
    cfg = resolve_config(args)
    out = Path(cfg.outDir)
    out.mkdir(parents=True, exist_ok=True)
    design.to_json(out / "design.json")

    def progress(r):
        log.info("replicate %d %s", r["replicate"], "failed" if r["failed"] else "done")

    report = run_coverage(design, cfg, workers=args.workers, progress=progress)
    report.to_csv(out / "coverage.csv")
    report.to_json(out / "coverage.json")
    _write_manifest(out, "coverage", cfg, argv, started, ["design.json", "coverage.csv", "coverage.json"],
                    {"design": "design.json", "failures": report.failures})
    print((out / "coverage.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "profile": cmd_profile, "simulate": cmd_simulate, "coverage": cmd_coverage}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        from .batchlinalg import set_threads

        set_threads(args.threads)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
