"""``pelab`` command line: run enhancement experiments and emit CSV/JSON results.

Exit codes: 0 success, 2 configuration error, 3 numerical or assertion failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from . import pipeline as P
from . import rng
from .codecs import write_samples
from .config import SCENARIOS, ExperimentConfig, load_config, resolve
from .gmm import sample_data
from .solvers import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

PD_COLUMNS = ("sigma_t", "mse", "psnr_db", "kl_grid", "frechet")
SPEED_COLUMNS = ("solver", "nfe", "kl_grid", "frechet")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects outputs and NFE totals for the manifest of one subcommand."""

    def __init__(self, command: str, cfg: ExperimentConfig | None, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.files: list[str] = []
        self.nfe: dict[str, int] = {}
        self.start = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def add(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def count(self, key: str, nfe: int, samples: int = 1) -> None:
        self.nfe[key] = self.nfe.get(key, 0) + int(nfe) * int(samples)

    def finish(self) -> None:
        manifest = {
            "tool": "pelab",
            "version": __version__,
            "command": self.command,
            "config": self.cfg.raw if self.cfg is not None else None,
            "nfe_totals": self.nfe,
            "wall_time_s": round(time.perf_counter() - self.start, 3),
            "files": {name: sha256_file(self.out / name) for name in sorted(self.files)},
        }
        write_json(self.out / "manifest.json", manifest)


# ---------------------------------------------------------------- subcommands


def cmd_enhance(cfg: ExperimentConfig, run: Run, workers: int) -> int:
    model, codec = cfg.model(), cfg.codec()
    seed = cfg.raw["seed"]
    x0 = sample_data(model, cfg.raw["n"], seed)
    grid, peak = cfg.grid(model), cfg.raw["metrics"]["peak"]
    res = P.enhance(model, codec, x0, cfg.enhance_config(), score_fn=cfg.score_fn(model), grid=grid, peak=peak)
    report = res.report
    if cfg.raw["metrics"]["fisher"]:
        report.fisher = _fisher(model, res.sigma_t, grid)
    base = P.base_report(model, codec, x0, seed, grid, peak)
    run.count("enhance", report.nfe, x0.shape[0])
    if res.selection is not None:
        run.count("select_sigma", len(res.selection.probes) * report.nfe, cfg.raw["enhance"]["n_probe"])
    write_json(run.add("report.json"), report.to_dict())
    write_json(
        run.add("base_report.json"),
        {**base.to_dict(), "sigma_t": res.sigma_t, "capped": bool(res.selection and res.selection.capped)},
    )
    if cfg.raw["metrics"]["dump_samples"]:
        with open(run.add("samples.bin"), "wb") as fh:
            write_samples(res.enhanced, fh)
    return EXIT_OK


def _fisher(model, sigma, grid):
    """Fisher divergence between the noisy data marginal and the clean one (diagnostic)."""
    if grid is None or sigma == 0:
        return 0.0
    from .gmm import log_density, score

    noisy = model.noised(sigma)
    return M.fisher_divergence_grid(
        lambda x: score(noisy, 0.0, x),
        lambda x: score(model, 0.0, x),
        lambda x: np.exp(log_density(noisy, 0.0, x)),
        grid,
    )


def cmd_sweep_pd(cfg: ExperimentConfig, run: Run, workers: int) -> int:
    model, codec = cfg.model(), cfg.codec()
    seed = cfg.raw["seed"]
    ecfg = cfg.enhance_config()
    score_fn = cfg.score_fn(model)
    sigma_star = None
    if cfg.raw["sweep_pd"]["sigma_list"] is None:
        ref = P.reference_mse_for(model, codec, ecfg.n_probe, seed)
        sel = P.select_sigma(model, codec, ecfg, score_fn=score_fn, reference_mse=ref)
        sigma_star = sel.sigma
        run.count("select_sigma", len(sel.probes), ecfg.n_probe)
    sigmas = cfg.sigma_list(sigma_star)
    x0 = sample_data(model, cfg.raw["n"], seed)
    grid, peak = cfg.grid(model), cfg.raw["metrics"]["peak"]
    points = P.pd_sweep(model, codec, sigmas, ecfg, x0, score_fn=score_fn, grid=grid, peak=peak, workers=workers)
    run.count("sweep_pd", len(points) * _preset_nfe(ecfg), x0.shape[0])
    rows = [{c: getattr(p, c) for c in PD_COLUMNS} for p in points]
    columns = PD_COLUMNS
    alphas = cfg.raw["sweep_pd"]["yan_alpha"]
    if alphas:
        columns = PD_COLUMNS + ("alpha",)
        top = sigmas[-1]
        y = codec.encode(x0)
        x_mse = codec.decode(y, seed)
        x_percep = P.enhance(model, codec, x0, _with_sigma(ecfg, top), score_fn=score_fn, grid=grid).enhanced
        pk = peak if peak is not None else model.default_peak()
        for a in alphas:
            xi = P.yan_interpolate(x_mse, x_percep, float(a))
            r = P.measure(model, x0, xi, y, codec, 0, grid, pk)
            rows.append({"sigma_t": top, "mse": r.mse, "psnr_db": r.psnr_db, "kl_grid": r.kl_grid, "frechet": r.frechet, "alpha": float(a)})
    write_csv(run.add("pd_curve.csv"), columns, rows)
    return EXIT_OK


def _with_sigma(ecfg, sigma):
    from dataclasses import replace

    return replace(ecfg, sigma_t=float(sigma))


def _preset_nfe(ecfg) -> int:
    name = ecfg.solver_name
    steps = ecfg.n_steps
    return {"sde-euler": steps, "ode-euler": steps, "ode-heun": 2 * steps - 1, "consistency": 1, "dps-sde": 2 * steps}[name]


def cmd_sweep_speed(cfg: ExperimentConfig, run: Run, workers: int) -> int:
    model, codec = cfg.model(), cfg.codec()
    sp = cfg.raw["sweep_speed"]
    rows = P.speed_sweep(
        model,
        codec,
        [int(b) for b in sp["budgets"]],
        list(sp["solvers"]),
        float(sp["sigma_t"]),
        cfg.raw["n"],
        seed=cfg.raw["seed"],
        grid=cfg.grid(model),
        score_fn=cfg.score_fn(model),
        workers=workers,
    )
    for r in rows:
        run.count(r["solver"], r["nfe"], cfg.raw["n"])
    write_csv(run.add("speed_curve.csv"), SPEED_COLUMNS, rows)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, run: Run, workers: int) -> int:
    v = cfg.raw["verify"]
    names = v["scenarios"] or [cfg.scenario]
    reports = {}
    for name in names:
        scfg = cfg if name == cfg.scenario else resolve({**_scenario_raw(cfg.raw), "scenario": name})
        model, codec = scfg.model(), scfg.codec()
        rep = P.verify_theorem(
            model,
            codec,
            v["sigma_list"],
            v["solver"],
            cfg.raw["n"],
            steps=int(v["steps"]),
            seed=rng.derive_key(cfg.raw["seed"], name),
            grid=scfg.grid(model),
            score_fn=cfg.score_fn(model),
            ode_tol=float(v["ode_tol"]),
            workers=workers,
        )
        reports[name] = rep
        for p in rep["points"]:
            run.count("verify", p["nfe"], cfg.raw["n"])
    passed = all(r["passed"] for r in reports.values())
    write_json(run.add("theorem_report.json"), {"passed": passed, "scenarios": reports})
    return EXIT_OK if passed else EXIT_NUMERIC


def _scenario_raw(raw: dict) -> dict:
    """The raw config with scenario-derived fields cleared, for re-resolving under another scenario."""
    out = {k: v for k, v in raw.items() if k not in ("model", "codec", "scenario")}
    out["metrics"] = {**raw["metrics"], "grid": None}
    return out


def cmd_bd(cfg: ExperimentConfig, run: Run, workers: int, anchor=None, test=None, deltas=None) -> int:
    anchor = anchor or cfg.raw["bd"]["anchor"]
    test = test or cfg.raw["bd"]["test"]
    if deltas:
        return _bd_rate_sweep(cfg, run, workers, deltas)
    if not anchor or not test:
        raise ConfigurationError("bd needs anchor and test CSV paths (or --deltas)")
    a, t = M.read_rate_curve(anchor), M.read_rate_curve(test)
    lo, hi = M.bd_interval(a, t)
    write_json(
        run.add("bd_report.json"),
        {"anchor": str(anchor), "test": str(test), "bd_delta": M.bd_delta(a, t), "log_rate_interval": [lo, hi]},
    )
    return EXIT_OK


def _bd_rate_sweep(cfg, run, workers, deltas):
    model, codec = cfg.model(), cfg.codec()
    x0 = sample_data(model, cfg.raw["n"], cfg.raw["seed"])
    curves = P.rate_sweep(
        model,
        codec.kind,
        deltas,
        cfg.enhance_config(),
        x0,
        score_fn=cfg.score_fn(model),
        grid=cfg.grid(model),
        peak=cfg.raw["metrics"]["peak"],
        workers=workers,
    )
    result = {"deltas": [float(d) for d in deltas]}
    for key, (anchor, test) in curves.items():
        M.write_rate_curve(anchor, run.add(f"rate_{key}_base.csv"))
        M.write_rate_curve(test, run.add(f"rate_{key}_enhanced.csv"))
        result[f"bd_{key}"] = M.bd_delta(anchor, test)
    write_json(run.add("bd_report.json"), result)
    return EXIT_OK


def cmd_list_scenarios() -> int:
    for name, spec in SCENARIOS.items():
        c = spec["codec"]
        print(f"{name:12s} model={spec['model']:14s} codec={c['kind']} delta={c['delta']}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _perturb(text: str):
    try:
        a, omega = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("--perturb expects 'a,omega'") from exc
    return a, omega


def _deltas(text: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("--deltas expects comma-separated numbers") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pelab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML experiment config")
    common.add_argument("--out", type=Path, help="output directory (default: config 'output')")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--perturb", type=_perturb, help="use a perturbed score with amplitude,frequency")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("enhance", parents=[common], help="one enhancement run -> report.json")
    sub.add_parser("sweep-pd", parents=[common], help="perception-distortion sweep -> pd_curve.csv")
    sub.add_parser("sweep-speed", parents=[common], help="NFE/quality frontier -> speed_curve.csv")
    sub.add_parser("verify", parents=[common], help="KL contraction checks -> theorem_report.json")
    bd = sub.add_parser("bd", parents=[common], help="Bjontegaard delta -> bd_report.json")
    bd.add_argument("anchor", nargs="?", type=Path)
    bd.add_argument("test", nargs="?", type=Path)
    bd.add_argument("--deltas", type=_deltas, help="run a base/enhanced rate sweep over these steps instead")
    sub.add_parser("list-scenarios", help="print the built-in scenarios")
    return parser


COMMANDS = {"enhance": cmd_enhance, "sweep-pd": cmd_sweep_pd, "sweep-speed": cmd_sweep_speed, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-scenarios":
        return cmd_list_scenarios()
    try:
        raw = load_config(args.config) if args.config else {}
        cfg = resolve(raw, seed=args.seed, perturb=args.perturb, output=args.out)
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
    except ConfigurationError as exc:
        print(f"pelab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(args.command, cfg, Path(cfg.raw["output"]))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if args.command == "bd":
                code = cmd_bd(cfg, run, args.workers, args.anchor, args.test, args.deltas)
            else:
                code = COMMANDS[args.command](cfg, run, args.workers)
    except ConfigurationError as exc:
        print(f"pelab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"pelab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
