"""Command-line entry point.

Subcommands: validate, theory, sweep, simulate, enhance, selfcheck.
Exit codes: 0 success, 1 runtime failure, 2 config error, 3 I/O error.

Every sweep/simulate/enhance run writes a JSON manifest next to its outputs;
`--from-manifest` replays a previous run and reproduces the outputs
byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .config import (ConfigError, GeometryTargets, ProblemConfig, RunConfig,
                     dump_config, load_config, parse_grid)
from .geometry import build_geometry, save_geometry, validate
from . import enhanced as enh
from . import sweep as sweep_mod
from . import theory
from .selfcheck import run_selfcheck

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _manifest(subcommand: str, cfg: RunConfig, params: dict, outputs: list[str],
              started: float) -> dict:
    return {
        "tool": "w2slab",
        "version": __version__,
        "subcommand": subcommand,
        "config": cfg.as_dict(),
        "params": params,
        "outputs": outputs,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }


def _write_manifest(path: str, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_from_snapshot(snapshot: dict) -> RunConfig:
    prob_fields = {f for f in ProblemConfig.__dataclass_fields__}
    targ_fields = {f for f in GeometryTargets.__dataclass_fields__}
    problem = ProblemConfig(**{k: snapshot[k] for k in prob_fields})
    targets = GeometryTargets(**{k: snapshot[k] for k in targ_fields})
    return RunConfig(problem=problem, targets=targets, seed=snapshot["seed"])


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    geometry = build_geometry(cfg.problem, cfg.targets, cfg.seed)
    report = validate(cfg.problem, geometry)
    if args.json:
        print(json.dumps({"valid": not report, "violations": report}))
    elif report:
        for line in report:
            print(f"violation: {line}")
    else:
        print("ok: configuration and geometry satisfy all invariants")
    return EXIT_OK if not report else EXIT_RUNTIME


def cmd_theory(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    geometry = build_geometry(cfg.problem, cfg.targets, cfg.seed)
    pred = theory.w2s_risk(cfg.problem, geometry)
    try:
        eta_star = theory.optimal_eta_u(cfg.problem, geometry)
        eta_note = "" if 0.0 <= eta_star <= 0.5 else \
            f" (outside [0, 1/2]; clamped value {min(max(eta_star, 0.0), 0.5)})"
    except ValueError as exc:
        eta_star, eta_note = float("nan"), f" (undefined: {exc})"
    fail = theory.failure_criterion(cfg.problem, geometry)

    if args.json:
        out = asdict(pred)
        out.update({
            "eta_u_star": eta_star,
            "eta_u_star_note": eta_note.strip(),
            "gain_negative_for_all_nu": fail.negative_for_all_nu,
            "cross_term": float(geometry.mu_T @ geometry.Xi @ geometry.mu_S),
        })
        print(json.dumps(out, sort_keys=True))
        return EXIT_OK

    rows = [
        ("V_T0 (teacher variance)", pred.V_T0),
        ("V_T1 (teacher spurious)", pred.V_T1),
        ("V_S0 (student variance)", pred.V_S0),
        ("V_S1 (student spurious)", pred.V_S1),
        ("E_S  (finite-N correction)", pred.E_S),
        ("teacher risk", pred.teacher_risk),
        ("student risk", pred.student_risk),
        ("gain", pred.gain),
    ]
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value: .6f}")
    print(f"{'eta_u*':<{width}}  {eta_star: .6f}{eta_note}")
    print(f"{'gain < 0 for all nu_z':<{width}}  {fail.negative_for_all_nu}")
    return EXIT_OK


def _sweep_from_args(args) -> tuple[RunConfig, sweep_mod.SweepSpec, str]:
    if args.from_manifest:
        with open(args.from_manifest, "r", encoding="utf-8") as fh:
            man = json.load(fh)
        cfg = _config_from_snapshot(man["config"])
        params = man["params"]
        out = args.out or params["out"]
        spec = sweep_mod.SweepSpec(
            base=cfg, axis=params["axis"], grid=tuple(params["grid"]),
            replicates=params["replicates"], master_seed=params["master_seed"],
            risk_mode=params["risk_mode"], sampling_mode=params["sampling_mode"],
            jobs=args.jobs,
        )
        return cfg, spec, out
    if not args.config or not args.axis or not args.grid or not args.out:
        raise ConfigError("sweep requires --config, --axis, --grid and --out "
                          "(or --from-manifest)")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    spec = sweep_mod.SweepSpec(
        base=cfg, axis=args.axis, grid=tuple(parse_grid(args.grid)),
        replicates=args.replicates, master_seed=cfg.seed,
        risk_mode=args.risk_mode, sampling_mode=args.sampling, jobs=args.jobs,
    )
    return cfg, spec, args.out


def cmd_sweep(args) -> int:
    started = time.time()
    cfg, spec, out = _sweep_from_args(args)
    result = sweep_mod.run_sweep(spec)
    sweep_mod.export_csv(result, out)
    params = {
        "axis": spec.axis, "grid": list(spec.grid), "replicates": spec.replicates,
        "master_seed": spec.seed, "risk_mode": spec.risk_mode,
        "sampling_mode": spec.sampling_mode, "out": out,
    }
    _write_manifest(out + ".manifest.json",
                    _manifest("sweep", cfg, params, [out], started))
    failed = [r for r in result.rows if r.error is not None]
    print(f"wrote {len(result.rows)} rows to {out} ({len(failed)} failed grid points)")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    geometry = build_geometry(cfg.problem, cfg.targets, cfg.seed)

    from .data import sample_dataset, features, save_dataset
    from . import ridgeless

    ss = np.random.SeedSequence([cfg.seed, 0, 0])
    s_lab, s_unl, _, s_beta = ss.spawn(4)
    from .data import draw_beta_star
    beta_star = draw_beta_star(cfg.problem.d_z, cfg.problem.beta_star_norm,
                               np.random.default_rng(s_beta))
    labeled = sample_dataset(cfg.problem, geometry, cfg.problem.eta_l,
                             cfg.problem.n, mode=args.sampling, seed=s_lab,
                             beta_star=beta_star)
    unlabeled = sample_dataset(cfg.problem, geometry, cfg.problem.eta_u,
                               cfg.problem.N, mode=args.sampling, seed=s_unl,
                               beta_star=beta_star, noiseless=True)
    teacher = ridgeless.fit_min_norm(features(labeled, geometry, "teacher"),
                                     labeled.y, role="teacher")
    pseudo = ridgeless.pseudolabel(teacher, features(unlabeled, geometry, "teacher"))
    student = ridgeless.fit_min_norm(features(unlabeled, geometry, "student"),
                                     pseudo, role="student")
    er_t = ridgeless.exact_excess_risk(teacher, cfg.problem, geometry,
                                       cfg.problem.eta_t, beta_star)
    er_s = ridgeless.exact_excess_risk(student, cfg.problem, geometry,
                                       cfg.problem.eta_t, beta_star)

    paths = {
        "geometry": os.path.join(outdir, "geometry.npz"),
        "labeled": os.path.join(outdir, "labeled.npz"),
        "unlabeled": os.path.join(outdir, "unlabeled.npz"),
        "estimators": os.path.join(outdir, "estimators.npz"),
        "risks": os.path.join(outdir, "risks.json"),
    }
    save_geometry(paths["geometry"], geometry)
    save_dataset(paths["labeled"], labeled, seed=cfg.seed)
    save_dataset(paths["unlabeled"], unlabeled, seed=cfg.seed)
    np.savez(paths["estimators"],
             teacher_beta=teacher.coef_, teacher_block_width=np.int64(geometry.p_T),
             student_beta=student.coef_, student_block_width=np.int64(geometry.p_S),
             d_z=np.int64(cfg.problem.d_z))
    pred = theory.w2s_risk(cfg.problem, geometry)
    with open(paths["risks"], "w", encoding="utf-8") as fh:
        json.dump({
            "teacher_excess_risk": er_t.excess_risk,
            "student_excess_risk": er_s.excess_risk,
            "gain": er_t.excess_risk - er_s.excess_risk,
            "theory_teacher": pred.teacher_risk,
            "theory_student": pred.student_risk,
            "theory_gain": pred.gain,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(os.path.join(outdir, "simulate.manifest.json"),
                    _manifest("simulate", cfg, {"sampling_mode": args.sampling,
                                                "out": outdir},
                              list(paths.values()), started))
    print(f"teacher excess risk {er_t.excess_risk:.6f}  "
          f"student {er_s.excess_risk:.6f}  gain {er_t.excess_risk - er_s.excess_risk:.6f}")
    print(f"artifacts in {outdir}")
    return EXIT_OK


def _enhance_from_args(args):
    if args.from_manifest:
        with open(args.from_manifest, "r", encoding="utf-8") as fh:
            man = json.load(fh)
        cfg = _config_from_snapshot(man["config"])
        params = man["params"]
        return cfg, params, args.out or params["out"]
    if not args.config or not args.out:
        raise ConfigError("enhance requires --config and --out (or --from-manifest)")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    params = {
        "settings": list(args.setting), "p": args.p, "q": args.q,
        "grid": bool(args.grid), "n_seeds": args.seeds, "eta_o": args.eta_o,
        "master_seed": cfg.seed, "out": args.out,
    }
    return cfg, params, args.out


def cmd_enhance(args) -> int:
    started = time.time()
    cfg, params, out = _enhance_from_args(args)
    ccfg = enh.ClassifConfig(problem=cfg.problem, eta_o=params["eta_o"])
    geometry = build_geometry(cfg.problem, cfg.targets, cfg.seed)
    seeds = [params["master_seed"] * 100_000 + i for i in range(params["n_seeds"])]

    rows_by_setting: dict[str, list[enh.SeedMetrics]] = {}
    if params["grid"]:
        summaries = enh.ablation_grid(ccfg, geometry, seeds,
                                      settings=tuple(params["settings"]))
        for setting, summary in summaries.items():
            rows = [r for cell in summary.cells for r in cell.rows]
            rows_by_setting[setting] = rows
            print(f"setting {setting}: best (p={summary.best.p}, q={summary.best.q}) "
                  f"test wga {summary.best.mean_test_wga:.4f} | vanilla "
                  f"{summary.vanilla_mean_wga:.4f} | ce-only "
                  f"{summary.ce_only.mean_test_wga:.4f} | full-data "
                  f"{summary.full_data.mean_test_wga:.4f}")
    else:
        for setting in params["settings"]:
            eta_l, eta_u = enh.setting_fractions(setting, ccfg.eta_o)
            scfg = replace(ccfg, problem=replace(cfg.problem, eta_l=eta_l, eta_u=eta_u))
            rows = enh.enhanced_pipeline(scfg, geometry, params["p"], params["q"], seeds)
            rows_by_setting[setting] = rows
            wins = sum(r.enhanced_wga > r.vanilla_wga for r in rows)
            print(f"setting {setting}: enhanced beats vanilla wga in "
                  f"{wins}/{len(rows)} seeds")

    enh.export_enhance_csv(rows_by_setting, out)
    _write_manifest(out + ".manifest.json",
                    _manifest("enhance", cfg, params, [out], started))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(perturb_inverse=args.perturb_inverse)
    if args.json:
        print(json.dumps([asdict(r) for r in results], indent=2))
    else:
        for r in results:
            print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="w2slab",
        description="Numerical laboratory for weak-to-strong generalization "
                    "under group-imbalance spurious correlations",
    )
    parser.add_argument("--version", action="version", version=f"w2slab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=False if not config_required else True,
                        help="flat key-value config file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes")
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = sub.add_parser("validate", help="check config + geometry invariants")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("theory", help="closed-form risk breakdown and eta_u*")
    common(sp)
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("sweep", help="replicated sweep over a parameter grid")
    common(sp, config_required=False)
    sp.add_argument("--axis", choices=sweep_mod.SWEEP_AXES)
    sp.add_argument("--grid", help="comma list or start:stop:step (stop inclusive)")
    sp.add_argument("--replicates", type=int, default=32)
    sp.add_argument("--risk-mode", choices=sweep_mod.RISK_MODES, default="exact")
    sp.add_argument("--sampling", choices=("bernoulli", "quota", "meanshift"),
                    default="bernoulli")
    sp.add_argument("--out", help="output CSV path")
    sp.add_argument("--from-manifest", help="replay a previous run")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("simulate", help="single replicate with full artifact dump")
    common(sp)
    sp.add_argument("--sampling", choices=("bernoulli", "quota", "meanshift"),
                    default="bernoulli")
    sp.add_argument("--out", help="output directory", default="simulate_out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("enhance", help="confidence-based retraining experiment")
    common(sp, config_required=False)
    sp.add_argument("--setting", choices=("a", "b"), nargs="+", default=["a"],
                    help="a: (eta_l, eta_u) = (eta_o, 0.5); b: (0.5, eta_o)")
    sp.add_argument("--eta-o", type=float, default=0.05)
    sp.add_argument("--p", type=float, default=0.4, help="selection fraction")
    sp.add_argument("--q", type=float, default=0.2, help="GCE exponent")
    sp.add_argument("--grid", action="store_true", help="run the full (p, q) grid")
    sp.add_argument("--seeds", type=int, default=10, help="number of seeds")
    sp.add_argument("--out", help="output CSV path")
    sp.add_argument("--from-manifest", help="replay a previous run")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("selfcheck", help="closed-form oracle identity suite")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--perturb-inverse", action="store_true",
                    help=argparse.SUPPRESS)   # fault-injection test hook
    sp.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
