"""Command-line entry point: gen-data, train, simulate, analyze.

Every command reads the same validated config (flags override individual
entries), writes its outputs atomically, and is byte-for-byte reproducible
for a fixed seed.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.  RACBF_THREADS caps rollout parallelism.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import forensics, learning, sim
from .config import CliConfig, ConfigError, load_config
from .responsibility import GammaModel, ModelFormatError, load_model, save_model


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _threads() -> int:
    raw = os.environ.get("RACBF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(2, f"RACBF_THREADS must be an integer, got {raw!r}")


def _load_cfg(args) -> CliConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        for section in ("dataset", "sim", "train"):
            overrides[(section, "seed")] = args.seed
    if getattr(args, "out", None) is not None:
        overrides[("output", "dir")] = args.out
    if getattr(args, "mode", None) is not None:
        overrides[("sim", "modes")] = args.mode
    try:
        return load_config(args.config, overrides)
    except ConfigError as exc:
        raise CliError(2, str(exc))


def _outdir(cfg: CliConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise CliError(2, f"{what} not found: {path}")
    return path


def _write_rows(path, header, rows) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg)
    ds = cfg.dataset
    rule = learning.car_follow_rule(ds.gamma_trail, ds.gamma_lead)
    suite = [(kind, {}, ds.count) for kind in ds.kinds]
    demos = learning.generate_synthetic_dataset(
        suite, rule, seed=ds.seed, cfg=cfg.barrier, bounds=cfg.bounds,
        horizon=ds.horizon, dt=ds.dt,
    )
    data_path = os.path.join(out, "dataset.csv")
    learning.save_dataset(demos, data_path)

    # per-scenario audit: every sample must satisfy the generating allocation
    by_scenario: dict = {}
    for d in demos:
        by_scenario.setdefault(d.scenario_id, []).append(d)
    rows = []
    for sid in sorted(by_scenario):
        group = by_scenario[sid]
        worst = learning.audit_dataset(group, rule, cfg.barrier, cfg.bounds)
        rows.append([sid, len(group), f"{worst:.17g}"])
    _write_rows(os.path.join(out, "audit.csv"), ["scenario_id", "samples", "min_margin"], rows)
    print(f"wrote {data_path} ({len(demos)} samples, {len(by_scenario)} scenarios)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg)
    data_path = _require_file(args.data, "dataset file")
    demos = learning.load_dataset(data_path)
    result = learning.train(demos, cfg.train, barrier_cfg=cfg.barrier)
    model_path = os.path.join(out, "model.bin")
    save_model(result.model, model_path)
    _write_rows(
        os.path.join(out, "training_log.csv"),
        ["epoch", "loss", "hinge_rate", "mean_gamma"],
        [[e, f"{l:.17g}", f"{h:.17g}", f"{g:.17g}"] for e, l, h, g in result.history],
    )
    final = result.history[-1]
    print(f"wrote {model_path} (final loss {final[1]:.6g}, hinge rate {final[2]:.3f})")
    return 0


def _build_eval_suite(cfg: CliConfig):
    sm = cfg.sim
    rng = np.random.default_rng(sm.seed)
    scenarios = []
    for kind in sm.kinds:
        for _ in range(sm.count):
            sc_seed = int(rng.integers(0, 2**31 - 1))
            scenarios.append(
                sim.build_scenario(kind, {}, seed=sc_seed, horizon=sm.horizon,
                                   dt=sm.dt, cfg=cfg.barrier)
            )
    return scenarios


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg)
    modes = cfg.sim.modes
    model = GammaModel.zero()
    if "learned" in modes:
        model_path = _require_file(args.model, "model file") if args.model else None
        if model_path is None:
            raise CliError(2, "simulating the learned mode requires --model PATH")
        try:
            model = load_model(model_path)
        except ModelFormatError as exc:
            raise CliError(2, f"{args.model}: {exc}")

    validate = None
    if args.validate_data:
        validate = learning.load_dataset(_require_file(args.validate_data, "validation dataset"))

    scenarios = _build_eval_suite(cfg)
    header = [
        "suite", "mode", "constraint_violation_rate", "safety_violation_rate",
        "offroad_time_fraction", "distance_covered",
    ]
    if validate is not None:
        header.append("validation_violation_rate")
    rows = []
    suite_name = "+".join(cfg.sim.kinds)
    for mode in modes:
        logs = sim.run_suite(
            scenarios, mode, model, cfg.barrier, cfg.bounds,
            filtered=cfg.sim.filtered, accel_bias=cfg.sim.accel_bias,
            max_workers=_threads(),
        )
        for k, log in enumerate(logs):
            sim.write_log_csv(log, os.path.join(out, f"traj_{mode}_{k:03d}.csv"))
        metrics = sim.compute_metrics(logs)
        row = [
            suite_name, mode,
            f"{metrics.constraint_violation_rate:.17g}",
            f"{metrics.safety_violation_rate:.17g}",
            f"{metrics.offroad_time_fraction:.17g}",
            f"{metrics.distance_covered:.17g}",
        ]
        if validate is not None:
            rate = learning.demonstration_violation_rate(
                validate, mode, model, cfg.barrier, cfg.bounds
            )
            row.append(f"{rate:.17g}")
        rows.append(row)
    metrics_path = os.path.join(out, "metrics.csv")
    _write_rows(metrics_path, header, rows)
    print(f"wrote {metrics_path} ({len(scenarios)} scenarios x {len(modes)} modes)")
    return 0


def cmd_analyze(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg)
    traj_path = _require_file(args.traj, "trajectory file")
    model_path = _require_file(args.model, "model file")
    try:
        model = load_model(model_path)
    except ModelFormatError as exc:
        raise CliError(2, f"{args.model}: {exc}")

    try:
        t, scenes, inputs, _ = forensics.load_log_states_csv(traj_path)
        source = "logged states and inputs"
    except forensics.ForensicsError:
        raw = forensics.ingest_trajectory_csv(traj_path)
        t, scenes, inputs = forensics.differentiate(raw, window=args.window)
        source = f"differentiated raw series (window {args.window})"
    report = forensics.analyze(t, scenes, inputs, model, cfg.barrier, cfg.bounds)
    steps_path = os.path.join(out, "forensic_steps.csv")
    summary_path = os.path.join(out, "forensic_summary.csv")
    forensics.write_report_csv(report, steps_path, summary_path)

    ranking = forensics.attribute(report)
    if ranking:
        worst = ranking[0]
        print(
            f"analyzed {traj_path} from {source}: agent {worst.agent} ranked most "
            f"culpable (violation integral {worst.violation_integral:.4g})"
        )
    else:
        print(f"analyzed {traj_path} from {source}: no constraint violations")

    if args.plot:
        from .plotting import line_chart_svg

        n = len(report.agent_ids)
        ts = report.t.tolist()
        xy_panel = {
            "title": "trajectories (x vs y)",
            "series": [
                (f"agent {report.agent_ids[i]}",
                 [sc[i].x for sc in scenes], [sc[i].y for sc in scenes])
                for i in range(n)
            ],
        }
        input_panel = {
            "title": "acceleration inputs",
            "xlabel": "t (s)",
            "hlines": [0.0],
            "series": [
                (f"agent {report.agent_ids[i]}", ts, [u[i].a for u in inputs])
                for i in range(n)
            ],
        }
        gamma_panel = {
            "title": "responsibility allocation",
            "xlabel": "t (s)",
            "hlines": [0.0],
            "series": [
                (f"agent {report.agent_ids[i]}", ts, report.gamma[:, i].tolist())
                for i in range(n)
            ],
        }
        margin_panel = {
            "title": "constraint margins",
            "xlabel": "t (s)",
            "hlines": [0.0],
            "series": [
                (f"agent {report.agent_ids[i]}", ts, report.margin[:, i].tolist())
                for i in range(n)
            ],
        }
        svg_path = os.path.join(out, "forensic_plot.svg")
        line_chart_svg([xy_panel, input_panel, gamma_panel, margin_panel], svg_path)
        print(f"wrote {svg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="racbf",
        description="responsibility-aware safety filtering, learning, and forensics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file (INI sections)")
        p.add_argument("--seed", type=int, default=None, help="override all section seeds")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="generate and audit a synthetic expert dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a responsibility model on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset CSV from gen-data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run closed-loop suites and write metrics")
    common(p)
    p.add_argument("--model", default=None, help="trained model file (for learned mode)")
    p.add_argument("--mode", default=None, help="comma list of modes (worst,even,learned)")
    p.add_argument("--validate-data", default=None,
                   help="dataset CSV for the demonstration-compatibility metric")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="forensic analysis of a recorded trajectory")
    common(p)
    p.add_argument("--traj", required=True, help="trajectory CSV (raw or full log)")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--window", type=int, default=5, help="odd smoothing window")
    p.add_argument("--plot", action="store_true", help="also emit an SVG report")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, forensics.ForensicsError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
