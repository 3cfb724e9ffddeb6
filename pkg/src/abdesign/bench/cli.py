"""Command-line entry point: ``abdesign run|verify|ate|list-envs|list-designs``."""
from __future__ import annotations

import argparse
import os
import sys

from ..core import AbDesignError, ConfigError, make_rng
from ..designs import DESIGNS, HYPERPARAMETERS
from ..environments import ENVIRONMENTS, BinaryChainEnv, TabularNmdpEnv
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--replicates", type=int, help="override the replicate count")
    common.add_argument("--out", help="output directory (CSV files)")
    common.add_argument("--quiet", action="store_true", help="print only errors")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    p = argparse.ArgumentParser(prog="abdesign", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, desc in (("run", "run the replicated benchmark"),
                       ("verify", "check the optimal designs against exact efficiency bounds"),
                       ("ate", "one experiment per design with its interval")):
        sp = sub.add_parser(name, parents=[common], help=desc)
        sp.add_argument("config")
    sub.add_parser("list-envs", parents=[common], help="available environments")
    sub.add_parser("list-designs", parents=[common], help="available designs")
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        if args.replicates < 1:
            raise ConfigError("--replicates must be >= 1")
        cfg.replicates = args.replicates
    if args.out is not None:
        cfg.out = args.out
    return cfg


def cmd_run(args, say) -> int:
    from .harness import run_benchmark
    from .output import emit_csv
    cfg = _load(args)
    results = run_benchmark(cfg, jobs=args.jobs,
                            progress=lambda e, d: say(f"  done {e} / {d}"))
    out = cfg.out or "results"
    rep, summ = emit_csv(results, out)
    width = max((len(c.env_id) for c in results), default=6)
    say(f"{'env':<{width}}  {'design':<22} {'mse':>12} {'rmse':>10} {'coverage':>8}")
    for c in results:
        say(f"{c.env_id:<{width}}  {c.design_id:<22} {c.mse:12.6g} {c.rmse:10.4g} {c.coverage:8.3f}")
    say(f"wrote {rep} and {summ}")
    bad = [c for c in results if not c.ok]
    for c in bad:
        print(f"error: {len(c.errors)} replicate(s) failed in {c.env_id} / {c.design_id}:\n"
              f"{c.errors[0].error}", file=sys.stderr)
    return EXIT_RUNTIME if bad else EXIT_OK


def verification_reports(cfg) -> list:
    from ..oracle import verify_theorem1, verify_theorem3
    s = cfg.verify_settings()
    Ts = s["tabular_T"] if isinstance(s["tabular_T"], list) else [s["tabular_T"]]
    deltas = s["binary_deltas"] if isinstance(s["binary_deltas"], list) else [s["binary_deltas"]]
    reports = []
    for i in range(int(s["tabular_instances"])):
        T = int(Ts[i % len(Ts)])
        env = TabularNmdpEnv.random(make_rng(int(s["tabular_seed"]), 0x7AB, i),
                                    K=int(s["tabular_K"]), T=T)
        reports.append(verify_theorem1(env, float(s["grid_step"]), name=f"theorem1[instance={i},T={T}]"))
    for d in deltas:
        env = BinaryChainEnv(p_s=float(s["binary_p_s"]), delta=float(d), T=int(s["binary_T"]))
        reports.append(verify_theorem3(env, float(s["grid_step"]), name=f"theorem3[delta={d}]"))
    return reports


def cmd_verify(args, say) -> int:
    from ..oracle import write_report_csv
    cfg = _load(args)
    reports = verification_reports(cfg)
    for r in reports:
        say(r.text())
    out = cfg.out or "results"
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "verify.csv")
    write_report_csv(reports, path)
    n_fail = sum(not r.passed for r in reports)
    say(f"{len(reports) - n_fail}/{len(reports)} checks passed; wrote {path}")
    return EXIT_VERIFY if n_fail else EXIT_OK


def cmd_ate(args, say) -> int:
    from .harness import cell_environment, cell_true_ate, run_design
    cfg = _load(args)
    status = EXIT_OK
    for cell in cfg.cells():
        env = cell_environment(cell)
        try:
            truth = cell_true_ate(env, cfg)
        except ConfigError:
            truth = float("nan")
        say(f"{cell.env_id}  (true ATE {truth:.6g})")
        for spec in cfg.designs:
            res = run_design(env, spec.name, cfg.n, 1, cfg.seed, cell.env_id, truth, m0=cfg.burn_in,
                             alpha=cfg.alpha, degree=cfg.degree, hyper=spec.params)
            for did, cellres in res.items():
                r = cellres.replicates[0]
                if r.error:
                    print(f"error in {did}:\n{r.error}", file=sys.stderr)
                    status = EXIT_RUNTIME
                    continue
                level = round(100 * (1 - cfg.alpha), 2)
                print(f"  {did:<22} ATE = {r.ate_hat: .6g}   {level:g}% CI [{r.ci_lo: .6g}, {r.ci_hi: .6g}]")
    return status


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    say = (lambda *a, **k: None) if args.quiet else print
    try:
        if args.command == "list-envs":
            for name, cls in ENVIRONMENTS.items():
                print(f"{name:<12} {cls.process:<5} {(cls.__doc__ or '').strip().splitlines()[0]}")
            return EXIT_OK
        if args.command == "list-designs":
            for name in DESIGNS:
                hp = ", ".join(HYPERPARAMETERS[name]) or "-"
                print(f"{name:<16} {hp}")
            return EXIT_OK
        return {"run": cmd_run, "verify": cmd_verify, "ate": cmd_ate}[args.command](args, say)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AbDesignError, OSError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
