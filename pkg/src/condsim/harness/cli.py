"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical failure,
3 acceptance-check failure (only with --check).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..corrector import sublinearity_report
from ..dual import dual_ensemble, clock_slope, dual_clt_check
from ..env import build_env
from ..errors import CondsimError, ConfigError
from ..kernel import WindowSpec, diffusive_radius, identity_suite, phi_eps, solve_kernel, tail_horizon
from ..walk import ensemble_x
from .config import RunConfig
from .experiments import RUNNERS, TAIL_TOL, psi_on_grid, stage_seed, STAGE_ENV
from .report import DiagnosticsReport, Table
from .stats import Estimate, mean_se, variance_se

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; usage errors are configuration errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", required=True, help="run configuration (YAML)")
    g.add_argument("--seed", type=_u64, metavar="U64", help="override the config's master seed")
    g.add_argument("--out", metavar="DIR", default="condsim-out", help="output directory")
    g.add_argument("--threads", type=_positive, metavar="N", default=1,
                   help="worker threads (CONDSIM_THREADS overrides)")
    g.add_argument("--format", choices=("csv", "json"), default="json", help="output format")
    g.add_argument("--check", action="store_true", help="exit 3 if any acceptance check fails")

    p = _Parser(prog="condsim", description="Random walks among dynamical random conductances.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("env", parents=[common], help="sample and dump an environment window")
    sub.add_parser("simulate", parents=[common], help="ensembles of the walk X")
    sub.add_parser("dual", parents=[common], help="ensembles of the dual walk Y and its clock")
    sub.add_parser("kernel", parents=[common], help="kernel grid, phi_eps and identity checks")
    sub.add_parser("corrector", parents=[common], help="phi, psi and chi fields with sublinearity ratios")
    sub.add_parser("diagnose", parents=[common], help="invariance check or the b phi^2 / b phi comparison")
    ce = sub.add_parser("counterexample", parents=[common], help="moment counterexamples")
    ce.add_argument("which", choices=("lower", "upper"))
    return p


def _threads(args) -> int:
    env = os.environ.get("CONDSIM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"CONDSIM_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("CONDSIM_THREADS must be >= 1")
        return n
    return args.threads


def _as(cfg: RunConfig, experiment: str) -> RunConfig:
    return cfg if cfg.experiment == experiment else cfg.with_experiment(experiment)


# --- utility subcommands ---------------------------------------------------------

def cmd_env(cfg: RunConfig, workers: int) -> DiagnosticsReport:
    c = _as(cfg, "env")
    win = build_env(c.env, int(c.param("x_min")), int(c.param("x_max")), float(c.param("t_min")),
                    float(c.param("t_max")), c.master_seed)
    rep = DiagnosticsReport("env", c.config_hash(), {"master_seed": c.master_seed})
    tab = Table(["edge", "start", "end", "value"])
    n_pieces = 0
    for e, tr in win.tracks.items():
        for a, b, v in zip(tr.breakpoints[:-1], tr.breakpoints[1:], tr.values):
            tab.rows.append([e.left_vertex, float(a), float(b), float(v)])
            n_pieces += 1
    rep.tables["environment"] = tab
    rep.sections["environment"] = {"spec": c.env.to_dict(), "spec_hash": c.env.spec_hash(),
                                   "bounds": [win.x_min, win.x_max, win.t_min, win.t_max],
                                   "pieces": n_pieces, "assumption1_compliant": c.env.compliant}
    return rep


def cmd_simulate(cfg: RunConfig, workers: int) -> DiagnosticsReport:
    c = _as(cfg, "simulate")
    times = [float(t) for t in c.param("sample_times")]
    ens = ensemble_x(c.env, c.param("mode"), int(c.param("n_paths")), times, c.master_seed, workers=workers)
    rep = DiagnosticsReport("simulate", c.config_hash(), {"master_seed": c.master_seed})
    pos = Table(["path_id", "time", "position"])
    for i in range(ens.n_paths):
        for j, t in enumerate(ens.sample_times):
            pos.rows.append([i, float(t), int(ens.positions[i, j])])
    rep.tables["positions"] = pos
    summ = Table(["time", "mean", "variance", "variance_se", "variance_over_t"])
    stats_ = []
    for j, t in enumerate(ens.sample_times):
        v = variance_se(ens.positions[:, j])
        m = mean_se(ens.positions[:, j])
        summ.rows.append([float(t), m.value, v.value, v.se, v.value / t])
        stats_.append({"t": float(t), "mean": m, "variance": v})
    rep.tables["summary"] = summ
    rep.sections["simulate"] = {"mode": ens.mode, "n_paths": ens.n_paths, "per_time": stats_,
                                "truncated_paths": int(ens.truncated.sum())}
    rep.checks["walk_not_truncated"] = not bool(ens.truncated.any())
    return rep


def cmd_dual(cfg: RunConfig, workers: int) -> DiagnosticsReport:
    c = _as(cfg, "dual")
    h = float(c.param("horizon"))
    ct = sorted(set(float(t) for t in c.param("clock_times")) | {h})
    ens = dual_ensemble(c.env, c.param("mode"), int(c.param("n_paths")), h, c.master_seed,
                        workers=workers, clock_times=ct)
    rep = DiagnosticsReport("dual", c.config_hash(), {"master_seed": c.master_seed})
    cs = clock_slope(ens)
    rep.sigma2_dual = Estimate(cs.mean, cs.se, cs.n)
    tab = Table(["path_id", "t", "A_t"])
    for i in range(ens.n_paths):
        for t, a in zip(ens.clock_times, ens.clock_samples[i]):
            tab.rows.append([i, float(t), float(a)])
    rep.tables["clock"] = tab
    fin = Table(["path_id", "start", "final", "n_steps"])
    for i in range(ens.n_paths):
        fin.rows.append([i, int(ens.starts[i]), int(ens.final[i]), int(ens.n_steps[i])])
    rep.tables["final"] = fin
    sec = {"mode": ens.mode, "horizon": h, "n_paths": ens.n_paths}
    if ens.n_paths >= 100:
        ks = dual_clt_check(ens)
        sec["ks"] = {"distance": ks.distance, "p_value": ks.pvalue, "sigma2": ks.sigma2, "n": ks.n}
    rep.sections["dual"] = sec
    return rep


def cmd_kernel(cfg: RunConfig, workers: int) -> DiagnosticsReport:
    c = _as(cfg, "kernel")
    spec = c.env
    R = int(c.param("radius"))
    s, x = c.param("source")
    t0, t1 = (float(v) for v in c.param("interval"))
    eps = float(c.param("epsilon"))
    shifts = [(float(a), int(b)) for a, b in c.param("phi_shifts")]
    T = tail_horizon(eps, TAIL_TOL)
    m = diffusive_radius(spec, T)
    xs = [int(x)] + [b for _, b in shifts]
    lo, hi = min(xs) - max(R, m) - 8, max(xs) + max(R, m) + 8
    t_top = max([t1, float(s)] + [a + T for a, _ in shifts]) + 1.0
    env = build_env(spec, lo, hi, min(t0, 0.0) - 1.0, t_top, c.master_seed)
    rep = DiagnosticsReport("kernel", c.config_hash(), {"master_seed": c.master_seed})
    grid = solve_kernel(env, source=(float(s), int(x)), interval=(t0, t1),
                        window=WindowSpec(radius=R, center=int(x)))
    tab = Table(["time", "vertex", "value"])
    for i, t in enumerate(grid.times):
        for j, v in enumerate(grid.vertices):
            tab.rows.append([float(t), int(v), float(grid.values[i, j])])
    rep.tables["kernel"] = tab
    suite = identity_suite(env, n_probes=int(c.param("n_probes")), seed=stage_seed(c.master_seed, STAGE_ENV),
                           span=min(2.0, t1 - t0), radius=R, t0=t0)
    rec = phi_eps(env, eps, shifts=shifts, tail_tol=TAIL_TOL)
    ptab = Table(["t", "x", "phi_eps"])
    for (a, b), v in zip(rec.shifts, rec.values):
        ptab.rows.append([a, b, float(v)])
    rep.tables["phi_eps"] = ptab
    rep.sections["kernel"] = {"grid": grid.summary(), "identities": suite,
                              "phi_eps": {"epsilon": eps, "values": rec.values.tolist(),
                                          "shifts": [list(p) for p in rec.shifts]}}
    tol = float(c.checks.get("identity_tol", 1e-8))
    for k in ("row_sum_vs_deficit", "forward_backward", "chapman_kolmogorov", "monotone_n",
              "k1_closed_form", "shift_covariance"):
        rep.checks[f"kernel_{k}"] = suite[k] < tol
    rep.checks["kernel_nonnegative"] = suite["min_entry"] >= -tol
    rep.checks["phi_eps_positive"] = bool(np.all(rec.values > 0))
    return rep


def cmd_corrector(cfg: RunConfig, workers: int) -> DiagnosticsReport:
    c = _as(cfg, "corrector")
    step, t_max = float(c.param("times_step")), float(c.param("t_max"))
    n_t = int(round(t_max / step))
    if n_t < 1 or not math.isclose(n_t * step, t_max, rel_tol=1e-9):
        raise ConfigError("corrector t_max must be a positive multiple of times_step")
    times = step * np.arange(n_t + 1)
    hw = int(c.param("half_width"))
    env, phi, psi = psi_on_grid(c.env, c.master_seed, times, hw, c.param("epsilons"),
                                float(c.param("coarse")))
    rep = DiagnosticsReport("corrector", c.config_hash(), {"master_seed": c.master_seed})
    tab = Table(["t", "x", "psi", "chi", "phi"])
    for i, t in enumerate(psi.times):
        for j in range(psi.psi.shape[1]):
            xv = psi.x_lo + j
            tab.rows.append([float(t), xv, float(psi.psi[i, j]), float(psi.psi[i, j] - xv),
                             float(psi.phi_rows[i, j])])
    rep.tables["psi"] = tab
    n_list = [float(n) for n in c.param("n_list")]
    sub = sublinearity_report(psi, n_list)
    rep.sublinearity_ratios = sub.to_dict()
    st = Table(["n", "box_ratio", "spatial_ratio", "temporal_ratio"])
    for row in zip(sub.n_list, sub.box_ratio, sub.spatial_ratio, sub.temporal_ratio):
        st.rows.append(list(row))
    rep.tables["sublinearity"] = st
    pde, coc = psi.pde_residual(), psi.cocycle_residual(seed=int(c.master_seed % 2 ** 32))
    grads = psi.gradients
    rep.sections["corrector"] = {"phi": phi.metadata(), "psi": psi.meta, "pde_residual": pde,
                                 "cocycle_residual": coc, "min_gradient": float(grads.min())}
    tol = float(c.checks.get("residual_tol", 1e-6))
    rep.checks["pde_residual"] = pde < tol
    rep.checks["cocycle_residual"] = coc < tol
    rep.checks["gradients_positive"] = bool(np.all(grads > 0))
    return rep


def cmd_diagnose(cfg: RunConfig, workers: int) -> DiagnosticsReport:
    kind = cfg.experiment if cfg.experiment in ("invariance", "remark84") else "invariance"
    return RUNNERS[kind](_as(cfg, kind), workers)


def cmd_counterexample(cfg: RunConfig, workers: int, which: str) -> DiagnosticsReport:
    kind = f"counterexample_{which}"
    return RUNNERS[kind](_as(cfg, kind), workers)


COMMANDS = {"env": cmd_env, "simulate": cmd_simulate, "dual": cmd_dual, "kernel": cmd_kernel,
            "corrector": cmd_corrector, "diagnose": cmd_diagnose}


def _summary_line(rep: DiagnosticsReport, paths) -> str:
    bad = rep.failed_checks
    state = "all checks passed" if not bad else f"failed checks: {', '.join(bad)}"
    if not rep.checks:
        state = "no checks"
    return f"{rep.kind}: wrote {len(paths)} file(s) to {Path(paths[0]).parent if paths else '-'}; {state}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    report = None
    try:
        workers = _threads(args)
        cfg = RunConfig.load(args.config).with_seed(args.seed)
        if args.command == "counterexample":
            report = cmd_counterexample(cfg, workers, args.which)
        else:
            report = COMMANDS[args.command](cfg, workers)
    except CondsimError as exc:
        partial = getattr(exc, "report", None)
        if partial is not None:
            partial.write(args.out, args.format)
        print(f"condsim: {exc}", file=sys.stderr)
        return exc.exit_code
    paths = report.write(args.out, args.format)
    print(_summary_line(report, paths))
    if args.check and not report.passed:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
