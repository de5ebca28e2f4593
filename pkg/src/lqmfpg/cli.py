"""Command-line front end: ``lqmfpg solve|pg|compare-n --config <path>``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from .analytic import optimal_gains
from .errors import ConfigError, LqmfpgError, ModelValidationError, StepError
from .finite_agent import (
    build_stacked,
    diagonal_deviation,
    eval_social_cost,
    heterogeneity_sweep,
    phi_mkv,
    solve_n_agent_optimal,
)
from .model import validate_model
from .simulators import PopulationConfig
from .svgplot import Series, line_chart
from .zo_pg import GD, Adam, PopEvaluator, ZoConfig, pg_run

log = logging.getLogger("lqmfpg")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CSV_VERSION = "lqmfpg-trace v1"


def write_atomic(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def csv_text(header: list, rows: list, cfg, extra: str = "") -> str:
    lines = [f"# {CSV_VERSION}; std=sample(n-1); config_sha256={cfg.sha256()}{extra}", ",".join(header)]
    lines += [",".join(_num(v) if not isinstance(v, str) else v for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _svg_meta(cfg, what: str) -> str:
    return f"lqmfpg {what}; config_sha256={cfg.sha256()}"


class Context:
    def __init__(self, cfg, out_dir, jobs):
        self.cfg = cfg
        self.out = out_dir
        self.jobs = max(1, jobs)
        self.formats = set(cfg.output.formats)
        self.written = []

    def write(self, name: str, text: str, kind: str):
        if kind not in self.formats:
            return
        path = os.path.join(self.out, name)
        write_atomic(path, text)
        self.written.append(path)

    def map(self, fn, items):
        items = list(items)
        if self.jobs == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(fn, items))


def _load_model(cfg):
    model = cfg.build_model()
    report = validate_model(model)
    return model, report


def _entry_names(prefix, shape):
    return [f"{prefix}_{i}_{j}" for i in range(shape[0]) for j in range(shape[1])]


# ---------------------------------------------------------------- solve


def cmd_solve(ctx: Context, model, report) -> int:
    cfg = ctx.cfg
    theta, c_star = optimal_gains(model)
    lines = ["lqmfpg solution report", f"config_sha256 = {cfg.sha256()}", ""]
    lines += report.lines() + [""]
    lines.append(f"K* = {cfgmod.format_matrix(theta.K)}")
    lines.append(f"L* = {cfgmod.format_matrix(theta.L)}")
    lines.append(f"C* = {c_star!r}")
    if cfg.population is not None:
        pop = cfg.population
        for N in pop.N:
            stacked = build_stacked(model, PopulationConfig.draw(model, N, pop.h_tilde, pop.variation_seed))
            phi, c_n = solve_n_agent_optimal(stacked, model.gamma)
            transplant = phi_mkv(model, N, theta)
            lines.append("")
            lines.append(f"N = {N} (h_tilde = {pop.h_tilde})")
            lines.append(f"  C*,N = {c_n!r}")
            lines.append(f"  J^N(Phi_MKV) = {eval_social_cost(stacked, transplant, model.gamma)!r}")
            lines.append(f"  ||Phi*,N - Phi_MKV||_F = {np.linalg.norm(phi.Phi - transplant.Phi):.6g}")
            lines.append(f"  Phi*,N = {cfgmod.format_matrix(phi.Phi)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    path = os.path.join(ctx.out, "solve.txt")
    write_atomic(path, text)
    ctx.written.append(path)
    return EXIT_OK


# ---------------------------------------------------------------- pg


def _trace_rows(trace, pop_ns):
    rows = []
    for r in trace.records:
        row = [r.k, r.cost, r.rel_error]
        for N in pop_ns:
            row += [r.pop_costs.get(N), r.pop_rel_errors.get(N)]
        row += list(r.K.ravel()) + list(r.L.ravel())
        rows.append(row)
    return rows


def _trace_header(pop_ns, shape):
    head = ["k", "C_mf", "rel_err_mf"]
    for N in pop_ns:
        head += [f"C_pop{N}", f"rel_err_pop{N}"]
    return head + _entry_names("K", shape) + _entry_names("L", shape)


def _aggregate(all_rows, header):
    """Mean and sample std per column over runs, on the iterations all runs share."""
    n = min(len(rows) for rows in all_rows)
    out = []
    for i in range(n):
        row = [all_rows[0][i][0]]
        for c in range(1, len(header)):
            vals = [rows[i][c] for rows in all_rows]
            if any(v is None for v in vals):
                row += [None, None]
                continue
            arr = np.array(vals, dtype=float)
            row += [arr.mean(), arr.std(ddof=1) if arr.size > 1 else 0.0]
        out.append(row)
    head = ["k"]
    for h in header[1:]:
        head += [f"{h}_mean", f"{h}_std"]
    return head, out


def _column(head, rows, name):
    c = head.index(name)
    xs, ys, lo, hi = [], [], [], []
    for row in rows:
        if row[c] is None:
            continue
        m, s = row[c], row[c + 1]
        xs.append(row[0])
        ys.append(m)
        lo.append(m - s)
        hi.append(m + s)
    return xs, ys, lo, hi


def _pg_plots(ctx, prefix, head, rows, pop_ns, shape, theta_star, c_star, label):
    cfg = ctx.cfg
    ks = [r[0] for r in rows]
    cost = [Series(f"C_mf ({label})", *_column(head, rows, "C_mf_mean"))]
    rel = [Series("MF", *_column(head, rows, "rel_err_mf_mean"))]
    for N in pop_ns:
        cost.append(Series(f"C^{N}", *_column(head, rows, f"C_pop{N}_mean")))
        rel.append(Series(f"N = {N}", *_column(head, rows, f"rel_err_pop{N}_mean")))
    cost.append(Series("C*", [ks[0], ks[-1]], [c_star, c_star], dashed=True))
    ctx.write(f"{prefix}_cost.svg", line_chart(cost, f"Cost ({label})", "iteration", "cost",
                                               metadata=_svg_meta(cfg, prefix)), "svg")
    ctx.write(f"{prefix}_relerr.svg", line_chart(rel, f"Relative error ({label})", "iteration",
                                                 "(C - C*) / C*", log_y=cfg.output.log_scale,
                                                 metadata=_svg_meta(cfg, prefix)), "svg")
    for blk, ref in (("K", theta_star.K), ("L", theta_star.L)):
        series = []
        for name, val in zip(_entry_names(blk, shape), ref.ravel()):
            series.append(Series(name, *_column(head, rows, f"{name}_mean")))
            series.append(Series(f"{name}*", [ks[0], ks[-1]], [val, val], dashed=True))
        ctx.write(f"{prefix}_{blk}.svg", line_chart(series, f"{blk} iterates ({label})", "iteration",
                                                    blk, metadata=_svg_meta(cfg, prefix)), "svg")


def _optimizer(lr):
    if lr.optimizer == "gd":
        return GD(lr.eta)
    return Adam(lr.eta, lr.beta1, lr.beta2, lr.adam_eps)


def cmd_pg(ctx: Context, model, report) -> int:
    cfg = ctx.cfg
    lr = cfg.learn
    theta_star, c_star = optimal_gains(model)
    theta0 = cfg.theta0(model)
    pop = cfg.population
    pop_ns = list(pop.N) if pop is not None else []
    popcfgs = {N: PopulationConfig.draw(model, N, pop.h_tilde, pop.variation_seed) for N in pop_ns}
    if lr.method == "pop" and not pop_ns:
        raise ConfigError("learn.method = pop needs a [population] section with N")
    sim_ns = pop_ns if lr.method == "pop" else [None]
    shape = theta0.K.shape
    header = _trace_header(pop_ns, shape)
    status = EXIT_OK

    for sim_n in sim_ns:
        if sim_n is None:
            prefix, label, zo = f"pg_{lr.method}", lr.method, None
            if lr.method == "mkv":
                zo = ZoConfig(lr.M, lr.T, lr.tau, lr.smoothing_dim or None, "mkv",
                              perturbation_policy=lr.perturbation_policy)
        else:
            prefix, label = f"pg_pop_N{sim_n}", f"pop N={sim_n}"
            zo = ZoConfig(lr.M, lr.T, lr.tau, lr.smoothing_dim or None, "pop", popcfgs[sim_n],
                          perturbation_policy=lr.perturbation_policy)

        def one(seed, zo=zo):
            evals = [PopEvaluator(popcfgs[N]) for N in pop_ns]
            try:
                tr = pg_run(model, theta0, lr.method, _optimizer(lr), lr.k_max, zo, seed=seed,
                            eps_stop=lr.eps_stop, c_star=c_star, eval_stride=lr.eval_stride,
                            pop_evals=evals)
                return seed, tr, None
            except StepError as exc:
                return seed, exc.trace, exc

        results = ctx.map(one, cfg.run_seeds())
        all_rows = []
        for r, (seed, tr, err) in enumerate(results):
            rows = _trace_rows(tr, pop_ns)
            all_rows.append(rows)
            ctx.write(f"{prefix}_run{r}.csv", csv_text(header, rows, cfg, f"; seed={seed}"), "csv")
            if err is not None:
                log.error("run %d (seed %d) stopped: %s", r, seed, err)
                status = EXIT_RUNTIME
        head, agg = _aggregate(all_rows, header)
        ctx.write(f"{prefix}_summary.csv", csv_text(head, agg, cfg, f"; runs={len(results)}"), "csv")
        if agg:
            _pg_plots(ctx, prefix, head, agg, pop_ns, shape, theta_star, c_star, label)
        last = [rows[-1] for rows in all_rows]
        for r, row in enumerate(last):
            print(f"{label} run {r}: k={row[0]} C={_num(row[1])} rel_err={_num(row[2])}")
    return status


# ---------------------------------------------------------------- compare-n


def cmd_compare_n(ctx: Context, model, report) -> int:
    cfg = ctx.cfg
    pop = cfg.population
    if pop is None:
        raise ConfigError("compare-n needs a [population] section")
    theta_star, c_star = optimal_gains(model)

    def per_n(N):
        stacked = build_stacked(model, PopulationConfig.draw(model, N, pop.h_tilde, pop.variation_seed))
        phi, c_n = solve_n_agent_optimal(stacked, model.gamma)
        transplant = phi_mkv(model, N, theta_star)
        return [N, diagonal_deviation(phi, theta_star.K, N), diagonal_deviation(transplant, theta_star.K, N),
                c_n, eval_social_cost(stacked, transplant, model.gamma), c_star]

    rows = ctx.map(per_n, pop.compare_N)
    head = ["N", "diag_dev_opt_N", "diag_dev_mkv", "J_opt_N", "J_mkv", "C_star"]
    ctx.write("compare_n.csv", csv_text(head, rows, cfg, f"; h_tilde={pop.h_tilde!r}"), "csv")
    Ns = [r[0] for r in rows]
    meta = _svg_meta(cfg, "compare-n")
    ctx.write("compare_n_diag.svg", line_chart(
        [Series("Phi*,N", Ns, [r[1] for r in rows]), Series("Phi*,N_MKV", Ns, [r[2] for r in rows])],
        "max diagonal deviation from -K*", "N", "max |Phi_ii + K*|", metadata=meta), "svg")
    ctx.write("compare_n_cost.svg", line_chart(
        [Series("J^N(Phi*,N)", Ns, [r[3] for r in rows]), Series("J^N(Phi*,N_MKV)", Ns, [r[4] for r in rows]),
         Series("C*", [Ns[0], Ns[-1]], [c_star, c_star], dashed=True)],
        "social cost", "N", "cost", metadata=meta), "svg")

    sweep = ctx.map(lambda h: heterogeneity_sweep(model, pop.sweep_N, [h], pop.sweep_seeds, theta_star)[0],
                    pop.h_grid)
    srows = [[s.h_tilde, s.mean, s.std, float(len(s.values))] for s in sweep]
    ctx.write("hetero_sweep.csv", csv_text(["h_tilde", "abs_diff_mean", "abs_diff_std", "seeds"], srows, cfg,
                                           f"; N={pop.sweep_N}"), "csv")
    hs = [s.h_tilde for s in sweep]
    ctx.write("hetero_sweep.svg", line_chart(
        [Series("|J(Phi*,N) - J(Phi_MKV)|", hs, [s.mean for s in sweep],
                [s.mean - s.std for s in sweep], [s.mean + s.std for s in sweep])],
        f"heterogeneity sweep (N = {pop.sweep_N})", "h_tilde", "cost difference", metadata=meta), "svg")
    for r in rows:
        print(f"N={r[0]}: J_opt={r[3]!r} J_mkv={r[4]!r} C*={r[5]!r}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "pg": cmd_pg, "compare-n": cmd_compare_n}


def build_parser():
    p = argparse.ArgumentParser(prog="lqmfpg", description="Linear-quadratic mean-field control solvers")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--out", help="output directory (default: [output] directory)")
    p.add_argument("--seed", type=int, help="master seed override (unsigned 64-bit)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs/cells (LQMFPG_JOBS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    jobs = args.jobs
    env_jobs = os.environ.get("LQMFPG_JOBS")
    try:
        if env_jobs:
            try:
                jobs = int(env_jobs)
            except ValueError as exc:
                raise ConfigError(f"LQMFPG_JOBS must be an integer, got {env_jobs!r}") from exc
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        model, report = _load_model(cfg)
        if not report.usable:
            sys.stderr.write(str(report) + "\n")
            sys.stderr.write("model rejected: cost matrices must be positive semi-definite\n")
            return EXIT_CONFIG
        for w in report.warnings:  # noise degeneracy is reported, not fatal
            log.warning("[WARN] %s: %s", w.name, w.detail)
        ctx = Context(cfg, args.out or cfg.output.directory, jobs)
        return COMMANDS[args.command](ctx, model, report)
    except (ConfigError, ModelValidationError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except LqmfpgError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
