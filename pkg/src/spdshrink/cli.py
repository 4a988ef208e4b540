"""Command-line interface.

Subcommands::

    spdshrink estimate --input FILE --output DIR [--known-variance] [--config FILE]
    spdshrink groupdiff --group1 FILE --group2 FILE --output DIR
                        [--top-fraction F] [--smooth W] [--grid HxW] [--truth FILE]
                        [--config FILE]
    spdshrink simulate-risk --config FILE [--output DIR] [--seed S]
    spdshrink simulate-groups --config FILE [--output DIR] [--seed S]

Exit codes: 0 success, 2 input or configuration error, 3 results written
but flagged (optimizer or iteration did not converge).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SpdShrinkError
from .formats import RunConfig, load_config, read_tensor_field, write_csv, write_tensor_field
from .geometry import q_from_dim
from .shrinkage import (
    GRAD_TOL,
    MAX_ITERS,
    Hyperparams,
    estimate_fm_known_var,
    estimate_full,
    site_stats,
)
from .simulation import (
    ESTIMATORS,
    GroupExperimentConfig,
    RiskExperimentConfig,
    f1_score,
    parallel_map,
    run_group_experiment,
    run_risk_experiment,
)
from .tweedie import (
    GroupData,
    TweedieConfig,
    hotelling_t2,
    mom_noncentrality,
    select_top,
    smooth_map,
    to_f_stats,
    tweedie_iterate,
)

log = logging.getLogger("spdshrink")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FLAGGED = 3


class _InputError(Exception):
    pass


def _config(path: str | None, command: str) -> RunConfig:
    if path is None:
        return RunConfig(command=command)
    return load_config(path, command)


def _outdir(path: str | None) -> Path:
    if not path:
        raise _InputError("no output directory given (use --output or the 'output' key)")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tweedie_cfg(cfg: RunConfig, top_fraction: float | None, default_top: float) -> TweedieConfig:
    return TweedieConfig(
        degree=cfg.get("degree", 5),
        bins=cfg.get("bins"),
        max_iters=cfg.get("max_iters", 50),
        tol=cfg.get("tol", 1e-3),
        top_fraction=top_fraction if top_fraction is not None else cfg.get("top_fraction", default_top),
    )


def _grid(value, p: int | None = None) -> tuple[int, int]:
    if value is None:
        return None
    if len(value) != 2 or min(value) < 1:
        raise _InputError(f"grid must be HxW, got {value}")
    if p is not None and value[0] * value[1] != p:
        raise _InputError(f"grid {value[0]}x{value[1]} does not match {p} sites")
    return int(value[0]), int(value[1])


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def cli_estimate(args: argparse.Namespace) -> int:
    cfg = _config(args.config, "estimate")
    data = read_tensor_field(args.input, validation=cfg.get("validation", "reject"))
    out = _outdir(args.output)
    stats = site_stats(data)
    known = args.known_variance or cfg.get("known_variance", False)
    opts = dict(grad_tol=cfg.get("grad_tol", GRAD_TOL), max_iters=cfg.get("max_iters", MAX_ITERS))
    if known:
        res = estimate_fm_known_var(stats, warn=False, **opts)
    else:
        res = estimate_full(stats, warn=False, **opts)
    write_tensor_field(out / "means.spdf", res.means)
    write_tensor_field(out / "covs.spdf", res.covs)
    h = res.hyper
    rows: list[tuple] = [
        ("estimator", "SURE-FM" if known else "SURE.Full"),
        ("p", stats.p),
        ("n", stats.n),
        ("lam", h.lam),
        ("nu", h.nu if h.nu is not None else float("nan")),
        ("sure", res.sure_value),
        ("sure_init", res.sure_init),
        ("iterations", res.iterations),
        ("converged", res.converged),
    ]
    rows += [(f"mu_{k}", v) for k, v in enumerate(h.mu_vec)]
    if h.psi is not None:
        psi = np.asarray(h.psi)
        rows += [(f"psi_{i}_{j}", psi[i, j]) for i in range(psi.shape[0]) for j in range(psi.shape[1])]
    write_csv(out / "summary.csv", ("name", "value"), rows)
    if not res.converged:
        print("warning: SURE minimization did not converge; results flagged", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# groupdiff
# ---------------------------------------------------------------------------


def _read_truth(path: str, p: int) -> np.ndarray:
    try:
        vals = np.array(Path(path).read_text().split(), dtype=int)
    except (OSError, ValueError) as exc:
        raise _InputError(f"cannot read truth mask {path}: {exc}") from exc
    if vals.size != p:
        raise _InputError(f"truth mask has {vals.size} entries, expected {p}")
    return vals.astype(bool)


def cli_groupdiff(args: argparse.Namespace) -> int:
    cfg = _config(args.config, "groupdiff")
    validation = cfg.get("validation", "reject")
    g1 = read_tensor_field(args.group1, validation=validation)
    g2 = read_tensor_field(args.group2, validation=validation)
    data = GroupData(group1=g1, group2=g2)
    p = g1.shape[0]
    grid = _grid(args.grid if args.grid is not None else cfg.get("grid"), p)
    window = args.smooth if args.smooth is not None else cfg.get("smooth", 1)
    if window < 1:
        raise _InputError("smoothing window must be at least 1")
    truth = _read_truth(args.truth, p) if args.truth else None
    out = _outdir(args.output)

    tcfg = _tweedie_cfg(cfg, args.top_fraction, 0.01)
    t2, _ = hotelling_t2(data)
    f = to_f_stats(t2, data.n_x, data.n_y, data.q)
    nmap = tweedie_iterate(f, tcfg)
    write_csv(
        out / "sites.csv",
        ("site", "t2", "z", "lambda_mom", "lambda_tweedie", "selected"),
        zip(range(p), t2, f.z, nmap.lambda_mom, nmap.lambda_tweedie, nmap.selection),
    )
    summary: list[tuple] = [
        ("p", p),
        ("n1", data.n_x),
        ("n2", data.n_y),
        ("dof1", f.dof1),
        ("dof2", f.dof2),
        ("iterations", nmap.iterations),
        ("converged", nmap.converged),
        ("selected", int(nmap.selection.sum())),
        ("flagged", int(np.sum(nmap.flagged))),
    ]
    if truth is not None:
        mom_sel = select_top(mom_noncentrality(f), tcfg.top_fraction)
        summary += [
            ("f1_tweedie", f1_score(nmap.selection, truth)),
            ("f1_mom", f1_score(mom_sel, truth)),
        ]
    write_csv(out / "summary.csv", ("name", "value"), summary)
    if grid is not None:
        mom = smooth_map(nmap.lambda_mom.reshape(grid), window)
        tw = smooth_map(nmap.lambda_tweedie.reshape(grid), window)
        rr, cc = np.indices(grid)
        write_csv(
            out / "map.csv",
            ("row", "col", "lambda_mom", "lambda_tweedie"),
            zip(rr.ravel(), cc.ravel(), mom.ravel(), tw.ravel()),
        )
    if not nmap.converged:
        print("warning: Tweedie iteration did not converge; results flagged", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulations
# ---------------------------------------------------------------------------


def risk_config(cfg: RunConfig, seed: int | None = None) -> RiskExperimentConfig:
    dim = cfg.get("dim", 3)
    q = q_from_dim(dim)
    prior = Hyperparams(
        lam=cfg.get("lam", 10.0), mu=np.eye(dim), psi=np.eye(q), nu=cfg.get("nu", 15.0)
    )
    return RiskExperimentConfig(
        p_grid=cfg.get("p_grid", (50, 100, 200, 500)),
        n=cfg.get("n", 10),
        reps=cfg.get("reps", 200),
        prior=prior,
        estimators=cfg.get("estimators", ESTIMATORS),
        seed=seed if seed is not None else cfg.get("seed", 0),
    )


def group_config(cfg: RunConfig, seed: int | None = None) -> GroupExperimentConfig:
    sigma = cfg.get("sigma_range", (0.3, 0.8))
    if len(sigma) != 2:
        raise _InputError("sigma_range needs two values")
    return GroupExperimentConfig(
        grid=_grid(cfg.get("grid", (20, 20))),
        n1=cfg.get("n1", 30),
        n2=cfg.get("n2", 30),
        sigma_range=(float(sigma[0]), float(sigma[1])),
        seed=seed if seed is not None else cfg.get("seed", 0),
        tweedie=_tweedie_cfg(cfg, None, 0.25),
    )


def cli_simulate_risk(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "simulate-risk")
    exp = risk_config(cfg, args.seed)
    out = _outdir(args.output or cfg.get("output"))
    table = run_risk_experiment(exp)
    write_csv(
        out / "risk.csv",
        ("estimator", "p", "mean_loss", "se", "failures", "iterations_max"),
        ((r.estimator, r.p, r.mean_loss, r.se, r.failures, r.iterations_max) for r in table.rows),
    )
    write_csv(
        out / "plot.csv",
        ("p",) + tuple(exp.estimators),
        ((p,) + tuple(table.row(e, p).mean_loss for e in exp.estimators) for p in exp.p_grid),
    )
    for r in table.rows:
        log.info("%s p=%d: %.3fs", r.estimator, r.p, r.runtime)
    if any(r.failures for r in table.rows):
        print("warning: some replications failed; see risk.csv", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def cli_simulate_groups(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, "simulate-groups")
    exp = group_config(cfg, args.seed)
    reps = cfg.get("reps", 50)
    if reps < 1:
        raise _InputError("reps must be at least 1")
    window = cfg.get("smooth", 1)
    if window < 1:
        raise _InputError("smoothing window must be at least 1")
    out = _outdir(args.output or cfg.get("output"))
    results = parallel_map(lambda r: run_group_experiment(exp, r), range(reps))
    fields = (
        "f1_tweedie", "f1_mom", "mse_tweedie", "mse_mom",
        "mse_tweedie_changed", "mse_mom_changed", "iterations", "converged",
    )
    write_csv(
        out / "metrics.csv",
        ("rep",) + fields,
        ((r,) + tuple(getattr(m, k) for k in fields) for r, (_, m) in enumerate(results)),
    )
    metrics = [m for _, m in results]
    region = np.asarray(exp.changed_region, dtype=bool)
    summary = [
        ("reps", reps),
        ("f1_tweedie_ge_mom", float(np.mean([m.f1_tweedie >= m.f1_mom for m in metrics]))),
        ("mse_tweedie_changed", float(np.mean([m.mse_tweedie_changed for m in metrics]))),
        ("mse_mom_changed", float(np.mean([m.mse_mom_changed for m in metrics]))),
        ("converged", float(np.mean([m.converged for m in metrics]))),
    ]
    write_csv(out / "summary.csv", ("name", "value"), summary)
    nmap = results[0][0]
    grid = tuple(exp.grid)
    mom = smooth_map(nmap.lambda_mom.reshape(grid), window)
    tw = smooth_map(nmap.lambda_tweedie.reshape(grid), window)
    rr, cc = np.indices(grid)
    write_csv(
        out / "plot.csv",
        ("row", "col", "changed", "lambda_mom", "lambda_tweedie"),
        zip(rr.ravel(), cc.ravel(), region.ravel(), mom.ravel(), tw.ravel()),
    )
    if not all(m.converged for m in metrics):
        print("warning: Tweedie iteration did not converge in some replications", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spdshrink", description="SURE shrinkage for SPD-valued data")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="shrinkage estimates of per-site means and covariances")
    est.add_argument("--input", required=True, help="tensor-field file with p sites x n observations")
    est.add_argument("--output", required=True, help="output directory")
    est.add_argument("--known-variance", action="store_true", help="shrink means only, with plug-in variances")
    est.add_argument("--config", help="key = value settings file")
    est.set_defaults(func=cli_estimate)

    grp = sub.add_parser("groupdiff", help="per-site two-group differences with Tweedie adjustment")
    grp.add_argument("--group1", required=True)
    grp.add_argument("--group2", required=True)
    grp.add_argument("--output", required=True)
    grp.add_argument("--top-fraction", type=float, help="fraction of sites to select")
    grp.add_argument("--smooth", type=int, help="moving-average window for map output")
    grp.add_argument("--grid", type=lambda s: tuple(int(v) for v in s.lower().split("x")),
                     help="image dimensions HxW; enables map output")
    grp.add_argument("--truth", help="whitespace-separated 0/1 mask of truly changed sites")
    grp.add_argument("--config")
    grp.set_defaults(func=cli_groupdiff)

    for name, func in (("simulate-risk", cli_simulate_risk), ("simulate-groups", cli_simulate_groups)):
        sim = sub.add_parser(name)
        sim.add_argument("--config", required=True)
        sim.add_argument("--output", help="output directory (overrides the config)")
        sim.add_argument("--seed", type=int, help="seed (overrides the config)")
        sim.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (_InputError, SpdShrinkError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
