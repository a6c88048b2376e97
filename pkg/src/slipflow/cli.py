"""Command-line entry point: basis | lift | simulate | verify | optimize.

Every artifact embeds the config hash and toolkit version; workflows that
promise determinism write byte-identical files on rerun.  Exit codes:
0 success, 1 configuration/validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import control as ctl
from . import diagnostics as diag
from .basis import BasisError, norm_h1, save_basis
from .basis import inner_h as _inner_h
from .config import ConfigError, load_config
from .control import ControlError
from .dynamics import DynamicsError
from .geometry import GeometryError
from .lifting import LiftingError, lift, project_compatible, trace_norm_series

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _meta(cfg) -> str:
    return f"config_hash={cfg.config_hash} version={__version__}"


def _json_dump(path, payload, cfg):
    payload = dict(payload)
    payload["config_hash"] = cfg.config_hash
    payload["version"] = __version__
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def cmd_basis(cfg, out: Path, args) -> int:
    basis = cfg.basis()
    save_basis(out / "basis.npz", basis, meta={"config_hash": cfg.config_hash})
    with open(out / "eigenvalues.csv", "w") as fh:
        fh.write(f"# {_meta(cfg)}\n")
        fh.write("index,eigenvalue,wavenumber,family,shell\n")
        for i in range(basis.size):
            fh.write(
                f"{i},{basis.eigenvalues[i]:.17g},{int(basis.mode_j[i])},"
                f"{int(basis.family[i])},{int(basis.shell_index[i])}\n"
            )
    # residual report over a fixed probe set
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        v = basis.field(rng.standard_normal(basis.size))
        from .basis import inner_h, inner_v

        for i in range(basis.size):
            r = abs(
                inner_v(v, basis.fields[i])
                - basis.eigenvalues[i] * inner_h(v, basis.fields[i])
            ) / basis.eigenvalues[i]
            worst = max(worst, r)
    ortho = 0.0
    for i in range(basis.size):
        for j in range(i, basis.size):
            g = _inner_h(basis.fields[i], basis.fields[j])
            ortho = max(ortho, abs(g - (1.0 if i == j else 0.0)))
    _json_dump(
        out / "basis_report.json",
        {
            "size": basis.size,
            "eigenvalue_min": float(basis.eigenvalues[0]),
            "eigenvalue_max": float(basis.eigenvalues[-1]),
            "max_weak_residual": worst,
            "max_orthonormality_defect": ortho,
        },
        cfg,
    )
    return EXIT_OK


def cmd_lift(cfg, out: Path, args) -> int:
    grid = cfg.grid()
    cache = cfg.lifting_cache(grid)
    ctrl = cfg.control()
    if ctrl is None:
        ctrl = cfg.param_map().control(np.ones(cfg.param_map().dim))
    ctrl = project_compatible(ctrl)
    lifted = lift(ctrl, cache)
    res = lifted.boundary_residuals()
    tn = trace_norm_series(ctrl, ctrl.t_grid)
    # lifting-estimate surrogate: lifted size against the trace norm
    ratios = []
    for ti, t in enumerate(ctrl.t_grid):
        f = lifted.field_at(float(t))
        df = lifted.dt_field_at(float(t))
        if tn[ti] > 1e-14:
            num = norm_h1(f) + np.sqrt(max(_inner_h(df, df), 0.0))
            ratios.append(num / tn[ti])
    with open(out / "trace_norms.csv", "w") as fh:
        fh.write(f"# {_meta(cfg)}\n")
        fh.write("time,trace_norm\n")
        for t, v in zip(ctrl.t_grid, tn):
            fh.write(f"{t:.17g},{v:.17g}\n")
    _json_dump(
        out / "lift_report.json",
        {
            "normal_residual": res["normal"],
            "tangential_residual": res["tangential"],
            "divergence_residual": res["divergence"],
            "bound_ratio_max": max(ratios) if ratios else 0.0,
        },
        cfg,
    )
    ctrl.save(out / "control.json")
    return EXIT_OK


def cmd_simulate(cfg, out: Path, args) -> int:
    basis = cfg.basis()
    cache = cfg.lifting_cache(basis.grid)
    noise = cfg.noise()
    sim = cfg.simulator(basis, cache, noise)
    ctrl = cfg.control()
    if ctrl is not None:
        ctrl = project_compatible(ctrl)
    u0 = cfg.initial_coeffs()
    paths = args.paths or cfg.data["monte_carlo"]["paths"]
    seeds = cfg.seed_bank(paths, args.seed)
    noise_on = cfg.data["simulate"]["noise_on"]
    trajs = sim.run_many(
        seeds,
        ctrl=ctrl,
        u0=u0,
        noise_on=noise_on,
        store_beta=cfg.data["simulate"]["store_beta"],
        threads=args.threads,
    )
    save_n = min(len(trajs), cfg.data["simulate"]["save_paths"])
    for i in range(save_n):
        trajs[i].export_csv(out / f"traj_{i:03d}.csv", meta=_meta(cfg))
    good = [tr for tr in trajs if not tr.blown_up]
    blow = len(trajs) - len(good)
    if not good:
        print("all paths blew up", file=sys.stderr)
        return EXIT_NUMERICAL
    final_sq = np.array([tr.u_sq[-1] for tr in good])
    sup_sq = np.array([np.max(tr.u_sq) for tr in good])
    rng = np.random.default_rng(0)
    boots = np.array(
        [final_sq[rng.integers(0, final_sq.size, final_sq.size)].mean() for _ in range(200)]
    )
    with open(out / "summary.csv", "w") as fh:
        fh.write(f"# {_meta(cfg)}\n")
        fh.write("seed,final_u_sq,sup_u_sq,blown_up\n")
        for tr in trajs:
            fh.write(
                f"{tr.seed},{tr.u_sq[-1]:.17g},{np.nanmax(tr.u_sq):.17g},{int(tr.blown_up)}\n"
            )
    _json_dump(
        out / "summary.json",
        {
            "paths": len(trajs),
            "blowups": blow,
            "mean_final_u_sq": float(final_sq.mean()),
            "mean_sup_u_sq": float(sup_sq.mean()),
            "ci_final_u_sq": [
                float(np.quantile(boots, 0.025)),
                float(np.quantile(boots, 0.975)),
            ],
            "noise_on": bool(noise_on),
        },
        cfg,
    )
    return EXIT_OK


def cmd_verify(cfg, out: Path, args) -> int:
    basis = cfg.basis()
    cache = cfg.lifting_cache(basis.grid)
    noise = cfg.noise()
    sim = cfg.simulator(basis, cache, noise)
    ctrl = cfg.control()
    if ctrl is not None:
        ctrl = project_compatible(ctrl)
    u0 = cfg.initial_coeffs()
    c0 = cfg.data["damping_rate"]
    nu = cfg.domain_spec().viscosity

    paths = args.paths or cfg.data["verify"]["paths"] or cfg.data["monte_carlo"]["paths"]
    seeds = cfg.seed_bank(paths, args.seed)
    trajs = sim.run_many(seeds, ctrl=ctrl, u0=u0, threads=args.threads)

    rep2 = diag.certify_second_moment(trajs, ctrl, c0, nu)
    rep4 = diag.certify_fourth_moment(trajs, ctrl, c0, nu, sim.ops)
    repw = diag.certify_wellposed_cost(trajs, ctrl, c0)

    n_stab = min(cfg.data["verify"]["stability_paths"], paths)
    seeds_s = cfg.seed_bank(n_stab, args.seed)
    if ctrl is None:
        pmap = cfg.param_map()
        ctrl_a = ctl.project_admissible(pmap.control(0.2 * np.ones(pmap.dim)), cfg.admissible_spec())
    else:
        ctrl_a = ctrl
    ctrl_b = ctrl_a.copy()
    ctrl_b.gamma *= cfg.data["verify"]["stability_scale"]
    tr_a = sim.run_many(seeds_s, ctrl=ctrl_a, u0=u0, store_beta=True, threads=args.threads)
    tr_b = sim.run_many(seeds_s, ctrl=ctrl_b, u0=u0, store_beta=True, threads=args.threads)
    reps = diag.certify_stability(
        tr_a, ctrl_a, tr_b, ctrl_b, sim.ops, c0, nu, c3=2.0 * noise.lipschitz_k
    )
    damping = diag.empirical_damping_rate(tr_a[: min(5, len(tr_a))], ctrl_a, sim.ops, nu)

    reports = {
        "second_moment": rep2,
        "fourth_moment": rep4,
        "wellposed_cost": repw,
        "stability": reps,
    }
    all_finite = True
    for name, rep in reports.items():
        rep.to_json(out / f"report_{name}.json", extra={"config_hash": cfg.config_hash})
        all_finite &= rep.finite
    _json_dump(
        out / "verify_summary.json",
        {
            "constants": {k: r.fitted_c for k, r in reports.items()},
            "all_finite": bool(all_finite),
            "paths": paths,
            "holder_chain_exact": repw.details["holds_exactly"],
            "empirical_damping_rate": damping,
        },
        cfg,
    )
    return EXIT_OK if all_finite else EXIT_NUMERICAL


def cmd_optimize(cfg, out: Path, args) -> int:
    basis = cfg.basis()
    cache = cfg.lifting_cache(basis.grid)
    noise = cfg.noise()
    sim = cfg.simulator(basis, cache, noise)
    aspec = cfg.admissible_spec()
    pmap = cfg.param_map()
    u0 = cfg.initial_coeffs()
    opt = cfg.data["optimize"]

    theta_star = np.asarray(opt["theta_star"], float)
    ctrl_star = ctl.project_admissible(pmap.control(theta_star), aspec)
    target = ctl.make_target(ctrl_star, sim, u0=u0, meta={"config_hash": cfg.config_hash})
    target.save(out / "target.npz")

    theta0 = np.asarray(opt["theta0"] if opt["theta0"] is not None else np.zeros(pmap.dim), float)
    paths = args.paths or opt["paths"]
    seeds = cfg.seed_bank(paths, args.seed)
    best, hist = ctl.optimize(
        theta0,
        pmap,
        aspec,
        target,
        sim,
        seeds,
        budget=opt["budget"],
        method=opt["method"],
        u0=u0,
        noise_on=opt["noise_on"],
        step0=opt["step0"],
        step_min=opt["step_min"],
        threads=args.threads,
        c0=cfg.data["damping_rate"],
    )
    hist.to_json(
        out / "history.json",
        extra={
            "config_hash": cfg.config_hash,
            "version": __version__,
            "theta_star": [float(v) for v in pmap.read(ctrl_star)],
        },
    )
    hist.to_csv(out / "history.csv", meta=_meta(cfg))
    best.save(out / "best_control.json")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="slipflow",
        description="stochastic channel-flow toolkit with slip-wall boundary control",
    )
    parser.add_argument("command", choices=["basis", "lift", "simulate", "verify", "optimize"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory (default from config)")
    parser.add_argument("--seed", type=int, default=None, help="seed bank start override")
    parser.add_argument("--paths", type=int, default=None, help="path count override")
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("SLIPFLOW_THREADS", "1")),
        help="path-level worker threads (default from SLIPFLOW_THREADS)",
    )
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out or cfg.data["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)

    handlers = {
        "basis": cmd_basis,
        "lift": cmd_lift,
        "simulate": cmd_simulate,
        "verify": cmd_verify,
        "optimize": cmd_optimize,
    }
    try:
        return handlers[args.command](cfg, out, args)
    except (ConfigError, GeometryError, ControlError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BasisError, LiftingError, DynamicsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
