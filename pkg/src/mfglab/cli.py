"""Reproducible experiment runner.

Subcommands:
    train          parse a config, train, write convergence log + checkpoints
    trajectories   dump forward/backward characteristics of a checkpoint
    fv-check       grid re-evaluation of a trained control vs the sampled objective
    evaluate       LossBreakdown of a checkpoint on a fresh validation batch

Configs are INI-style key/value files with sections; unknown sections or
keys are hard errors (silent typos corrupt experiments).  Every value has a
problem-dependent default, so a minimal config is just

    [run]
    problem = ot
    d = 2

All randomness flows from the single seed through named substreams.  Every
output file starts with a header line carrying the seed and a hash of the
resolved config.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .fv_check import Grid2D, fv_objective
from .objective import LossBreakdown, draw_batch, evaluate
from .optim import TrainSchedule, saa_train
from .potential import load_checkpoint, save_checkpoint
from .problems import ProblemSpec, crowd_instance, ot_instance
from .seeding import substream_seed
from .trajectories import (
    IntegratorConfig,
    integrate_backward_batch,
    integrate_batch,
    straightness_defect,
)

FMT = "%.17e"


class ConfigError(Exception):
    pass


# section -> key -> type
_SCHEMA = {
    "run": {"problem": str, "d": int, "seed": int, "out": str, "workers": int},
    "model": {"m": int, "depth": int, "h": float, "init_std_k": float, "init_std_b": float},
    "integration": {"n_t": int},
    "costs": {
        "lam_l": float, "lam_kl": float, "lam_e": float, "lam_p": float,
        "alpha1": float, "alpha2": float, "t_horizon": float,
    },
    "training": {
        "optimizer": str, "iters_coarse": int, "iters_fine": int,
        "n_coarse": int, "n_fine": int, "n_val": int, "resample_every": int,
        "g_tol": float, "adam_step": float, "adam_beta1": float,
        "adam_beta2": float, "adam_eps": float, "lbfgs_memory": int,
    },
    "fv": {"box_min": float, "box_max": float, "nx": int, "ny": int,
           "n_steps": int, "n_slices": int, "cfl": float},
    "trajectories": {"n_samples": int, "n_t_plot": int},
}

_OT_N_FINE = {2: 2304, 10: 6400, 50: 16384, 100: 36864}
_CROWD_N_FINE = {2: 2304, 10: 6400, 50: 9216, 100: 12544}


def _defaults(problem: str, d: int) -> dict:
    table = _OT_N_FINE if problem == "ot" else _CROWD_N_FINE
    n_fine = table.get(d, 2304)
    crowd = problem == "crowd"
    return {
        "run": {"problem": problem, "d": d, "seed": 0, "out": "runs/out", "workers": 1},
        "model": {"m": 16, "depth": 1, "h": 1.0, "init_std_k": 0.01, "init_std_b": 0.1},
        "integration": {"n_t": 4 if crowd else 2},
        "costs": {
            "lam_l": 2.0, "lam_kl": 5.0,
            "lam_e": 0.01 if crowd else 0.0, "lam_p": 1.0 if crowd else 0.0,
            "alpha1": 10.0 if crowd else 3.0, "alpha2": 1.0 if crowd else 3.0,
            "t_horizon": 1.0,
        },
        "training": {
            "optimizer": "bfgs", "iters_coarse": 500, "iters_fine": 500,
            "n_coarse": 1024 if d <= 2 else n_fine // 2, "n_fine": n_fine,
            "n_val": 1024 if d <= 2 else 4096, "resample_every": 25,
            "g_tol": 0.0, "adam_step": 1e-3, "adam_beta1": 0.9,
            "adam_beta2": 0.999, "adam_eps": 1e-8, "lbfgs_memory": 20,
        },
        "fv": {"box_min": -6.0, "box_max": 6.0, "nx": 128, "ny": 128,
               "n_steps": 256, "n_slices": 65, "cfl": 0.5},
        "trajectories": {"n_samples": 1024, "n_t_plot": 0},
    }


@dataclass
class RunConfig:
    values: dict  # section -> key -> typed value

    def __getitem__(self, pair):
        section, key = pair
        return self.values[section][key]

    def text(self) -> str:
        """Canonical resolved-config echo (stable ordering and formatting)."""
        lines = []
        for section in _SCHEMA:
            lines.append(f"[{section}]")
            for key in _SCHEMA[section]:
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:12]

    def header(self) -> str:
        return f"seed={self[('run', 'seed')]} config={self.digest()}"


def _find_line(raw: str, key: str) -> int:
    for i, ln in enumerate(raw.splitlines(), start=1):
        if ln.strip().lower().startswith(key.lower()):
            return i
    return 0


def parse_config(path, overrides=None) -> RunConfig:
    """Load, validate and resolve a config file against the schema."""
    raw = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(raw)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    file_vals = {s: dict(cp.items(s)) for s in cp.sections()}
    for section in file_vals:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}] (line {_find_line(raw, '[' + section)})")
        for key in file_vals[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] (line {_find_line(raw, key)})")
    run_sec = file_vals.get("run", {})
    problem = (overrides or {}).get(("run", "problem")) or run_sec.get("problem")
    if problem is None:
        raise ConfigError("missing required field 'problem' in section [run]")
    problem = problem.strip().lower()
    if problem not in ("ot", "crowd"):
        raise ConfigError(f"field 'problem' must be 'ot' or 'crowd', got {problem!r}")
    try:
        d = int(run_sec.get("d", 2))
    except ValueError as exc:
        raise ConfigError(f"field 'd' must be an integer (line {_find_line(raw, 'd')})") from exc
    resolved = _defaults(problem, d)
    for section, kv in file_vals.items():
        for key, sval in kv.items():
            typ = _SCHEMA[section][key]
            try:
                resolved[section][key] = typ(sval) if typ is not str else sval.strip()
            except ValueError as exc:
                raise ConfigError(
                    f"field '{key}' in [{section}] must be {typ.__name__} "
                    f"(line {_find_line(raw, key)})"
                ) from exc
    for pair, val in (overrides or {}).items():
        if val is not None:
            section, key = pair
            resolved[section][key] = _SCHEMA[section][key](val)
    return RunConfig(values=resolved)


def problem_from_config(cfg: RunConfig) -> ProblemSpec:
    c = cfg.values["costs"]
    d = cfg[("run", "d")]
    if cfg[("run", "problem")] == "ot":
        spec = ot_instance(d, lam_L=c["lam_l"], lam_KL=c["lam_kl"], alpha1=c["alpha1"], alpha2=c["alpha2"])
    else:
        spec = crowd_instance(d, lam_L=c["lam_l"], lam_KL=c["lam_kl"], lam_E=c["lam_e"],
                              lam_P=c["lam_p"], alpha1=c["alpha1"], alpha2=c["alpha2"])
    return spec.replace(T=c["t_horizon"], n_t_default=cfg[("integration", "n_t")])


def _checkpoint_meta(cfg: RunConfig) -> dict:
    keys = [("run", "problem"), ("run", "d"), ("integration", "n_t")]
    meta = {k: cfg[(s, k)] for s, k in keys}
    meta.update({k: cfg[("costs", k)] for k in _SCHEMA["costs"]})
    return meta


def problem_from_meta(meta: dict) -> tuple[ProblemSpec, int]:
    d = int(meta["d"])
    n_t = int(meta["n_t"])
    if meta["problem"] == "ot":
        spec = ot_instance(d, lam_L=float(meta["lam_l"]), lam_KL=float(meta["lam_kl"]),
                           alpha1=float(meta["alpha1"]), alpha2=float(meta["alpha2"]))
    else:
        spec = crowd_instance(d, lam_L=float(meta["lam_l"]), lam_KL=float(meta["lam_kl"]),
                              lam_E=float(meta["lam_e"]), lam_P=float(meta["lam_p"]),
                              alpha1=float(meta["alpha1"]), alpha2=float(meta["alpha2"]))
    return spec.replace(T=float(meta["t_horizon"]), n_t_default=n_t), n_t


# ---------------------------------------------------------------------------
# output files

CONV_COLUMNS = ["iter", "phase", "J", "L", "F", "G", "C1", "C2", "grad_norm", "step", "wall_s", "c_hjb"]


def _open_convergence(path, cfg: RunConfig):
    fh = open(path, "w")
    fh.write(f"# mfglab-convergence {cfg.header()}\n")
    fh.write("\t".join(CONV_COLUMNS) + "\n")
    return fh


def _conv_row(row, spec: ProblemSpec) -> str:
    v = row.val
    nums = [v.total, v.transport, v.running, v.terminal, v.hjb1, v.hjb2,
            row.grad_norm, row.alpha, row.wall_s, v.hjb_weighted(spec.alpha1, spec.alpha2)]
    return "\t".join([str(row.iteration), row.phase] + [FMT % x for x in nums])


def _append_summary(out_dir: Path, cfg: RunConfig, title: str, items: dict):
    path = out_dir / "summary.txt"
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(f"# mfglab-summary {cfg.header()}\n")
        fh.write(f"\n[{title}]\n")
        for k, v in items.items():
            fh.write(f"{k} = {FMT % v if isinstance(v, float) else v}\n")


def _breakdown_items(bd: LossBreakdown, spec: ProblemSpec) -> dict:
    out = dict(bd.as_dict())
    out["J_mfg"] = bd.mfg
    out["C_hjb"] = bd.hjb_weighted(spec.alpha1, spec.alpha2)
    return out


def _write_paths(path, cfg: RunConfig, bundle_times, z, l=None, c_l=None, c_f=None, c_1=None):
    """Trajectory dump: one row per (sample, time node)."""
    n_nodes, n, d = z.shape
    zeros = np.zeros((n_nodes, n))
    l = zeros if l is None else l
    c_l = zeros if c_l is None else c_l
    c_f = zeros if c_f is None else c_f
    c_1 = zeros if c_1 is None else c_1
    with open(path, "w") as fh:
        fh.write(f"# mfglab-trajectories {cfg.header()}\n")
        cols = ["sample_id", "t"] + [f"z_{j + 1}" for j in range(d)] + ["l", "c_L", "c_F", "c_1"]
        fh.write("\t".join(cols) + "\n")
        for i in range(n):
            for k in range(n_nodes):
                vals = [FMT % bundle_times[k]] + [FMT % v for v in z[k, i]]
                vals += [FMT % l[k, i], FMT % c_l[k, i], FMT % c_f[k, i], FMT % c_1[k, i]]
                fh.write("\t".join([str(i)] + vals) + "\n")


def _write_density(path, cfg: RunConfig, grid: Grid2D, rho: np.ndarray, t: float):
    with open(path, "w") as fh:
        fh.write(f"# mfglab-density {cfg.header()}\n")
        fh.write(f"{grid.nx} {grid.ny} {FMT % grid.a} {FMT % grid.b} {FMT % t}\n")
        for row in rho:
            fh.write(" ".join(FMT % v for v in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = parse_config(args.config, overrides={
        ("run", "seed"): args.seed, ("run", "out"): args.out, ("run", "workers"): args.workers,
    })
    if args.dry_run:
        print(cfg.text())
        return 0
    out_dir = Path(cfg[("run", "out")])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(f"# mfglab-config {cfg.header()}\n" + cfg.text())
    spec = problem_from_config(cfg)
    t = cfg.values["training"]
    schedule = TrainSchedule(
        iters_coarse=t["iters_coarse"], iters_fine=t["iters_fine"],
        n_coarse=t["n_coarse"], n_fine=t["n_fine"], n_val=t["n_val"],
        resample_every=t["resample_every"], optimizer=t["optimizer"],
        adam_step=t["adam_step"], adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"], adam_eps=t["adam_eps"],
        lbfgs_memory=t["lbfgs_memory"], g_tol=t["g_tol"],
    )
    arch = {"m": cfg[("model", "m")], "depth": cfg[("model", "depth")], "h": cfg[("model", "h")],
            "std_K": cfg[("model", "init_std_k")], "std_b": cfg[("model", "init_std_b")]}
    seed = cfg[("run", "seed")]
    meta = _checkpoint_meta(cfg)
    conv = _open_convergence(out_dir / "convergence.tsv", cfg)
    t_start = time.perf_counter()

    def on_iteration(row):
        conv.write(_conv_row(row, spec) + "\n")

    def on_phase_end(phase, params):
        save_checkpoint(out_dir / f"checkpoint_{phase}.txt", params,
                        header={"seed": seed, "config": cfg.digest()}, meta=meta)

    try:
        result = saa_train(spec, arch, schedule, seed, n_t=cfg[("integration", "n_t")],
                           workers=cfg[("run", "workers")],
                           on_iteration=on_iteration, on_phase_end=on_phase_end)
    finally:
        conv.close()
    wall = time.perf_counter() - t_start
    save_checkpoint(out_dir / "checkpoint_final.txt", result.params,
                    header={"seed": seed, "config": cfg.digest()}, meta=meta)
    items = _breakdown_items(result.val_final, spec)
    items.update({"status": result.status, "iterations": len(result.trace),
                  "wall_s_total": wall,
                  "wall_s_per_iter": wall / max(1, len(result.trace))})
    _append_summary(out_dir, cfg, "train", items)
    print(f"trained {cfg[('run', 'problem')]} d={cfg[('run', 'd')]}: "
          f"validation J={result.val_final.total:.6g} "
          f"(L={result.val_final.transport:.6g} F={result.val_final.running:.6g} "
          f"G={result.val_final.terminal:.6g}) status={result.status}")
    return 0


def _load_for_eval(args):
    params, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = parse_config(args.config, overrides={
            ("run", "seed"): args.seed, ("run", "out"): args.out, ("run", "workers"): getattr(args, "workers", None),
        })
        spec = problem_from_config(cfg)
        n_t = cfg[("integration", "n_t")]
    else:
        if "problem" not in meta:
            raise ConfigError("checkpoint carries no problem metadata; pass --config")
        spec, n_t = problem_from_meta(meta)
        overrides = {("run", "problem"): meta["problem"], ("run", "d"): meta["d"]}
        vals = _defaults(meta["problem"], int(meta["d"]))
        vals["integration"]["n_t"] = n_t
        for k in _SCHEMA["costs"]:
            vals["costs"][k] = float(meta[k])
        if args.seed is not None:
            vals["run"]["seed"] = int(args.seed)
        if args.out is not None:
            vals["run"]["out"] = args.out
        cfg = RunConfig(values=vals)
    if params.d != spec.d:
        raise ConfigError(f"checkpoint dimension {params.d} does not match problem dimension {spec.d}")
    return params, spec, n_t, cfg


def cmd_trajectories(args) -> int:
    params, spec, n_t, cfg = _load_for_eval(args)
    out_dir = Path(cfg[("run", "out")])
    out_dir.mkdir(parents=True, exist_ok=True)
    n_samples = args.n_samples or cfg[("trajectories", "n_samples")]
    n_t_plot = args.n_t_plot or cfg[("trajectories", "n_t_plot")] or 4 * n_t
    seed = cfg[("run", "seed")]
    rng_seed = substream_seed(seed, "trajectories")
    batch = draw_batch(spec, n_samples, rng_seed, "trajectories")
    icfg = IntegratorConfig(n_t=n_t_plot, T=spec.T, lam_L=spec.lam_L)
    path = integrate_batch(params, batch.points, spec, icfg, full_path=True)
    back = integrate_backward_batch(params, path.z[-1], spec, icfg, full_path=True)
    _write_paths(out_dir / "trajectories_forward.tsv", cfg, path.times, path.z,
                 path.l, path.c_l, path.c_f, path.c_1)
    _write_paths(out_dir / "trajectories_backward.tsv", cfg, path.times[::-1], back)
    roundtrip = np.linalg.norm(back[-1] - batch.points, axis=1)
    defect = straightness_defect(path.z)
    _append_summary(out_dir, cfg, "trajectories", {
        "n_samples": n_samples, "n_t_plot": n_t_plot,
        "roundtrip_median": float(np.median(roundtrip)),
        "roundtrip_mean": float(np.mean(roundtrip)),
        "roundtrip_max": float(np.max(roundtrip)),
        "straightness_median": float(np.median(defect)),
    })
    print(f"round-trip error: median={np.median(roundtrip):.4g} max={np.max(roundtrip):.4g}; "
          f"median straightness defect={np.median(defect):.4g}")
    return 0


def cmd_fv_check(args) -> int:
    params, spec, n_t, cfg = _load_for_eval(args)
    if spec.d != 2:
        raise ConfigError("fv-check supports d = 2 only")
    out_dir = Path(cfg[("run", "out")])
    out_dir.mkdir(parents=True, exist_ok=True)
    fv = cfg.values["fv"]
    grid = Grid2D(a=fv["box_min"], b=fv["box_max"], nx=fv["nx"], ny=fv["ny"])
    bd_grid, run = fv_objective(params, spec, grid, n_slices=fv["n_slices"],
                                n_steps=fv["n_steps"], cfl=fv["cfl"])
    seed = cfg[("run", "seed")]
    val = draw_batch(spec, cfg[("training", "n_val")], substream_seed(seed, "validation"), "validation")
    icfg = IntegratorConfig(n_t=n_t, T=spec.T, lam_L=spec.lam_L)
    bd_lag = evaluate(params, val, spec, icfg, workers=cfg[("run", "workers")])
    mass_drift = float(np.max(np.abs(run.mass + run.escaped - run.mass[0])) / run.mass[0])
    items = {f"grid_{k}": v for k, v in _breakdown_items(bd_grid, spec).items() if k in ("J", "L", "F", "G", "J_mfg")}
    items.update({f"lagrangian_{k}": v for k, v in _breakdown_items(bd_lag, spec).items()})
    items.update({
        "ratio_grid_over_lagrangian": bd_grid.mfg / bd_lag.mfg,
        "mass_conservation_rel": mass_drift,
        "escaped_mass": float(run.escaped[-1]),
        "min_density": run.min_density,
        "fv_steps": run.n_steps,
    })
    with open(out_dir / "fv_report.txt", "w") as fh:
        fh.write(f"# mfglab-fv-report {cfg.header()}\n")
        for k, v in items.items():
            fh.write(f"{k} = {FMT % v if isinstance(v, float) else v}\n")
    for tag, idx in (("t0", 0), ("thalf", run.n_steps // 2), ("tend", run.n_steps)):
        _write_density(out_dir / f"fv_density_{tag}.txt", cfg, grid, run.history[idx], idx * run.dt)
    _append_summary(out_dir, cfg, "fv_check", items)
    print(f"grid J_mfg={bd_grid.mfg:.6g} vs Lagrangian J_mfg={bd_lag.mfg:.6g} "
          f"(ratio {bd_grid.mfg / bd_lag.mfg:.4f}); mass drift {mass_drift:.2e}")
    return 0


def cmd_evaluate(args) -> int:
    params, spec, n_t, cfg = _load_for_eval(args)
    seed = cfg[("run", "seed")]
    n_val = args.n_samples or cfg[("training", "n_val")]
    val = draw_batch(spec, n_val, substream_seed(seed, "evaluate"), "validation")
    icfg = IntegratorConfig(n_t=n_t, T=spec.T, lam_L=spec.lam_L)
    bd = evaluate(params, val, spec, icfg, workers=cfg[("run", "workers")])
    for k, v in _breakdown_items(bd, spec).items():
        print(f"{k} = {v:.10g}")
    if args.out:
        out_dir = Path(cfg[("run", "out")])
        out_dir.mkdir(parents=True, exist_ok=True)
        _append_summary(out_dir, cfg, "evaluate", _breakdown_items(bd, spec))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfglab", description="Lagrangian neural solver for potential mean field games")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a potential from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--workers", type=int, default=None)
    p_train.add_argument("--dry-run", action="store_true")
    p_train.set_defaults(func=cmd_train)

    def add_eval_args(p, n_samples_help):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--n-samples", dest="n_samples", type=int, default=None, help=n_samples_help)

    p_traj = sub.add_parser("trajectories", help="dump forward and backward characteristics")
    add_eval_args(p_traj, "number of fresh sample origins")
    p_traj.add_argument("--n-t-plot", dest="n_t_plot", type=int, default=None,
                        help="time steps for plotting (default 4x training steps)")
    p_traj.set_defaults(func=cmd_trajectories)

    p_fv = sub.add_parser("fv-check", help="finite-volume grid cross-check (d=2)")
    add_eval_args(p_fv, "validation batch size for the Lagrangian side")
    p_fv.add_argument("--workers", type=int, default=None)
    p_fv.set_defaults(func=cmd_fv_check)

    p_eval = sub.add_parser("evaluate", help="loss breakdown on a fresh validation batch")
    add_eval_args(p_eval, "validation batch size")
    p_eval.set_defaults(func=cmd_evaluate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
