"""Command-line experiment runner.

Every command reads one JSON config (see :data:`DEFAULT_CONFIG`; the file
must carry ``"config_version": 1``) and writes its artifacts to ``--out``.
Each artifact gets a ``<name>.provenance.json`` sidecar holding the
resolved config, the command name and hashes of the inputs.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 failed
verification.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .accel import AccelConfig, accelerated_nlml
from .analysis import (
    band_coverage,
    coercivity_check,
    empirical_rho,
    kernel_errors,
    trajectory_error,
    uq_ensemble,
)
from .covfunc import MaternParams
from .errors import NumericalError
from .gp import FIELDS, FittedGP, Hyperparameters, assemble_parts, gradient_check, nlml_and_grad, pair_geometry, posterior_kernel
from .krr import check_equivalence, covariance_identity_residual
from .systems import (
    Box,
    builtin_system,
    generate_dataset,
    load_dataset,
    normalize_frames,
    preprocess_frames,
    read_frames_csv,
    save_dataset,
    simulate_many,
    zero_kernel,
)
from .trainer import TrainConfig, minimize_nlml

log = logging.getLogger("ipsgp")

CONFIG_VERSION = 1

DEFAULT_CONFIG = {
    "config_version": CONFIG_VERSION,
    # builtin name, or {"base": name, "N": .., "ic_position": [lo, hi], ...}
    "system": "CS",
    "data": {"M": 3, "L": 3, "sigma": 0.0, "seed": 0},
    "kernels": {"nu_E": 1.5, "nu_A": 1.5, "s2_E": 1.0, "omega_E": 1.0, "s2_A": 1.0, "omega_A": 1.0},
    # unset entries fall back to the system's values; sigma to the data noise level
    "init": {"sigma": None, "alpha": None, "mass": None},
    # None: every field except mass, and sigma only for noisy data
    "trainable": None,
    "trainer": {"max_evals": 400, "restarts": 1, "seed": 0, "randomize": ["alpha", "sigma"]},
    "backend": "exact",
    "accel": {"rank": None, "n_probes": 10, "m_coeffs": None, "tol": 1e-6, "max_iter": 500,
              "seed": 0, "variance_reduced": False},
    "agents": None,
    "grid_size": 200,
    "predict": {"horizon": None, "uq_samples": 20, "uq_seed": 0, "rho_trajectories": 500,
                "rho_bins": 1000, "rho_seed": 1},
    "verify": {"grad_tol": 1e-5, "krr_tol": 1e-8, "identity_tol": 1e-10, "coercivity_mc": 100000,
               "coercivity_seed": 0, "krr_sigma": 0.1},
    "bench": {"system": "FM", "N": 20, "L": 6, "M": [2, 4, 8], "sigma": 0.01,
              "ic_position": [-1.0, 1.0], "repeats": 1},
    "ingest": {"csv": None, "window": 5, "dt": 1.0, "d": 2, "normalize": False},
}


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# Config handling


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read a JSON config, fill defaults and validate the basics."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if user.get("config_version") != CONFIG_VERSION:
            raise UsageError(f"config_version must be {CONFIG_VERSION}")
    cfg = _merge(DEFAULT_CONFIG, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    if int(cfg["grid_size"]) < 2:
        raise UsageError("grid_size must be >= 2")
    if cfg["backend"] not in ("exact", "accel"):
        raise UsageError("backend must be exact or accel")
    return cfg


def system_from_config(cfg: dict):
    sysc = cfg["system"]
    if isinstance(sysc, str):
        return builtin_system(sysc)
    spec = builtin_system(sysc["base"])
    kw = {}
    for key in ("N", "d"):
        if key in sysc:
            kw[key] = int(sysc[key])
    for key in ("ic_position", "ic_velocity"):
        if key in sysc:
            kw[key] = None if sysc[key] is None else Box(*map(float, sysc[key]))
    if "horizon" in sysc:
        kw["horizon"] = tuple(map(float, sysc["horizon"]))
    if "alpha" in sysc:
        kw["alpha"] = tuple(map(float, sysc["alpha"]))
    return spec.replace(**kw)


def hyper_from_config(cfg: dict, spec, noise_sigma: float = 0.0) -> Hyperparameters:
    k = cfg["kernels"]
    init = cfg["init"]
    sigma = init.get("sigma")
    sigma = float(noise_sigma) if sigma is None else float(sigma)
    trainable = cfg["trainable"]
    if trainable is None:
        trainable = [f for f in FIELDS if f != "mass" and (f != "sigma" or noise_sigma > 0)]
    if "sigma" in trainable and sigma == 0:
        sigma = 0.5
    alpha = spec.alpha if init.get("alpha") is None else tuple(init["alpha"])
    mass = spec.mass if init.get("mass") is None else float(init["mass"])
    return Hyperparameters(
        MaternParams(float(k["s2_E"]), float(k["omega_E"]), float(k["nu_E"])),
        MaternParams(float(k["s2_A"]), float(k["omega_A"]), float(k["nu_A"])),
        sigma=sigma, alpha=alpha, mass=mass, force=spec.force, trainable=tuple(trainable),
    )


def accel_from_config(cfg: dict) -> AccelConfig:
    return AccelConfig(**cfg["accel"])


# ---------------------------------------------------------------------------
# Artifacts


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_provenance(artifact: Path, command: str, cfg: dict, inputs=()) -> None:
    """Sidecar ``<artifact>.provenance.json``; deterministic for equal inputs."""
    side = artifact.with_name(artifact.name + ".provenance.json")
    _write_json(side, {
        "artifact": artifact.name,
        "command": command,
        "package_version": __version__,
        "config": cfg,
        "inputs": {Path(p).name: _sha256(p) for p in inputs},
    })


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def load_model(path):
    with open(path) as fh:
        obj = json.load(fh)
    return Hyperparameters.from_dict(obj["hyperparameters"]), obj.get("config", DEFAULT_CONFIG)


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg: dict, out: Path) -> Path:
    spec = system_from_config(cfg)
    d = cfg["data"]
    ds = generate_dataset(spec, int(d["M"]), int(d["L"]), float(d["sigma"]), int(d["seed"]))
    path = out / "dataset.json"
    save_dataset(ds, path)
    write_provenance(path, "simulate", cfg)
    print(f"dataset: d={ds.d} N={ds.N} M={ds.M} L={ds.L} snapshots={ds.M * ds.L} n={ds.n_obs} -> {path}")
    return path


def _dataset_for(cfg, path):
    ds = load_dataset(path)
    if cfg.get("agents") is not None:
        ds = ds.with_observed(cfg["agents"])
    return ds


def cmd_train(cfg: dict, dataset_path, out: Path) -> Path:
    spec = system_from_config(cfg)
    ds = _dataset_for(cfg, dataset_path)
    if (ds.d, ds.N) != (spec.d, spec.N):
        raise UsageError("dataset dimensions do not match the configured system")
    h0 = hyper_from_config(cfg, spec, ds.noise_sigma)
    t = cfg["trainer"]
    tc = TrainConfig(h0, max_evals=int(t["max_evals"]), restarts=int(t["restarts"]),
                     seed=int(t["seed"]), randomize=tuple(t["randomize"]))
    backend = "accelerated" if cfg["backend"] == "accel" else "exact"
    res = minimize_nlml(ds, tc, backend=backend, accel_config=accel_from_config(cfg))
    model = out / "model.json"
    _write_json(model, {
        "hyperparameters": res.hyper.to_dict(),
        "nlml": res.nlml,
        "reason": res.reason,
        "n_evals": res.n_evals,
        "backend": backend,
        "config": cfg,
    })
    trace = out / "trace.jsonl"
    trace.write_text(res.trace_jsonl())
    for p in (model, trace):
        write_provenance(p, "train", cfg, [dataset_path])
    last = res.trace[-1] if res.trace else {}
    print(f"train: nlml={res.nlml:.6g} evals={res.n_evals} reason={res.reason} "
          f"grad_norm={last.get('grad_norm', float('nan')):.3g} -> {model}")
    return model


def cmd_predict(cfg: dict, model_path, dataset_path, out: Path) -> dict:
    hyper, mcfg = load_model(model_path)
    cfg = _merge(mcfg, {k: v for k, v in cfg.items() if k in ("predict", "grid_size")})
    spec = system_from_config(cfg)
    ds = _dataset_for(cfg, dataset_path)
    p = cfg["predict"]
    mu = empirical_rho(spec, int(p["rho_trajectories"]), int(p["rho_bins"]), int(p["rho_seed"]))
    grid = np.linspace(0.0, mu.R, int(cfg["grid_size"]))
    est = posterior_kernel(ds, hyper, grid, full_cov=True)
    rows = [("r", "mean_E", "lo_E", "hi_E", "mean_A", "lo_A", "hi_A", "rho_E", "rho_A")]
    dens_E = np.interp(grid, mu.centers, mu.density("E"))
    dens_A = np.interp(grid, mu.centers, mu.density("A"))
    for i, r in enumerate(grid):
        rows.append((r, est.mean_E[i], est.mean_E[i] - 2 * est.std_E[i], est.mean_E[i] + 2 * est.std_E[i],
                     est.mean_A[i], est.mean_A[i] - 2 * est.std_A[i], est.mean_A[i] + 2 * est.std_A[i],
                     dens_E[i], dens_A[i]))
    kpath = out / "kernels.csv"
    with open(kpath, "w", newline="") as fh:
        csv.writer(fh).writerows([tuple(repr(float(v)) if not isinstance(v, str) else v for v in row)
                                  for row in rows])
    horizon = spec.T if p["horizon"] is None else float(p["horizon"])
    times = np.linspace(0.0, horizon, max(2, int(round(horizon / (ds.times[1] - ds.times[0]))) + 1)
                        if ds.L > 1 else 2)
    fit = FittedGP(ds, hyper)
    phi_A = zero_kernel if hyper.mass == 0 else fit.phi_A
    ics = ds.Y[:, 0, :]
    run_spec = spec.replace(alpha=hyper.alpha)
    pred = simulate_many(run_spec, fit.phi_E, phi_A, ics, times, alpha=hyper.alpha, mass=hyper.mass)
    true = simulate_many(spec, spec.phi_E, spec.phi_A, ics, times)
    uq = uq_ensemble(ds, hyper, est, ics[0], times, int(p["uq_samples"]), int(p["uq_seed"]), spec=spec)
    tpath = out / "trajectories.npz"
    np.savez(tpath, times=times, predicted=pred, true=true, uq_mean=uq.mean, uq_std=uq.std)
    metrics = {
        "kernel_E": kernel_errors(est, spec.phi_E, mu, "E"),
        "kernel_A": kernel_errors(est, spec.phi_A, mu, "A"),
        "coverage_A": band_coverage(est, spec.phi_A, mu.R, "A"),
        "coverage_E": band_coverage(est, spec.phi_E, mu.R, "E"),
        "trajectory_rel_err": [trajectory_error(true[m], pred[m]) for m in range(ds.M)],
        "uq_max_std": float(uq.std.max()),
        "uq_failed": uq.n_failed,
        "R": mu.R,
        "alpha": list(hyper.alpha),
    }
    mpath = out / "metrics.json"
    _write_json(mpath, _jsonable(metrics))
    for path in (kpath, tpath, mpath):
        write_provenance(path, "predict", cfg, [model_path, dataset_path])
    print(f"predict: grid={grid.size} R={mu.R:.4g} -> {out}")
    return metrics


def cmd_verify(cfg: dict, model_path, dataset_path, out: Path) -> dict:
    hyper, mcfg = load_model(model_path)
    cfg = _merge(mcfg, {k: v for k, v in cfg.items() if k == "verify"})
    v = cfg["verify"]
    spec = system_from_config(cfg)
    ds = _dataset_for(cfg, dataset_path)
    # a noise-free model is regularized by jitter only; both checks then use krr_sigma
    h_krr = hyper if hyper.sigma > 0 else hyper.replace(sigma=float(v["krr_sigma"]))
    grad = gradient_check(ds, h_krr)
    grid = np.linspace(0.0, float(pair_geometry(ds).r.max()), int(cfg["grid_size"]))
    dev = check_equivalence(ds, h_krr, grid)
    fit = FittedGP(ds, hyper)
    phi_A = fit.phi_A if hyper.theta_A.s2 > 0 else zero_kernel
    coer = coercivity_check(fit.phi_E, phi_A, spec, int(v["coercivity_mc"]), int(v["coercivity_seed"]))
    ident = covariance_identity_residual(ds, hyper.theta_E, hyper.theta_A)
    coer_ok = coer["rhs"] == 0 or coer["ratio"] >= 1 - 3 * coer["se"]
    report = {
        "gradient_check": {"max_rel_err": grad["max_rel_err"], "sigma": h_krr.sigma, "tol": v["grad_tol"],
                           "pass": grad["max_rel_err"] <= v["grad_tol"]},
        "krr_equivalence": {"max_deviation": dev, "sigma": h_krr.sigma, "tol": v["krr_tol"],
                            "pass": dev <= v["krr_tol"]},
        "coercivity": {"lhs": coer["lhs"], "rhs": coer["rhs"], "ratio": coer["ratio"], "se": coer["se"],
                       "pass": bool(coer_ok)},
        "kff_identity": {"residual": ident, "tol": v["identity_tol"], "pass": ident <= v["identity_tol"]},
    }
    report["pass"] = all(c["pass"] for c in report.values())
    path = out / "verify.json"
    _write_json(path, _jsonable(report))
    write_provenance(path, "verify", cfg, [model_path, dataset_path])
    for name, c in report.items():
        if isinstance(c, dict):
            print(f"{name}: {'pass' if c['pass'] else 'FAIL'}")
    if not report["pass"]:
        raise VerificationFailed("verification failed")
    return report


BENCH_COLUMNS = ("n", "M", "backend", "wall_ms", "value", "rel_err_vs_exact", "seed")


def bench_rows(cfg: dict, seed: int):
    """Exact and accelerated NLML+gradient timings over the configured sweep.

    The covariance blocks are assembled once per size and shared by both
    backends; only the evaluation itself is timed.
    """
    b = cfg["bench"]
    spec = builtin_system(b["system"]).replace(N=int(b["N"]), ic_position=Box(*b["ic_position"]))
    acfg = accel_from_config(cfg)
    acfg.seed = seed
    rows = []
    for M in b["M"]:
        ds = generate_dataset(spec, int(M), int(b["L"]), float(b["sigma"]), seed)
        k = cfg["kernels"]
        h = Hyperparameters(
            MaternParams(float(k["s2_E"]), float(k["omega_E"]), float(k["nu_E"])),
            MaternParams(float(k["s2_A"]), float(k["omega_A"]), float(k["nu_A"])),
            sigma=float(b["sigma"]) if b["sigma"] > 0 else 0.01, alpha=spec.alpha, mass=spec.mass,
            force=spec.force, trainable=("sigma", "alpha"),
        )
        parts = assemble_parts(pair_geometry(ds), h.theta_E, h.theta_A)
        best = {}
        for _ in range(int(b["repeats"])):
            t0 = time.perf_counter()
            ev = nlml_and_grad(ds, h, parts=parts)
            te = time.perf_counter() - t0
            t0 = time.perf_counter()
            va, _ = accelerated_nlml(ds, h, acfg, parts=parts)
            ta = time.perf_counter() - t0
            best["exact"] = min(best.get("exact", np.inf), te)
            best["accel"] = min(best.get("accel", np.inf), ta)
        rows.append({"n": ds.n_obs, "M": int(M), "backend": "exact", "wall_ms": 1e3 * best["exact"],
                     "value": ev.value, "rel_err_vs_exact": 0.0, "seed": seed})
        rows.append({"n": ds.n_obs, "M": int(M), "backend": "accel", "wall_ms": 1e3 * best["accel"],
                     "value": va, "rel_err_vs_exact": abs(va - ev.value) / abs(ev.value), "seed": seed})
    return rows


def cmd_bench(cfg: dict, out: Path, seed: int = 0) -> Path:
    rows = bench_rows(cfg, seed)
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_provenance(path, "bench", cfg)
    for r in rows:
        print(f"n={r['n']:6d} {r['backend']:5s} {r['wall_ms']:10.1f} ms  rel_err={r['rel_err_vs_exact']:.2e}")
    return path


def cmd_ingest(cfg: dict, out: Path) -> Path:
    g = cfg["ingest"]
    if not g.get("csv"):
        raise UsageError("ingest needs a CSV path (--csv or ingest.csv)")
    if not Path(g["csv"]).exists():
        raise UsageError(f"no such file: {g['csv']}")
    frames = read_frames_csv(g["csv"], int(g["d"]))
    if g.get("normalize"):
        frames = normalize_frames(frames)
    ds = preprocess_frames(frames, int(g["window"]), float(g["dt"]))
    path = out / "dataset.json"
    save_dataset(ds, path)
    write_provenance(path, "ingest", cfg, [g["csv"]])
    print(f"ingest: frames={frames.shape[0]} -> L={ds.L} N={ds.N} d={ds.d} -> {path}")
    return path


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipsgp", description="Learn interaction kernels of particle systems with GPs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=False, model=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override data/trainer/accel seeds")
        sp.add_argument("--backend", choices=("exact", "accel"))
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if dataset:
            sp.add_argument("--dataset", required=True)
        if model:
            sp.add_argument("--model", required=True)

    common(sub.add_parser("simulate", help="generate a synthetic dataset"))
    common(sub.add_parser("train", help="fit hyperparameters"), dataset=True)
    common(sub.add_parser("predict", help="kernel estimates, trajectories and UQ"), dataset=True, model=True)
    common(sub.add_parser("verify", help="run the consistency checks"), dataset=True, model=True)
    common(sub.add_parser("bench", help="exact vs accelerated NLML timings"))
    sp = sub.add_parser("ingest", help="turn position frames into a dataset")
    common(sp)
    sp.add_argument("--csv")
    sp.add_argument("--window", type=int)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--normalize", action="store_true")
    return p


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["data"] = {"seed": args.seed}
        o["trainer"] = {"seed": args.seed}
        o["accel"] = {"seed": args.seed}
    if args.backend is not None:
        o["backend"] = args.backend
    if args.command == "ingest":
        g = {k: v for k, v in (("csv", args.csv), ("window", args.window), ("dt", args.dt), ("d", args.dim))
             if v is not None}
        if args.normalize:
            g["normalize"] = True
        o["ingest"] = g
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = _out_dir(args)
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, out)
        elif args.command == "predict":
            cmd_predict(cfg, args.model, args.dataset, out)
        elif args.command == "verify":
            cmd_verify(cfg, args.model, args.dataset, out)
        elif args.command == "bench":
            cmd_bench(cfg, out, seed=0 if args.seed is None else args.seed)
        elif args.command == "ingest":
            cmd_ingest(cfg, out)
    except UsageError as exc:
        print(f"ipsgp: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, KeyError, ValueError) as exc:
        print(f"ipsgp: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"ipsgp: numerical failure: {exc}", file=sys.stderr)
        return 2
    except VerificationFailed as exc:
        print(f"ipsgp: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
