"""Command-line entry point: ``dfdi {generate,train,classify,estimate,bound,evaluate}``.

Configuration precedence: built-in defaults < ``--config`` JSON file < flags
(including generic ``--set section.key=value`` overrides). Every command
writes the effective configuration next to its primary output.

Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np

from .density import (
    BoundConstants,
    estimate_contraction_rate,
    flatten,
    kl_gaussian,
    w2_empirical,
    wasserstein_fdi_bound,
    wasserstein_fdi_bound_joint,
)
from .dynamics import (
    STATE_DIM,
    FaultKind,
    FaultProfile,
    SpacecraftParams,
    default_initial_state,
    simulate_ensemble,
)
from .ekf import EkfConfig, run_ekf_on_trajectory
from .errors import ConfigError, DatasetFormatError, NumericalError
from .evaluation import build_report, confusion_matrix, l2_error, rmse, write_report
from .faultgen import DatasetConfig, generate_dataset, load_dataset, replay_trajectory, save_dataset
from .flowmatch import TrainConfig, load_checkpoint, model_for_scenario, save_checkpoint, train
from .inference import InferenceConfig, classify_fault, estimate_fault

logger = logging.getLogger("dfdi")

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4


def default_config() -> dict[str, Any]:
    return {
        "seed": 0,
        "threads": 1,
        "reproducible": False,
        "spacecraft": SpacecraftParams().to_dict(),
        "dataset": DatasetConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "inference": {f.name: f.default for f in fields(InferenceConfig)},
        "ekf": EkfConfig().to_dict(),
        "bound": {
            "n_traj": 64,
            "sigma": 0.0015,
            "init_std": 0.01,
            "eta": [0.3, 0.9, 0.7, 1.0],
            "gamma": [0.9, 0.8, 0.5, 0.6, 1.0, 0.7, 0.9],
            "timepoints": 30,
            "coordinates": [0, 1, 2, 3, 4, 5],
            "m_lo": 1.0,
            "m_hi": 1.0,
            "m_x": 0.0,
            "m_xx": 0.0,
            "eps_c": 0.1,
            "eps_f": 0.1,
            "Delta_bar": None,
            "contraction_pairs": 8,
        },
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def _parse_set(expr: str) -> tuple[list[str], Any]:
    if "=" not in expr:
        raise ConfigError(f"--set expects section.key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.split("."), val


def effective_config(args: argparse.Namespace) -> dict[str, Any]:
    cfg = default_config()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {args.config}: {exc}") from exc
        try:
            _merge(cfg, json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for expr in args.set or []:
        keys, val = _parse_set(expr)
        upd: dict[str, Any] = {}
        node = upd
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = val
        _merge(cfg, upd)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["dataset"]["base_seed"] = args.seed
    threads = args.threads if args.threads is not None else os.environ.get("DFDI_THREADS")
    if threads is not None:
        try:
            cfg["threads"] = int(threads)
        except ValueError as exc:
            raise ConfigError(f"threads must be an integer, got {threads!r}") from exc
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    if args.reproducible:
        cfg["reproducible"] = True
    # command-specific flags
    for attr, section, key in _FLAG_TARGETS:
        val = getattr(args, attr, None)
        if val is not None:
            cfg[section][key] = val
    return cfg


_FLAG_TARGETS = [
    ("scenario", "dataset", "scenario"),
    ("n_train", "dataset", "n_train"),
    ("n_val", "dataset", "n_val"),
    ("dt", "spacecraft", "dt"),
    ("horizon", "spacecraft", "horizon"),
    ("epochs", "train", "epochs"),
    ("lr", "train", "lr"),
    ("batch", "train", "batch"),
    ("n_traj", "bound", "n_traj"),
]


def _workers(cfg: dict[str, Any]) -> int:
    return 1 if cfg["reproducible"] else int(cfg["threads"])


def _params(cfg) -> SpacecraftParams:
    return SpacecraftParams.from_dict(cfg["spacecraft"])


def _check_out(path: str | Path) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    return path


def _persist(cfg: dict[str, Any], out: Path) -> None:
    out.with_name(out.name + ".config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write_json(obj: Any, out: Path) -> None:
    from .evaluation import _json_safe

    out.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def _untimed(record: dict[str, Any], cfg: dict[str, Any]) -> dict[str, Any]:
    """Drop wall-clock fields in reproducible mode so outputs compare byte for byte."""
    if cfg["reproducible"]:
        record.pop("wall_time", None)
    return record


def _candidates(path: str | None, ds, scenario: FaultKind) -> tuple[list[np.ndarray], list[str]]:
    """Candidate conditioning vectors from a JSON file, else the distinct rows of ``ds``."""
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"candidate file is not valid JSON: {exc}") from exc
        vecs, names = [], []
        for i, item in enumerate(raw):
            if isinstance(item, dict):
                prof = FaultProfile.from_dict(item)
                vecs.append(prof.conditioning(scenario, ds.params.horizon))
                names.append(str(item.get("name", f"profile{i}")))
            else:
                vecs.append(np.asarray(item, dtype=float))
                names.append(f"profile{i}")
        return vecs, names
    uniq = np.unique(ds.conditioning, axis=0)
    return list(uniq), [f"profile{i}" for i in range(len(uniq))]


# ---------------------------------------------------------------- commands
def cmd_generate(args, cfg) -> int:
    out = _check_out(args.out)
    params = _params(cfg)
    dcfg = DatasetConfig.from_dict(cfg["dataset"])
    ds = generate_dataset(dcfg, params, workers=_workers(cfg))
    save_dataset(ds, out)
    _persist(cfg, out)
    n_nom = sum(tr.profile.kind is FaultKind.NOMINAL for tr in ds.trajectories)
    print(f"wrote {len(ds)} trajectories ({ds.n_train} train, {len(ds) - ds.n_train} val, "
          f"{n_nom} nominal) scenario={ds.scenario.value} cond_dim={ds.cond_dim} -> {out}")
    return 0


def cmd_train(args, cfg) -> int:
    out = _check_out(args.out)
    ds = load_dataset(args.data)
    tcfg = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    model = model_for_scenario(ds.scenario, seed=cfg["seed"])
    val = ds.val_split()
    start = time.perf_counter()
    model, hist = train(model, ds.train_split(), tcfg, val if len(val) else None, progress=not args.quiet)
    extra = {"train": tcfg.to_dict()}
    if not cfg["reproducible"]:
        extra["wall_time"] = time.perf_counter() - start
    save_checkpoint(model, out, extra=extra)
    out.with_name(out.name + ".history.csv").write_text(hist.to_csv())
    _persist(cfg, out)
    print(f"trained {ds.scenario.value} model, final train loss {hist.train_loss[-1] if hist.train_loss else float('nan'):.4f} -> {out}")
    return 0


def _inference_config(cfg, iters) -> InferenceConfig:
    icfg = dict(cfg["inference"])
    if iters is not None:
        icfg["iters_type1"] = icfg["iters_type2"] = iters
    return InferenceConfig(**icfg)


def _load_model_for(path, ds):
    model, _ = load_checkpoint(path)
    if model.cond_dim != ds.cond_dim:
        raise ConfigError(f"model cond_dim {model.cond_dim} does not match data cond_dim {ds.cond_dim}")
    return model


def _classify_all(model, ds, cands):
    rows = []
    for i, tr in enumerate(ds.trajectories):
        idx, nlls = classify_fault(model, tr, cands)
        truth = next((j for j, c in enumerate(cands) if np.allclose(c, ds.conditioning[i])), None)
        rows.append({"trajectory": i, "predicted": idx, "true": truth, "nll": nlls.tolist()})
    return rows


def cmd_classify(args, cfg) -> int:
    out = _check_out(args.out)
    ds = load_dataset(args.data)
    model = _load_model_for(args.model, ds)
    cands, names = _candidates(args.candidates, ds, ds.scenario)
    rows = _classify_all(model, ds, cands)
    _write_json({"candidates": names, "results": rows}, out)
    _persist(cfg, out)
    labelled = [r for r in rows if r["true"] is not None]
    if labelled:
        acc = np.mean([r["predicted"] == r["true"] for r in labelled])
        print(f"classified {len(rows)} trajectories; accuracy on labelled {acc:.3f} -> {out}")
    else:
        print(f"classified {len(rows)} trajectories -> {out}")
    return 0


def cmd_estimate(args, cfg) -> int:
    out = _check_out(args.out)
    ds = load_dataset(args.data)
    model = _load_model_for(args.model, ds)
    icfg = _inference_config(cfg, args.iters)
    idx = range(len(ds)) if args.index is None else [args.index]
    results = []
    for i in idx:
        tr = ds.trajectories[i]
        est = estimate_fault(model, tr, ds.scenario, icfg)
        rec = _untimed({"trajectory": i, "method": "flow", **est.to_dict()}, cfg)
        rec["mean_abs_eta_error"] = float(np.mean(np.abs(est.eta - tr.profile.eta)))
        results.append(rec)
        if args.ekf:
            if tr.measurements is None:
                tr = replay_trajectory(ds, i)
            r = run_ekf_on_trajectory(tr, ds.params, ds.scenario, EkfConfig(**cfg["ekf"]))
            err = float(np.mean(np.abs(r.eta - tr.profile.eta)))
            results.append(_untimed({"trajectory": i, **r.to_dict(), "mean_abs_eta_error": err}, cfg))
    _write_json({"scenario": ds.scenario.value, "results": results}, out)
    _persist(cfg, out)
    errs = [r["mean_abs_eta_error"] for r in results if r["method"] == "flow"]
    print(f"estimated {len(errs)} trajectories, mean |eta error| {np.mean(errs):.4f} -> {out}")
    return 0


def bound_comparison(cfg: dict[str, Any], workers: int = 1) -> dict[str, Any]:
    """Simulate nominal and faulty ensembles and compare empirical W2 with the bound."""
    b = cfg["bound"]
    params = _params(cfg)
    seed = int(cfg["seed"])
    fault = FaultProfile.type2(b["eta"], b["gamma"])
    x0 = default_initial_state(params)
    n = int(b["n_traj"])
    nominal = simulate_ensemble(x0, FaultProfile.nominal(), params, n, seed, b["sigma"], b["init_std"], workers=workers)
    faulty = simulate_ensemble(x0, fault, params, n, seed, b["sigma"], b["init_std"], workers=workers)
    tp_count = int(b["timepoints"])
    from .density import default_timepoints

    tp = default_timepoints(params.n_steps + 1, tp_count)
    coords = b["coordinates"]
    mu, nu = flatten(nominal, tp, coords), flatten(faulty, tp, coords)
    w2 = w2_empirical(mu, nu)
    kl = kl_gaussian(mu, nu)
    mu0, nu0 = flatten(nominal, [0], coords), flatten(faulty, [0], coords)
    w2_init_sq = w2_empirical(mu0, nu0) ** 2
    rows = list(range(STATE_DIM)) if coords is None else [int(i) for i in coords]
    rate = estimate_contraction_rate(
        params, n_pairs=int(b["contraction_pairs"]), seed=seed, coordinate_indices=rows
    )
    g_bar = float(np.linalg.norm(params.input_matrix()[rows], 2))
    u_bar = max(float(np.max(np.linalg.norm(tr.controls, axis=1))) for tr in nominal + faulty)
    delta_bar = b["Delta_bar"] if b["Delta_bar"] is not None else float(np.max(np.abs(1.0 - fault.eta)))
    consts = BoundConstants(
        m_lo=b["m_lo"], m_hi=b["m_hi"], m_x=b["m_x"], m_xx=b["m_xx"], g2=b["sigma"], G_bar=g_bar,
        u_bar=u_bar, Delta_bar=delta_bar, alpha_tilde=rate.alpha, eps_c=b["eps_c"], eps_f=b["eps_f"],
    )
    times = params.dt * tp
    joint_sq = wasserstein_fdi_bound_joint(consts, w2_init_sq, times)
    return {
        "w2_empirical": w2,
        "w2_bound": float(np.sqrt(joint_sq)),
        "w2_bound_final_time": float(np.sqrt(wasserstein_fdi_bound(consts, w2_init_sq, params.horizon))),
        "kl": kl,
        "w2_initial_sq": w2_init_sq,
        "alpha_tilde": rate.alpha,
        "contraction_warning": rate.warning,
        "constants": consts.to_dict(),
        "holds": bool(w2 < np.sqrt(joint_sq)),
    }


def cmd_bound(args, cfg) -> int:
    out = _check_out(args.out)
    res = bound_comparison(cfg, _workers(cfg))
    _write_json(res, out)
    _persist(cfg, out)
    print(f"empirical W2 {res['w2_empirical']:.4f}  bound {res['w2_bound']:.4f}  "
          f"({'holds' if res['holds'] else 'VIOLATED'}) -> {out}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    out_dir = Path(args.out)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"report directory {out_dir} does not exist")
    ds = load_dataset(args.data)
    model = _load_model_for(args.model, ds)
    cands, names = _candidates(args.candidates, ds, ds.scenario)
    start = time.perf_counter()
    rows = _classify_all(model, ds, cands)
    wall = {} if cfg["reproducible"] else {"classification": time.perf_counter() - start}
    labelled = [r for r in rows if r["true"] is not None]
    confusion = confusion_matrix([r["true"] for r in labelled], [r["predicted"] for r in labelled], len(cands)) if labelled else None
    grid = ds.trajectories[0].times if len(ds) else np.array([0.0, 1.0])
    per_profile = []
    for j, name in enumerate(names):
        trials = [r for r in labelled if r["true"] == j]
        if not trials:
            continue
        rm = [rmse(cands[j], cands[r["predicted"]], grid) for r in trials]
        l2 = [l2_error(cands[j], cands[r["predicted"]], grid) for r in trials]
        per_profile.append({
            "profile": name, "trials": len(trials), "correct": sum(r["predicted"] == j for r in trials),
            "rmse": float(np.mean(rm)), "l2": float(np.mean(l2)),
        })
    bound = json.loads(Path(args.bound).read_text()) if args.bound else None
    estimation = json.loads(Path(args.estimates).read_text())["results"] if args.estimates else None
    rep = build_report(confusion, names, per_profile, estimation, bound, cfg, wall)
    path = write_report(rep, out_dir, timestamp=not cfg["reproducible"])
    _persist(cfg, path)
    print(f"report -> {path}")
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="worker cap (fallback: DFDI_THREADS)")
    common.add_argument("--reproducible", action="store_true", help="single-owner deterministic execution")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config entry")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dfdi", description="Flow-matching fault detection and isolation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a training dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenario", choices=["type1", "type2"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--horizon", type=float)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a flow model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("classify", cmd_classify, "classify trajectories among candidate profiles"),
                              ("estimate", cmd_estimate, "estimate fault magnitudes")):
        c = sub.add_parser(name, parents=[common], help=help_)
        c.add_argument("--model", required=True)
        c.add_argument("--data", required=True, help="dataset file holding the observed trajectories")
        c.add_argument("--out", required=True)
        if name == "classify":
            c.add_argument("--candidates", help="JSON list of profiles or conditioning vectors")
        else:
            c.add_argument("--index", type=int, help="single trajectory index (default: all)")
            c.add_argument("--iters", type=int)
            c.add_argument("--ekf", action="store_true", help="also run the augmented EKF baseline")
        c.set_defaults(func=func)

    b = sub.add_parser("bound", parents=[common], help="empirical W2 vs the Wasserstein bound")
    b.add_argument("--out", required=True)
    b.add_argument("--n-traj", type=int)
    b.add_argument("--dt", type=float)
    b.add_argument("--horizon", type=float)
    b.set_defaults(func=cmd_bound)

    e = sub.add_parser("evaluate", parents=[common], help="classification report with optional bound/estimation sections")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="existing report directory")
    e.add_argument("--candidates")
    e.add_argument("--bound", help="JSON written by 'dfdi bound'")
    e.add_argument("--estimates", help="JSON written by 'dfdi estimate'")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        # validate every section before any side effect
        _params(cfg)
        dcfg = DatasetConfig.from_dict(cfg["dataset"])
        if args.command == "generate":
            dcfg.validate(cfg["spacecraft"]["horizon"])
        TrainConfig(**cfg["train"])
        InferenceConfig(**cfg["inference"])
        EkfConfig(**cfg["ekf"])
        return args.func(args, copy.deepcopy(cfg))
    except ConfigError as exc:
        print(f"dfdi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"dfdi: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DatasetFormatError, OSError) as exc:
        print(f"dfdi: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        print(f"dfdi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
