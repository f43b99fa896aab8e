"""Command-line entry point: ``kdp <command> [options] [--key value ...]``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file format
error, 4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .bc import BCConfig, load_bc, save_bc, train_bc
from .diffuser import DiffuserConfig, load_denoiser, save_denoiser, train_denoiser
from .drift import ABLATIONS, DriftConfig, ablated, drift_field, dump_drift_csv
from .envs import ENVS, PointMaze2D, collect_dataset, make_env
from .errors import ConfigError, KDPError, TrainingError
from .planner import (BCBackend, BenchEntry, DiffusionBackend, KDPBackend, PlannerConfig,
                      action_diversity, evaluate, latency_bench, summarize, write_bench_csv,
                      write_metrics_csv, write_trajectory_csv)
from .scorer import ScorerConfig, load_scorer, save_scorer, train_scorer
from .trainer import (TrainConfig, config_hash, load_policy, probe_conditions,
                      read_meta, sample_generator, save_policy, train)
from .trajkit import constraint_mask, load_dataset, save_dataset

log = logging.getLogger("kdp")

DEFAULTS_PATH = Path(__file__).with_name("configs") / "defaults.json"
DEFAULTS_VERSION = 1
VARIANTS = {
    "kdp": TrainConfig,
    "diffuser": DiffuserConfig,
    "bc": BCConfig,
    "scorer": ScorerConfig,
}
ABLATE_COLUMNS = ("ablation", "config_hash", "final_loss", "action_div", "success_rate",
                  "nonfinite_episodes", "diverged")


class UsageError(KDPError):
    pass


# ---------------------------------------------------------------- config layers

def load_defaults(path=None):
    path = Path(path) if path else DEFAULTS_PATH
    raw = json.loads(path.read_text())
    if raw.get("version") != DEFAULTS_VERSION:
        raise ConfigError(f"{path}: defaults version {raw.get('version')} != {DEFAULTS_VERSION}")
    return raw


def _coerce(template, text, key):
    if isinstance(template, bool):
        low = text.lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise UsageError(f"--{key}: expected a boolean, got {text!r}")
        return low in ("1", "true", "yes", "on")
    try:
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, (list, tuple)):
            inner = template[0] if len(template) else 0.0
            return [type(inner)(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise UsageError(f"--{key}: cannot parse {text!r}") from exc
    return text


def parse_overrides(tokens):
    """``['--steps', '10', '--use-keying', 'false']`` -> ``{'steps': '10', 'use_keying': 'false'}``."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise UsageError(f"--{key} needs a value")
        out[key] = val
    return out


def build_config(variant, overrides, defaults=None, ablation=None):
    """Dataclass defaults <- defaults file <- ablation <- ``--key value`` overrides."""
    cls = VARIANTS[variant]
    base = dataclasses.asdict(cls())
    base.update((defaults or {}).get(variant, {}))
    flat = dict(base)
    nested = {}
    if variant == "kdp":
        nested = dict(base["drift"])
        if ablation:
            nested.update(dataclasses.asdict(ablated(DriftConfig(**nested), ablation)))
    valid = sorted(set(flat) - {"drift"} | set(nested))
    for key, text in overrides.items():
        if key in nested:
            nested[key] = _coerce(nested[key], text, key)
        elif key in flat and key != "drift":
            flat[key] = _coerce(flat[key], text, key)
        else:
            raise UsageError(f"unknown config key --{key}; valid keys: {', '.join(valid)}")
    if variant == "kdp":
        flat["drift"] = DriftConfig(**nested)
    try:
        return cls(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------- helpers

def _out_dir(args, command):
    root = args.out or os.path.join(os.environ.get("KDP_OUT_DIR", "runs"), command)
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out, payload):
    payload = dict(payload)
    payload["config_hash"] = config_hash(payload.get("config", payload))
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=list) + "\n")
    return payload["config_hash"]


def _need_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _stem(path):
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".kdpn", ".json") else p


def _load_backend(path):
    stem = _stem(path)
    _need_file(stem.with_suffix(".json"), "checkpoint metadata")
    _need_file(stem.with_suffix(".kdpn"), "checkpoint")
    kind = read_meta(stem).get("kind")
    if kind == "kdp":
        return KDPBackend(load_policy(stem))
    if kind == "diffuser":
        return DiffusionBackend(load_denoiser(stem))
    if kind == "bc":
        return BCBackend(load_bc(stem))
    raise ConfigError(f"{stem}: unknown checkpoint kind {kind!r}")


def _check_env(name):
    if name not in ENVS:
        raise UsageError(f"unknown env {name!r}; valid: {', '.join(sorted(ENVS))}")
    return make_env(name)


def _shape_match(env, backend):
    if (env.d_s, env.d_a) != (backend.shape.d_s, backend.shape.d_a):
        raise UsageError(f"checkpoint shape {backend.shape} does not fit env {env.name}")


def _print_table(rows, columns):
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)))


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, overrides):
    if overrides:
        raise UsageError(f"gen-data takes no config overrides: {sorted(overrides)}")
    env = _check_env(args.env)
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    out = _out_dir(args, "gen-data")
    ds = collect_dataset(env, episodes=args.episodes, seed=args.seed)
    save_dataset(ds, out / "dataset.kdpw")
    _write_config(out, {"command": "gen-data", "config": {
        "env": env.name, "episodes": args.episodes, "seed": args.seed,
        "env_config": dataclasses.asdict(env.config)}})
    print(f"wrote {len(ds)} windows to {out / 'dataset.kdpw'} "
          f"(success_rate={ds.manifest['success_rate']:.3f})")
    return 0


def cmd_train(args, overrides):
    data_path = _need_file(args.data, "dataset")
    if args.ablate and args.variant != "kdp":
        raise UsageError("--ablate applies to 'train kdp' only")
    if args.ablate and args.ablate not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.ablate!r}; valid: {', '.join(ABLATIONS)}")
    if "seed" not in overrides and args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = build_config(args.variant, overrides, load_defaults(args.defaults), args.ablate)
    ds = load_dataset(data_path)
    out = _out_dir(args, "train")
    h = _write_config(out, {"command": "train", "variant": args.variant, "dataset": str(data_path),
                            "ablation": args.ablate, "config": cfg.to_dict()})
    stem = out / args.variant

    if args.variant == "kdp":
        policy, report = train(ds, cfg)
        save_policy(policy, stem, cfg, {"ablation": args.ablate})
        report.to_csv(out / "report.csv")
        steps, losses = report.column("step"), report.column("loss")
        if args.dump_drift:
            _dump_drift(policy, ds, cfg, out / "drift.csv")
    elif args.variant == "diffuser":
        den, losses = train_denoiser(ds, cfg=cfg)
        save_denoiser(den, stem, cfg)
        steps = np.arange(1, len(losses) + 1)
        _write_loss_csv(out / "report.csv", steps, losses)
    elif args.variant == "bc":
        policy, losses = train_bc(ds, cfg)
        save_bc(policy, stem, cfg)
        steps = np.arange(1, len(losses) + 1)
        _write_loss_csv(out / "report.csv", steps, losses)
    else:
        model, info, losses = train_scorer(ds, cfg)
        save_scorer(model, stem, cfg)
        (out / "scorer_holdout.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        steps = np.arange(1, len(losses) + 1)
        _write_loss_csv(out / "report.csv", steps, losses)
        print("holdout: " + " ".join(f"{k}={_fmt(v)}" for k, v in sorted(info.items())))
    if args.svg and len(losses):
        plotting.loss_curve(steps, losses, out / "loss.svg", title=f"{args.variant} loss")
    final = f"{losses[-1]:.6g}" if len(losses) else "n/a"
    print(f"trained {args.variant} steps={len(losses)} final_loss={final} "
          f"config_hash={h} checkpoint={stem.with_suffix('.kdpn')}")
    return 0


def _write_loss_csv(path, steps, losses):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for s, l in zip(steps, losses):
            fh.write(f"{int(s)},{l:.9g}\n")


def _dump_drift(policy, ds, cfg, path):
    """Drift of the final generator on the first dataset batch."""
    data = ds.normalized()[: min(cfg.batch_size, len(ds))]
    gen = sample_generator(policy, data[:, 0, : ds.shape.d_s], cfg.seed)
    batch = drift_field(gen, data, cfg.drift, constraint_mask(ds.shape), ds.shape.d_s)
    dump_drift_csv(batch, path)


def cmd_eval(args, overrides):
    if overrides:
        raise UsageError(f"eval takes no config overrides: {sorted(overrides)}")
    env = _check_env(args.env)
    if args.ranked and not args.scorer:
        raise UsageError("--ranked needs --scorer")
    if args.episodes < 0:
        raise UsageError("--episodes must be >= 0")
    backend = _load_backend(args.checkpoint)
    _shape_match(env, backend)
    scorer = load_scorer(_stem(args.scorer)) if args.scorer else None
    pcfg = PlannerConfig(K=args.K, L=args.L, ranked=args.ranked, seed=args.seed)
    pcfg.check(backend.shape)
    out = _out_dir(args, "eval")
    _write_config(out, {"command": "eval", "config": {
        "checkpoint": str(args.checkpoint), "scorer": args.scorer, "env": env.name,
        "planner": dataclasses.asdict(pcfg), "episodes": args.episodes,
        "max_steps": args.max_steps}})
    rows, episodes = evaluate(lambda: make_env(env.name, env.config), backend, pcfg, scorer,
                              args.episodes, args.workers, args.max_steps, return_episodes=True)
    write_metrics_csv(rows, out / "metrics.csv")
    summ = summarize(rows)
    (out / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
    if args.trajectories:
        write_trajectory_csv(episodes, out / "trajectories.csv")
    if args.svg and episodes and isinstance(env, PointMaze2D):
        plotting.maze_trajectories([(ep, r["success"]) for ep, r in zip(episodes, rows)],
                                   env.config, out / "trajectories.svg")
    print(f"success_rate={_fmt(summ['success_rate'])} mean_return={_fmt(summ['mean_return'])} "
          f"pl_p50_ms={_fmt(summ['pl_p50_ms'])} episodes={summ['episodes']}")
    return 0


def cmd_bench(args, overrides):
    if overrides:
        raise UsageError(f"bench takes no config overrides: {sorted(overrides)}")
    env = _check_env(args.env)
    Ks = tuple(int(k) for k in args.K.split(","))
    if not Ks or min(Ks) < 1:
        raise UsageError("--K must list positive integers")
    entries = []
    for label, path in (("kdp", args.kdp), ("diffuser", args.diffuser), ("bc", args.bc)):
        if path:
            be = _load_backend(path)
            _shape_match(env, be)
            entries.append(BenchEntry(be, Ks if label != "bc" else (1,), label))
    if not entries:
        raise UsageError("bench needs at least one of --kdp, --diffuser, --bc")
    rng = np.random.default_rng(args.seed)
    conditions = np.stack([env.reset(rng) for _ in range(32)])
    out = _out_dir(args, "bench")
    _write_config(out, {"command": "bench", "config": {
        "kdp": args.kdp, "diffuser": args.diffuser, "bc": args.bc, "env": env.name,
        "K": list(Ks), "calls": args.calls, "warmup": args.warmup, "seed": args.seed}})
    rows = latency_bench(entries, conditions, env, args.calls, args.warmup, args.seed)
    write_bench_csv(rows, out / "bench.csv")
    if args.svg:
        plotting.bench_bars(rows, out / "bench.svg")
    _print_table([{k: _fmt(v) for k, v in r.items()} for r in rows],
                 ("method", "K", "T", "nfe", "bef", "pl_p50_ms", "e2e_p50_ms"))
    return 0


def cmd_ablate(args, overrides):
    data_path = _need_file(args.data, "dataset")
    env = _check_env(args.env)
    if args.ranked and not args.scorer:
        raise UsageError("--ranked needs --scorer")
    defaults = load_defaults(args.defaults)
    if "seed" not in overrides:
        overrides["seed"] = str(args.seed)
    cfgs = {name: build_config("kdp", overrides, defaults, name) for name in ABLATIONS}
    ds = load_dataset(data_path)
    if (env.d_s, env.d_a) != (ds.shape.d_s, ds.shape.d_a):
        raise UsageError(f"dataset shape {ds.shape} does not fit env {env.name}")
    scorer = load_scorer(_stem(args.scorer)) if args.scorer else None
    pcfg = PlannerConfig(K=args.K, L=args.L, ranked=args.ranked, seed=args.seed)
    out = _out_dir(args, "ablate")
    _write_config(out, {"command": "ablate", "dataset": str(data_path), "config": {
        "env": env.name, "planner": dataclasses.asdict(pcfg), "episodes": args.episodes,
        "probe_k": args.probe_k, "rows": {n: c.to_dict() for n, c in cfgs.items()}}})
    probes = ds.norm.denormalize_state(probe_conditions(ds, 20))
    rows = []
    for name, cfg in cfgs.items():
        row = {"ablation": name, "config_hash": cfg.config_hash()}
        try:
            policy, report = train(ds, cfg)
        except TrainingError as exc:
            log.warning("%s: training aborted: %s", name, exc)
            row.update(final_loss=float("nan"), action_div=float("nan"),
                       success_rate=float("nan"), nonfinite_episodes=0, diverged=1)
            rows.append(row)
            continue
        save_policy(policy, out / name / "kdp", cfg, {"ablation": name})
        backend = KDPBackend(policy)
        div = action_diversity(backend, probes, args.probe_k, seed=args.seed)
        summ = summarize(evaluate(lambda: make_env(env.name, env.config), backend, pcfg,
                                  scorer, args.episodes, max_steps=args.max_steps))
        row.update(final_loss=float(report.column("loss")[-1]) if len(report) else float("nan"),
                   action_div=div, success_rate=summ["success_rate"],
                   nonfinite_episodes=summ.get("nonfinite", 0))
        row["diverged"] = int(not np.isfinite(div) or row["nonfinite_episodes"] > 0)
        rows.append(row)
        print(f"{name}: action_div={div:.4g} success_rate={_fmt(summ['success_rate'])}",
              flush=True)
    with open(out / "ablate.csv", "w") as fh:
        fh.write(",".join(ABLATE_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(str(_fmt(r[c])) for c in ABLATE_COLUMNS) + "\n")
    _print_table([{k: _fmt(v) for k, v in r.items()} for r in rows], ABLATE_COLUMNS)
    return 0


# -------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="kdp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=0):
        sp.add_argument("--out", help="output directory (default: $KDP_OUT_DIR/<command>)")
        sp.add_argument("--seed", type=int, default=seed)

    g = sub.add_parser("gen-data", help="collect a scripted dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--episodes", type=int, default=200)
    common(g)

    t = sub.add_parser("train", help="train kdp, diffuser, bc or scorer; extra --key value "
                                     "flags override config fields")
    t.add_argument("variant", choices=sorted(VARIANTS))
    t.add_argument("--data", required=True)
    t.add_argument("--ablate", help="one of: " + ", ".join(ABLATIONS))
    t.add_argument("--defaults", help="alternative versioned defaults file")
    t.add_argument("--svg", action="store_true", help="write loss.svg")
    t.add_argument("--dump-drift", action="store_true",
                   help="write per-pair drift weights of the final model (kdp)")
    common(t, seed=None)

    e = sub.add_parser("eval", help="closed-loop rollouts of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--scorer")
    e.add_argument("--ranked", action="store_true")
    e.add_argument("--K", type=int, default=16)
    e.add_argument("--L", type=int, default=1)
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--max-steps", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--trajectories", action="store_true", help="write trajectories.csv")
    e.add_argument("--svg", action="store_true", help="write trajectories.svg (maze)")
    common(e)

    b = sub.add_parser("bench", help="planning latency and forward-count table")
    b.add_argument("--env", required=True)
    b.add_argument("--kdp")
    b.add_argument("--diffuser")
    b.add_argument("--bc")
    b.add_argument("--K", default="1,16,64")
    b.add_argument("--calls", type=int, default=200)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--svg", action="store_true")
    common(b)

    a = sub.add_parser("ablate", help="train and evaluate the six-row ablation matrix")
    a.add_argument("--data", required=True)
    a.add_argument("--env", required=True)
    a.add_argument("--scorer")
    a.add_argument("--ranked", action="store_true")
    a.add_argument("--K", type=int, default=16)
    a.add_argument("--L", type=int, default=1)
    a.add_argument("--episodes", type=int, default=10)
    a.add_argument("--max-steps", type=int)
    a.add_argument("--probe-k", type=int, default=256)
    a.add_argument("--defaults")
    common(a)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
        return COMMANDS[args.command](args, overrides)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"kdp: usage error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"kdp: numerical abort: {exc}", file=sys.stderr)
        for k, v in exc.diagnostics.items():
            if np.ndim(v) == 0:
                print(f"  {k}: {v}", file=sys.stderr)
        return 4
    except OSError as exc:
        # FormatError is an OSError too: corrupt files count as I/O failures
        print(f"kdp: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
