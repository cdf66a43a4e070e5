"""Command-line runner: ``train``, ``sweep`` and ``verify``.

Exit codes: 0 success, 1 run failure, 2 usage error.

Settings resolve in three layers: profile defaults (``--profile``), then a
flat ``key=value`` file (``--config``), then flags and ``--set key=value``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .agents import TrainingDiverged, train, ultimate_compression_search
from .artifacts import ArtifactError, read_mask_dir, write_checkpoint, write_mask_dir, write_metrics
from .config import ALGORITHMS, PROFILES, TOPOLOGIES, ConfigError, TrainConfig, coerce, format_config, profile_config, read_config_file
from .envs import REGISTRY, make_env
from .verify import SUITES, run_suites

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_FLAG_FIELDS = {
    "algo": "algorithm",
    "env": "env",
    "topology": "topology",
    "actor_sparsity": "actor_sparsity",
    "critic_sparsity": "critic_sparsity",
    "steps": "total_steps",
    "seed": "seed",
    "mask_dir": "mask_dir",
}


class UsageError(Exception):
    pass


def _add_run_flags(p: argparse.ArgumentParser, require_env=True) -> None:
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--env", required=require_env, choices=sorted(REGISTRY))
    p.add_argument("--topology", choices=TOPOLOGIES + ("static_mask_file",))
    p.add_argument("--actor-sparsity", type=float)
    p.add_argument("--critic-sparsity", type=float)
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--config", help="key=value file overriding profile defaults")
    p.add_argument("--profile", choices=PROFILES, default="paper")
    p.add_argument("--mask-dir", help="mask dumps for --topology static_mask")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparserl", description="Sparse off-policy actor-critic training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_run_flags(p, require_env=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest", help="rerun exactly the configuration stored in a manifest.json")

    p = sub.add_parser("sweep", help="sparsity grid x seeds, plus the dense reference")
    _add_run_flags(p)
    p.add_argument("--grid", required=True, help="comma-separated sparsities, applied to actor and critic")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per grid point")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("verify", help="run the built-in oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="flip one mask bit mid-fuzz (self-test)")
    return parser


def resolve_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for flag, key in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip().replace("-", "_")] = coerce(k.strip(), v)
    if values.get("topology") == "static_mask_file":
        values["topology"] = "static_mask"
    profile = values.pop("profile", None) or args.profile
    return profile_config(profile, **values).validate()


def fingerprint(cfg: TrainConfig) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "version": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def manifest_for(cfg: TrainConfig, out: Path) -> dict:
    return {
        "config": cfg.to_dict(),
        "seeds": [cfg.seed],
        "env": cfg.env,
        "out": str(out),
        "version": __version__,
        "fingerprint": fingerprint(cfg),
    }


def config_from_manifest(path) -> TrainConfig:
    data = json.loads(Path(path).read_text())
    d = dict(data["config"])
    d["hidden"] = tuple(d["hidden"])
    return TrainConfig(**d).validate()


def run_training(cfg: TrainConfig, out) -> dict:
    """Run one job and write every artifact into ``out``. Returns the summary dict."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest_for(cfg, out), indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text(format_config(cfg))
    masks = read_mask_dir(cfg.mask_dir) if cfg.topology == "static_mask" else None
    env = make_env(cfg.env, cfg.seed)
    eval_env = make_env(cfg.env, cfg.seed + 10_007)
    try:
        result = train(cfg, env, masks=masks, eval_env=eval_env)
    except TrainingDiverged as exc:
        (out / "diagnostic.json").write_text(json.dumps({"error": str(exc), "state": exc.state}, indent=2, default=str))
        raise
    write_metrics(out / "metrics.csv", result.metrics)
    write_checkpoint(out / "checkpoint.npz", result.networks)
    write_mask_dir(out / "masks", result.masks)
    summary = {
        "final_score": result.final_score,
        "evaluations": len(result.evaluations),
        "env_steps": result.env_steps,
        "critic_updates": result.critic_updates,
        "actor_updates": result.actor_updates,
        "buffer_drops": result.buffer_drops,
        "flops": result.flops.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(args) -> int:
    if args.manifest:
        cfg = config_from_manifest(args.manifest)
    else:
        if args.env is None and not (args.config and "env" in read_config_file(args.config)):
            raise UsageError("--env is required")
        cfg = resolve_config(args)
    try:
        summary = run_training(cfg, args.out)
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"final score {summary['final_score']:.3f}  total size {summary['flops']['size_ratio']:.3f}x  "
          f"train FLOPs {summary['flops']['train_flops_ratio']:.3f}x  -> {args.out}")
    return EXIT_OK


def _sweep_cell(job):
    cfg_dict, out = job
    cfg_dict = dict(cfg_dict, hidden=tuple(cfg_dict["hidden"]))
    cfg = TrainConfig(**cfg_dict)
    try:
        return {"ok": True, "score": run_training(cfg, out)["final_score"]}
    except Exception as exc:  # recorded per cell; the sweep carries on
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def sweep_jobs(base: TrainConfig, grid, seeds, first_seed, out: Path) -> list:
    """(sparsity, seed, config, dir) for every grid cell plus the dense reference at sparsity 0."""
    jobs = []
    dense = base.replace(topology="static_sparse", actor_sparsity=0.0, critic_sparsity=0.0)
    for seed in range(first_seed, first_seed + seeds):
        jobs.append((0.0, seed, dense.replace(seed=seed), out / "dense" / f"seed{seed}", True))
    for s in grid:
        for seed in range(first_seed, first_seed + seeds):
            cfg = base.replace(actor_sparsity=s, critic_sparsity=s, seed=seed)
            jobs.append((s, seed, cfg, out / f"sparsity{s:g}" / f"seed{seed}", False))
    return jobs


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
    if not grid or any(not 0.0 <= s < 1.0 for s in grid):
        raise UsageError("--grid values must lie in [0, 1)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = sweep_jobs(base, grid, args.seeds, args.first_seed, out)
    payload = [(cfg.to_dict(), str(d)) for _, _, cfg, d, _ in jobs]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_sweep_cell, payload))
    else:
        outcomes = [_sweep_cell(p) for p in payload]

    rows = {}
    for (s, seed, _, _, is_dense), res in zip(jobs, outcomes):
        key = ("dense", 0.0) if is_dense else (base.topology, s)
        rows.setdefault(key, {"scores": [], "errors": []})
        if res["ok"]:
            rows[key]["scores"].append(res["score"])
        else:
            rows[key]["errors"].append(f"seed {seed}: {res['error']}")
    table = []
    for (topo, s), r in rows.items():
        scores = r["scores"]
        table.append({
            "topology": topo,
            "sparsity": s,
            "runs": len(scores) + len(r["errors"]),
            "failed": len(r["errors"]),
            "mean": float(np.mean(scores)) if scores else float("nan"),
            "sd": float(np.std(scores)) if scores else float("nan"),
            "errors": r["errors"],
        })
    dense_mean = table[0]["mean"]
    means = {row["sparsity"]: row["mean"] for row in table[1:]}
    result = ultimate_compression_search(grid, dense_mean, lambda s: means[s])
    with open(out / "sweep.csv", "w") as fh:
        fh.write("topology,sparsity,runs,failed,mean,sd\n")
        for row in table:
            fh.write(f"{row['topology']},{row['sparsity']!r},{row['runs']},{row['failed']},{row['mean']!r},{row['sd']!r}\n")
    (out / "compression.json").write_text(json.dumps({
        "dense_score": dense_mean,
        "ultimate_sparsity": result.sparsity,
        "table": [{"sparsity": s, "score": sc, "within_3pct": ok} for s, sc, ok in result.table],
        "cells": table,
    }, indent=2) + "\n")
    for row in table:
        print(f"{row['topology']:>14} {row['sparsity']:>6.3f}  {row['mean']:10.2f} +- {row['sd']:.2f}  ({row['failed']} failed)")
    found = "none found" if result.sparsity is None else f"{result.sparsity:g}"
    print(f"ultimate compression sparsity: {found}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(args.suite, seed=args.seed, inject_fault=args.inject_fault)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return {"train": cmd_train, "sweep": cmd_sweep, "verify": cmd_verify}[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sparserl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, ValueError) as exc:
        print(f"sparserl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
