"""Command-line workbench: ``cosmae {train,eval,synth,ablate,inspect}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 file-format or I/O error. ``COSMAE_SEED`` overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, CosmaeError, FormatError, UsageError

log = logging.getLogger("cosmae")

SEED_ENV = "COSMAE_SEED"


def _seed_override(config):
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return config
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return replace(config, seed=seed)


def _load_run_config(path):
    from .config import load_config

    return _seed_override(load_config(path))


def _manifest_path(data) -> Path:
    p = Path(data)
    return p / "manifest.json" if p.is_dir() else p


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .io import MetricsLog, load_manifest
    from .trainer import run_sequence, write_final

    config = _load_run_config(args.config)
    manifest = load_manifest(_manifest_path(args.manifest))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, config=config, force=args.force)
    elif metrics_path.exists():
        if not args.force:
            raise UsageError(f"{metrics_path} already exists (use --force to start over or --resume)")
        metrics_path.unlink()
    run_id = args.run_id or out.name
    ckpt = out / "checkpoint.ckpt"
    try:
        result = run_sequence(manifest, config, config.seed, state=state, run_id=run_id,
                              metrics=MetricsLog(metrics_path), checkpoint_path=ckpt,
                              evaluate=not args.no_eval)
    except KeyboardInterrupt:
        log.warning("interrupted; latest checkpoint is %s", ckpt)
        return 130
    final = write_final(result.state, out)
    save_checkpoint(result.state, ckpt)
    for rec in result.eval_records:
        log.info("task %d: micro mAP %.4f", rec["task_id"], rec["micro_map"])
    print(json.dumps({"final_checkpoint": str(final), "metrics": str(metrics_path),
                      "tasks_completed": result.state.task_index}))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import evaluate_encoder
    from .io import load_manifest
    from .trainer import load_eval_set

    state = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_manifest_path(args.data))
    if manifest.eval is None:
        raise ConfigError(f"{_manifest_path(args.data)}: manifest has no eval section")
    k = args.k if args.k is not None else state.config.eval.k
    scores = evaluate_encoder(state.model, *load_eval_set(manifest), k=k, smoothing=state.config.eval.smoothing)
    print(json.dumps({"checkpoint": str(args.checkpoint), "tasks_completed": state.task_index, "k": k, **scores},
                     sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    from .synth import synth_tasks

    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, "0"))
    manifest = synth_tasks(args.preset, seed, args.out, force=args.force)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "tasks": len(manifest.tasks)}))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import format_rows, lambda_grid, toggle_grid
    from .io import MetricsLog, load_manifest
    from .synth import synth_tasks

    config = _load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = load_manifest(_manifest_path(args.manifest))
    else:
        data = out / "data"
        if (data / "manifest.json").exists():
            manifest = load_manifest(data / "manifest.json")
        else:
            manifest = synth_tasks(args.preset, config.seed, data)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (config.seed,)
    metrics = MetricsLog(out / "ablation_metrics.jsonl")
    grids = ["toggles", "lambda-data", "lambda-model"] if args.grid == "all" else [args.grid]
    results_path = out / "ablation.jsonl"
    for grid in grids:
        if grid == "toggles":
            rows = toggle_grid(manifest, config, seeds, metrics)
        else:
            rows = lambda_grid(manifest, config, grid.split("-")[1], seeds, metrics)
        with open(results_path, "a", encoding="utf-8") as fh:
            for r in rows:
                r = {"grid": grid, **r}
                fh.write(json.dumps(r, sort_keys=True) + "\n")
                print(json.dumps(r, sort_keys=True))
        log.info("%s\n%s", grid, format_rows(rows))
    return 0


def cmd_inspect(args) -> int:
    from .checkpoint import inspect_checkpoint

    print(inspect_checkpoint(args.checkpoint))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosmae", description="Continual masked-autoencoder pretraining workbench.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train over the manifest's task sequence")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True, help="manifest.json or a directory holding one")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="overwrite metrics / accept a config digest mismatch")
    t.add_argument("--run-id")
    t.add_argument("--no-eval", action="store_true", help="skip per-task downstream evaluation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ML-kNN micro/macro mAP of a checkpoint's encoder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="manifest.json (or its directory) with an eval section")
    e.add_argument("--k", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write synthetic task data and a manifest")
    s.add_argument("--preset", default="desk")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="component toggle grid and mixing-weight grids")
    a.add_argument("--config", required=True)
    a.add_argument("--manifest", help="defaults to synthetic data under OUT/data")
    a.add_argument("--out", default="ablation")
    a.add_argument("--preset", default="desk", help="synthetic preset when no manifest is given")
    a.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    a.add_argument("--grid", choices=["toggles", "lambda-data", "lambda-model", "all"], default="toggles")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="print checkpoint header and tensor inventory")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CosmaeError as exc:
        print(f"cosmae {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cosmae {args.command}: error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
