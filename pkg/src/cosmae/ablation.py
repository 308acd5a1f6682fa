"""Component and mixing-weight ablations at desk scale."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import RunConfig
from .errors import UsageError
from .io import Manifest, MetricsLog
from .trainer import run_sequence

# (label, data mixup, model mixup KD), in the usual table order
TOGGLE_GRID = (
    ("baseline", False, False),
    ("data_mixup", True, False),
    ("model_mixup_kd", False, True),
    ("full", True, True),
)

# mixing-weight settings swept for each of the two mixups
LAMBDA_GRID = (
    ("beta(0.4)", "beta", 0.4, 0.5),
    ("uniform", "uniform", 0.4, 0.5),
    ("const(0.25)", "constant", 0.4, 0.25),
    ("const(0.5)", "constant", 0.4, 0.5),
    ("const(0.75)", "constant", 0.4, 0.75),
)


def summarize(result, first_task: int | None = None) -> dict:
    """Final micro/macro mAP and the first task's validation error after the last task."""
    last = result.eval_records[-1]
    key = str(first_task if first_task is not None else min(int(k) for k in last["val_recon"]))
    return {
        "micro_map": last["micro_map"],
        "macro_map": last["macro_map"],
        "task1_val_recon": last["val_recon"].get(key),
    }


def run_variant(manifest: Manifest, config: RunConfig, seed: int, run_id: str,
                metrics: MetricsLog | None = None) -> dict:
    first = manifest.tasks[0].task_id
    res = run_sequence(manifest, config, seed, run_id=run_id, metrics=metrics, val_tasks=(first,))
    return summarize(res, first)


def toggle_grid(manifest: Manifest, config: RunConfig, seeds=(0,), metrics: MetricsLog | None = None,
                grid=TOGGLE_GRID) -> list[dict]:
    """One row per toggle setting, metrics averaged over ``seeds`` (per-seed values kept)."""
    rows = []
    for label, mix, kd in grid:
        cfg = config.with_toggles(data_mixup=mix, model_mixup_kd=kd)
        per_seed = [run_variant(manifest, cfg, s, f"{label}/seed{s}", metrics) for s in seeds]
        rows.append(_row(label, per_seed, seeds, data_mixup=mix, model_mixup_kd=kd))
    return rows


def lambda_grid(manifest: Manifest, config: RunConfig, which: str, seeds=(0,),
                metrics: MetricsLog | None = None, grid=LAMBDA_GRID) -> list[dict]:
    """Sweep the mixing-weight law of ``which`` ("data" or "model") with everything else full."""
    if which not in ("data", "model"):
        raise UsageError(f"which must be 'data' or 'model', got {which!r}")
    rows = []
    base = config.with_toggles(data_mixup=True, model_mixup_kd=True)
    for label, mode, alpha, const in grid:
        if which == "data":
            cfg = replace(base, mixup=replace(base.mixup, mode=mode, alpha=alpha, constant=const))
        else:
            cfg = replace(base, distill=replace(base.distill, mode=mode, alpha=alpha, constant=const))
        per_seed = [run_variant(manifest, cfg, s, f"{which}-{label}/seed{s}", metrics) for s in seeds]
        rows.append(_row(label, per_seed, seeds, mixup=which))
    return rows


def _row(label: str, per_seed: list[dict], seeds, **extra) -> dict:
    row = {"variant": label, **extra, "seeds": list(seeds)}
    for key in ("micro_map", "macro_map", "task1_val_recon"):
        vals = [r[key] for r in per_seed]
        row[key] = float(np.mean(vals))
        row[f"{key}_per_seed"] = vals
    return row


def format_rows(rows: list[dict]) -> str:
    lines = [f"{'variant':16s} {'micro mAP':>10s} {'macro mAP':>10s} {'task1 val':>10s}"]
    for r in rows:
        lines.append(f"{r['variant']:16s} {r['micro_map']:10.4f} {r['macro_map']:10.4f} {r['task1_val_recon']:10.4f}")
    return "\n".join(lines)
