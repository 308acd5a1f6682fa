"""Sequential training over tasks with data mixup and model-mixup distillation.

Random draws all come from ``state.rng`` in a fixed order:

* per epoch: one permutation of the task's images;
* per step, when data mixup is active: B mixing weights, then B buffer
  indices;
* augmentation: B flip coins, then crop area fractions, aspect ratios,
  tops and lefts (B each);
* B mask plans, one ``random(n_patches)`` draw each;
* when distillation is active: one teacher interpolation weight;
* after a task: the buffer rebalance draws.

Task 1 always trains on the reconstruction loss alone. From task 2 on, the
toggles in ``config.toggles`` switch the two regularisers on or off; with
both off the loop is plain sequential MAE training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import augment_batch
from .config import RunConfig
from .distill import draw_teacher, mim_loss, project, teacher_features, total_loss
from .errors import ConfigError, NumericError, UsageError
from .evaluation import evaluate_encoder
from .io import Manifest, MetricsLog, TaskSpec, read_tensor
from .mae import encode, mae_forward, patchify, pooled_features, recon_loss, decode_and_reconstruct, sample_masks
from .replay import data_mixup, rebalance_insert, sample_lambda, sample_memory_batch
from .state import TrainState
from .tensor_nn.autograd import no_grad
from .tensor_nn.optim import ScheduleConfig, adamw_step, lr_at

log = logging.getLogger(__name__)

VAL_MASK_SEED = 20240901


class StepHooks:
    """Instrumentation points; the default implementation does nothing."""

    def on_teacher(self, state: TrainState, teacher, lam2: float) -> None:
        pass

    def after_step(self, state: TrainState, info: dict) -> None:
        pass


_NO_HOOKS = StepHooks()


def task_schedule(config: RunConfig, epochs: int, steps_per_epoch: int) -> ScheduleConfig:
    warmup = min(config.optim.warmup_epochs, epochs - 1)
    return ScheduleConfig(config.optim.lr, warmup, epochs, steps_per_epoch)


def train_step(state: TrainState, x: np.ndarray, lr: float, use_mixup: bool, use_kd: bool,
               hooks: StepHooks = _NO_HOOKS) -> dict:
    """One optimizer step on the image batch ``x``; returns the step's losses."""
    cfg = state.config
    rng = state.rng
    b = x.shape[0]
    if use_mixup:
        lam1 = sample_lambda(cfg.mixup, rng, size=b)
        mem = sample_memory_batch(state.buffer, b, rng)
        state.counters.buffer_reads += b
        x = data_mixup(x, mem, lam1)
    x = augment_batch(x, cfg.augment, rng).astype(cfg.model.np_dtype, copy=False)
    plans = sample_masks(b, cfg.model.n_patches, cfg.model.mask_ratio, rng)

    params = state.trainable()
    params.zero_grad()
    recon, enc = mae_forward(state.model, x, plans)
    loss = recon
    mim_value = None
    lam2 = None
    if use_kd:
        teacher, lam2 = draw_teacher(state.model.encoder_params(), state.prev_encoder, cfg.distill, rng)
        state.counters.teacher_builds += 1
        hooks.on_teacher(state, teacher, lam2)
        t_feat = teacher_features(state.model, teacher, x)
        if cfg.distill.student_pass == "masked":
            s_feat = pooled_features(enc)
        else:
            s_feat = pooled_features(encode(state.model, x, None))
        mim = mim_loss(project(state.projector, s_feat), t_feat, cfg.distill.tau, cfg.distill.denominator)
        mim_value = mim.item()
        loss = total_loss(recon, mim, cfg.distill.beta_weight)
    if not np.isfinite(loss.item()):
        raise NumericError(
            f"non-finite loss at task {state.active_task} epoch {state.epoch} step {state.task_step}: "
            f"recon={recon.item()} mim={mim_value}"
        )
    loss.backward()
    adamw_step(params, None, state.optimizer, lr)
    state.task_step += 1
    state.counters.steps += 1
    info = {"loss": loss.item(), "loss_recon": recon.item(), "loss_mim": mim_value, "lr": lr, "lam2": lam2}
    hooks.after_step(state, info)
    return info


def snapshot_prev_encoder(state: TrainState) -> TrainState:
    """Store a frozen deep copy of the live encoder as the previous encoder."""
    state.prev_encoder = state.model.encoder_params().copy(frozen=True)
    return state


def train_task(state: TrainState, task: TaskSpec, images: np.ndarray, *, run_id: str = "",
               metrics: MetricsLog | None = None, hooks: StepHooks = _NO_HOOKS,
               stop_after_epoch: int | None = None) -> tuple[TrainState, list[dict]]:
    """Train ``task`` to completion (or until ``stop_after_epoch`` epochs are done).

    Resumes transparently when ``state.active_task == task.task_id``. On
    completion the encoder is snapshotted and the buffer rebalanced with
    images of this task.
    """
    cfg = state.config
    if state.active_task == task.task_id:
        pass
    elif state.active_task:
        raise UsageError(f"task {state.active_task} is still in progress; cannot start task {task.task_id}")
    elif task.task_id != state.task_index + 1:
        raise UsageError(f"expected task {state.task_index + 1}, got task {task.task_id}")
    else:
        state.active_task = task.task_id
        state.epoch = 0
        state.task_step = 0
        state.optimizer.reset()

    images = np.asarray(images)
    n = images.shape[0]
    if n < 2:
        raise ConfigError(f"task {task.task_id} has {n} images; need at least 2")
    epochs = task.epochs or cfg.train.epochs
    batch = min(task.batch_size or cfg.train.batch_size, n)
    steps_per_epoch = n // batch
    schedule = task_schedule(cfg, epochs, steps_per_epoch)
    later_task = task.task_id >= 2 and state.prev_encoder is not None
    use_mixup = cfg.toggles.data_mixup and later_task and len(state.buffer) > 0
    use_kd = cfg.toggles.model_mixup_kd and later_task

    records = []
    t0 = time.perf_counter()
    while state.epoch < epochs:
        perm = state.rng.permutation(n)
        recon_sum, mim_sum, lr = 0.0, 0.0, 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * batch:(s + 1) * batch]
            lr = lr_at(state.task_step, schedule)
            info = train_step(state, images[idx], lr, use_mixup, use_kd, hooks)
            recon_sum += info["loss_recon"]
            mim_sum += info["loss_mim"] or 0.0
        state.epoch += 1
        rec = {
            "run_id": run_id,
            "task_id": task.task_id,
            "epoch": state.epoch,
            "loss_recon": recon_sum / steps_per_epoch,
            "loss_mim": (mim_sum / steps_per_epoch) if use_kd else None,
            "lr": lr,
            "wall_time_s": round(time.perf_counter() - t0, 3),
        }
        records.append(rec)
        if metrics is not None:
            metrics.append(rec)
        log.debug("task %d epoch %d recon %.4f", task.task_id, state.epoch, rec["loss_recon"])
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch and state.epoch < epochs:
            return state, records

    snapshot_prev_encoder(state)
    rebalance_insert(state.buffer, images, task.task_id, state.rng)
    state.task_index = task.task_id
    state.active_task = 0
    state.epoch = 0
    state.task_step = 0
    return state, records


def validation_recon_error(model, images, seed: int = VAL_MASK_SEED, batch_size: int = 128) -> float:
    """Mean masked reconstruction loss with masks from a private fixed-seed generator."""
    x = np.asarray(images).astype(model.config.np_dtype, copy=False)
    rng = np.random.default_rng(seed)
    total = 0.0
    for lo in range(0, len(x), batch_size):
        xb = x[lo:lo + batch_size]
        plans = sample_masks(len(xb), model.config.n_patches, model.config.mask_ratio, rng)
        with no_grad():
            enc = encode(model, xb, plans)
            rec = decode_and_reconstruct(model, enc, plans)
            loss = recon_loss(patchify(xb, model.config.patch_size), rec, plans,
                              norm_pix=model.config.norm_pix_loss)
        total += loss.item() * len(xb)
    return total / len(x)


@dataclass
class SequenceResult:
    state: TrainState
    epoch_records: list[dict] = field(default_factory=list)
    eval_records: list[dict] = field(default_factory=list)
    finished: bool = True


def load_eval_set(manifest: Manifest):
    e = manifest.eval
    return (
        read_tensor(manifest.resolve(e.train_images)),
        read_tensor(manifest.resolve(e.train_labels)),
        read_tensor(manifest.resolve(e.test_images)),
        read_tensor(manifest.resolve(e.test_labels)),
    )


def run_sequence(manifest: Manifest, config: RunConfig, seed: int | None = None, *,
                 state: TrainState | None = None, run_id: str = "run", metrics: MetricsLog | None = None,
                 checkpoint_path=None, evaluate: bool = True, hooks: StepHooks = _NO_HOOKS,
                 stop_at: tuple[int, int] | None = None, val_tasks: tuple[int, ...] | None = None) -> SequenceResult:
    """Train every manifest task in order, evaluating after each completed task.

    ``state`` resumes a saved run; ``stop_at=(task_id, epoch)`` halts after that
    epoch (for checkpoint/resume tests). If ``checkpoint_path`` is given the
    state is written after each task and whenever training aborts.
    """
    from .checkpoint import save_checkpoint

    if not manifest.tasks:
        raise UsageError("empty task manifest")
    state = state or TrainState.initial(config, seed)
    eval_data = load_eval_set(manifest) if (evaluate and manifest.eval is not None) else None
    val_cache: dict[int, np.ndarray] = {}
    result = SequenceResult(state)
    for task in manifest.tasks:
        if task.task_id <= state.task_index:
            continue
        images = read_tensor(manifest.resolve(task.train))
        if images.ndim != 4:
            raise ConfigError(f"{task.train}: expected [N, C, H, W] images, got shape {images.shape}")
        stop_epoch = stop_at[1] if (stop_at is not None and stop_at[0] == task.task_id) else None
        try:
            state, recs = train_task(state, task, images, run_id=run_id, metrics=metrics, hooks=hooks,
                                     stop_after_epoch=stop_epoch)
        except Exception:
            if checkpoint_path is not None:
                save_checkpoint(state, checkpoint_path)
            raise
        result.epoch_records.extend(recs)
        if checkpoint_path is not None:
            save_checkpoint(state, checkpoint_path)
        if state.active_task:
            result.finished = False
            break
        if eval_data is not None and config.eval.every_task:
            rec = {"run_id": run_id, "task_id": task.task_id, "epoch": "eval"}
            t0 = time.perf_counter()
            scores = evaluate_encoder(state.model, *eval_data, k=config.eval.k, smoothing=config.eval.smoothing)
            rec.update(scores)
            val = {}
            for t in manifest.tasks[: [x.task_id for x in manifest.tasks].index(task.task_id) + 1]:
                if t.val is None or (val_tasks is not None and t.task_id not in val_tasks):
                    continue
                if t.task_id not in val_cache:
                    val_cache[t.task_id] = read_tensor(manifest.resolve(t.val))
                val[str(t.task_id)] = validation_recon_error(state.model, val_cache[t.task_id])
            rec["val_recon"] = val
            rec["wall_time_s"] = round(time.perf_counter() - t0, 3)
            result.eval_records.append(rec)
            if metrics is not None:
                metrics.append(rec)
    result.state = state
    return result


def write_final(state: TrainState, out_dir) -> Path:
    from .checkpoint import save_checkpoint

    path = Path(out_dir) / "final.ckpt"
    save_checkpoint(state, path)
    return path
