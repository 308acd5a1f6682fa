"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the verdict lines are
written straight to the terminal, so ``-s`` is not needed). The trend check
trains 9 desk-scale runs and takes about five minutes.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import special, stats

from cosmae.ablation import TOGGLE_GRID, toggle_grid
from cosmae.checkpoint import encode_checkpoint, load_checkpoint
from cosmae.config import TrainDefaults, desk_preset
from cosmae.distill import DistillConfig, Projector, interpolate_weights, mim_loss, project, total_loss
from cosmae.evaluation import micro_map, mlknn_fit, mlknn_predict
from cosmae.io import MetricsLog, read_metrics
from cosmae.mae import MAEModel, mae_forward, sample_masks
from cosmae.replay import MemoryBuffer, MixupConfig, data_mixup, rebalance_insert, sample_lambda
from cosmae.synth import synth_tasks
from cosmae.tensor_nn.autograd import Tensor
from cosmae.tensor_nn.params import ParamSet
from cosmae.trainer import StepHooks, run_sequence
from conftest import TINY64, tiny_run_config
from oracles import ap_by_enumeration, central_fd, mim_direct, mlknn_direct, rel_err


@pytest.fixture
def verdict(request, pytestconfig):
    """Call ``verdict(n, name, checks, seconds)``; prints the line, then asserts every check."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def report(n, name, checks, seconds, limit=None):
        failed = [label for label, ok in checks if not ok]
        if limit is not None and seconds >= limit:
            failed.append(f"runtime {seconds:.1f}s over {limit:.0f}s")
        status = "PASS" if not failed else "FAIL"
        line = f"[criterion {n}] {status} {name} ({seconds:.1f}s)"
        if failed:
            line += " :: " + "; ".join(failed)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert not failed, line

    return report


def test_criterion_1_closed_forms_and_mim_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = []

    x, m = rng.standard_normal((4, 3, 8, 8)), rng.standard_normal((4, 3, 8, 8))
    lam = rng.random(4)
    expect = lam[:, None, None, None] * x + (1 - lam[:, None, None, None]) * m
    checks.append(("data mixup", np.max(np.abs(data_mixup(x, m, lam) - expect)) <= 1e-12))

    cur, prev = ParamSet(), ParamSet()
    for name, shape in (("w", (5, 6)), ("b", (6,))):
        cur.add(name, Tensor(rng.standard_normal(shape), requires_grad=True))
        prev.add(name, Tensor(rng.standard_normal(shape)))
    ok = True
    for lam2 in (0.0, 0.3, 0.77, 1.0):
        mixed = interpolate_weights(cur, prev, lam2)
        ok &= all(np.max(np.abs(mixed[n].data - (lam2 * cur[n].data + (1 - lam2) * prev[n].data))) <= 1e-12
                  for n in cur)
    checks.append(("weight interpolation", ok))

    r, q = 1.2345, -0.678
    checks.append(("total loss", abs(total_loss(Tensor(np.array(r)), Tensor(np.array(q)), 0.1).item()
                                     - (r + 0.1 * q)) <= 1e-12))

    worst = 0.0
    for b in (2, 4, 8):
        for d in (4, 16):
            for tau in (0.5, 1.0):
                for _ in range(3):
                    s, t = rng.standard_normal((b, d)), rng.standard_normal((b, d))
                    worst = max(worst, abs(mim_loss(Tensor(s), t, tau).item() - mim_direct(s, t, tau)))
    checks.append((f"mim vs direct summation (max err {worst:.2e})", worst < 1e-6))
    v = np.array([[0.3, -1.2, 0.5]] * 2)
    checks.append(("identical features give 0", abs(mim_loss(Tensor(v), v, 0.5).item()) < 1e-12))
    e = np.eye(2)
    checks.append(("orthonormal pair gives -2", abs(mim_loss(Tensor(e), e, 0.5).item() + 2.0) < 1e-12))
    verdict(1, "closed forms and contrastive-loss oracle", checks, time.perf_counter() - t0, limit=10)


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    model = MAEModel.create(TINY64, rng)
    x = rng.standard_normal((2, TINY64.channels, 8, 8))
    plans = sample_masks(2, TINY64.n_patches, TINY64.mask_ratio, rng)
    model.params.zero_grad()
    loss, _ = mae_forward(model, x, plans)
    loss.backward()
    numeric = central_fd(lambda: mae_forward(model, x, plans)[0].item(), [t.data for t in model.params.values()])
    err_mae = rel_err(np.concatenate([t.grad.ravel() for t in model.params.values()]),
                      np.concatenate([g.ravel() for g in numeric]))

    proj = Projector.create(16, 32, rng, dtype=np.float64)
    c = rng.standard_normal((4, 16))
    teacher = rng.standard_normal((4, 16))
    ct = Tensor(c.copy(), requires_grad=True)
    mim_loss(project(proj, ct), teacher, 0.5).backward()
    numeric = central_fd(lambda: mim_loss(project(proj, Tensor(c)), teacher, 0.5).item(),
                         [c] + [t.data for t in proj.params.values()])
    analytic = np.concatenate([ct.grad.ravel()] + [t.grad.ravel() for t in proj.params.values()])
    err_mim = rel_err(analytic, np.concatenate([g.ravel() for g in numeric]))
    checks = [(f"encode-decode-recon path rel err {err_mae:.1e}", err_mae < 1e-4),
              (f"projector-mim path rel err {err_mim:.1e}", err_mim < 1e-4)]
    verdict(2, "finite-difference gradient checks", checks, time.perf_counter() - t0, limit=120)


class _Audit(StepHooks):
    def __init__(self):
        self.pending = None
        self.steps = 0
        self.teachers = 0
        self.problems = []
        self.snapshot = None

    def on_teacher(self, state, teacher, lam2):
        if self.snapshot is None:
            self.snapshot = {n: t.data.copy() for n, t in state.prev_encoder.items()}
        self.pending = (teacher, {n: t.data.copy() for n, t in teacher.items()})
        self.teachers += 1

    def after_step(self, state, info):
        if self.pending is None:
            return
        teacher, before = self.pending
        for n, t in teacher.items():
            if t.grad is not None or t.requires_grad:
                self.problems.append(f"teacher {n} got a gradient buffer")
            if not np.array_equal(t.data, before[n]):
                self.problems.append(f"teacher {n} changed")
        for n, t in state.prev_encoder.items():
            if t.grad is not None or t.requires_grad:
                self.problems.append(f"previous encoder {n} got a gradient buffer")
            if not np.array_equal(t.data, self.snapshot[n]):
                self.problems.append(f"previous encoder {n} changed")
        self.pending = None
        self.steps += 1


def test_criterion_3_stop_gradient_and_snapshot(verdict, smoke_manifest):
    t0 = time.perf_counter()
    audit = _Audit()
    res = run_sequence(smoke_manifest, tiny_run_config(train=TrainDefaults(epochs=4, batch_size=8)),
                       evaluate=False, hooks=audit)
    checks = [(f"{audit.steps} audited steps", audit.steps >= 50),
              ("one teacher per audited step", audit.teachers == audit.steps),
              ("no gradient buffers, no changes", not audit.problems),
              ("final snapshot matches live encoder", res.state.prev_encoder.bitwise_equal(
                  res.state.model.encoder_params()))]
    verdict(3, "teachers and previous encoder untouched", checks, time.perf_counter() - t0)


def test_criterion_4_buffer_properties(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    over = uneven = stray = 0
    for _ in range(1000):
        capacity = int(rng.integers(3, 65))
        n_tasks = int(rng.integers(1, 9))
        buf = MemoryBuffer(capacity)
        inserted = set()
        for t in range(1, n_tasks + 1):
            n = int(rng.integers(capacity, 2 * capacity + 1))
            imgs = np.array([[t, i] for i in range(n)], dtype=np.float64)
            inserted |= {(t, i) for i in range(n)}
            rebalance_insert(buf, imgs, t, rng)
            over += len(buf) > capacity
            counts = [buf.counts().get(k, 0) for k in range(1, t + 1)]
            uneven += max(counts) - min(counts) > 1
            stray += any((int(a), int(b)) not in inserted for a, b in buf.images)
    checks = [(f"capacity exceeded {over}x", over == 0), (f"uneven counts {uneven}x", uneven == 0),
              (f"foreign images {stray}x", stray == 0)]
    verdict(4, "memory buffer over 1000 random insert sequences", checks, time.perf_counter() - t0)


def test_criterion_5_sampling_statistics(verdict):
    t0 = time.perf_counter()
    lam = sample_lambda(MixupConfig(alpha=0.4), np.random.default_rng(0), size=100_000)
    mean = lam.mean()
    cdf = (lam <= 0.1).mean()
    oracle = special.betainc(0.4, 0.4, 0.1)
    rng = np.random.default_rng(1)
    ks = stats.kstest(sample_lambda(MixupConfig(alpha=1.0), rng, size=100_000), "uniform")
    kd = sample_lambda(DistillConfig(alpha=0.4), np.random.default_rng(2), size=100_000)
    checks = [(f"Beta(0.4,0.4) mean {mean:.4f}", abs(mean - 0.5) <= 0.01),
              (f"CDF(0.1) {cdf:.4f} vs {oracle:.4f}", abs(cdf - oracle) <= 0.01),
              (f"Beta(1,1) vs uniform KS p={ks.pvalue:.3f}", ks.pvalue > 0.01),
              (f"teacher weight mean {kd.mean():.4f}", abs(kd.mean() - 0.5) <= 0.01)]
    verdict(5, "mixing-weight sampling statistics", checks, time.perf_counter() - t0)


def test_criterion_6_mlknn_and_map_oracles(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 9))
        x = rng.integers(0, 3, size=(n, 2)).astype(float)  # integer grid, many ties
        y = (rng.random((n, 3)) < 0.5).astype(int)
        q = rng.integers(0, 3, size=(4, 2)).astype(float)
        for k in range(1, n):
            got = mlknn_predict(mlknn_fit(x, y, k=k), q)
            worst = max(worst, float(np.max(np.abs(got - mlknn_direct(x, y, q, k)))))
    ap = micro_map(np.array([[0.9, 0.8, 0.7]]), np.array([[1, 0, 1]]))
    rng = np.random.default_rng(99)
    mono = True
    enum_ok = True
    for _ in range(200):
        scores = rng.random(10)
        labels = (rng.random(10) < 0.5).astype(int)
        labels[0], labels[1] = 1, 0
        base = micro_map(scores[None], labels[None])
        enum_ok &= abs(base - ap_by_enumeration(list(zip(labels, scores)))) < 1e-12
        pos = np.flatnonzero(labels == 1)
        neg = np.flatnonzero(labels == 0)
        i, j = rng.choice(pos), rng.choice(neg)
        if scores[i] > scores[j]:
            swapped = scores.copy()
            swapped[i], swapped[j] = scores[j], scores[i]
            mono &= micro_map(swapped[None], labels[None]) <= base
    checks = [(f"ML-kNN vs enumeration (max err {worst:.1e})", worst <= 1e-9),
              (f"3-pair example AP {ap:.4f}", abs(ap - 0.8333) < 1e-4),
              ("micro mAP matches enumeration", enum_ok),
              ("demoting a positive below a negative never helps", mono)]
    verdict(6, "ML-kNN and micro mAP oracles", checks, time.perf_counter() - t0)


def test_criterion_7_determinism_and_resume(verdict, smoke_manifest, tmp_path):
    t0 = time.perf_counter()
    cfg = tiny_run_config(train=TrainDefaults(epochs=3, batch_size=8))
    a = run_sequence(smoke_manifest, cfg, metrics=MetricsLog(tmp_path / "a.jsonl"))
    b = run_sequence(smoke_manifest, cfg)
    log = MetricsLog(tmp_path / "r.jsonl")
    run_sequence(smoke_manifest, cfg, metrics=log, stop_at=(2, 2), checkpoint_path=tmp_path / "mid.ckpt")
    mid = load_checkpoint(tmp_path / "mid.ckpt", config=cfg)
    paused_at = (mid.active_task, mid.epoch)
    resumed = run_sequence(smoke_manifest, cfg, state=mid, metrics=log)

    def strip(path):
        return [{k: v for k, v in r.items() if k != "wall_time_s"} for r in read_metrics(path)]

    ref = encode_checkpoint(a.state)
    checks = [("identical checkpoints for the same seed", ref == encode_checkpoint(b.state)),
              ("resumed mid-task 2 at epoch 2", paused_at == (2, 2)),
              ("resumed checkpoint equals uninterrupted", encode_checkpoint(resumed.state) == ref),
              ("resumed metrics equal uninterrupted", strip(tmp_path / "r.jsonl") == strip(tmp_path / "a.jsonl"))]
    verdict(7, "determinism and checkpoint resume", checks, time.perf_counter() - t0)


def test_criterion_8_trend(verdict, tmp_path):
    t0 = time.perf_counter()
    manifest = synth_tasks("desk", 0, tmp_path / "desk")
    grid = [row for row in TOGGLE_GRID if row[0] in ("baseline", "model_mixup_kd", "full")]
    rows = {r["variant"]: r for r in toggle_grid(manifest, desk_preset(), seeds=(0, 1, 2), grid=grid)}
    base, kd, full = rows["baseline"], rows["model_mixup_kd"], rows["full"]
    wins = sum(f < b for f, b in zip(full["task1_val_recon_per_seed"], base["task1_val_recon_per_seed"]))
    summary = {v: {"task1_val_recon": round(r["task1_val_recon"], 4), "micro_map": round(r["micro_map"], 4)}
               for v, r in rows.items()}
    checks = [
        ("recon full <= kd-only", full["task1_val_recon"] <= kd["task1_val_recon"]),
        ("recon kd-only <= baseline", kd["task1_val_recon"] <= base["task1_val_recon"]),
        (f"full beats baseline on {wins}/3 seeds", wins >= 2),
        ("micro mAP full >= baseline", full["micro_map"] >= base["micro_map"]),
    ]
    verdict(8, f"forgetting trend {json.dumps(summary)}", checks, time.perf_counter() - t0, limit=900)


TINY_CFG = """\
preset = desk
model.image_size = 16
model.patch_size = 4
train.epochs = 3
train.batch_size = 32
"""


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "cosmae.cli", *args], capture_output=True, text=True)


def test_criterion_9_end_to_end_cli(verdict, tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "run.cfg").write_text(TINY_CFG)
    data, out = tmp_path / "data", tmp_path / "out"
    steps = [
        ("synth", _cli("synth", "--preset", "smoke", "--out", str(data), "--seed", "0")),
        ("train", _cli("train", "--config", str(tmp_path / "run.cfg"), "--manifest", str(data), "--out", str(out))),
        ("eval", _cli("eval", "--checkpoint", str(out / "final.ckpt"), "--data", str(data))),
        ("inspect", _cli("inspect", "--checkpoint", str(out / "final.ckpt"))),
    ]
    checks = [(f"{name} exit {p.returncode} {p.stderr.strip()[-200:]}", p.returncode == 0) for name, p in steps]
    if (out / "metrics.jsonl").exists():
        n = len(read_metrics(out / "metrics.jsonl"))
        checks.append((f"{n} metrics lines, expected {2 * 3 + 2}", n == 2 * 3 + 2))
    else:
        checks.append(("metrics file written", False))
    verdict(9, "synth, train, eval and inspect through the CLI", checks, time.perf_counter() - t0, limit=300)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
