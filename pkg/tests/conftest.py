import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cosmae.config import RunConfig, AugmentConfig, TrainDefaults, OptimConfig  # noqa: E402
from cosmae.mae import MAEConfig, MAEModel  # noqa: E402

TINY64 = MAEConfig(image_size=8, channels=2, patch_size=4, enc_depth=1, enc_heads=2, enc_dim=16,
                   dec_depth=1, dec_heads=2, dec_dim=8, mask_ratio=0.5, dtype="float64")

TINY32 = MAEConfig(image_size=16, channels=3, patch_size=4, enc_depth=1, enc_heads=2, enc_dim=16,
                   dec_depth=1, dec_heads=2, dec_dim=8)


def tiny_run_config(**over) -> RunConfig:
    base = RunConfig(
        model=TINY32,
        augment=AugmentConfig(),
        optim=OptimConfig(warmup_epochs=1),
        train=TrainDefaults(epochs=2, batch_size=8),
    )
    from dataclasses import replace

    return replace(base, **over)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model64(rng):
    return MAEModel.create(TINY64, rng)


@pytest.fixture(scope="session")
def smoke_manifest(tmp_path_factory):
    from cosmae.synth import synth_tasks

    return synth_tasks("smoke", seed=0, out_dir=tmp_path_factory.mktemp("smoke"))


@pytest.fixture(scope="session")
def four_task_manifest(tmp_path_factory):
    from cosmae.synth import SynthPreset, synth_tasks

    preset = SynthPreset(n_tasks=4, images_per_task=32, val_per_task=8, image_size=16, channels=3,
                         eval_train=24, eval_test=24)
    return synth_tasks(preset, seed=0, out_dir=tmp_path_factory.mktemp("four"))
