#!/usr/bin/env python3
"""
Tests for schedules, the joint training step, checkpoints and resume
"""

import json
import math
import os
import shutil
import sys
import tempfile

import torch

sys.path.insert(0, os.path.dirname(__file__))

from checkpoint_timer import CheckpointTimer, prune_checkpoints, step_checkpoints  # noqa: E402
from config import load_experiment_config  # noqa: E402
from errors import ConfigError, IngestionError, NonFiniteLossError  # noqa: E402
from training import SysBinderModel, fit, init_state, load_checkpoint, lr_at, sample_batch, train_step  # noqa: E402

TINY_OVERRIDES = {
    "IMAGE_SIZE": 16, "FEATURE_DIM": 16, "FRONTEND_MLP_HIDDEN": 16,
    "NUM_SLOTS": 3, "NUM_BLOCKS": 2, "BLOCK_SIZE": 8, "NUM_PROTOTYPES": 4, "NUM_ITERATIONS": 2,
    "DECODER_BLOCKS": 1, "DECODER_HEADS": 2, "HIDDEN_SIZE": 16, "DROPOUT": 0.0,
    "PATCH_SIZE": 4, "VOCAB_SIZE": 16, "DVAE_HIDDEN": 8,
    "TEMP_DECAY_STEPS": 10, "WARMUP_STEPS": 2, "DECAY_HALF_LIFE": 10,
    "BATCH_SIZE": 2, "TRAINING_STEPS": 4, "LOG_EVERY": 1,
    "CHECKPOINT_EVERY": 2, "CHECKPOINT_MINUTES": 0, "KEEP_CHECKPOINTS": 2,
}


def tiny_experiment(**overrides):
    values = dict(TINY_OVERRIDES)
    values.update(overrides)
    return load_experiment_config(overrides=values)


def tiny_images(count=6, size=16, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(0, 256, (count, 3, size, size), generator=generator, dtype=torch.uint8)


def test_lr_schedule_values():
    assert lr_at(0, 1e-4, 3000, 25000) == 0.0
    assert math.isclose(lr_at(1500, 1e-4, 3000, 25000), 5e-5)
    assert math.isclose(lr_at(3000, 1e-4, 3000, 25000), 1e-4)
    assert math.isclose(lr_at(28000, 1e-4, 3000, 25000), 5e-5)
    assert lr_at(5, 2.0, 0, 10) == 2.0 * 2 ** -0.5


def test_experiment_config_layers():
    cfg = tiny_experiment(USE_BOTTLENECK="false", LR_BINDER="2e-4")
    assert cfg["USE_BOTTLENECK"] is False
    assert cfg["LR_BINDER"] == 2e-4
    try:
        load_experiment_config(overrides={"NOT_A_KEY": 1})
    except ConfigError:
        pass
    else:
        raise AssertionError("expected ConfigError")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "exp.env")
        with open(path, "w", encoding="utf-8") as f:
            f.write("NUM_SLOTS=7\nCOUPLING=concat\n")
        cfg = load_experiment_config(path, overrides={"NUM_SLOTS": "6"})
    assert cfg["NUM_SLOTS"] == 6
    assert cfg["COUPLING"] == "concat"


def test_sample_batch_is_pure():
    images = tiny_images()
    a = sample_batch(images, 2, seed=0, step=5)
    b = sample_batch(images, 2, seed=0, step=5)
    assert torch.equal(a, b)
    assert a.dtype == torch.float32 and float(a.max()) <= 1.0


def test_first_step_losses_are_finite():
    state = init_state(tiny_experiment())
    metrics = train_step(state, sample_batch(tiny_images(), 2, 0, 0))
    assert state.step == 1
    assert math.isfinite(metrics["dvae_loss"]) and math.isfinite(metrics["ce_loss"])
    assert metrics["lr_binder"] == 0.0
    assert math.isclose(metrics["temperature"], 1.0)
    # untrained decoder sits close to the uniform baseline L' ln V
    baseline = 16 * math.log(16)
    assert abs(metrics["ce_loss"] - baseline) < 0.2 * baseline


def test_cross_entropy_does_not_reach_tokenizer():
    torch.manual_seed(0)
    model = SysBinderModel(tiny_experiment())
    losses = model(tiny_images().float() / 255.0, temperature=1.0)
    losses["ce_loss"].backward()
    assert all(p.grad is None for p in model.dvae.parameters())
    assert model.binder.memory.seeds.grad is not None


def test_no_bottleneck_leaves_memory_unused():
    torch.manual_seed(0)
    model = SysBinderModel(tiny_experiment(USE_BOTTLENECK=False))
    losses = model(tiny_images().float() / 255.0, temperature=1.0)
    losses["loss"].backward()
    assert model.binder.memory.seeds.grad is None
    state, _ = model.encode(tiny_images().float() / 255.0)
    assert state.prototype_weights is None


def test_non_finite_loss_raises():
    state = init_state(tiny_experiment())
    images = torch.full((2, 3, 16, 16), float("nan"))
    try:
        train_step(state, images)
    except NonFiniteLossError as e:
        assert e.step == 0
        assert state.step == 0
        return
    raise AssertionError("expected NonFiniteLossError")


def test_fit_writes_checkpoints_and_metrics():
    with tempfile.TemporaryDirectory() as tmp:
        state, path = fit(tiny_experiment(), None, tmp, progress=False, images=tiny_images())
        assert state.step == 4
        assert os.path.exists(os.path.join(tmp, "latest.pt"))
        assert [os.path.basename(p) for p in step_checkpoints(tmp)] == ["ckpt_0000002.pt", "ckpt_0000004.pt"]
        with open(os.path.join(tmp, "metrics.jsonl"), encoding="utf-8") as f:
            lines = [json.loads(line) for line in f]
        assert [m["step"] for m in lines] == [0, 1, 2, 3]

        loaded = load_checkpoint(path)
        assert loaded.step == 4
        for a, b in zip(state.model.state_dict().values(), loaded.model.state_dict().values()):
            assert torch.equal(a, b)


def test_zero_steps_returns_initial_checkpoint():
    with tempfile.TemporaryDirectory() as tmp:
        state, path = fit(tiny_experiment(), None, tmp, steps=0, progress=False, images=tiny_images())
        assert state.step == 0
        assert load_checkpoint(path).step == 0


def test_resume_matches_uninterrupted_run():
    images = tiny_images()
    with tempfile.TemporaryDirectory() as tmp:
        full_dir = os.path.join(tmp, "full")
        split_dir = os.path.join(tmp, "split")
        full, _ = fit(tiny_experiment(), None, full_dir, progress=False, images=images)
        fit(tiny_experiment(), None, split_dir, steps=2, progress=False, images=images)
        resumed, _ = fit(tiny_experiment(), None, split_dir, resume=True, progress=False, images=images)

    assert resumed.step == full.step == 4
    for a, b in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.allclose(a, b, atol=1e-7)


def test_resume_from_older_checkpoint_rewrites_metrics():
    images = tiny_images()
    with tempfile.TemporaryDirectory() as tmp:
        fit(tiny_experiment(), None, tmp, progress=False, images=images)
        # interrupted after step 4 was logged but with only the step-2 checkpoint as latest
        shutil.copyfile(os.path.join(tmp, "ckpt_0000002.pt"), os.path.join(tmp, "latest.pt"))
        resumed, _ = fit(tiny_experiment(), None, tmp, resume=True, progress=False, images=images)
        with open(os.path.join(tmp, "metrics.jsonl"), encoding="utf-8") as f:
            steps = [json.loads(line)["step"] for line in f]
    assert resumed.step == 4
    assert steps == [0, 1, 2, 3]


def test_corrupt_checkpoint_names_path():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "broken.pt")
        with open(path, "wb") as f:
            f.write(b"\x00garbage")
        try:
            load_checkpoint(path)
        except IngestionError as e:
            assert path in str(e)
            return
    raise AssertionError("expected IngestionError")


def test_checkpoint_retention():
    with tempfile.TemporaryDirectory() as tmp:
        for step in (1, 2, 3, 4):
            open(os.path.join(tmp, f"ckpt_{step:07d}.pt"), "wb").close()
        removed = prune_checkpoints(tmp, keep=2)
        assert [os.path.basename(p) for p in removed] == ["ckpt_0000001.pt", "ckpt_0000002.pt"]
        assert len(step_checkpoints(tmp)) == 2


def test_disabled_timer_never_fires():
    with CheckpointTimer(0) as timer:
        assert timer.scheduler is None
        assert timer.consume() is False
    timer = CheckpointTimer(60)
    timer._mark_due()
    assert timer.consume() is True
    assert timer.consume() is False
    timer.shutdown()


def main():
    """Run all tests"""
    print("=" * 60)
    print("TRAINING - TESTS")
    print("=" * 60)

    tests = [obj for name, obj in sorted(globals().items()) if name.startswith("test_") and callable(obj)]
    results = []
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
            results.append(True)
        except Exception as e:
            print(f"❌ {test.__name__}: {e!r}")
            results.append(False)

    print("\n" + "=" * 60)
    print(f"RESULTS: {sum(results)}/{len(results)} tests passed")
    print("=" * 60)
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
