"""
Joint training: dVAE reconstruction + autoregressive token cross-entropy

Three parameter groups with their own peak learning rates:
    dvae    - the tokenizer
    binder  - image encoder + SysBinder
    decoder - block coupler + transformer decoder
"""
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from binder import BinderConfig, SysBinder, slot_masks
from checkpoint_timer import CheckpointTimer, prune_checkpoints
from config import load_experiment_config, validate_experiment_config
from dataset import load_images
from decoder import AutoregressiveDecoder, DecoderConfig, SlotConditioner
from errors import ConfigError, IngestionError, NonFiniteLossError
from frontend import FrontendConfig, ImageEncoder
from tokenizer import DiscreteVAE, TokenizerConfig, anneal_temperature, reconstruction_loss
from utils import (
    append_jsonl,
    get_logger,
    get_rng_state,
    log_event,
    seed_everything,
    set_rng_state,
    truncate_jsonl,
)

logger = get_logger(__name__)

CHECKPOINT_VERSION = 1
LATEST_CHECKPOINT = "latest.pt"
METRICS_LOG = "metrics.jsonl"


@dataclass
class TrainConfig:
    batch_size: int = 24
    steps: int = 30000
    lr_dvae: float = 3e-4
    lr_binder: float = 1e-4
    lr_decoder: float = 3e-4
    warmup_steps: int = 3000
    decay_half_life: int = 25000
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    checkpoint_minutes: float = 30
    keep_checkpoints: int = 3

    def __post_init__(self):
        if self.steps > 0 and self.warmup_steps > self.steps:
            raise ConfigError("warmup_steps must not exceed steps")
        if min(self.lr_dvae, self.lr_binder, self.lr_decoder) <= 0:
            raise ConfigError("All learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_experiment(cls, cfg):
        return cls(
            batch_size=cfg["BATCH_SIZE"],
            steps=cfg["TRAINING_STEPS"],
            lr_dvae=cfg["LR_DVAE"],
            lr_binder=cfg["LR_BINDER"],
            lr_decoder=cfg["LR_DECODER"],
            warmup_steps=cfg["WARMUP_STEPS"],
            decay_half_life=cfg["DECAY_HALF_LIFE"],
            grad_clip=cfg["GRAD_CLIP"],
            seed=cfg["SEED"],
            log_every=cfg["LOG_EVERY"],
            checkpoint_every=cfg["CHECKPOINT_EVERY"],
            checkpoint_minutes=cfg["CHECKPOINT_MINUTES"],
            keep_checkpoints=cfg["KEEP_CHECKPOINTS"],
        )


def lr_at(step, peak, warmup_steps, half_life):
    """
    Linear warmup 0 -> peak, then exponential decay with the given half-life
    """
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    return peak * 2.0 ** (-(step - warmup_steps) / half_life)


class SysBinderModel(nn.Module):
    """
    Image encoder + SysBinder + dVAE + block coupling + transformer decoder
    """

    def __init__(self, experiment):
        super().__init__()
        self.experiment = dict(experiment)
        self.frontend = ImageEncoder(FrontendConfig.from_experiment(experiment))
        self.binder = SysBinder(BinderConfig.from_experiment(experiment))
        self.dvae = DiscreteVAE(TokenizerConfig.from_experiment(experiment))
        decoder_config = DecoderConfig.from_experiment(experiment)
        self.conditioner = SlotConditioner(decoder_config)
        self.decoder = AutoregressiveDecoder(decoder_config)

    def parameter_groups(self):
        return {
            "dvae": list(self.dvae.parameters()),
            "binder": list(self.frontend.parameters()) + list(self.binder.parameters()),
            "decoder": list(self.conditioner.parameters()) + list(self.decoder.parameters()),
        }

    def encode(self, images, num_slots=None, rng_seed=None, generator=None):
        """
        Returns:
            (BlockSlotState, AttentionMaps)
        """
        features = self.frontend(images)
        return self.binder(features, num_slots=num_slots, rng_seed=rng_seed, generator=generator)

    def masks(self, maps):
        """
        Image-sized soft slot masks (B, N, H, W) from final attention
        """
        fc = self.frontend.config
        return slot_masks(maps.slot_attention, fc.grid_size, (fc.image_height, fc.image_width))

    def forward(self, images, temperature):
        """
        Returns:
            dict with scalar tensors dvae_loss, ce_loss, loss, dvae_mse
        """
        _, soft = self.dvae.tokenize(images, temperature)
        recon = self.dvae.detokenize(soft)
        dvae_loss = reconstruction_loss(images, recon)

        with torch.no_grad():
            targets, _ = self.dvae.tokenize(images, hard=True)

        state, _ = self.encode(images)
        ce_loss = self.decoder.decoder_loss(targets, self.conditioner(state))

        return {
            "dvae_loss": dvae_loss,
            "ce_loss": ce_loss,
            "loss": dvae_loss + ce_loss,
            "dvae_mse": ((images - recon) ** 2).mean().detach(),
        }

    @torch.no_grad()
    def render(self, state, sampling="argmax", rng_seed=None):
        """
        Decode a BlockSlotState to images via generation + dVAE decoding
        """
        grid = self.decoder.generate(self.conditioner(state), sampling=sampling, rng_seed=rng_seed)
        return self.dvae.detokenize(grid)


def build_optimizer(model, train_config):
    groups = model.parameter_groups()
    peaks = {
        "dvae": train_config.lr_dvae,
        "binder": train_config.lr_binder,
        "decoder": train_config.lr_decoder,
    }
    return torch.optim.Adam(
        [{"params": groups[name], "lr": 0.0, "peak_lr": peaks[name], "name": name} for name in groups],
        weight_decay=0.0,
    )


@dataclass
class TrainState:
    model: SysBinderModel
    optimizer: torch.optim.Optimizer
    train_config: TrainConfig
    experiment: dict
    step: int = 0


def init_state(experiment):
    experiment = validate_experiment_config(dict(experiment))
    seed_everything(experiment["SEED"])
    model = SysBinderModel(experiment)
    train_config = TrainConfig.from_experiment(experiment)
    return TrainState(model, build_optimizer(model, train_config), train_config, experiment, 0)


def sample_batch(images, batch_size, seed, step):
    """
    Batch for a step, a pure function of (seed, step) so resumed runs see the same data
    """
    if len(images) == 0:
        raise IngestionError("Training split is empty")
    rng = np.random.default_rng([seed, step])
    index = rng.choice(len(images), size=batch_size, replace=len(images) < batch_size)
    batch = images[torch.from_numpy(index)]
    return batch.float() / 255.0 if batch.dtype == torch.uint8 else batch


def train_step(state, images):
    """
    One optimizer step on a batch of images (B, 3, H, W) in [0, 1]

    Returns:
        dict: dvae_loss, ce_loss, dvae_mse, temperature, lr_<group>
    """
    tc = state.train_config
    model = state.model
    model.train()

    temperature = anneal_temperature(state.step, model.dvae.config)
    lrs = {}
    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(state.step, group["peak_lr"], tc.warmup_steps, tc.decay_half_life)
        lrs[f"lr_{group['name']}"] = group["lr"]

    param = next(model.parameters())
    losses = model(images.to(device=param.device, dtype=param.dtype), temperature)

    metrics = {
        "step": state.step,
        "dvae_loss": float(losses["dvae_loss"]),
        "ce_loss": float(losses["ce_loss"]),
        "dvae_mse": float(losses["dvae_mse"]),
        "temperature": temperature,
        **lrs,
    }
    if not math.isfinite(metrics["dvae_loss"]) or not math.isfinite(metrics["ce_loss"]):
        raise NonFiniteLossError(state.step, metrics)

    state.optimizer.zero_grad(set_to_none=True)
    losses["loss"].backward()
    if tc.grad_clip and tc.grad_clip > 0:
        metrics["grad_norm"] = float(nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip))
    state.optimizer.step()
    state.step += 1
    return metrics


def save_checkpoint(state, path):
    """
    Atomic write of parameters, optimizer, step, config snapshot and RNG state
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "experiment": state.experiment,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": get_rng_state(),
    }
    tmp_path = path + ".tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    return path


def load_checkpoint(path, restore_rng=False, map_location="cpu"):
    """
    Rebuild a TrainState from a checkpoint file
    """
    if not os.path.exists(path):
        raise IngestionError("Checkpoint not found", path)
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise IngestionError(f"Corrupt checkpoint ({e})", path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IngestionError(f"Unsupported checkpoint version {payload.get('version')}", path)

    experiment = load_experiment_config(overrides=payload["experiment"])
    model = SysBinderModel(experiment)
    model.load_state_dict(payload["model"])
    train_config = TrainConfig.from_experiment(experiment)
    optimizer = build_optimizer(model, train_config)
    optimizer.load_state_dict(payload["optimizer"])
    if restore_rng:
        set_rng_state(payload["rng"])
    return TrainState(model, optimizer, train_config, experiment, payload["step"])


def _checkpoint(state, out_dir):
    path = save_checkpoint(state, os.path.join(out_dir, f"ckpt_{state.step:07d}.pt"))
    save_checkpoint(state, os.path.join(out_dir, LATEST_CHECKPOINT))
    prune_checkpoints(out_dir, state.train_config.keep_checkpoints)
    log_event("checkpoint_saved", {"step": state.step, "path": path}, logger)
    return path


def fit(experiment, data_dir, out_dir, resume=False, steps=None, progress=True, images=None):
    """
    Train for experiment TRAINING_STEPS (or `steps`) steps

    Writes <out_dir>/metrics.jsonl, step checkpoints and latest.pt.

    Returns:
        (TrainState, path of the final checkpoint)
    """
    os.makedirs(out_dir, exist_ok=True)
    latest = os.path.join(out_dir, LATEST_CHECKPOINT)
    if resume and os.path.exists(latest):
        state = load_checkpoint(latest, restore_rng=True)
        log_event("training_resumed", {"step": state.step, "path": latest}, logger)
    else:
        state = init_state(experiment)

    # metrics.jsonl holds exactly one record per step before state.step
    metrics_path = os.path.join(out_dir, METRICS_LOG)
    dropped = truncate_jsonl(metrics_path, lambda record: record.get("step", -1) < state.step)
    if dropped:
        logger.info("Dropped %d metric records from step %d on", dropped, state.step)

    total = state.train_config.steps if steps is None else steps
    if images is None:
        images = load_images(data_dir, "train")
    log_event("training_started", {"step": state.step, "total_steps": total,
                                   "train_images": len(images)}, logger)

    if state.step >= total:
        return state, _checkpoint(state, out_dir)

    tc = state.train_config
    bar = tqdm(total=total, initial=state.step, disable=not progress, desc="train")
    with CheckpointTimer(tc.checkpoint_minutes) as timer:
        while state.step < total:
            batch = sample_batch(images, tc.batch_size, tc.seed, state.step)
            try:
                metrics = train_step(state, batch)
            except NonFiniteLossError as e:
                log_event("training_aborted", {"step": e.step, "metrics": e.metrics}, logger)
                _checkpoint(state, out_dir)
                raise
            append_jsonl(metrics_path, metrics)
            bar.update(1)

            if tc.log_every and state.step % tc.log_every == 0:
                bar.set_postfix(ce=f"{metrics['ce_loss']:.1f}", mse=f"{metrics['dvae_mse']:.4f}")
                log_event("train_step", metrics, logger)
            if (tc.checkpoint_every and state.step % tc.checkpoint_every == 0) or timer.consume():
                _checkpoint(state, out_dir)
    bar.close()

    path = _checkpoint(state, out_dir)
    log_event("training_finished", {"step": state.step, "path": path}, logger)
    return state, path
