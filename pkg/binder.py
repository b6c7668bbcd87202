"""
SysBinder: iterative spatial binding + per-block factor binding

Slots are N x (M*d) matrices viewed as N x M blocks of size d. Every
iteration runs slot-competitive attention over the input features
(spatial binding), then refines each block independently with its own
GRU/MLP and pulls it through that block's prototype memory (factor
binding).

All tensors are batched: features (B, L, D), slots (B, N, M*d),
attention (B, N, L).
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigError, DegenerateAttentionError
from utils import make_generator


@dataclass
class BinderConfig:
    num_slots: int = 5
    num_blocks: int = 4
    block_size: int = 32
    num_prototypes: int = 16
    num_iterations: int = 3
    input_dim: int = 64
    share_rnn_params: bool = False
    use_rnn: bool = True
    use_bottleneck: bool = True
    share_memory: bool = False
    mlp_hidden: Optional[int] = None
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("num_slots", "num_blocks", "block_size", "num_prototypes",
                     "num_iterations", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.mlp_hidden is None:
            self.mlp_hidden = self.block_size

    @property
    def slot_size(self):
        return self.num_blocks * self.block_size

    @classmethod
    def from_experiment(cls, cfg):
        return cls(
            num_slots=cfg["NUM_SLOTS"],
            num_blocks=cfg["NUM_BLOCKS"],
            block_size=cfg["BLOCK_SIZE"],
            num_prototypes=cfg["NUM_PROTOTYPES"],
            num_iterations=cfg["NUM_ITERATIONS"],
            input_dim=cfg["FEATURE_DIM"],
            share_rnn_params=cfg["SHARE_RNN"],
            use_rnn=cfg["USE_RNN"],
            use_bottleneck=cfg["USE_BOTTLENECK"],
            share_memory=cfg["SHARE_MEMORY"],
        )


@dataclass
class BlockSlotState:
    slots: torch.Tensor
    num_blocks: int
    # (B, N, M, K) weights of the last bottleneck step, if any
    prototype_weights: Optional[torch.Tensor] = None

    @property
    def block_size(self):
        return self.slots.shape[-1] // self.num_blocks

    def block(self, n, m):
        d = self.block_size
        return self.slots[..., n, m * d:(m + 1) * d]

    def blocks(self):
        return self.slots.unflatten(-1, (self.num_blocks, self.block_size))

    @classmethod
    def from_blocks(cls, blocks, prototype_weights=None):
        return cls(blocks.flatten(-2), blocks.shape[-2], prototype_weights)


@dataclass
class AttentionMaps:
    # post slot-softmax, pre input-axis renormalization: (B, N, L)
    slot_attention: torch.Tensor
    # (B, N, M*d)
    readout: torch.Tensor


class BlockLinear(nn.Module):
    """
    Independent affine map per block, applied to all blocks at once

    Input (..., M, in) -> output (..., M, out). With shared=True one weight
    is broadcast to every block.
    """

    def __init__(self, num_blocks, in_features, out_features, shared=False, bias=True):
        super().__init__()
        self.num_blocks = num_blocks
        copies = 1 if shared else num_blocks
        bound = 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.empty(copies, in_features, out_features).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(copies, out_features).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        weight = self.weight.expand(self.num_blocks, -1, -1)
        out = torch.einsum("...mi,mio->...mo", x, weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class BlockLayerNorm(nn.Module):
    def __init__(self, num_blocks, block_size, shared=False):
        super().__init__()
        copies = 1 if shared else num_blocks
        self.block_size = block_size
        self.weight = nn.Parameter(torch.ones(copies, block_size))
        self.bias = nn.Parameter(torch.zeros(copies, block_size))

    def forward(self, x):
        return F.layer_norm(x, (self.block_size,)) * self.weight + self.bias


class BlockGRUCell(nn.Module):
    """
    GRU cell with separate parameters per block (same gate equations as nn.GRUCell)
    """

    def __init__(self, num_blocks, block_size, shared=False):
        super().__init__()
        self.input_map = BlockLinear(num_blocks, block_size, 3 * block_size, shared)
        self.hidden_map = BlockLinear(num_blocks, block_size, 3 * block_size, shared)

    def forward(self, inputs, hidden):
        i_r, i_z, i_n = self.input_map(inputs).chunk(3, dim=-1)
        h_r, h_z, h_n = self.hidden_map(hidden).chunk(3, dim=-1)
        reset = torch.sigmoid(i_r + h_r)
        update = torch.sigmoid(i_z + h_z)
        candidate = torch.tanh(i_n + reset * h_n)
        return (1 - update) * candidate + update * hidden


class BlockMLP(nn.Module):
    def __init__(self, num_blocks, block_size, hidden_size, shared=False):
        super().__init__()
        self.fc1 = BlockLinear(num_blocks, block_size, hidden_size, shared)
        self.fc2 = BlockLinear(num_blocks, hidden_size, block_size, shared)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class ConceptMemory(nn.Module):
    """
    M banks of K prototypes, each prototype an MLP projection of a learned seed

    C[m, k] = prototype_mlp(seeds[m, k]). Prototypes are recomputed from the
    seeds on every call to prototypes(); bind() calls it once per forward pass.
    """

    def __init__(self, num_blocks, num_prototypes, block_size, shared=False):
        super().__init__()
        self.num_blocks = num_blocks
        self.block_size = block_size
        banks = 1 if shared else num_blocks
        self.seeds = nn.Parameter(torch.randn(banks, num_prototypes, block_size))
        hidden = 4 * block_size
        self.prototype_mlp = nn.Sequential(
            nn.Linear(block_size, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, block_size),
        )

    def prototypes(self):
        """
        Returns:
            tensor (M, K, d)
        """
        return self.prototype_mlp(self.seeds).expand(self.num_blocks, -1, -1)

    def attend(self, blocks, prototypes=None):
        """
        Replace every block by its softmax-weighted combination of its bank

        Args:
            blocks: (..., M, d)
            prototypes: optional precomputed (M, K, d)

        Returns:
            (new blocks (..., M, d), weights (..., M, K))
        """
        if prototypes is None:
            prototypes = self.prototypes()
        logits = torch.einsum("...md,mkd->...mk", blocks, prototypes) / math.sqrt(blocks.shape[-1])
        weights = logits.softmax(dim=-1)
        return torch.einsum("...mk,mkd->...md", weights, prototypes), weights


class SlotInitializer(nn.Module):
    """
    Learned diagonal Gaussian over slots; sigma kept in log-space
    """

    def __init__(self, num_blocks, block_size):
        super().__init__()
        self.num_blocks = num_blocks
        self.mu = nn.Parameter(torch.zeros(num_blocks * block_size))
        self.log_sigma = nn.Parameter(torch.zeros(num_blocks * block_size))

    @property
    def sigma(self):
        return self.log_sigma.exp()

    def sample_noise(self, batch_size, num_slots, generator=None):
        noise = torch.randn(batch_size, num_slots, self.mu.shape[0],
                            generator=generator, dtype=self.mu.dtype,
                            device=generator.device if generator is not None else self.mu.device)
        return noise.to(self.mu.device)

    def forward(self, batch_size, num_slots, generator=None, noise=None):
        if noise is None:
            noise = self.sample_noise(batch_size, num_slots, generator)
        return BlockSlotState(self.mu + self.sigma * noise, self.num_blocks)


def init_slots(initializer, num_slots, rng_seed=None, batch_size=1):
    """
    Sample slots = mu + sigma * eta with i.i.d. standard-normal eta per slot

    Deterministic given rng_seed; with rng_seed=None the global torch RNG is used.
    """
    if num_slots < 1:
        raise ConfigError("num_slots must be >= 1")
    generator = make_generator(rng_seed) if rng_seed is not None else None
    return initializer(batch_size, num_slots, generator)


class SysBinder(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        slot_size = c.slot_size

        self.initializer = SlotInitializer(c.num_blocks, c.block_size)

        self.norm_input = nn.LayerNorm(c.input_dim)
        self.norm_slots = nn.LayerNorm(slot_size)
        self.to_q = nn.Linear(slot_size, slot_size, bias=False)
        self.to_k = nn.Linear(c.input_dim, slot_size, bias=False)
        self.to_v = nn.Linear(c.input_dim, slot_size, bias=False)

        self.gru = BlockGRUCell(c.num_blocks, c.block_size, c.share_rnn_params)
        self.norm_mlp = BlockLayerNorm(c.num_blocks, c.block_size, c.share_rnn_params)
        self.mlp = BlockMLP(c.num_blocks, c.block_size, c.mlp_hidden, c.share_rnn_params)

        self.memory = ConceptMemory(c.num_blocks, c.num_prototypes, c.block_size, c.share_memory)

    def init_slots(self, num_slots, batch_size=1, rng_seed=None, generator=None, noise=None):
        if num_slots < 1:
            raise ConfigError("num_slots must be >= 1")
        if generator is None and rng_seed is not None:
            generator = make_generator(rng_seed)
        return self.initializer(batch_size, num_slots, generator, noise)

    def spatial_binding_step(self, state, features, input_mask=None):
        """
        Slots compete for input features and read out an update

        Args:
            state: BlockSlotState (B, N, M*d)
            features: layer-normalized inputs (B, L, D)
            input_mask: optional (B, L) with 1 for valid inputs

        Returns:
            AttentionMaps
        """
        k = self.to_k(features)
        v = self.to_v(features)
        q = self.to_q(self.norm_slots(state.slots))

        logits = torch.einsum("bnd,bld->bnl", q, k) / math.sqrt(self.config.slot_size)
        attn = logits.softmax(dim=1)
        if input_mask is not None:
            attn = attn * input_mask.unsqueeze(1).to(attn.dtype)

        totals = attn.sum(dim=-1, keepdim=True)
        if bool((totals == 0).any()):
            raise DegenerateAttentionError("A slot received zero total attention over the inputs")

        readout = torch.einsum("bnl,bld->bnd", attn / (totals + self.config.eps), v)
        return AttentionMaps(slot_attention=attn, readout=readout)

    def factor_binding_step(self, state, readout, prototypes=None):
        """
        Per-block GRU + residual MLP, then the concept-memory bottleneck
        """
        c = self.config
        if readout.shape[-1] != c.slot_size:
            raise ConfigError(f"Readout width {readout.shape[-1]} != M*d = {c.slot_size}")

        blocks = state.blocks()
        updates = readout.unflatten(-1, (c.num_blocks, c.block_size))

        if c.use_rnn:
            blocks = self.gru(updates, blocks)
            blocks = blocks + self.mlp(self.norm_mlp(blocks))
        else:
            # no recurrent refinement: the block takes its readout segment directly
            blocks = updates

        weights = None
        if c.use_bottleneck:
            blocks, weights = self.memory.attend(blocks, prototypes)

        return BlockSlotState.from_blocks(blocks, weights)

    def forward(self, features, num_slots=None, rng_seed=None, generator=None, noise=None,
                input_mask=None):
        """
        Bind a batch of feature sets into Block-Slot Representations

        Args:
            features: (B, L, D)
            num_slots: overrides config.num_slots (more slots than in training is fine)
            rng_seed / generator / noise: slot initialization source

        Returns:
            (BlockSlotState, AttentionMaps of the final iteration)
        """
        c = self.config
        if features.dim() != 3 or features.shape[-1] != c.input_dim:
            raise ConfigError(f"Expected features (B, L, {c.input_dim}), got {tuple(features.shape)}")
        if features.shape[1] < 1:
            raise ConfigError("Need at least one input feature")

        features = self.norm_input(features)
        state = self.init_slots(c.num_slots if num_slots is None else num_slots, features.shape[0],
                                rng_seed=rng_seed, generator=generator, noise=noise)
        prototypes = self.memory.prototypes() if c.use_bottleneck else None

        maps = None
        for _ in range(c.num_iterations):
            maps = self.spatial_binding_step(state, features, input_mask)
            state = self.factor_binding_step(state, maps.readout, prototypes)

        return state, maps

    bind = forward


def slot_masks(attention, grid_hw, image_hw):
    """
    Turn final slot attention into image-sized soft masks

    Args:
        attention: (B, N, L) with L = grid_h * grid_w
        grid_hw: feature-map (h, w)
        image_hw: output (H, W)

    Returns:
        (B, N, H, W) nearest-neighbour upsampled masks
    """
    b, n, _ = attention.shape
    masks = attention.reshape(b, n, grid_hw[0], grid_hw[1])
    if tuple(grid_hw) != tuple(image_hw):
        masks = F.interpolate(masks, size=tuple(image_hw), mode="nearest")
    return masks
