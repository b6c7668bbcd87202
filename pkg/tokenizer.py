"""
Patch-level discrete VAE: images <-> grids of tokens from a vocabulary of V codes

Encoder: one patch-sized strided conv followed by 1x1 convs producing V logits
per patch. Decoder mirrors it, upsampling with a pixel shuffle.
"""
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigError, IngestionError, TokenRangeError

TOKEN_DUMP_MAGIC = b"TOKG"
TOKEN_DUMP_VERSION = 1


@dataclass
class TokenizerConfig:
    patch_size: int = 4
    vocab_size: int = 1024
    temp_start: float = 1.0
    temp_end: float = 0.1
    temp_decay_steps: int = 30000
    hidden: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not (self.temp_start >= self.temp_end > 0):
            raise ConfigError("Need temp_start >= temp_end > 0")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    @classmethod
    def from_experiment(cls, cfg):
        return cls(
            patch_size=cfg["PATCH_SIZE"],
            vocab_size=cfg["VOCAB_SIZE"],
            temp_start=cfg["TEMP_START"],
            temp_end=cfg["TEMP_END"],
            temp_decay_steps=cfg["TEMP_DECAY_STEPS"],
            hidden=cfg["DVAE_HIDDEN"],
            channels=cfg["IMAGE_CHANNELS"],
        )


@dataclass
class TokenGrid:
    # (B, H/patch, W/patch) int64 codes in [0, V)
    codes: torch.Tensor
    vocab_size: int

    @property
    def grid_size(self):
        return tuple(self.codes.shape[-2:])

    @property
    def length(self):
        h, w = self.grid_size
        return h * w

    def sequence(self):
        """
        Row-major (B, L') view used as decoder targets
        """
        return self.codes.flatten(-2)

    @classmethod
    def from_sequence(cls, sequence, grid_size, vocab_size):
        return cls(sequence.reshape(*sequence.shape[:-1], *grid_size), vocab_size)


def anneal_temperature(step, config):
    """
    Cosine schedule from temp_start to temp_end over temp_decay_steps, then flat
    """
    if step >= config.temp_decay_steps:
        return config.temp_end
    progress = step / config.temp_decay_steps
    return config.temp_end + (config.temp_start - config.temp_end) * (1 + math.cos(math.pi * progress)) / 2


def sample_gumbel(shape, generator=None, dtype=torch.float32, device="cpu"):
    u = torch.rand(shape, generator=generator, dtype=dtype,
                   device=generator.device if generator is not None else device).to(device)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def relaxed_sample(logits, temperature, gumbel_noise):
    """
    Gumbel-softmax relaxation over the vocabulary axis (dim 1)
    """
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    return F.softmax((logits + gumbel_noise) / temperature, dim=1)


def reconstruction_loss(images, recon):
    """
    Squared error summed per image, averaged over the batch
    """
    return ((images - recon) ** 2).flatten(1).sum(-1).mean()


class DiscreteVAE(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        h = c.hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(c.channels, h, c.patch_size, c.patch_size),
            nn.ReLU(),
            nn.Conv2d(h, h, 1),
            nn.ReLU(),
            nn.Conv2d(h, h, 1),
            nn.ReLU(),
            nn.Conv2d(h, c.vocab_size, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c.vocab_size, h, 1),
            nn.ReLU(),
            nn.Conv2d(h, h, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(h, h * c.patch_size ** 2, 1),
            nn.PixelShuffle(c.patch_size),
            nn.ReLU(),
            nn.Conv2d(h, c.channels, 3, 1, 1),
        )

    def logits(self, images):
        """
        Returns:
            (B, V, H/patch, W/patch)
        """
        p = self.config.patch_size
        if images.shape[-1] % p or images.shape[-2] % p:
            raise ConfigError(f"Image size {tuple(images.shape[-2:])} not divisible by patch {p}")
        return self.encoder(images)

    def tokenize(self, images, temperature=1.0, rng_seed=None, generator=None, hard=False):
        """
        Encode images into tokens

        Args:
            images: (B, C, H, W) in [0, 1]
            temperature: Gumbel-softmax temperature (> 0)
            hard: argmax tokens, no noise (deterministic)

        Returns:
            (TokenGrid, one-hot or relaxed one-hot (B, V, h, w))
        """
        if temperature <= 0:
            raise ConfigError("temperature must be > 0")
        logits = self.logits(images)
        if hard:
            codes = logits.argmax(dim=1)
            one_hot = F.one_hot(codes, self.config.vocab_size).permute(0, 3, 1, 2).to(logits.dtype)
            return TokenGrid(codes, self.config.vocab_size), one_hot

        if generator is None and rng_seed is not None:
            generator = torch.Generator().manual_seed(int(rng_seed))
        noise = sample_gumbel(logits.shape, generator, logits.dtype, logits.device)
        soft = relaxed_sample(logits, temperature, noise)
        return TokenGrid(soft.argmax(dim=1), self.config.vocab_size), soft

    def detokenize(self, tokens):
        """
        Decode a TokenGrid, an int code tensor (B, h, w) or a (relaxed) one-hot (B, V, h, w)

        Returns:
            images (B, C, H, W) in [0, 1]
        """
        if isinstance(tokens, TokenGrid):
            tokens = tokens.codes
        if not torch.is_floating_point(tokens):
            tokens = self.codes_to_one_hot(tokens)
        return torch.sigmoid(self.decoder(tokens))

    def codes_to_one_hot(self, codes):
        vocab = self.config.vocab_size
        if bool((codes < 0).any()) or bool((codes >= vocab).any()):
            raise TokenRangeError(f"Token ids must lie in [0, {vocab})")
        dtype = next(self.decoder.parameters()).dtype
        return F.one_hot(codes.long(), vocab).permute(0, 3, 1, 2).to(dtype)


def write_token_dump(path, grid):
    """
    Binary token record: magic, version, count, height, width, V, then row-major u16 codes
    """
    if grid.vocab_size > 65536:
        raise ConfigError("Token dumps store u16 codes; vocab_size must be <= 65536")
    codes = grid.codes.detach().cpu()
    if codes.dim() == 2:
        codes = codes.unsqueeze(0)
    count, height, width = codes.shape
    with open(path, "wb") as f:
        f.write(TOKEN_DUMP_MAGIC)
        f.write(struct.pack("<HIIII", TOKEN_DUMP_VERSION, count, height, width, grid.vocab_size))
        f.write(codes.numpy().astype("<u2").tobytes(order="C"))


def read_token_dump(path):
    header_size = len(TOKEN_DUMP_MAGIC) + struct.calcsize("<HIIII")
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IngestionError(f"Cannot read token dump ({e})", path)
    if len(raw) < header_size or raw[:4] != TOKEN_DUMP_MAGIC:
        raise IngestionError("Not a token dump", path)
    version, count, height, width, vocab = struct.unpack("<HIIII", raw[4:header_size])
    if version != TOKEN_DUMP_VERSION:
        raise IngestionError(f"Unsupported token dump version {version}", path)
    body = np.frombuffer(raw[header_size:], dtype="<u2")
    if body.size != count * height * width:
        raise IngestionError("Token dump truncated", path)
    codes = torch.from_numpy(body.astype(np.int64).reshape(count, height, width))
    return TokenGrid(codes, vocab)
