"""
Block coupling and the autoregressive token decoder

The conditioning set handed to the decoder is unordered: no slot index ever
enters it (except in the "flat" ablation), so permuting slots permutes the
cross-attention memory and leaves the logits unchanged.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from errors import ConfigError, TokenRangeError
from tokenizer import TokenGrid
from utils import make_generator

COUPLING_MODES = ("coupler", "flat", "concat")


@dataclass
class DecoderConfig:
    vocab_size: int = 1024
    grid_height: int = 16
    grid_width: int = 16
    num_layers: int = 4
    num_heads: int = 4
    hidden: int = 128
    dropout: float = 0.1
    num_slots: int = 5
    num_blocks: int = 4
    block_size: int = 32
    coupling: str = "coupler"
    coupler_heads: int = 4
    decoder_type: str = "transformer"

    def __post_init__(self):
        if self.decoder_type == "mixture":
            raise ConfigError("mixture decoder not implemented; use DECODER_TYPE=transformer")
        if self.decoder_type != "transformer":
            raise ConfigError(f"Unknown decoder_type {self.decoder_type!r}")
        if self.coupling not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {COUPLING_MODES}")
        if self.hidden % self.num_heads:
            raise ConfigError("hidden must be divisible by num_heads")
        if self.block_size % self.coupler_heads:
            self.coupler_heads = 1

    @property
    def sequence_length(self):
        return self.grid_height * self.grid_width

    @property
    def bos_id(self):
        return self.vocab_size

    @classmethod
    def from_experiment(cls, cfg):
        grid = cfg["IMAGE_SIZE"] // cfg["PATCH_SIZE"]
        return cls(
            vocab_size=cfg["VOCAB_SIZE"],
            grid_height=grid,
            grid_width=grid,
            num_layers=cfg["DECODER_BLOCKS"],
            num_heads=cfg["DECODER_HEADS"],
            hidden=cfg["HIDDEN_SIZE"],
            dropout=cfg["DROPOUT"],
            num_slots=cfg["NUM_SLOTS"],
            num_blocks=cfg["NUM_BLOCKS"],
            block_size=cfg["BLOCK_SIZE"],
            coupling=cfg["COUPLING"],
            decoder_type=cfg["DECODER_TYPE"],
        )


class BlockCoupler(nn.Module):
    """
    Adds a block-index embedding to every block and lets the M blocks of each
    slot interact through one transformer layer
    """

    def __init__(self, num_blocks, block_size, num_heads=4, dropout=0.1):
        super().__init__()
        self.num_blocks = num_blocks
        self.block_pos_embed = nn.Parameter(torch.randn(num_blocks, block_size) * 0.02)
        self.layer = nn.TransformerEncoderLayer(
            d_model=block_size,
            nhead=num_heads,
            dim_feedforward=4 * block_size,
            dropout=dropout,
            batch_first=True,
            norm_first=True,
        )

    def forward(self, state):
        """
        Args:
            state: BlockSlotState (B, N, M*d)

        Returns:
            (B, N*M, d) coupled block tokens
        """
        blocks = state.blocks()
        b, n, m, d = blocks.shape
        tokens = (blocks + self.block_pos_embed).reshape(b * n, m, d)
        return self.layer(tokens).reshape(b, n * m, d)

    couple_blocks = forward


class SlotConditioner(nn.Module):
    """
    Builds the decoder's cross-attention memory from a BlockSlotState

    coupler: block coupler then d -> hidden projection (default)
    flat:    raw blocks + (slot, block)-indexed embedding, no coupler
    concat:  whole slot vectors projected to hidden, one token per slot
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        if c.coupling == "coupler":
            self.coupler = BlockCoupler(c.num_blocks, c.block_size, c.coupler_heads, c.dropout)
            self.proj = nn.Linear(c.block_size, c.hidden)
        elif c.coupling == "flat":
            self.index_embed = nn.Embedding(c.num_slots * c.num_blocks, c.block_size)
            self.proj = nn.Linear(c.block_size, c.hidden)
        else:
            self.proj = nn.Linear(c.num_blocks * c.block_size, c.hidden)

    def forward(self, state):
        c = self.config
        if c.coupling == "coupler":
            return self.proj(self.coupler(state))
        if c.coupling == "flat":
            blocks = state.blocks()
            b, n, m, d = blocks.shape
            if n > c.num_slots:
                raise ConfigError(f"flat coupling was built for {c.num_slots} slots, got {n}")
            index = torch.arange(n * m, device=blocks.device)
            return self.proj(blocks.reshape(b, n * m, d) + self.index_embed(index))
        return self.proj(state.slots)


class AutoregressiveDecoder(nn.Module):
    """
    Causal transformer over token embeddings, cross-attending to the conditioning set

    Input position 0 holds a reserved BOS id (= vocab_size); position i > 0 holds
    z_i. Output row i holds the logits of z_{i+1}.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        self.dictionary = nn.Embedding(c.vocab_size + 1, c.hidden)
        self.token_pos = nn.Parameter(torch.randn(c.sequence_length, c.hidden) * 0.02)
        layer = nn.TransformerDecoderLayer(
            d_model=c.hidden,
            nhead=c.num_heads,
            dim_feedforward=4 * c.hidden,
            dropout=c.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerDecoder(layer, c.num_layers, norm=nn.LayerNorm(c.hidden))
        self.head = nn.Linear(c.hidden, c.vocab_size, bias=False)

    def _check_tokens(self, tokens):
        if tokens.numel() and (bool((tokens < 0).any()) or bool((tokens >= self.config.vocab_size).any())):
            raise TokenRangeError(f"Token ids must lie in [0, {self.config.vocab_size})")

    def embed(self, prefix):
        """
        [BOS, prefix] -> embeddings with positional encodings, (B, l, hidden)
        """
        bos = torch.full((prefix.shape[0], 1), self.config.bos_id, dtype=torch.long, device=prefix.device)
        ids = torch.cat([bos, prefix.long()], dim=1)
        return self.dictionary(ids) + self.token_pos[: ids.shape[1]]

    def decode_embeddings(self, conditioning, embeddings):
        length = embeddings.shape[1]
        causal = torch.triu(
            torch.full((length, length), float("-inf"), dtype=embeddings.dtype, device=embeddings.device),
            diagonal=1,
        )
        hidden = self.transformer(embeddings, conditioning, tgt_mask=causal)
        return self.head(hidden)

    def decode_logits(self, conditioning, prefix):
        """
        Args:
            conditioning: (B, S, hidden) from SlotConditioner
            prefix: (B, l-1) tokens z_1..z_{l-1}, l-1 < L'

        Returns:
            logits (B, l, V); row l-1 is o_l
        """
        if prefix.shape[1] >= self.config.sequence_length:
            raise ConfigError(f"Prefix length must be < {self.config.sequence_length}")
        self._check_tokens(prefix)
        return self.decode_embeddings(conditioning, self.embed(prefix))

    def decoder_loss(self, tokens, conditioning):
        """
        Sum over positions of the token cross-entropy, averaged over the batch

        Args:
            tokens: TokenGrid or (B, L') row-major codes
        """
        targets = tokens.sequence() if isinstance(tokens, TokenGrid) else tokens
        if targets.shape[1] != self.config.sequence_length:
            raise ConfigError(f"Expected {self.config.sequence_length} tokens, got {targets.shape[1]}")
        logits = self.decode_logits(conditioning, targets[:, :-1])
        ce = F.cross_entropy(logits.transpose(1, 2), targets.long(), reduction="none")
        return ce.sum(dim=-1).mean()

    @torch.no_grad()
    def generate(self, conditioning, sampling="argmax", rng_seed=None, generator=None):
        """
        Autoregressive rollout of L' tokens

        Returns:
            TokenGrid (B, grid_h, grid_w)
        """
        if sampling not in ("argmax", "categorical"):
            raise ConfigError(f"Unknown sampling {sampling!r}")
        if sampling == "categorical" and generator is None:
            generator = make_generator(rng_seed if rng_seed is not None else 0)

        c = self.config
        tokens = torch.zeros(conditioning.shape[0], 0, dtype=torch.long, device=conditioning.device)
        for _ in range(c.sequence_length):
            logits = self.decode_embeddings(conditioning, self.embed(tokens))[:, -1]
            if sampling == "argmax":
                next_token = logits.argmax(dim=-1)
            else:
                probs = F.softmax(logits.float(), dim=-1).cpu()
                next_token = torch.multinomial(probs, 1, generator=generator).squeeze(-1).to(tokens.device)
            tokens = torch.cat([tokens, next_token.unsqueeze(1)], dim=1)

        return TokenGrid.from_sequence(tokens, (c.grid_height, c.grid_width), c.vocab_size)
