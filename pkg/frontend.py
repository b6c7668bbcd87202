from dataclasses import dataclass, field

import torch
from torch import nn

from config import BACKBONE_SPECS
from errors import ConfigError


@dataclass
class FrontendConfig:
    image_height: int = 64
    image_width: int = 64
    channels: int = 3
    # (kernel, stride, padding, out_channels, activation)
    conv_spec: list = field(default_factory=lambda: list(BACKBONE_SPECS["desk"]))
    feature_dim: int = 64
    mlp_hidden: int = 64

    def __post_init__(self):
        if not self.conv_spec:
            raise ConfigError("conv_spec must have at least one layer")
        if self.conv_spec[-1][3] != self.feature_dim:
            raise ConfigError(
                f"Final conv channels {self.conv_spec[-1][3]} != feature_dim {self.feature_dim}")
        stride = self.total_stride
        if self.image_height % stride or self.image_width % stride:
            raise ConfigError(
                f"Image {self.image_height}x{self.image_width} not divisible by total stride {stride}")

    @property
    def total_stride(self):
        stride = 1
        for _, s, _, _, _ in self.conv_spec:
            stride *= s
        return stride

    @property
    def grid_size(self):
        return self.image_height // self.total_stride, self.image_width // self.total_stride

    @property
    def num_features(self):
        h, w = self.grid_size
        return h * w

    @classmethod
    def from_experiment(cls, cfg):
        spec = [tuple(layer) for layer in BACKBONE_SPECS[cfg["BACKBONE"]]]
        kernel, stride, padding, _, activation = spec[-1]
        spec[-1] = (kernel, stride, padding, cfg["FEATURE_DIM"], activation)
        return cls(
            image_height=cfg["IMAGE_SIZE"],
            image_width=cfg["IMAGE_SIZE"],
            channels=cfg["IMAGE_CHANNELS"],
            conv_spec=spec,
            feature_dim=cfg["FEATURE_DIM"],
            mlp_hidden=cfg["FRONTEND_MLP_HIDDEN"],
        )


def make_positional_grid(height, width, dtype=torch.float32):
    """
    4-channel coordinate grid (x, y, 1-x, 1-y) with x, y linearly spaced in [0, 1]

    Returns:
        tensor (height, width, 4)
    """
    if height < 1 or width < 1:
        raise ConfigError("Grid dims must be >= 1")
    ys = torch.linspace(0.0, 1.0, height, dtype=dtype)
    xs = torch.linspace(0.0, 1.0, width, dtype=dtype)
    y, x = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([x, y, 1.0 - x, 1.0 - y], dim=-1)


class ImageEncoder(nn.Module):
    """
    CNN backbone + learned positional encoding -> set of L input features
    """

    def __init__(self, config):
        super().__init__()
        self.config = config

        layers = []
        in_channels = config.channels
        for kernel, stride, padding, out_channels, activation in config.conv_spec:
            layers.append(nn.Conv2d(in_channels, out_channels, kernel, stride, padding))
            if activation == "relu":
                layers.append(nn.ReLU())
            in_channels = out_channels
        self.convs = nn.Sequential(*layers)

        h, w = config.grid_size
        self.register_buffer("grid", make_positional_grid(h, w), persistent=False)
        self.pos_proj = nn.Linear(4, config.feature_dim)
        self.norm = nn.LayerNorm(config.feature_dim)
        self.mlp = nn.Sequential(
            nn.Linear(config.feature_dim, config.mlp_hidden),
            nn.ReLU(),
            nn.Linear(config.mlp_hidden, config.feature_dim),
        )

    def forward(self, images):
        """
        Args:
            images: (B, C, H, W) with values in [0, 1]

        Returns:
            features (B, L, D), L = grid_h * grid_w in raster order
        """
        c = self.config
        if images.shape[-2:] != (c.image_height, c.image_width):
            raise ConfigError(
                f"Expected {c.image_height}x{c.image_width} images, got {tuple(images.shape[-2:])}")
        x = self.convs(images).permute(0, 2, 3, 1)
        x = x + self.pos_proj(self.grid.to(x.dtype))
        x = self.mlp(self.norm(x))
        return x.flatten(1, 2)

    encode_image = forward
