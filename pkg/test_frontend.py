#!/usr/bin/env python3
"""
Tests for the image encoder and positional grid
"""

import os
import sys

import torch

sys.path.insert(0, os.path.dirname(__file__))

from config import BACKBONE_SPECS, load_experiment_config  # noqa: E402
from errors import ConfigError  # noqa: E402
from frontend import FrontendConfig, ImageEncoder, make_positional_grid  # noqa: E402


def test_positional_grid_corners():
    grid = make_positional_grid(3, 5)
    assert grid.shape == (3, 5, 4)
    assert grid[0, 0].tolist() == [0.0, 0.0, 1.0, 1.0]
    assert grid[2, 4].tolist() == [1.0, 1.0, 0.0, 0.0]
    assert torch.allclose(grid[..., 0] + grid[..., 2], torch.ones(3, 5))


def test_positional_grid_matches_enumeration():
    steps = [0.0, 0.5, 1.0]
    expected = [[[x, y, 1.0 - x, 1.0 - y] for x in steps] for y in steps]
    assert torch.equal(make_positional_grid(3, 3), torch.tensor(expected))


def test_odd_grid_center():
    for height, width in ((3, 3), (5, 7), (9, 5)):
        center = make_positional_grid(height, width)[height // 2, width // 2]
        assert torch.allclose(center, torch.full((4,), 0.5), atol=1e-6)


def test_desk_encoder_shapes():
    config = FrontendConfig(image_height=16, image_width=16)
    encoder = ImageEncoder(config)
    features = encoder(torch.rand(2, 3, 16, 16))
    assert config.grid_size == (16, 16)
    assert features.shape == (2, 256, 64)


def test_strided_backbone_grid():
    spec = [(5, 2, 2, 8, "relu"), (5, 1, 2, 8, None)]
    config = FrontendConfig(image_height=32, image_width=32, conv_spec=spec, feature_dim=8, mlp_hidden=16)
    assert config.total_stride == 2
    features = ImageEncoder(config)(torch.rand(1, 3, 32, 32))
    assert features.shape == (1, 256, 8)


def test_backbone_presets_from_experiment():
    cfg = load_experiment_config(preset="clevr_tex")
    config = FrontendConfig.from_experiment(cfg)
    assert len(config.conv_spec) == len(BACKBONE_SPECS["clevr_tex"])
    assert config.total_stride == 4
    assert config.conv_spec[-1][3] == cfg["FEATURE_DIM"]


def test_rejects_wrong_image_size():
    encoder = ImageEncoder(FrontendConfig(image_height=16, image_width=16))
    try:
        encoder(torch.rand(1, 3, 20, 20))
    except ConfigError:
        return
    raise AssertionError("expected ConfigError")


def test_rejects_channel_mismatch():
    try:
        FrontendConfig(conv_spec=[(3, 1, 1, 32, None)], feature_dim=64)
    except ConfigError:
        return
    raise AssertionError("expected ConfigError")


def test_position_changes_features():
    """Identical pixels at different locations get different features"""
    encoder = ImageEncoder(FrontendConfig(image_height=8, image_width=8))
    features = encoder(torch.zeros(1, 3, 8, 8))
    assert not torch.allclose(features[0, 0], features[0, -1])


def main():
    """Run all tests"""
    print("=" * 60)
    print("IMAGE ENCODER - TESTS")
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
