import os
from dotenv import dotenv_values

from errors import ConfigError

# Experiment defaults (desk-scale: 64x64 sprites, CPU friendly)
# Keys follow the usual SysBinder hyperparameter names
EXPERIMENT_DEFAULTS = {
    # General
    "BATCH_SIZE": 24,
    "TRAINING_STEPS": 30000,
    "SEED": 0,
    "IMAGE_SIZE": 64,
    "IMAGE_CHANNELS": 3,

    # Backbone
    "BACKBONE": "desk",  # desk | clevr_easy | clevr_tex
    "FEATURE_DIM": 64,
    "FRONTEND_MLP_HIDDEN": 64,

    # SysBinder
    "NUM_SLOTS": 5,
    "NUM_BLOCKS": 4,
    "BLOCK_SIZE": 32,
    "NUM_PROTOTYPES": 16,
    "NUM_ITERATIONS": 3,
    "LR_BINDER": 1e-4,
    "SHARE_RNN": False,
    "USE_RNN": True,
    "USE_BOTTLENECK": True,
    "SHARE_MEMORY": False,

    # Transformer decoder
    "DECODER_TYPE": "transformer",  # transformer | mixture (stub)
    "COUPLING": "coupler",  # coupler | flat | concat
    "DECODER_BLOCKS": 4,
    "DECODER_HEADS": 4,
    "HIDDEN_SIZE": 128,
    "DROPOUT": 0.1,
    "LR_DECODER": 3e-4,

    # dVAE
    "LR_DVAE": 3e-4,
    "PATCH_SIZE": 4,
    "VOCAB_SIZE": 1024,
    "DVAE_HIDDEN": 64,
    "TEMP_START": 1.0,
    "TEMP_END": 0.1,
    "TEMP_DECAY_STEPS": 3000,

    # Schedule (large-scale values / 10)
    "WARMUP_STEPS": 3000,
    "DECAY_HALF_LIFE": 25000,
    "GRAD_CLIP": 1.0,

    # Bookkeeping
    "LOG_EVERY": 50,
    "CHECKPOINT_EVERY": 1000,
    "CHECKPOINT_MINUTES": 30,
    "KEEP_CHECKPOINTS": 3,
}

# Large-scale settings per dataset
EXPERIMENT_PRESETS = {
    "clevr_easy": {
        "BATCH_SIZE": 40, "TRAINING_STEPS": 200000, "IMAGE_SIZE": 128,
        "BACKBONE": "clevr_easy", "FEATURE_DIM": 192, "FRONTEND_MLP_HIDDEN": 192,
        "BLOCK_SIZE": 256, "NUM_BLOCKS": 8, "NUM_PROTOTYPES": 64,
        "NUM_ITERATIONS": 3, "NUM_SLOTS": 4,
        "DECODER_BLOCKS": 8, "DECODER_HEADS": 4, "HIDDEN_SIZE": 192,
        "VOCAB_SIZE": 4096, "TEMP_DECAY_STEPS": 30000,
        "WARMUP_STEPS": 30000, "DECAY_HALF_LIFE": 250000,
    },
    "clevr_hard": {
        "BATCH_SIZE": 40, "TRAINING_STEPS": 200000, "IMAGE_SIZE": 128,
        "BACKBONE": "clevr_easy", "FEATURE_DIM": 192, "FRONTEND_MLP_HIDDEN": 192,
        "BLOCK_SIZE": 128, "NUM_BLOCKS": 16, "NUM_PROTOTYPES": 64,
        "NUM_ITERATIONS": 3, "NUM_SLOTS": 4,
        "DECODER_BLOCKS": 8, "DECODER_HEADS": 4, "HIDDEN_SIZE": 192,
        "VOCAB_SIZE": 4096, "TEMP_DECAY_STEPS": 30000,
        "WARMUP_STEPS": 30000, "DECAY_HALF_LIFE": 250000,
    },
    "clevr_tex": {
        "BATCH_SIZE": 40, "TRAINING_STEPS": 400000, "IMAGE_SIZE": 128,
        "BACKBONE": "clevr_tex", "FEATURE_DIM": 192, "FRONTEND_MLP_HIDDEN": 192,
        "BLOCK_SIZE": 256, "NUM_BLOCKS": 8, "NUM_PROTOTYPES": 64,
        "NUM_ITERATIONS": 3, "NUM_SLOTS": 6,
        "DECODER_BLOCKS": 8, "DECODER_HEADS": 8, "HIDDEN_SIZE": 192,
        "VOCAB_SIZE": 4096, "TEMP_DECAY_STEPS": 30000,
        "WARMUP_STEPS": 30000, "DECAY_HALF_LIFE": 250000,
    },
}

# Backbone conv stacks: (kernel, stride, padding, out_channels, activation)
# The last layer's channels are replaced by FEATURE_DIM
BACKBONE_SPECS = {
    "desk": [
        (5, 1, 2, 64, "relu"),
        (5, 1, 2, 64, "relu"),
        (5, 1, 2, 64, None),
    ],
    "clevr_easy": [
        (5, 2, 2, 512, "relu"),
        (5, 1, 2, 512, "relu"),
        (5, 1, 2, 512, "relu"),
        (5, 1, 2, 192, None),
    ],
    "clevr_tex": [
        (5, 2, 2, 512, "relu"),
        (5, 1, 2, 512, "relu"),
        (5, 2, 2, 512, "relu"),
        (5, 1, 2, 512, "relu"),
        (5, 1, 2, 192, None),
    ],
}

# Sprite dataset
SPRITE_PALETTES_JSON = os.path.join(os.path.dirname(__file__), "data", "sprite_palettes.json")
DATASET_DEFAULTS = {
    "num_train": 5000,
    "num_val": 500,
    "num_test": 500,
    "min_objects": 2,
    "max_objects": 4,
    "visibility_threshold": 0.2,
    "position_cells": 3,
    "max_placement_retries": 200,
    "seed": 0,
}

# Evaluation protocol
IOU_THRESHOLD = 0.25
PROBE_PARAMS = {
    "n_estimators": 100,
    "max_depth": 6,
    "learning_rate": 0.1,
}
PROBE_TEST_FRACTION = 0.2
PROBE_MIN_SAMPLES = 50

# Analysis
KMEANS_CLUSTERS = 12
KMEANS_RESTARTS = 10
PROTOTYPE_REPORT_SAMPLES = 300
SWAP_TRIALS = 10
HUE_BINS = 12
# background and gray render noise stay below this
HUE_MIN_SATURATION = 0.25

# Logging
LOG_LEVEL = os.getenv("BINDER_LOG_LEVEL", "INFO")
LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"


def _coerce(key, raw, default):
    """
    Convert a raw config value to the type of its default
    """
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"Cannot read {key}={raw!r} as {type(default).__name__}")
    return text


def load_experiment_config(path=None, preset=None, overrides=None):
    """
    Build a flat experiment config

    Precedence (lowest to highest): EXPERIMENT_DEFAULTS, preset,
    KEY=VALUE experiment file, explicit overrides.

    Args:
        path: optional experiment file in KEY=VALUE format
        preset: optional name in EXPERIMENT_PRESETS
        overrides: optional dict of keys to force

    Returns:
        dict: every key of EXPERIMENT_DEFAULTS with a typed value
    """
    cfg = dict(EXPERIMENT_DEFAULTS)
    layers = []

    if preset:
        if preset not in EXPERIMENT_PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; choose from {sorted(EXPERIMENT_PRESETS)}")
        layers.append(EXPERIMENT_PRESETS[preset])

    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Experiment file not found: {path}")
        file_values = {k.upper(): v for k, v in dotenv_values(path).items() if v is not None}
        layers.append(file_values)

    if overrides:
        layers.append({k.upper(): v for k, v in overrides.items()})

    for layer in layers:
        for key, raw in layer.items():
            if key not in EXPERIMENT_DEFAULTS:
                raise ConfigError(f"Unknown experiment key: {key}")
            cfg[key] = _coerce(key, raw, EXPERIMENT_DEFAULTS[key])

    validate_experiment_config(cfg)
    return cfg


def validate_experiment_config(cfg):
    """
    Cross-key checks that no single module can do on its own
    """
    if cfg["WARMUP_STEPS"] > cfg["TRAINING_STEPS"] and cfg["TRAINING_STEPS"] > 0:
        raise ConfigError("WARMUP_STEPS must not exceed TRAINING_STEPS")
    for key in ("LR_BINDER", "LR_DECODER", "LR_DVAE"):
        if cfg[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if cfg["BACKBONE"] not in BACKBONE_SPECS:
        raise ConfigError(f"Unknown BACKBONE {cfg['BACKBONE']!r}")
    if cfg["COUPLING"] not in ("coupler", "flat", "concat"):
        raise ConfigError(f"Unknown COUPLING {cfg['COUPLING']!r}")
    if cfg["DECODER_TYPE"] not in ("transformer", "mixture"):
        raise ConfigError(f"Unknown DECODER_TYPE {cfg['DECODER_TYPE']!r}")
    return cfg
