"""
Procedural multi-object sprite scenes with ground-truth masks and factor labels

Layout on disk:
    <root>/manifest.json
    <root>/<split>/images/NNNNN.png
    <root>/<split>/masks/NNNNN.png     palette index = object id, 0 = background
    <root>/<split>/factors.jsonl       one record per scene
"""
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

from config import DATASET_DEFAULTS, SPRITE_PALETTES_JSON
from errors import ConfigError, GenerationError, IngestionError
from utils import get_logger, log_event

logger = get_logger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


def load_palettes(path=SPRITE_PALETTES_JSON):
    """
    Load factor palettes from JSON, falling back to built-in defaults

    Returns:
        dict: {"background": [r,g,b], "colors": {name: [r,g,b]},
               "shapes": [name], "sizes": {name: radius_px}}
    """
    try:
        if not os.path.exists(path):
            logger.warning("%s not found. Using default palettes.", path)
            return get_default_palettes()
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning("Error loading palettes (%s). Using default palettes.", e)
        return get_default_palettes()


def get_default_palettes():
    return {
        "background": [24, 24, 28],
        "colors": {
            "red": [220, 48, 48],
            "green": [48, 200, 72],
            "blue": [56, 96, 230],
            "yellow": [236, 216, 48],
            "magenta": [214, 64, 214],
            "cyan": [48, 212, 220],
        },
        "shapes": ["square", "circle", "triangle"],
        "sizes": {"small": 6, "medium": 8, "large": 11},
    }


@dataclass
class DatasetSpec:
    num_scenes: int = 6000
    min_objects: int = DATASET_DEFAULTS["min_objects"]
    max_objects: int = DATASET_DEFAULTS["max_objects"]
    image_size: int = 64
    colors: Dict[str, List[int]] = field(default_factory=lambda: load_palettes()["colors"])
    shapes: List[str] = field(default_factory=lambda: list(load_palettes()["shapes"]))
    # size is held fixed by default, as in the easy CLEVR variant
    sizes: Dict[str, int] = field(default_factory=lambda: {"medium": load_palettes()["sizes"]["medium"]})
    background: List[int] = field(default_factory=lambda: list(load_palettes()["background"]))
    position_cells: int = DATASET_DEFAULTS["position_cells"]
    visibility_threshold: float = DATASET_DEFAULTS["visibility_threshold"]
    max_placement_retries: int = DATASET_DEFAULTS["max_placement_retries"]
    seed: int = DATASET_DEFAULTS["seed"]
    fractions: List[float] = field(default_factory=lambda: [10 / 12, 1 / 12, 1 / 12])

    def __post_init__(self):
        if not self.colors or not self.shapes or not self.sizes:
            raise ConfigError("Factor palettes must be non-empty")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("Need 1 <= min_objects <= max_objects")
        if self.max_objects > 255:
            raise ConfigError("At most 255 objects fit an indexed mask")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-6:
            raise ConfigError("fractions must be three values summing to 1")
        if not 0 <= self.visibility_threshold <= 1:
            raise ConfigError("visibility_threshold must lie in [0, 1]")

    def split_counts(self):
        train = int(round(self.num_scenes * self.fractions[0]))
        val = int(round(self.num_scenes * self.fractions[1]))
        return {"train": train, "val": val, "test": self.num_scenes - train - val}

    def vocabularies(self):
        return {
            "color": list(self.colors),
            "shape": list(self.shapes),
            "size": list(self.sizes),
            "position": list(range(self.position_cells ** 2)),
        }


@dataclass
class SceneRecord:
    scene_id: str
    # (H, W, 3) float32 in [0, 1]
    image: np.ndarray
    # (num_objects + 1, H, W) bool; index 0 is background
    masks: np.ndarray
    # one factor map per object, ordered by object id 1..K
    objects: List[dict]
    coords: Optional[List[List[float]]] = None

    @property
    def num_objects(self):
        return len(self.objects)

    def image_tensor(self):
        """
        (3, H, W) float tensor
        """
        return torch.from_numpy(np.ascontiguousarray(self.image.transpose(2, 0, 1)))

    def object_masks(self):
        return self.masks[1:]


def quantize_position(x, y, image_size, cells=3):
    """
    Row-major grid cell index of a continuous position
    """
    col = min(int(x / image_size * cells), cells - 1)
    row = min(int(y / image_size * cells), cells - 1)
    return row * cells + col


def draw_shape(draw, shape, x, y, radius):
    if shape == "circle":
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=255)
    elif shape == "square":
        half = radius * 0.89
        draw.rectangle([x - half, y - half, x + half, y + half], fill=255)
    elif shape == "triangle":
        draw.polygon([(x, y - radius * 1.1), (x - radius * 1.1, y + radius * 0.8),
                      (x + radius * 1.1, y + radius * 0.8)], fill=255)
    else:
        raise ConfigError(f"Unknown shape {shape!r}")


def render_scene(spec, rng):
    """
    Sample and draw one scene; later objects occlude earlier ones

    Returns:
        (image uint8 (H,W,3), index mask uint8 (H,W), objects, coords) or None
        when some object ends up less visible than the threshold
    """
    size = spec.image_size
    color_names = list(spec.colors)
    size_names = list(spec.sizes)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    index_mask = np.zeros((size, size), dtype=np.uint8)
    full_masks = []
    objects, coords = [], []

    for obj_id in range(1, count + 1):
        color = color_names[rng.integers(len(color_names))]
        shape = spec.shapes[rng.integers(len(spec.shapes))]
        size_name = size_names[rng.integers(len(size_names))]
        radius = spec.sizes[size_name]
        x = float(rng.uniform(radius, size - radius))
        y = float(rng.uniform(radius, size - radius))

        layer = Image.new("L", (size, size), 0)
        draw_shape(ImageDraw.Draw(layer), shape, x, y, radius)
        full = np.array(layer) > 0
        full_masks.append(full)
        index_mask[full] = obj_id

        objects.append({
            "object_id": obj_id,
            "color": color,
            "shape": shape,
            "size": size_name,
            "position": quantize_position(x, y, size, spec.position_cells),
        })
        coords.append([x, y])

    for obj_id, full in enumerate(full_masks, start=1):
        visible = int((index_mask == obj_id).sum())
        if full.sum() == 0 or visible < spec.visibility_threshold * full.sum():
            return None

    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = np.asarray(spec.background, dtype=np.uint8)
    for obj in objects:
        image[index_mask == obj["object_id"]] = np.asarray(spec.colors[obj["color"]], dtype=np.uint8)

    return image, index_mask, objects, coords


def generate_scene(spec, split, index):
    """
    Deterministic scene for (seed, split, index); independent RNG stream per scene
    """
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), index])
    for _ in range(spec.max_placement_retries):
        scene = render_scene(spec, rng)
        if scene is not None:
            return scene
    raise GenerationError(
        f"Could not place objects above visibility {spec.visibility_threshold} "
        f"after {spec.max_placement_retries} retries (split={split}, scene={index})",
        scene_index=index,
    )


def mask_palette(num_entries=256):
    rng = np.random.default_rng(12345)
    palette = rng.integers(64, 256, size=(num_entries, 3)).astype(np.uint8)
    palette[0] = 0
    return palette.flatten().tolist()


def save_scene(split_dir, scene_id, image, index_mask):
    Image.fromarray(image, mode="RGB").save(os.path.join(split_dir, "images", f"{scene_id}.png"))
    mask = Image.fromarray(index_mask, mode="P")
    mask.putpalette(mask_palette())
    mask.save(os.path.join(split_dir, "masks", f"{scene_id}.png"))


def generate_dataset(spec, out_dir):
    """
    Write every split of a sprite dataset to disk

    Returns:
        dict: the manifest (also written to <out_dir>/manifest.json)
    """
    counts = spec.split_counts()
    for split in SPLITS:
        split_dir = os.path.join(out_dir, split)
        os.makedirs(os.path.join(split_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(split_dir, "masks"), exist_ok=True)

        with open(os.path.join(split_dir, "factors.jsonl"), "w", encoding="utf-8") as f:
            for index in range(counts[split]):
                scene_id = f"{index:05d}"
                image, index_mask, objects, coords = generate_scene(spec, split, index)
                save_scene(split_dir, scene_id, image, index_mask)
                f.write(json.dumps({"scene_id": scene_id, "objects": objects, "coords": coords},
                                   sort_keys=True) + "\n")
        log_event("dataset_split_written", {"split": split, "scenes": counts[split]}, logger)

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": spec.seed,
        "image_size": spec.image_size,
        "counts": counts,
        "factors": ["color", "shape", "size", "position"],
        "vocabularies": spec.vocabularies(),
        "spec": asdict(spec),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_manifest(root):
    """
    Read <root>/manifest.json; a split with a factors.jsonl but no manifest is
    ingested generically (foreign dataset layouts)
    """
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"Corrupt manifest ({e})", path)


def _hashable(value):
    return tuple(value) if isinstance(value, list) else value


def read_factor_records(root, split):
    path = os.path.join(root, split, "factors.jsonl")
    if not os.path.exists(path):
        if read_manifest(root) is None:
            raise IngestionError("Missing manifest and factor metadata", path)
        raise IngestionError("Missing factor metadata", path)
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"Corrupt factor metadata ({e})", path)
    return records


def factor_names(root, split="train"):
    """
    Factor keys of a dataset: from the manifest, else every key seen in the metadata
    """
    manifest = read_manifest(root)
    if manifest and manifest.get("factors"):
        return list(manifest["factors"])
    names = []
    for record in read_factor_records(root, split):
        for obj in record.get("objects", []):
            for key in obj:
                if key not in ("object_id", "id") and key not in names:
                    names.append(key)
    return names


def _read_png(path):
    try:
        with Image.open(path) as img:
            return np.array(img)
    except (OSError, ValueError) as e:
        raise IngestionError(f"Cannot read image ({e})", path)


def load_record(root, split, record):
    scene_id = str(record["scene_id"])
    split_dir = os.path.join(root, split)
    image = _read_png(os.path.join(split_dir, "images", f"{scene_id}.png"))
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    image = image[..., :3].astype(np.float32) / 255.0

    index_mask = _read_png(os.path.join(split_dir, "masks", f"{scene_id}.png"))
    objects = [
        {k: _hashable(v) for k, v in obj.items()} for obj in record.get("objects", [])
    ]
    for position, obj in enumerate(objects, start=1):
        obj.setdefault("object_id", obj.get("id", position))
    ids = [obj["object_id"] for obj in objects]
    masks = np.stack([index_mask == 0] + [index_mask == i for i in ids]).astype(bool)

    return SceneRecord(scene_id=scene_id, image=image, masks=masks, objects=objects,
                       coords=record.get("coords"))


def load_split(root, split, shuffle=False, seed=0, limit=None):
    """
    Stream SceneRecords of a split in manifest order (or a seeded shuffle)

    Yields:
        SceneRecord
    """
    records = read_factor_records(root, split)
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(records))
    if limit is not None:
        order = order[:limit]
    for i in order:
        yield load_record(root, split, records[i])


def load_images(root, split, limit=None):
    """
    All images of a split as one uint8 tensor (N, 3, H, W), in manifest order
    """
    images = []
    for record in read_factor_records(root, split)[:limit]:
        path = os.path.join(root, split, "images", f"{record['scene_id']}.png")
        image = _read_png(path)
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=-1)
        images.append(image[..., :3].transpose(2, 0, 1))
    if not images:
        return torch.zeros(0, 3, 0, 0, dtype=torch.uint8)
    return torch.from_numpy(np.stack(images))
