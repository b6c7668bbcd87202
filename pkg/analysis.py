"""
Qualitative analyses on trained models: block clustering, factor swaps,
prototype diagnostics and importance heatmaps
"""
import itertools
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from matplotlib.colors import rgb_to_hsv  # noqa: E402
from PIL import Image  # noqa: E402
from sklearn.cluster import KMeans  # noqa: E402

from binder import BlockSlotState  # noqa: E402
from config import (  # noqa: E402
    HUE_BINS,
    HUE_MIN_SATURATION,
    IOU_THRESHOLD,
    KMEANS_CLUSTERS,
    KMEANS_RESTARTS,
    PROTOTYPE_REPORT_SAMPLES,
    SWAP_TRIALS,
)
from dataset import load_record, load_split, read_factor_records  # noqa: E402
from errors import AnalysisError  # noqa: E402
from evaluation import match_slots  # noqa: E402
from utils import calculate_percentage, get_logger, log_event, write_json  # noqa: E402

logger = get_logger(__name__)


@dataclass
class SwapSpec:
    scene_id: str
    slots: Tuple[int, int]
    blocks: Tuple[int, ...]

    def __post_init__(self):
        self.slots = tuple(int(s) for s in self.slots)
        self.blocks = tuple(sorted({int(b) for b in self.blocks}))
        if len(self.slots) != 2 or self.slots[0] == self.slots[1]:
            raise AnalysisError("Swap needs two distinct slot indices")
        if not self.blocks:
            raise AnalysisError("Swap needs at least one block index")


@dataclass
class BlockClusterReport:
    block: int
    k: int
    # cluster id per collected block vector
    assignments: np.ndarray
    inertia: float
    cluster_sizes: List[int] = field(default_factory=list)
    # {factor: purity} over slots matched to an object
    purity: Dict[str, float] = field(default_factory=dict)
    montage_path: str = None

    def summary(self):
        return {
            "block": self.block,
            "k": self.k,
            "num_samples": int(len(self.assignments)),
            "inertia": self.inertia,
            "cluster_sizes": self.cluster_sizes,
            "purity": self.purity,
            "montage": self.montage_path,
        }


def _model_param(model):
    return next(model.parameters())


def _images(records, model):
    param = _model_param(model)
    return torch.stack([r.image_tensor() for r in records]).to(param.device, param.dtype)


def swap_blocks(slots, i, j, blocks, num_blocks):
    """
    Exchange blocks `blocks` between slots i and j

    Args:
        slots: (..., N, M*d) tensor; left untouched
        blocks: block indices in [0, M)

    Returns:
        new tensor with the same shape
    """
    n, width = slots.shape[-2], slots.shape[-1]
    if width % num_blocks:
        raise AnalysisError(f"Slot width {width} does not split into {num_blocks} blocks")
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise AnalysisError(f"Invalid slot pair ({i}, {j}) for {n} slots")
    blocks = list(blocks)
    if not blocks or any(not 0 <= b < num_blocks for b in blocks):
        raise AnalysisError(f"Block indices must be a non-empty subset of [0, {num_blocks})")

    d = width // num_blocks
    swapped = slots.clone()
    for b in blocks:
        seg = slice(b * d, (b + 1) * d)
        swapped[..., i, seg] = slots[..., j, seg]
        swapped[..., j, seg] = slots[..., i, seg]
    return swapped


def kmeans_blocks(vectors, k=KMEANS_CLUSTERS, seed=0, restarts=KMEANS_RESTARTS):
    """
    Returns:
        fitted sklearn KMeans (best inertia over `restarts` runs)
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) < k:
        raise AnalysisError(f"Need at least {k} block vectors for k-means, got {len(vectors)}")
    return KMeans(n_clusters=k, n_init=restarts, random_state=seed).fit(vectors)


def cluster_purity(assignments, values):
    """
    Fraction of samples whose value equals the majority value of their cluster
    """
    frame = pd.DataFrame({"cluster": assignments, "value": [str(v) for v in values]})
    if frame.empty:
        return 0.0
    majority = frame.groupby("cluster")["value"].agg(lambda s: s.value_counts().iloc[0])
    return float(majority.sum() / len(frame))


def save_montage(crops, assignments, k, path, per_cluster=8):
    """
    One row per cluster with up to `per_cluster` attention-masked crops
    """
    h, w = crops.shape[1:3]
    canvas = np.ones((k * h, per_cluster * w, 3), dtype=np.float32)
    for c in range(k):
        members = np.flatnonzero(assignments == c)[:per_cluster]
        for col, idx in enumerate(members):
            canvas[c * h:(c + 1) * h, col * w:(col + 1) * w] = crops[idx]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray((np.clip(canvas, 0, 1) * 255).astype(np.uint8)).save(path)
    return path


@torch.no_grad()
def collect_blocks(model, root, split, block, limit=None, batch_size=32, rng_seed=0,
                   iou_threshold=IOU_THRESHOLD):
    """
    Bind a split and gather block `block` of every slot with its masked crop

    Returns:
        dict: {"vectors": (P, d), "crops": (P, H, W, 3), "factors": [P dicts or None]}
    """
    model.eval()
    num_blocks = model.binder.config.num_blocks
    if not 0 <= block < num_blocks:
        raise AnalysisError(f"Block index must lie in [0, {num_blocks})")

    vectors, crops, factors = [], [], []

    def flush(batch):
        state, maps = model.encode(_images(batch, model), rng_seed=rng_seed)
        soft = model.masks(maps)
        hard = soft.argmax(dim=1).cpu().numpy()
        blocks = state.blocks()[:, :, block].cpu().numpy()
        soft = soft.cpu().numpy()
        for b, record in enumerate(batch):
            num_slots = blocks.shape[1]
            pred = np.stack([hard[b] == n for n in range(num_slots)])
            matched = match_slots(pred, record.object_masks(), iou_threshold, record.masks[0])
            owner = {slot: record.objects[obj] for slot, obj, _ in matched.pairs}
            for n in range(num_slots):
                vectors.append(blocks[b, n])
                crops.append(record.image * soft[b, n][..., None])
                factors.append(owner.get(n))

    batch = []
    for record in load_split(root, split, limit=limit):
        batch.append(record)
        if len(batch) == batch_size:
            flush(batch)
            batch = []
    if batch:
        flush(batch)

    d = model.binder.config.block_size
    return {
        "vectors": np.stack(vectors) if vectors else np.zeros((0, d)),
        "crops": np.stack(crops) if crops else np.zeros((0, 1, 1, 3)),
        "factors": factors,
    }


def cluster_blocks(model, root, split, block, k=KMEANS_CLUSTERS, seed=0, out_dir=None,
                   limit=None):
    """
    k-means over the m-th blocks of all slots of a split

    Returns:
        BlockClusterReport
    """
    collected = collect_blocks(model, root, split, block, limit=limit, rng_seed=seed)
    km = kmeans_blocks(collected["vectors"], k, seed)
    assignments = km.labels_

    purity = {}
    matched = [i for i, f in enumerate(collected["factors"]) if f is not None]
    if matched:
        names = sorted({key for i in matched for key in collected["factors"][i]} - {"object_id"})
        for name in names:
            purity[name] = cluster_purity(assignments[matched],
                                          [collected["factors"][i].get(name) for i in matched])

    report = BlockClusterReport(
        block=block,
        k=k,
        assignments=assignments,
        inertia=float(km.inertia_),
        cluster_sizes=np.bincount(assignments, minlength=k).tolist(),
        purity=purity,
    )
    if out_dir:
        report.montage_path = save_montage(collected["crops"], assignments, k,
                                           os.path.join(out_dir, f"clusters_block{block}.png"))
        write_json(os.path.join(out_dir, f"clusters_block{block}.json"), report.summary())
    log_event("blocks_clustered", {"block": block, "k": k, "purity": purity}, logger)
    return report


def find_scene(root, split, scene_id):
    for record in read_factor_records(root, split):
        if str(record["scene_id"]) == str(scene_id):
            return load_record(root, split, record)
    raise AnalysisError(f"Scene {scene_id} not found in split {split}")


def _to_hwc(image):
    return image.detach().cpu().float().clamp(0, 1).permute(1, 2, 0).numpy()


def dominant_hue(image, mask, bins=HUE_BINS, min_saturation=HUE_MIN_SATURATION):
    """
    Most populated hue bin over the saturated pixels of a region

    Args:
        image: (H, W, 3) in [0, 1]
        mask: (H, W) bool

    Returns:
        bin index in [0, bins), or None when the region has no saturated pixel
    """
    hsv = rgb_to_hsv(np.clip(np.asarray(image, dtype=np.float64), 0, 1))
    picked = np.asarray(mask, dtype=bool) & (hsv[..., 1] >= min_saturation)
    if not picked.any():
        return None
    counts, _ = np.histogram(hsv[..., 0][picked], bins=bins, range=(0.0, 1.0))
    return int(counts.argmax())


def hue_exchange(original, manipulated, regions, i, j, bins=HUE_BINS):
    """
    Did the dominant hues of regions i and j trade places between two renders?

    Args:
        original, manipulated: (H, W, 3) renders in [0, 1]
        regions: (N, H, W) bool slot regions of the original binding

    Returns:
        dict: {"before": [hue_i, hue_j], "after": [hue_i, hue_j], "exchanged": bool}
    """
    before = [dominant_hue(original, regions[s], bins) for s in (i, j)]
    after = [dominant_hue(manipulated, regions[s], bins) for s in (i, j)]
    exchanged = None not in before and before[0] != before[1] and after == before[::-1]
    return {"before": before, "after": after, "exchanged": bool(exchanged)}


def _slot_regions(model, maps):
    """
    (N, H, W) bool hard slot regions of the first image in a batch
    """
    hard = model.masks(maps)[0].argmax(dim=0).cpu().numpy()
    return np.stack([hard == n for n in range(maps.slot_attention.shape[1])])


def _swap_and_render(model, state, i, j, blocks):
    swapped = swap_blocks(state.slots, i, j, blocks, state.num_blocks)
    original = model.render(state)[0]
    manipulated = model.render(BlockSlotState(swapped, state.num_blocks))[0]
    return original, manipulated


@torch.no_grad()
def swap_factors(model, root, split, spec, out_dir=None, rng_seed=0):
    """
    Bind a scene, swap blocks between two slots, and decode both versions

    Returns:
        (original render, manipulated render, hue report) with (C, H, W) renders;
        the hue report is hue_exchange() over the two slots' regions
    """
    model.eval()
    record = find_scene(root, split, spec.scene_id)
    state, maps = model.encode(_images([record], model), rng_seed=rng_seed)
    i, j = spec.slots
    original, manipulated = _swap_and_render(model, state, i, j, spec.blocks)
    hues = hue_exchange(_to_hwc(original), _to_hwc(manipulated), _slot_regions(model, maps), i, j)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        panel = np.concatenate([record.image, _to_hwc(original), _to_hwc(manipulated)], axis=1)
        name = f"swap_{spec.scene_id}_s{i}-{j}_b{'-'.join(map(str, spec.blocks))}.png"
        Image.fromarray((panel * 255).astype(np.uint8)).save(os.path.join(out_dir, name))
        log_event("factors_swapped", {"scene": spec.scene_id, "slots": [i, j], "blocks": list(spec.blocks),
                                      "hues_exchanged": hues["exchanged"], "path": name}, logger)
    return original, manipulated, hues


@torch.no_grad()
def swap_trials(model, root, split, blocks, scenes=SWAP_TRIALS, factor="color", rng_seed=0,
                iou_threshold=IOU_THRESHOLD):
    """
    Swap `blocks` between two matched objects that differ in `factor`, over the
    first `scenes` scenes that have such a pair, and count hue exchanges

    Returns:
        dict: {"trials": [per-scene hue reports], "attempted", "exchanged", "exchanged_percentage"}
    """
    model.eval()
    trials = []
    for record in load_split(root, split):
        if len(trials) == scenes:
            break
        state, maps = model.encode(_images([record], model), rng_seed=rng_seed)
        regions = _slot_regions(model, maps)
        matched = match_slots(regions, record.object_masks(), iou_threshold, record.masks[0])
        pair = next(
            ((a[0], b[0]) for a, b in itertools.combinations(matched.pairs, 2)
             if record.objects[a[1]].get(factor) != record.objects[b[1]].get(factor)),
            None,
        )
        if pair is None:
            continue
        original, manipulated = _swap_and_render(model, state, pair[0], pair[1], blocks)
        hues = hue_exchange(_to_hwc(original), _to_hwc(manipulated), regions, *pair)
        trials.append({"scene": record.scene_id, "slots": list(pair), **hues})

    exchanged = sum(t["exchanged"] for t in trials)
    if len(trials) < scenes:
        logger.warning("Only %d scenes had two matched objects with different %s", len(trials), factor)
    log_event("swap_trials_finished", {"attempted": len(trials), "exchanged": exchanged}, logger)
    return {
        "trials": trials,
        "attempted": len(trials),
        "exchanged": exchanged,
        "exchanged_percentage": calculate_percentage(exchanged, len(trials)),
    }


@torch.no_grad()
def collect_prototype_weights(model, root, split, samples=PROTOTYPE_REPORT_SAMPLES,
                              batch_size=32, rng_seed=0):
    """
    Returns:
        (S, N, M, K) concept-memory attention weights of the final binding iteration
    """
    model.eval()
    if not model.binder.config.use_bottleneck:
        raise AnalysisError("Model was trained without concept memory; no prototype weights")
    weights, batch = [], []
    for record in load_split(root, split, limit=samples):
        batch.append(record)
        if len(batch) == batch_size:
            state, _ = model.encode(_images(batch, model), rng_seed=rng_seed)
            weights.append(state.prototype_weights.cpu().numpy())
            batch = []
    if batch:
        state, _ = model.encode(_images(batch, model), rng_seed=rng_seed)
        weights.append(state.prototype_weights.cpu().numpy())
    if not weights:
        raise AnalysisError(f"Split {split} has no scenes")
    return np.concatenate(weights)


def prototype_report(model, root, split, out_dir, samples=PROTOTYPE_REPORT_SAMPLES,
                     num_heatmaps=4, rng_seed=0):
    """
    Per-sample M x K heatmaps, split-averaged coverage and the max-weight histogram

    Returns:
        dict with coverage (M, K), max_weight stats and written file paths
    """
    weights = collect_prototype_weights(model, root, split, samples, rng_seed=rng_seed)
    coverage = weights.mean(axis=(0, 1))
    max_weight = weights.max(axis=-1).reshape(-1)
    os.makedirs(out_dir, exist_ok=True)

    paths = []
    for s in range(min(num_heatmaps, len(weights))):
        fig, axes = plt.subplots(1, weights.shape[1], figsize=(3 * weights.shape[1], 2.5), squeeze=False)
        for n, ax in enumerate(axes[0]):
            ax.imshow(weights[s, n], vmin=0, vmax=1, cmap="viridis", aspect="auto")
            ax.set_title(f"slot {n}")
            ax.set_xlabel("prototype")
            ax.set_ylabel("block")
        fig.tight_layout()
        path = os.path.join(out_dir, f"prototypes_sample{s}.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(coverage, cmap="viridis", aspect="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("prototype")
    ax.set_ylabel("block")
    ax.set_title("mean prototype attention")
    fig.tight_layout()
    coverage_path = os.path.join(out_dir, "prototype_coverage.png")
    fig.savefig(coverage_path)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(max_weight, bins=20, range=(0, 1))
    ax.set_xlabel("max prototype weight per block")
    ax.set_ylabel("count")
    fig.tight_layout()
    histogram_path = os.path.join(out_dir, "prototype_max_weight.png")
    fig.savefig(histogram_path)
    plt.close(fig)

    report = {
        "num_samples": int(len(weights)),
        "coverage": coverage,
        "coverage_ratio": float(coverage.max() / max(coverage.min(), 1e-12)),
        "max_weight_mean": float(max_weight.mean()),
        "max_weight_quantiles": np.quantile(max_weight, [0.1, 0.5, 0.9]).tolist(),
        "heatmaps": paths,
        "coverage_plot": coverage_path,
        "max_weight_plot": histogram_path,
    }
    write_json(os.path.join(out_dir, "prototypes.json"), report)
    return report


def importance_heatmap(R_block, factors, path, dpi=100):
    """
    Render R_block (factors x blocks) as an annotated heatmap; the figure size grows with both axes
    """
    R_block = np.asarray(R_block, dtype=np.float64)
    num_factors, num_blocks = R_block.shape
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * num_blocks, 1.0 + 0.6 * num_factors), dpi=dpi)
    ax.imshow(R_block, vmin=0, vmax=max(1.0, float(R_block.max())), cmap="Blues", aspect="auto")
    ax.set_xticks(range(num_blocks))
    ax.set_xticklabels([f"b{m}" for m in range(num_blocks)])
    ax.set_yticks(range(num_factors))
    ax.set_yticklabels(factors)
    for k in range(num_factors):
        for m in range(num_blocks):
            ax.text(m, k, f"{R_block[k, m]:.2f}", ha="center", va="center", fontsize=7)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def read_importance_csv(path):
    """
    Returns:
        (matrix (K_factors, columns), factor names, column names)
    """
    if not os.path.exists(path):
        raise AnalysisError(f"Importance table not found: {path}")
    frame = pd.read_csv(path, index_col="factor")
    return frame.to_numpy(dtype=np.float64), [str(f) for f in frame.index], list(frame.columns)


def suggest_factor_blocks(R_block, factors):
    """
    Argmax factor per block, as candidates for swap block sets

    Returns:
        list of {"block", "factor", "weight"}; factor is None for an all-zero column
    """
    R_block = np.asarray(R_block, dtype=np.float64)
    suggestions = []
    for m in range(R_block.shape[1]):
        column = R_block[:, m]
        if column.sum() <= 0:
            suggestions.append({"block": m, "factor": None, "weight": 0.0})
            continue
        k = int(column.argmax())
        suggestions.append({"block": m, "factor": factors[k], "weight": float(column[k])})
    return suggestions
