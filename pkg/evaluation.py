"""
Slot/object matching, GBT probes, per-dimension and per-block DCI, FG-ARI
"""
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd
import torch
from scipy.optimize import linear_sum_assignment
from scipy.stats import entropy
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.metrics import adjusted_rand_score
from sklearn.model_selection import train_test_split

from config import IOU_THRESHOLD, PROBE_MIN_SAMPLES, PROBE_PARAMS, PROBE_TEST_FRACTION
from dataset import factor_names, load_split
from errors import ConfigError
from tokenizer import TokenGrid, write_token_dump
from training import load_checkpoint
from utils import calculate_percentage, get_logger, log_event, write_json

logger = get_logger(__name__)


@dataclass
class MatchedSlots:
    # (slot index, object index, IoU), one-to-one, every IoU > threshold
    pairs: List[tuple] = field(default_factory=list)
    unmatched_slots: List[int] = field(default_factory=list)
    unmatched_objects: List[int] = field(default_factory=list)


@dataclass
class ImportanceMatrix:
    # (K_factors, M*d), rows normalized to sum 1 (all-zero rows stay zero)
    R: np.ndarray
    num_blocks: int
    factors: List[str]

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if (self.R < 0).any():
            raise ConfigError("Importance matrix entries must be non-negative")
        if self.R.shape[1] % self.num_blocks:
            raise ConfigError(f"{self.R.shape[1]} dims do not split into {self.num_blocks} blocks")

    @property
    def block_size(self):
        return self.R.shape[1] // self.num_blocks

    def block_aggregate(self):
        """
        R_block[k, m] = sum of R[k, j] over the dims j of block m
        """
        return self.R.reshape(self.R.shape[0], self.num_blocks, self.block_size).sum(axis=-1)


def iou_matrix(pred_masks, gt_masks):
    """
    Args:
        pred_masks: (N, H, W) bool
        gt_masks: (K, H, W) bool

    Returns:
        (N, K) IoU, 0 where the union is empty
    """
    pred = pred_masks.reshape(pred_masks.shape[0], -1).astype(np.float64)
    gt = gt_masks.reshape(gt_masks.shape[0], -1).astype(np.float64)
    inter = pred @ gt.T
    union = pred.sum(1)[:, None] + gt.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_slots(pred_masks, gt_masks, iou_threshold=IOU_THRESHOLD, background_mask=None):
    """
    Hungarian one-to-one matching of slot masks to object masks maximizing total IoU

    Slots whose best IoU is with the background are left out before matching.
    """
    pred_masks = np.asarray(pred_masks, dtype=bool)
    gt_masks = np.asarray(gt_masks, dtype=bool)
    num_slots, num_objects = len(pred_masks), len(gt_masks)
    result = MatchedSlots()
    if num_slots == 0 or num_objects == 0:
        result.unmatched_slots = list(range(num_slots))
        result.unmatched_objects = list(range(num_objects))
        return result

    iou = iou_matrix(pred_masks, gt_masks)
    candidates = np.arange(num_slots)
    if background_mask is not None:
        bg_iou = iou_matrix(pred_masks, np.asarray(background_mask, dtype=bool)[None])[:, 0]
        candidates = candidates[bg_iou <= iou.max(axis=1)]

    rows, cols = linear_sum_assignment(iou[candidates], maximize=True)
    matched_slots, matched_objects = set(), set()
    for r, c in zip(rows, cols):
        slot = int(candidates[r])
        score = float(iou[slot, c])
        if score > iou_threshold:
            result.pairs.append((slot, int(c), score))
            matched_slots.add(slot)
            matched_objects.add(int(c))

    result.unmatched_slots = [s for s in range(num_slots) if s not in matched_slots]
    result.unmatched_objects = [o for o in range(num_objects) if o not in matched_objects]
    return result


def fg_ari(pred_labels, gt_labels):
    """
    Adjusted Rand Index over foreground pixels (gt label != 0)

    Returns:
        float in [-0.5, 1], or None for an empty foreground
    """
    pred_labels = np.asarray(pred_labels).reshape(-1)
    gt_labels = np.asarray(gt_labels).reshape(-1)
    foreground = gt_labels != 0
    if not foreground.any():
        return None
    return float(adjusted_rand_score(gt_labels[foreground], pred_labels[foreground]))


def encode_labels(values):
    """
    Categorical values -> int codes over the sorted vocabulary of their string forms
    """
    keys = np.array([str(v) for v in values])
    vocabulary, codes = np.unique(keys, return_inverse=True)
    return codes, vocabulary.tolist()


def train_probes(features, labels, seed=0, params=None, min_samples=PROBE_MIN_SAMPLES,
                 test_fraction=PROBE_TEST_FRACTION, num_blocks=1):
    """
    One gradient-boosted-tree classifier per factor predicting the factor from a slot

    Args:
        features: (P, M*d) matched slot vectors
        labels: {factor name: list of P values}

    Returns:
        dict: {"probes", "importance": ImportanceMatrix, "accuracy": {factor: acc},
               "excluded": {factor: reason}}
    """
    features = np.asarray(features, dtype=np.float64)
    params = dict(PROBE_PARAMS if params is None else params)
    probes, accuracy, excluded, rows, kept = {}, {}, {}, [], []

    for factor, values in labels.items():
        codes, _ = encode_labels(values)
        classes, counts = np.unique(codes, return_counts=True)
        keep = np.isin(codes, classes[counts >= min_samples])
        if len(np.unique(codes[keep])) < 2:
            excluded[factor] = "fewer than two values with enough samples"
            logger.info("Probe for %s excluded: %s", factor, excluded[factor])
            continue

        x, y = features[keep], codes[keep]
        x_train, x_test, y_train, y_test = train_test_split(
            x, y, test_size=test_fraction, random_state=seed)
        probe = GradientBoostingClassifier(random_state=seed, **params)
        probe.fit(x_train, y_train)

        importance = np.clip(probe.feature_importances_, 0, None)
        total = importance.sum()
        rows.append(importance / total if total > 0 else importance)
        probes[factor] = probe
        accuracy[factor] = float(probe.score(x_test, y_test))
        kept.append(factor)

    R = np.stack(rows) if rows else np.zeros((0, features.shape[1]))
    return {
        "probes": probes,
        "importance": ImportanceMatrix(R, num_blocks, kept),
        "accuracy": accuracy,
        "excluded": excluded,
    }


def _one_minus_entropy(p, base):
    if base <= 1:
        return 1.0
    return float(1.0 - entropy(p, base=base))


def dci_scores(importance, variant="per-block", accuracy=None):
    """
    Disentanglement / completeness / informativeness from an importance matrix

    per-dimension uses R (K_factors x M*d); per-block uses R_block (K_factors x M).
    D is the column-mass weighted mean of D_j; C is the unweighted mean of C_k;
    I is the mean probe accuracy.

    Returns:
        dict: {"variant", "D", "C", "I", "D_per_column", "column_weights", "C_per_factor"}
    """
    if variant == "per-dimension":
        matrix = importance.R
    elif variant == "per-block":
        matrix = importance.block_aggregate()
    else:
        raise ConfigError(f"Unknown DCI variant {variant!r}")

    num_factors, num_columns = matrix.shape
    column_mass = matrix.sum(axis=0)
    total = column_mass.sum()

    d_per_column = np.zeros(num_columns)
    for j in range(num_columns):
        if column_mass[j] > 0:
            d_per_column[j] = _one_minus_entropy(matrix[:, j], num_factors)
    weights = column_mass / total if total > 0 else np.zeros(num_columns)

    c_per_factor = np.zeros(num_factors)
    for k in range(num_factors):
        if matrix[k].sum() > 0:
            c_per_factor[k] = _one_minus_entropy(matrix[k], num_columns)

    accuracy = accuracy or {}
    return {
        "variant": variant,
        "D": float((weights * d_per_column).sum()),
        "C": float(c_per_factor.mean()) if num_factors else 0.0,
        "I": float(np.mean(list(accuracy.values()))) if accuracy else None,
        "D_per_column": d_per_column.tolist(),
        "column_weights": weights.tolist(),
        "C_per_factor": dict(zip(importance.factors, c_per_factor.tolist())),
    }


@torch.no_grad()
def collect_representations(model, root, split, limit=None, batch_size=32, rng_seed=0,
                            iou_threshold=IOU_THRESHOLD, factors=None):
    """
    Bind every scene of a split, match slots to objects, and gather probe data + FG-ARI

    Returns:
        dict: {"features": (P, M*d), "labels": {factor: [P values]}, "fg_ari": [...],
               "tokens": TokenGrid of the split's hard dVAE codes, "num_objects", "num_matched"}
    """
    model.eval()
    factors = factors or factor_names(root, split)
    param = next(model.parameters())
    features, ari_scores, codes = [], [], []
    labels = {f: [] for f in factors}
    num_objects = 0

    def flush(batch):
        nonlocal num_objects
        images = torch.stack([r.image_tensor() for r in batch]).to(param.device, param.dtype)
        state, maps = model.encode(images, rng_seed=rng_seed)
        codes.append(model.dvae.tokenize(images, hard=True)[0].codes.cpu())
        hard = model.masks(maps).argmax(dim=1).cpu().numpy()
        slots = state.slots.cpu().numpy()
        num_slots = slots.shape[1]
        for i, record in enumerate(batch):
            pred = np.stack([hard[i] == n for n in range(num_slots)])
            gt_labels = np.zeros(hard[i].shape, dtype=np.int64)
            for o, mask in enumerate(record.object_masks(), start=1):
                gt_labels[mask] = o
            score = fg_ari(hard[i], gt_labels)
            if score is not None:
                ari_scores.append(score)

            matched = match_slots(pred, record.object_masks(), iou_threshold, record.masks[0])
            num_objects += record.num_objects
            for slot, obj, _ in matched.pairs:
                features.append(slots[i, slot])
                for f in factors:
                    labels[f].append(record.objects[obj].get(f))

    batch = []
    for record in load_split(root, split, limit=limit):
        batch.append(record)
        if len(batch) == batch_size:
            flush(batch)
            batch = []
    if batch:
        flush(batch)

    width = model.binder.config.slot_size
    vocab = model.dvae.config.vocab_size
    return {
        "features": np.stack(features) if features else np.zeros((0, width)),
        "labels": labels,
        "fg_ari": ari_scores,
        "tokens": TokenGrid(torch.cat(codes), vocab) if codes else None,
        "num_objects": num_objects,
        "num_matched": len(features),
    }


def write_importance_csv(path, importance, block=False):
    matrix = importance.block_aggregate() if block else importance.R
    prefix = "block" if block else "dim"
    columns = [f"{prefix}_{j}" for j in range(matrix.shape[1])]
    pd.DataFrame(matrix, index=importance.factors, columns=columns).to_csv(path, index_label="factor")


def evaluate(checkpoint_path, data_dir, out_dir, split="test", limit=None, seed=0,
             iou_threshold=IOU_THRESHOLD, probe_params=None, min_samples=PROBE_MIN_SAMPLES):
    """
    Full evaluation of a checkpoint: writes report.json, importance.csv, importance_block.csv
    and tokens_<split>.bin (hard dVAE codes of the evaluated scenes)

    Returns:
        dict: the report
    """
    state = load_checkpoint(checkpoint_path)
    model = state.model
    collected = collect_representations(model, data_dir, split, limit=limit, rng_seed=seed,
                                        iou_threshold=iou_threshold)
    if collected["num_matched"] == 0:
        logger.warning("No slot matched an object above IoU %.2f", iou_threshold)

    probes = train_probes(collected["features"], collected["labels"], seed=seed,
                          params=probe_params, min_samples=min_samples,
                          num_blocks=model.binder.config.num_blocks)
    importance = probes["importance"]
    per_dimension = dci_scores(importance, "per-dimension", probes["accuracy"])
    per_block = dci_scores(importance, "per-block", probes["accuracy"])
    ari = collected["fg_ari"]

    report = {
        "checkpoint": os.path.abspath(checkpoint_path),
        "step": state.step,
        "split": split,
        "D": per_block["D"],
        "C": per_block["C"],
        "I": per_block["I"],
        "FG-ARI": float(np.mean(ari)) if ari else None,
        "fg_ari_scenes": len(ari),
        "per_block": per_block,
        "per_dimension": per_dimension,
        "probe_accuracy": probes["accuracy"],
        "excluded_factors": probes["excluded"],
        "factors": importance.factors,
        "R_block": importance.block_aggregate().tolist(),
        "num_objects": collected["num_objects"],
        "num_matched": collected["num_matched"],
        "matched_percentage": calculate_percentage(collected["num_matched"], collected["num_objects"]),
    }

    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "report.json"), report)
    write_importance_csv(os.path.join(out_dir, "importance.csv"), importance)
    write_importance_csv(os.path.join(out_dir, "importance_block.csv"), importance, block=True)
    if collected["tokens"] is not None:
        write_token_dump(os.path.join(out_dir, f"tokens_{split}.bin"), collected["tokens"])
    log_event("evaluation_finished", {k: report[k] for k in ("D", "C", "I", "FG-ARI", "num_matched")}, logger)
    return report
