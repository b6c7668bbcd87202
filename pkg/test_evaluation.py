#!/usr/bin/env python3
"""
Tests for slot matching, probes, DCI and FG-ARI against brute-force oracles
"""

import itertools
import math
import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))

from dataset import DatasetSpec, generate_dataset, load_split  # noqa: E402
from errors import ConfigError  # noqa: E402
from evaluation import ImportanceMatrix, dci_scores, evaluate, fg_ari, iou_matrix, match_slots, train_probes  # noqa: E402
from test_training import tiny_experiment  # noqa: E402
from tokenizer import read_token_dump  # noqa: E402
from training import fit  # noqa: E402


def brute_force_ari(a, b):
    """Hubert-Arabie ARI from the contingency table"""
    pairs = lambda n: n * (n - 1) / 2  # noqa: E731
    a_values, b_values = sorted(set(a)), sorted(set(b))
    table = [[sum(1 for x, y in zip(a, b) if x == i and y == j) for j in b_values] for i in a_values]
    index = sum(pairs(n) for row in table for n in row)
    rows = sum(pairs(sum(row)) for row in table)
    cols = sum(pairs(sum(col)) for col in zip(*table))
    expected = rows * cols / pairs(len(a))
    maximum = (rows + cols) / 2
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def manual_dci(R_block):
    """D and C written out with explicit logs"""
    K, M = R_block.shape
    col = R_block.sum(0)
    d = 0.0
    for j in range(M):
        p = R_block[:, j] / col[j]
        h = -sum(x * math.log(x) for x in p if x > 0) / math.log(K)
        d += (col[j] / col.sum()) * (1 - h)
    c = 0.0
    for k in range(K):
        p = R_block[k] / R_block[k].sum()
        h = -sum(x * math.log(x) for x in p if x > 0) / math.log(M)
        c += (1 - h) / K
    return d, c


def block_matrix(R_block, block_size=2):
    """Spread each block's mass evenly over its dims"""
    return np.repeat(np.asarray(R_block, dtype=np.float64) / block_size, block_size, axis=1)


def test_dci_identity_is_perfect():
    importance = ImportanceMatrix(block_matrix(np.eye(3)), num_blocks=3, factors=["a", "b", "c"])
    report = dci_scores(importance, "per-block", {"a": 1.0, "b": 0.5, "c": 0.0})
    assert abs(report["D"] - 1.0) < 1e-12
    assert abs(report["C"] - 1.0) < 1e-12
    assert abs(report["I"] - 0.5) < 1e-12


def test_dci_uniform_is_zero():
    importance = ImportanceMatrix(block_matrix(np.full((2, 2), 0.5)), num_blocks=2, factors=["a", "b"])
    report = dci_scores(importance, "per-block")
    assert abs(report["D"]) < 1e-12
    assert abs(report["C"]) < 1e-12
    assert report["I"] is None


def test_dci_matches_manual_two_by_two():
    R_block = np.array([[0.8, 0.2], [0.3, 0.7]])
    importance = ImportanceMatrix(block_matrix(R_block), num_blocks=2, factors=["a", "b"])
    report = dci_scores(importance, "per-block")
    d, c = manual_dci(R_block)
    assert abs(report["D"] - d) < 1e-12
    assert abs(report["C"] - c) < 1e-12


def test_dci_zero_column_has_no_weight():
    R = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    importance = ImportanceMatrix(R, num_blocks=3, factors=["a", "b"])
    report = dci_scores(importance, "per-dimension")
    assert report["D_per_column"][2] == 0.0
    assert report["column_weights"][2] == 0.0
    assert abs(report["D"] - 1.0) < 1e-12


def test_block_aggregate_conserves_mass():
    rng = np.random.default_rng(0)
    R = rng.random((4, 12))
    R /= R.sum(axis=1, keepdims=True)
    importance = ImportanceMatrix(R, num_blocks=3, factors=list("abcd"))
    R_block = importance.block_aggregate()
    assert R_block.shape == (4, 3)
    assert np.allclose(R_block.sum(axis=1), 1.0)
    assert np.allclose(R_block[:, 1], R[:, 4:8].sum(axis=1))


def test_importance_matrix_validation():
    for R, blocks in ((np.ones((2, 5)), 2), (-np.ones((2, 4)), 2)):
        try:
            ImportanceMatrix(R, num_blocks=blocks, factors=["a", "b"])
        except ConfigError:
            continue
        raise AssertionError("expected ConfigError")
    try:
        dci_scores(ImportanceMatrix(np.ones((1, 2)), 1, ["a"]), "per-slot")
    except ConfigError:
        return
    raise AssertionError("expected ConfigError")


def test_fg_ari_oracles():
    gt = np.array([1, 1, 2, 2])
    single = np.zeros(4, dtype=int)
    assert math.isclose(fg_ari(single, gt), brute_force_ari(list(single), list(gt)), abs_tol=1e-12)
    assert fg_ari(gt, gt) == 1.0
    assert fg_ari(np.array([5, 5, 3, 3]), gt) == 1.0

    rng = np.random.default_rng(1)
    for _ in range(5):
        gt = rng.integers(1, 4, size=30)
        pred = rng.integers(0, 3, size=30)
        assert math.isclose(fg_ari(pred, gt), brute_force_ari(list(pred), list(gt)), abs_tol=1e-9)


def test_fg_ari_ignores_background_and_empty():
    gt = np.array([[0, 0, 1], [0, 2, 2]])
    pred = np.array([[3, 4, 1], [0, 2, 2]])
    assert fg_ari(pred, gt) == 1.0
    assert fg_ari(pred, np.zeros_like(gt)) is None


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(5):
        pred = rng.random((4, 6, 6)) > 0.5
        gt = rng.random((3, 6, 6)) > 0.6
        iou = iou_matrix(pred, gt)
        best = max(sum(iou[s, o] for s, o in zip(perm, range(3)))
                   for perm in itertools.permutations(range(4), 3))
        matched = match_slots(pred, gt, iou_threshold=-1.0)
        assert len(matched.pairs) == 3
        assert math.isclose(sum(p[2] for p in matched.pairs), best, abs_tol=1e-12)
        assert len({p[0] for p in matched.pairs}) == 3


def test_matching_threshold_and_background():
    gt = np.zeros((1, 4, 4), dtype=bool)
    gt[0, :2, :2] = True
    background = ~gt[0]
    pred = np.zeros((2, 4, 4), dtype=bool)
    pred[0] = background
    pred[1, :2, :2] = True
    pred[1, 0, 2] = True

    matched = match_slots(pred, gt, iou_threshold=0.25, background_mask=background)
    assert [(s, o) for s, o, _ in matched.pairs] == [(1, 0)]
    assert matched.unmatched_slots == [0]
    assert matched.unmatched_objects == []

    assert match_slots(pred, gt, iou_threshold=0.9).pairs == []


def test_probes_find_the_informative_block():
    rng = np.random.default_rng(3)
    n = 300
    labels = rng.integers(0, 3, size=n)
    features = rng.normal(size=(n, 8)) * 0.1
    # block 1 (dims 4..7) encodes the color
    features[:, 4] += labels * 2.0
    result = train_probes(
        features,
        {"color": [["red", "green", "blue"][v] for v in labels], "shape": ["square"] * n},
        seed=0,
        params={"n_estimators": 20, "max_depth": 2, "learning_rate": 0.1},
        min_samples=10,
        num_blocks=2,
    )
    assert "shape" in result["excluded"]
    assert result["importance"].factors == ["color"]
    assert result["accuracy"]["color"] > 0.9
    R_block = result["importance"].block_aggregate()
    assert R_block[0, 1] > 0.8
    assert math.isclose(result["importance"].R.sum(), 1.0)


FAST_PROBES = {"n_estimators": 30, "max_depth": 2, "learning_rate": 0.1}


def block_coded_representation(n=300, block_size=6, seed=4):
    """Block k codes factor k alone, mixed over all of its dims by a random rotation"""
    rng = np.random.default_rng(seed)
    names = ["color", "shape", "size"]
    labels, blocks = {}, []
    for name in names:
        values = rng.integers(0, 3, size=n)
        angle = 2 * np.pi * values / 3
        latent = np.column_stack([2 * np.cos(angle), 2 * np.sin(angle),
                                  rng.normal(scale=0.1, size=(n, block_size - 2))])
        rotation, _ = np.linalg.qr(rng.normal(size=(block_size, block_size)))
        blocks.append(latent @ rotation)
        labels[name] = [f"{name}_{v}" for v in values]
    return np.hstack(blocks), labels


def test_dci_stable_across_classifier_seeds():
    features, labels = block_coded_representation()
    reports = []
    for seed in range(3):
        result = train_probes(features, labels, seed=seed, params=FAST_PROBES, min_samples=10, num_blocks=3)
        reports.append(dci_scores(result["importance"], "per-block", result["accuracy"]))
    for key in ("D", "C"):
        values = [r[key] for r in reports]
        assert max(values) - min(values) < 0.05, (key, values)


def test_per_block_dci_beats_per_dimension_under_mixing():
    features, labels = block_coded_representation()
    result = train_probes(features, labels, seed=0, params=FAST_PROBES, min_samples=10, num_blocks=3)
    per_block = dci_scores(result["importance"], "per-block", result["accuracy"])
    per_dimension = dci_scores(result["importance"], "per-dimension", result["accuracy"])

    assert per_block["C"] > per_dimension["C"] + 0.1
    assert per_block["D"] + per_block["C"] > per_dimension["D"] + per_dimension["C"]
    assert per_block["I"] > 0.9


def test_evaluate_writes_report():
    with tempfile.TemporaryDirectory() as tmp:
        data_dir = os.path.join(tmp, "data")
        generate_dataset(DatasetSpec(num_scenes=12, image_size=16, sizes={"small": 6}, seed=1), data_dir)
        _, checkpoint = fit(tiny_experiment(), data_dir, os.path.join(tmp, "run"), steps=0, progress=False)

        out_dir = os.path.join(tmp, "eval")
        report = evaluate(checkpoint, data_dir, out_dir, split="train", min_samples=10 ** 6)
        for key in ("D", "C", "I", "FG-ARI", "per_block", "per_dimension", "matched_percentage"):
            assert key in report
        assert set(report["excluded_factors"]) == {"color", "shape", "size", "position"}
        assert report["fg_ari_scenes"] <= 10
        for name in ("report.json", "importance.csv", "importance_block.csv", "tokens_train.bin"):
            assert os.path.exists(os.path.join(out_dir, name))

        tokens = read_token_dump(os.path.join(out_dir, "tokens_train.bin"))
        experiment = tiny_experiment()
        grid = experiment["IMAGE_SIZE"] // experiment["PATCH_SIZE"]
        assert tokens.codes.shape == (len(list(load_split(data_dir, "train"))), grid, grid)
        assert tokens.vocab_size == experiment["VOCAB_SIZE"]
        assert int(tokens.codes.max()) < tokens.vocab_size


def main():
    """Run all tests"""
    print("=" * 60)
    print("EVALUATION METRICS - TESTS")
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
