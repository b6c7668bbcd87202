#!/usr/bin/env python3
"""
Tests for the discrete VAE tokenizer, temperature schedule and token dumps
"""

import math
import os
import sys
import tempfile

import torch

sys.path.insert(0, os.path.dirname(__file__))

from errors import ConfigError, IngestionError, TokenRangeError  # noqa: E402
from tokenizer import (  # noqa: E402
    DiscreteVAE,
    TokenGrid,
    TokenizerConfig,
    anneal_temperature,
    read_token_dump,
    reconstruction_loss,
    relaxed_sample,
    sample_gumbel,
    write_token_dump,
)


def tiny_dvae():
    torch.manual_seed(0)
    return DiscreteVAE(TokenizerConfig(patch_size=4, vocab_size=12, hidden=8))


def test_anneal_temperature_schedule():
    config = TokenizerConfig(temp_start=1.0, temp_end=0.1, temp_decay_steps=30000)
    assert math.isclose(anneal_temperature(0, config), 1.0)
    assert math.isclose(anneal_temperature(15000, config), 0.55, abs_tol=1e-9)
    assert anneal_temperature(30000, config) == 0.1
    assert anneal_temperature(90000, config) == 0.1


def test_anneal_is_monotone():
    config = TokenizerConfig(temp_decay_steps=100)
    temps = [anneal_temperature(s, config) for s in range(0, 120, 5)]
    assert all(a >= b for a, b in zip(temps, temps[1:]))


def test_tokenize_shapes_and_simplex():
    dvae = tiny_dvae()
    images = torch.rand(2, 3, 16, 16)
    grid, soft = dvae.tokenize(images, temperature=0.7, rng_seed=0)
    assert grid.grid_size == (4, 4)
    assert grid.length == 16
    assert soft.shape == (2, 12, 4, 4)
    assert torch.allclose(soft.sum(dim=1), torch.ones(2, 4, 4), atol=1e-5)
    assert int(grid.codes.min()) >= 0 and int(grid.codes.max()) < 12


def test_hard_tokens_are_deterministic():
    dvae = tiny_dvae()
    images = torch.rand(2, 3, 16, 16)
    a, one_hot = dvae.tokenize(images, hard=True)
    b, _ = dvae.tokenize(images, hard=True)
    assert torch.equal(a.codes, b.codes)
    assert torch.equal(one_hot.argmax(dim=1), a.codes)
    assert torch.equal(one_hot.sum(dim=1), torch.ones(2, 4, 4))


def test_hard_tokens_ignore_temperature():
    dvae = tiny_dvae()
    images = torch.rand(2, 3, 16, 16)
    cold, cold_one_hot = dvae.tokenize(images, temperature=0.05, hard=True)
    warm, warm_one_hot = dvae.tokenize(images, temperature=5.0, hard=True)
    assert torch.equal(cold.codes, warm.codes)
    assert torch.equal(cold_one_hot, warm_one_hot)


def test_relaxed_reconstruction_gradcheck():
    """Finite differences agree with autograd through Gumbel-softmax and the decoder"""
    torch.manual_seed(0)
    dvae = DiscreteVAE(TokenizerConfig(patch_size=2, vocab_size=5, hidden=4)).double()
    images = torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    noise = sample_gumbel((1, 5, 2, 2), torch.Generator().manual_seed(2), torch.float64)
    logits = dvae.logits(images).detach().requires_grad_(True)

    def loss(x):
        return reconstruction_loss(images, dvae.detokenize(relaxed_sample(x, 0.7, noise)))

    assert torch.autograd.gradcheck(loss, (logits,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_relaxed_tokens_follow_seed():
    dvae = tiny_dvae()
    images = torch.rand(1, 3, 16, 16)
    _, a = dvae.tokenize(images, temperature=1.0, rng_seed=3)
    _, b = dvae.tokenize(images, temperature=1.0, rng_seed=3)
    assert torch.equal(a, b)


def test_detokenize_accepts_grid_codes_and_one_hot():
    dvae = tiny_dvae()
    grid, one_hot = dvae.tokenize(torch.rand(2, 3, 16, 16), hard=True)
    from_grid = dvae.detokenize(grid)
    from_codes = dvae.detokenize(grid.codes)
    from_one_hot = dvae.detokenize(one_hot)
    assert from_grid.shape == (2, 3, 16, 16)
    assert torch.allclose(from_grid, from_codes)
    assert torch.allclose(from_grid, from_one_hot)
    assert float(from_grid.min()) >= 0.0 and float(from_grid.max()) <= 1.0


def test_out_of_range_codes_rejected():
    dvae = tiny_dvae()
    try:
        dvae.detokenize(torch.full((1, 4, 4), 12, dtype=torch.long))
    except TokenRangeError:
        return
    raise AssertionError("expected TokenRangeError")


def test_bad_temperature_and_patch():
    dvae = tiny_dvae()
    for call in (lambda: dvae.tokenize(torch.rand(1, 3, 16, 16), temperature=0.0),
                 lambda: dvae.logits(torch.rand(1, 3, 18, 18))):
        try:
            call()
        except ConfigError:
            continue
        raise AssertionError("expected ConfigError")


def test_reconstruction_loss_sums_pixels():
    images = torch.zeros(2, 3, 4, 4)
    recon = torch.full_like(images, 0.5)
    assert math.isclose(reconstruction_loss(images, recon).item(), 48 * 0.25)


def test_token_dump_round_trip():
    codes = torch.randint(0, 300, (3, 4, 5))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "tokens.bin")
        write_token_dump(path, TokenGrid(codes, 300))
        loaded = read_token_dump(path)
    assert loaded.vocab_size == 300
    assert torch.equal(loaded.codes, codes)


def test_token_dump_rejects_garbage():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "junk.bin")
        with open(path, "wb") as f:
            f.write(b"not tokens at all")
        try:
            read_token_dump(path)
        except IngestionError as e:
            assert path in str(e)
            return
    raise AssertionError("expected IngestionError")


def test_sequence_view_is_row_major():
    codes = torch.arange(6).reshape(1, 2, 3)
    grid = TokenGrid(codes, 6)
    assert grid.sequence().tolist() == [[0, 1, 2, 3, 4, 5]]
    assert torch.equal(TokenGrid.from_sequence(grid.sequence(), (2, 3), 6).codes, codes)


def main():
    """Run all tests"""
    print("=" * 60)
    print("TOKENIZER - TESTS")
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
