import math

import numpy as np
import pytest
import torch

from conftest import fd_check
from crisp.corpus import BOS, TokenizedDoc
from crisp.evaluate import probe_accuracy
from crisp.lm import (LORA_TARGETS, LmConfig, LmTrainConfig, LoraAdapter, TrainingError, _stack, forward, generate,
                      init_lm, lm_loss, merge_lora, perplexity, train_lm)

CFG = LmConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, context_len=24)


def random_adapter(cfg, layers=(0, 1), targets=LORA_TARGETS, seed=0, std=0.05):
    ad = LoraAdapter(cfg, layers, rank=4, alpha=8.0, targets=targets, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in ad.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)
    return ad


def test_init_deterministic():
    a, b = init_lm(CFG), init_lm(CFG)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = init_lm(LmConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, context_len=24, seed=1))
    assert not torch.equal(a.embed, c.embed)


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        LmConfig(n_layers=1)


def test_random_init_probe_accuracy_near_chance(small_corpora):
    lm = init_lm(LmConfig())
    acc = np.mean([probe_accuracy(lm, None, small_corpora.probes[d]) for d in ("unlearn", "retain", "general")])
    assert abs(acc - 25.0) <= 10.0


def test_forward_shapes_and_capture():
    lm = init_lm(CFG)
    logits, rec = forward(lm, None, [BOS], ())
    assert logits.shape == (1, CFG.vocab_size) and rec == {}
    toks = [BOS, 5, 6, 7]
    plain, _ = forward(lm, None, toks)
    cap, rec = forward(lm, None, toks, [0, 1])
    assert torch.equal(plain, cap)
    # BOS excluded from the activation record
    assert rec[0].shape == (3, CFG.d_model)
    with pytest.raises(ValueError):
        forward(lm, None, [CFG.vocab_size])
    with pytest.raises(ValueError):
        forward(lm, None, [1], [5])


def test_zero_adapter_is_bit_identical():
    lm = init_lm(CFG)
    ad = LoraAdapter(CFG, (0, 1), rank=4, seed=3)
    assert ad.is_zero()
    toks = [BOS, 10, 200, 300, 4]
    assert torch.equal(forward(lm, None, toks)[0], forward(lm, ad, toks)[0])


def test_adapter_shapes_and_validation():
    ad = LoraAdapter(CFG, (0, 1), rank=4, targets=("embed", "mlp_out"))
    assert ad.adapted() == [(0, "embed"), (0, "mlp_out"), (1, "mlp_out")]
    assert ad.delta(0, "embed").shape == (CFG.vocab_size, CFG.d_model)
    assert ad.delta(1, "mlp_out").shape == (CFG.d_ff, CFG.d_model)
    with pytest.raises(ValueError):
        LoraAdapter(CFG, (5,))
    with pytest.raises(ValueError):
        LoraAdapter(CFG, (0,), targets=("lm_head",))
    with pytest.raises(ValueError):
        LoraAdapter(CFG, (0,), rank=0)


def test_merge_equivalence():
    lm = init_lm(CFG)
    ad = random_adapter(CFG)
    merged = merge_lora(lm, ad)
    rng = np.random.default_rng(0)
    for _ in range(5):
        toks = [BOS] + rng.integers(1, CFG.vocab_size, size=int(rng.integers(1, 23))).tolist()
        a = forward(lm, ad, toks)[0]
        b = forward(merged, None, toks)[0]
        assert (a - b).abs().max().item() < 1e-5


def test_merge_zero_and_double():
    lm = init_lm(CFG)
    zero = merge_lora(lm, LoraAdapter(CFG, (0, 1), rank=4))
    assert all(torch.equal(x, y) for x, y in zip(lm.state_dict().values(), zero.state_dict().values()))
    ad = random_adapter(CFG)
    once, twice = merge_lora(lm, ad), merge_lora(merge_lora(lm, ad), ad)
    assert not torch.allclose(once.blocks[0].W_mlp_out, twice.blocks[0].W_mlp_out)


def test_merge_tied_embedding_rejected():
    cfg = LmConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, context_len=24, tie_embeddings=True)
    with pytest.raises(ValueError):
        merge_lora(init_lm(cfg), random_adapter(cfg, targets=("embed",)))


def _docs(n, length=20, seed=0):
    rng = np.random.default_rng(seed)
    return [TokenizedDoc(np.r_[BOS, rng.integers(1, 64, size=length - 1)], "target") for _ in range(n)]


def test_train_lm_initial_loss_and_decrease():
    lm = init_lm(CFG)
    opt = LmTrainConfig(steps=30, batch_docs=8, warmup=5, log_every=0)
    train_lm(lm, _docs(16), opt)
    assert abs(opt.history[0] - math.log(CFG.vocab_size)) < 0.1 * math.log(CFG.vocab_size)
    assert np.mean(opt.history[-5:]) < np.mean(opt.history[:5])


def test_train_lm_zero_steps_identity():
    lm = init_lm(CFG)
    before = {k: v.clone() for k, v in lm.state_dict().items()}
    train_lm(lm, _docs(4), LmTrainConfig(steps=0))
    assert all(torch.equal(before[k], v) for k, v in lm.state_dict().items())


def test_train_lm_nan_aborts_with_step():
    lm = init_lm(CFG)
    with torch.no_grad():
        lm.embed[5, 0] = float("nan")
    docs = [TokenizedDoc(np.array([BOS, 5, 6, 7]), "target")]
    with pytest.raises(TrainingError) as e:
        train_lm(lm, docs, LmTrainConfig(steps=3, log_every=0))
    assert e.value.step == 0


def test_perplexity_uniform_and_zero_adapter():
    lm = init_lm(CFG)
    docs = _docs(3)
    with torch.no_grad():
        lm.unembed.zero_()
    assert perplexity(lm, None, docs) == pytest.approx(CFG.vocab_size, rel=1e-9)
    lm = init_lm(CFG)
    assert perplexity(lm, None, docs) == perplexity(lm, LoraAdapter(CFG, (0,), rank=2), docs)


def test_perplexity_overfit_single_token_doc():
    lm = init_lm(CFG)
    doc = [TokenizedDoc(np.array([BOS] + [7] * 20), "target")]
    train_lm(lm, doc, LmTrainConfig(steps=150, batch_docs=1, lr=1e-2, warmup=5, log_every=0))
    ppl = perplexity(lm, None, doc)
    assert 1.0 < ppl < 1.1


def test_generate_contract():
    lm = init_lm(CFG)
    a = generate(lm, None, [BOS, 3, 4], 5)
    assert a == generate(lm, None, [BOS, 3, 4], 5)
    assert len(a) == 5
    assert len(generate(lm, None, [BOS], 1)) == 1
    with pytest.raises(ValueError):
        generate(lm, None, [BOS], 0)


def test_lm_loss_gradient_matches_finite_differences(lm64):
    rng = np.random.default_rng(0)
    batch = torch.from_numpy(np.c_[np.zeros(3, dtype=np.int64), rng.integers(1, 512, size=(3, 11))])
    params = [p for p in lm64.parameters()]
    worst, n = fd_check(lambda: lm_loss(lm64, batch), params, n_coords=120, h=1e-4)
    assert n >= 100
    assert worst < 1e-3


def test_lora_gradient_matches_finite_differences(lm64):
    ad = random_adapter(lm64.cfg, layers=(0, 1), seed=2).double()
    batch = torch.from_numpy(np.c_[np.zeros(2, dtype=np.int64), np.random.default_rng(1).integers(1, 512, (2, 9))])
    worst, n = fd_check(lambda: lm_loss(lm64, batch, ad), list(ad.parameters()), n_coords=120, h=1e-4)
    assert n >= 100 and worst < 1e-3
