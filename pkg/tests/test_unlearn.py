import numpy as np
import pytest
import torch

from conftest import fd_check
from crisp.evaluate import evaluate
from crisp.lm import LmConfig, LoraAdapter, TrainingError, _stack, init_lm, merge_lora
from crisp.sae import SaeParams, SaeTrainConfig, init_sae
from crisp.selection import SalientSet
from crisp.unlearn import (ConfigError, LossWeights, RmuConfig, UnlearnConfig, _masked_acts, coherence_loss,
                           mean_feature_activation, residual_drift, retain_loss, rmu_direction, total_loss,
                           train_crisp, train_rmu, unlearn_loss)


def _identity_sae(d: int, layer: int = 0) -> SaeParams:
    """Encoder rows are unit vectors, so ``a = relu(h)`` padded with zeros."""
    sae = SaeParams(d, d + 1, layer=layer, dtype=torch.float64)
    with torch.no_grad():
        sae.W_enc[:d].copy_(torch.eye(d, dtype=torch.float64))
    return sae


# -- loss examples ------------------------------------------------------------


def test_unlearn_loss_example():
    sae = SaeParams(3, 4, layer=1, dtype=torch.float64)
    with torch.no_grad():
        sae.b_enc.copy_(torch.tensor([0.5, 0.0, 0.0, 0.0]))
    h = torch.zeros(1, 3, dtype=torch.float64)
    loss = unlearn_loss({1: sae}, SalientSet({1: [0]}, k=10), {1: h}, 10.0)
    assert loss.item() == pytest.approx(1.75, abs=1e-12)
    assert unlearn_loss({1: sae}, SalientSet({1: [0]}, k=10), {1: h}, 0.0).item() == pytest.approx(0.5)


def test_unlearn_loss_zero_and_layer_mean():
    sae = _identity_sae(3)
    zero = {0: -torch.ones(5, 3, dtype=torch.float64), 1: -torch.ones(5, 3, dtype=torch.float64)}
    saes = {0: sae, 1: sae}
    assert unlearn_loss(saes, SalientSet({0: [0], 1: [1]}, k=10), zero, 5.0).item() == 0.0
    h0 = torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64)
    h1 = torch.tensor([[0.0, 4.0, 0.0]], dtype=torch.float64)
    got = unlearn_loss(saes, SalientSet({0: [0], 1: [1]}, k=10), {0: h0, 1: h1}, 0.0).item()
    assert got == pytest.approx(3.0)
    with pytest.warns(UserWarning):
        got = unlearn_loss(saes, SalientSet({0: [0], 1: []}, k=10), {0: h0, 1: h1}, 0.0).item()
    assert got == pytest.approx(1.0)
    with pytest.raises(ValueError):
        unlearn_loss(saes, SalientSet({0: [0], 2: [1]}, k=10), {0: h0, 1: h1}, 0.0)


def test_residual_drift_examples():
    ref = {0: torch.zeros(1, 2, dtype=torch.float64)}
    cur = {0: torch.tensor([[1.0, 2.0]], dtype=torch.float64)}
    assert residual_drift(cur, ref, [0]).item() == 5.0
    cur2 = {0: 2 * cur[0]}
    assert residual_drift(cur2, ref, [0]).item() == 20.0


def test_total_loss_example_and_linearity():
    w = LossWeights()
    assert w.alpha == pytest.approx(0.01)
    assert total_loss((2.0, 4.0, 1.0), w) == pytest.approx(3.99, abs=1e-12)
    assert total_loss((0.0, 0.0, 0.0), w) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = rng.random(3)
        i, t = int(rng.integers(3)), rng.random() * 5
        moved = c.copy()
        moved[i] += t
        coef = (w.alpha, w.beta, w.gamma)[i]
        assert total_loss(moved, w) - total_loss(c, w) == pytest.approx(coef * t, abs=1e-12)
    with pytest.raises(ConfigError):
        LossWeights(beta=0.9, alpha=0.2)
    with pytest.raises(ConfigError):
        LossWeights(beta=1.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        UnlearnConfig(sae_layers=(1,), opt_layers=(1,))
    with pytest.raises(ConfigError):
        UnlearnConfig(optimizer="lion")
    assert UnlearnConfig.from_dict(UnlearnConfig().to_dict()) == UnlearnConfig()


# -- gradients -----------------------------------------------------------------


@pytest.fixture
def grad_setup(lm64):
    cfg = lm64.cfg
    adapter = LoraAdapter(cfg, (0, 1), rank=3, seed=2, dtype=torch.float64)
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in adapter.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.1)
    saes = {}
    for l in (1, 2):
        s = init_sae(cfg.d_model, SaeTrainConfig(d_sae=48, activation="relu", seed=l), l, dtype=torch.float64)
        with torch.no_grad():
            s.b_enc.add_(0.3)
        saes[l] = s
    g = torch.Generator().manual_seed(4)
    target = torch.randint(1, cfg.vocab_size, (3, 12), generator=g)
    retain = torch.randint(1, cfg.vocab_size, (3, 12), generator=g)
    target[:, 0] = retain[:, 0] = 0
    salient = SalientSet({1: [0, 3, 7, 11], 2: [2, 5, 19]}, k=10)
    return lm64, adapter, saes, salient, target, retain


def _fd(f, adapter):
    worst, n = fd_check(f, adapter.parameters(), n_coords=120, h=1e-6)
    assert n >= 100
    assert worst < 1e-3, worst


def test_unlearn_loss_gradient(grad_setup):
    lm, adapter, saes, salient, target, _ = grad_setup
    _fd(lambda: unlearn_loss(saes, salient, _masked_acts(lm, target, adapter, [1, 2]), 10.0), adapter)


def test_retain_loss_gradient(grad_setup):
    lm, adapter, _, _, _, retain = grad_setup
    _fd(lambda: retain_loss(lm, adapter, lm, retain, [1, 2]), adapter)


def test_coherence_loss_gradient(grad_setup):
    lm, adapter, _, _, _, retain = grad_setup
    _fd(lambda: coherence_loss(lm, adapter, lm, retain), adapter)


def test_total_loss_gradient(grad_setup):
    lm, adapter, saes, salient, target, retain = grad_setup
    w = LossWeights(beta=0.7, gamma=0.2, lambda_mean=10.0)

    def f():
        return total_loss((unlearn_loss(saes, salient, _masked_acts(lm, target, adapter, [1, 2]), w.lambda_mean),
                           retain_loss(lm, adapter, lm, retain, [1, 2]),
                           coherence_loss(lm, adapter, lm, retain[:2])), w)

    _fd(f, adapter)


def test_gamma_zero_removes_coherence_gradient(grad_setup):
    lm, adapter, saes, salient, target, retain = grad_setup
    w = LossWeights(gamma=0.0)
    coher = torch.randint(1, lm.cfg.vocab_size, (2, 12), generator=torch.Generator().manual_seed(9))

    def grads(coh_batch):
        l_u = unlearn_loss(saes, salient, _masked_acts(lm, target, adapter, [1, 2]), w.lambda_mean)
        loss = total_loss((l_u, retain_loss(lm, adapter, lm, retain, [1, 2]),
                           coherence_loss(lm, adapter, lm, coh_batch)), w)
        return torch.autograd.grad(loss, list(adapter.parameters()))

    for a, b in zip(grads(coher), grads(retain)):
        assert torch.equal(a, b)


def test_zero_delta_gives_zero_retain_and_coherence(lm64):
    adapter = LoraAdapter(lm64.cfg, (0, 1), dtype=torch.float64)
    batch = torch.randint(1, 512, (2, 10), generator=torch.Generator().manual_seed(0))
    assert retain_loss(lm64, adapter, lm64, batch, [1, 2]).item() == 0.0
    assert coherence_loss(lm64, adapter, lm64, batch).item() == 0.0
    # coherence is retain restricted to the final layer
    perturbed = LoraAdapter(lm64.cfg, (0,), targets=("mlp_out",), dtype=torch.float64)
    with torch.no_grad():
        perturbed.up["0_mlp_out"].fill_(0.05)
    a = coherence_loss(lm64, perturbed, lm64, batch).item()
    assert a > 0
    assert a == retain_loss(lm64, perturbed, lm64, batch, [2]).item()


# -- training --------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy(small_corpora):
    torch.manual_seed(0)
    lm = init_lm(LmConfig(d_model=32, n_layers=3, n_heads=2, d_ff=64, context_len=32, seed=0))
    saes = {l: init_sae(32, SaeTrainConfig(d_sae=64, activation="relu", seed=l), l) for l in (1, 2)}
    for s in saes.values():
        with torch.no_grad():
            s.b_enc.add_(0.2)
    return lm, saes, SalientSet({1: [0, 1, 2, 3], 2: [4, 5, 6]}, k=10)


def _state_bytes(module) -> bytes:
    return b"".join(v.numpy().tobytes() for _, v in sorted(module.state_dict().items()))


def test_train_crisp_leaves_frozen_models_untouched(toy, small_corpora):
    lm, saes, salient = toy
    before = [_state_bytes(lm)] + [_state_bytes(s) for s in saes.values()]
    cfg = UnlearnConfig(sae_layers=(1, 2), opt_layers=(0,), steps=15, batch_docs=4, learning_rate=2e-2)
    res = train_crisp(lm, saes, salient, cfg, small_corpora)
    after = [_state_bytes(lm)] + [_state_bytes(s) for s in saes.values()]
    assert before == after
    assert len(res.log) == 15
    assert set(res.log[0]) == {"step", "l_unlearn", "l_retain", "l_coherence", "total"}
    s = res.summary
    assert s["salient_activation_after"] < s["salient_activation_before"]
    assert not res.adapter.is_zero()


def test_train_crisp_zero_steps_matches_original(toy, small_corpora):
    lm, saes, salient = toy
    res = train_crisp(lm, saes, salient, UnlearnConfig(steps=0), small_corpora)
    assert res.adapter.is_zero()
    a = evaluate(lm, res.adapter, small_corpora, n_concept_prompts=20).metrics()
    b = evaluate(lm, None, small_corpora, n_concept_prompts=20).metrics()
    assert a == b


def test_train_crisp_is_deterministic(toy, small_corpora):
    lm, saes, salient = toy
    cfg = UnlearnConfig(steps=5, batch_docs=4, seed=3)
    a = train_crisp(lm, saes, salient, cfg, small_corpora)
    b = train_crisp(lm, saes, salient, cfg, small_corpora)
    assert a.log == b.log
    for pa, pb in zip(a.adapter.parameters(), b.adapter.parameters()):
        assert torch.equal(pa, pb)


def test_train_crisp_errors(toy, small_corpora):
    lm, saes, salient = toy
    with pytest.raises(ConfigError):
        train_crisp(lm, saes, SalientSet({1: [], 2: []}, k=10), UnlearnConfig(steps=1), small_corpora)
    with pytest.raises(ConfigError):
        train_crisp(lm, saes, SalientSet({1: [0]}, k=10), UnlearnConfig(steps=1), small_corpora)
    bad = {l: s for l, s in saes.items()}
    bad[2] = init_sae(32, SaeTrainConfig(d_sae=64, activation="relu", seed=5), 2)
    with torch.no_grad():
        bad[2].W_enc.fill_(float("nan"))
    with pytest.raises(TrainingError) as e:
        train_crisp(lm, bad, salient, UnlearnConfig(steps=3, batch_docs=4), small_corpora)
    assert e.value.step == 0


def test_merged_weights_reproduce_adapter(toy, small_corpora):
    lm, saes, salient = toy
    res = train_crisp(lm, saes, salient, UnlearnConfig(steps=10, batch_docs=4), small_corpora)
    merged = merge_lora(lm, res.adapter)
    docs = small_corpora.heldout["target"]
    a = mean_feature_activation(lm, res.adapter, saes, salient.layers, docs)
    b = mean_feature_activation(merged, None, saes, salient.layers, docs)
    assert a == pytest.approx(b, rel=1e-5)


# -- RMU ---------------------------------------------------------------------------


def test_rmu_direction_deterministic_unit():
    a, b = rmu_direction(32, 7), rmu_direction(32, 7)
    assert torch.equal(a, b)
    assert a.norm().item() == pytest.approx(1.0)
    assert not torch.equal(a, rmu_direction(32, 8))


def test_rmu_zero_steer_large_alpha_keeps_model(toy, small_corpora):
    lm, _, _ = toy
    edited, log = train_rmu(lm, RmuConfig(steer_coeff=0.0, alpha_rmu=1e6, steps=5, batch_docs=4,
                                          learning_rate=1e-5), small_corpora)
    batch = _stack([d.tokens for d in small_corpora.heldout["retain"]])
    with torch.no_grad():
        drift = (edited.run(batch)[0] - lm.run(batch)[0]).abs().max().item()
    assert drift < 1e-3
    assert len(log) == 5
    with pytest.raises(ConfigError):
        train_rmu(lm, RmuConfig(layer=7), small_corpora)
