import numpy as np
import pytest
import torch

from crisp.corpus import CorpusSpec, gen_corpora
from crisp.lm import LmConfig, init_lm

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full-size fixture models (minutes)")


@pytest.fixture(scope="session")
def small_spec():
    return CorpusSpec(n_docs_per_corpus=24, n_heldout_docs=4, n_coherence_docs=4, doc_len=24,
                      n_facts_per_concept=8)


@pytest.fixture(scope="session")
def small_corpora(small_spec):
    return gen_corpora(small_spec)


@pytest.fixture
def lm64():
    """Tiny float64 model for gradient checks."""
    cfg = LmConfig(vocab_size=512, d_model=16, n_layers=3, n_heads=2, d_ff=32, context_len=24)
    lm = init_lm(cfg).double()
    # perturb so layer norms and attention are away from their symmetric init
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in lm.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
    return lm


def fd_check(f, params, n_coords: int = 100, h: float = 1e-6, seed: int = 0):
    """Compare autograd with central differences at ``n_coords`` random coordinates.

    Returns the worst relative error ``|g - fd| / max(|g|, |fd|, 1e-8)`` over
    coordinates with a non-negligible gradient.
    """
    params = list(params)
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    # favour coordinates whose gradient is non-zero so the check is informative
    flat = torch.cat([g.reshape(-1) for g in grads]).abs()
    nz = torch.nonzero(flat > 1e-9).reshape(-1).numpy()
    pool = nz if len(nz) >= n_coords else np.arange(flat.numel())
    picks = rng.choice(pool, size=min(n_coords, len(pool)), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, checked = 0.0, 0
    with torch.no_grad():
        for c in picks:
            i = int(np.searchsorted(offsets, c, side="right") - 1)
            j = int(c - offsets[i])
            p = params[i].view(-1)
            orig = p[j].item()
            p[j] = orig + h
            up = f().item()
            p[j] = orig - h
            down = f().item()
            p[j] = orig
            fd = (up - down) / (2 * h)
            g = grads[i].reshape(-1)[j].item()
            denom = max(abs(g), abs(fd), 1e-8)
            worst = max(worst, abs(g - fd) / denom)
            checked += 1
    return worst, checked


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
