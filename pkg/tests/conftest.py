import numpy as np
import pytest
import torch

from imvae.corpus import make_log, prepare_examples, simulate_cold_start, split_users
from imvae.synthetic import SyntheticSpec, generate_corpus

torch.set_num_threads(1)


def toy_logs(n_users=40, n_items=30, seed=0, overlap=0.5):
    """Small random two-domain logs with a known overlapping share."""
    rng = np.random.default_rng(seed)
    rows = {"X": [], "Y": []}
    for u in range(n_users):
        domains = ("X", "Y") if u < overlap * n_users else (("X",) if u % 2 else ("Y",))
        for d in domains:
            length = int(rng.integers(1, 9))
            items = rng.choice(n_items, size=length, replace=False)
            for t, it in enumerate(items):
                rows[d].append((f"u{u:03d}", f"{d.lower()}{it:03d}", 100 + 10 * t))
    return make_log(rows["X"], "X"), make_log(rows["Y"], "Y")


@pytest.fixture(scope="session")
def small_corpus():
    spec = SyntheticSpec(n_users=300, n_items_x=60, n_items_y=60, seed=3)
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def small_examples(small_corpus):
    log_x, log_y, _ = small_corpus
    split = simulate_cold_start(split_users(log_x, log_y, seed=1), 0.3, seed=1)
    return split, prepare_examples(split, 6)


def tiny_batch(n_items=(6, 5), T=3, Tp=5, B=6, seed=0, n_neg=2):
    """Hand-sized batch covering overlapping, single-domain and cold-start users."""
    from imvae.model import Batch

    rng = np.random.default_rng(seed)
    seq, pseudo, length, target, cold, negs = {}, {}, {}, {}, {}, {}
    cold_dom = ["X", None, "Y", None, None, None][:B] + [None] * max(0, B - 6)
    for k, d in enumerate(("X", "Y")):
        n = n_items[k]
        L = rng.integers(0, T + 1, size=B)
        L[cold_dom.index("X" if d == "X" else "Y")] = 0
        s = np.zeros((B, T), dtype=np.int64)
        for b in range(B):
            if L[b]:
                s[b, T - L[b]:] = rng.choice(np.arange(1, n + 1), size=L[b], replace=False)
        p = rng.integers(1, n + 1, size=(B, Tp))
        p[:, :1] = 0
        t = rng.integers(1, n + 1, size=B)
        if d == "Y":
            t[3] = 0  # one user without a Y target
            s[3] = 0
            L[3] = 0
        seq[d], pseudo[d], length[d], target[d] = map(torch.from_numpy, (s, p, L, t))
        cold[d] = torch.tensor([c == d for c in cold_dom])
        negs[d] = torch.from_numpy(rng.integers(1, n + 1, size=(B, n_neg)))
    return Batch(seq, pseudo, length, target, cold, negs)


def tiny_model(d=4, T=3, Tp=5, n_items=(6, 5), seed=0, **kw):
    from imvae.model import IMVAE, ModelConfig

    torch.manual_seed(seed)
    cfg = ModelConfig(n_items_x=n_items[0], n_items_y=n_items[1], d=d, T=T, T_pseudo=Tp, heads=2,
                      dropout=0.0, **kw)
    return IMVAE(cfg).double()


def jitter_biases(model, scale=0.1, seed=0):
    """Move zero-initialised biases off ReLU kinks so finite differences see a smooth loss."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def fixed_noise(model, B, seed=1):
    from imvae.model import LATENTS

    g = torch.Generator().manual_seed(seed)
    return {n: torch.randn(B, model.config.d, generator=g, dtype=torch.float64) for n in LATENTS}


def gradient_check(model, batch, noise, lambda_t=1e-3, lambda_a=5e-3, h=3e-6, per_group=6, seed=0, tol=1e-4):
    """Relative error between autograd and central differences, per parameter group.

    Groups whose gradient is below what central differences can resolve (`tol` times the
    roundoff floor) are measured against that floor instead of their own norm.
    """
    from imvae.model import compute_loss

    model.train()

    def loss():
        return compute_loss(model, batch, lambda_t, lambda_a, noise=noise)[0].total

    model.zero_grad()
    base = loss()
    base.backward()
    # per-coordinate roundoff of a central difference, with headroom for long sums
    resolution = 64 * torch.finfo(torch.float64).eps * abs(base.item()) / h
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_group, flat.numel()), replace=False)
            an = p.grad.view(-1)[idx].clone()
            fd = torch.empty_like(an)
            for j, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd[j] = (up - down) / (2 * h)
            scale = max(an.norm().item(), fd.norm().item(), resolution * len(idx) ** 0.5 / tol)
            errors[name] = (an - fd).norm().item() / scale
    return errors
