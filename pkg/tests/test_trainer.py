import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from imvae.errors import ConfigError, NumericalError
from imvae.evalharness import build_candidates, evaluate, model_scorer
from imvae.objective import compose_total
from imvae.trainer import (
    RunConfig, expand_grid, grid_report_rows, grid_search, load_checkpoint, selection_metric, set_seed, train,
    write_grid_report,
)
import imvae.trainer as trainer_mod

N_ITEMS = {"X": 60, "Y": 60}


def small_config(**kw):
    base = dict(d=8, batch=64, epochs=3, T=6, T_pseudo=8, heads=2, lr=3e-3, no_psg=True, eval_negatives=50)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def examples(small_examples):
    return small_examples[1]


def test_validate():
    small_config().validate()
    with pytest.raises(ConfigError):
        small_config(cross_encoder_mode="conv").validate()
    with pytest.raises(ConfigError):
        small_config(d=9).validate()
    with pytest.raises(ConfigError):
        small_config(lambda_a=-1.0).validate()
    RunConfig().validate(strict=True)
    with pytest.raises(ConfigError):
        RunConfig(lr=1e-2).validate(strict=True)
    with pytest.raises(ConfigError):
        RunConfig(lambda_t=7e-3).validate(strict=True)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"d": 8, "width": 3})


def test_set_seed():
    a, b = set_seed(3), set_seed(3)
    assert a == b
    subs = [a.init, a.shuffle, a.noise, a.negatives, a.evaluation, a.pseudo]
    assert len(set(subs)) == 6
    set_seed(3)
    x = torch.rand(3)
    set_seed(3)
    assert torch.equal(x, torch.rand(3))


def test_loss_decreases(examples):
    res = train(small_config(epochs=10), examples, N_ITEMS)
    assert res.history[-1]["total"] < res.history[0]["total"]
    assert 1 <= res.best_epoch <= 10


def test_same_seed_same_history(tmp_path, examples):
    train(small_config(), examples, N_ITEMS, tmp_path / "a")
    train(small_config(), examples, N_ITEMS, tmp_path / "b")
    a = (tmp_path / "a" / "history.jsonl").read_text()
    assert a == (tmp_path / "b" / "history.jsonl").read_text()
    assert len(a.strip().splitlines()) == 3
    other = train(small_config(seed=1), examples, N_ITEMS)
    assert [r["total"] for r in other.history] != [json.loads(l)["total"] for l in a.splitlines()]


def test_no_dn_logs_but_excludes_denoise(examples):
    cfg = small_config(no_dn=True, epochs=2)
    res = train(cfg, examples, N_ITEMS)
    for rec in res.history:
        assert rec["kl_denoise_x"] > 0 and rec["kl_denoise_y"] > 0
        assert rec["lambda_a"] == 0.0
        assert compose_total(rec, cfg.lambda_t, 0.0) == pytest.approx(rec["total"], rel=1e-5)


def test_no_if_ds_drops_transfer_and_aux(examples):
    res = train(small_config(no_if_ds=True, epochs=1), examples, N_ITEMS)
    assert res.history[0]["lambda_t"] == 0.0
    assert not res.model.config.aux_for_cold_start


def test_checkpoint_roundtrip_reproduces_validation(tmp_path, examples):
    cfg = small_config()
    res = train(cfg, examples, N_ITEMS, tmp_path)
    model, loaded_cfg, payload = load_checkpoint(tmp_path / "model.pt")
    assert loaded_cfg == cfg and payload["extra"]["epoch"] == res.best_epoch
    seeds = set_seed(cfg.seed)
    valid = [e for e in trainer_mod.prepare_inputs(cfg, examples, N_ITEMS, seeds) if e.role == "valid"]
    cands = {d: build_candidates(valid, d, N_ITEMS[d], cfg.eval_negatives, seeds.evaluation) for d in N_ITEMS}
    rep = evaluate(model_scorer(model), valid, N_ITEMS, cfg.eval_negatives, seeds.evaluation, candidates=cands)
    assert selection_metric(rep) == res.best_metric


def test_non_finite_loss_aborts(monkeypatch, examples):
    calls = {"n": 0}
    real = trainer_mod.compute_loss

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 5:
            raise NumericalError("non-finite term recon_x")
        return real(*args, **kw)

    monkeypatch.setattr(trainer_mod, "compute_loss", flaky)
    with pytest.raises(NumericalError, match="epoch 2"):
        train(small_config(), examples, N_ITEMS)


# ---------------------------------------------------------------- grid search

def test_grid_selection_and_ties():
    base = small_config()
    with pytest.raises(ConfigError):
        grid_search([], [], N_ITEMS)
    with pytest.raises(ConfigError):
        expand_grid(base, {"lr": []})
    best, points = grid_search([base], [], N_ITEMS, seeds=(0, 1), runner=lambda c: (1.0, None))
    assert best == base and points[0].valid_ndcg == [1.0, 1.0]

    space = {"lr": [3e-4, 5e-4], "lambda_a": [1e-3, 5e-3]}
    good = lambda c: (5.0 + c.seed if c.lr == 5e-4 and c.lambda_a == 5e-3 else 1.0 + c.seed, None)
    best, _ = grid_search(space, [], N_ITEMS, base=base, runner=good)
    assert (best.lr, best.lambda_a) == (5e-4, 5e-3)
    flat = lambda c: (2.0, None)
    best, points = grid_search(space, [], N_ITEMS, base=base, runner=flat)
    assert (best.lambda_a, best.lr) == (1e-3, 3e-4)
    assert len(points) == 4 and all(len(p.valid_ndcg) == 5 for p in points)


def test_grid_report(tmp_path):
    base = small_config()
    noisy = lambda c: (5.0 + 0.1 * c.seed, None)
    _, points = grid_search({"lr": [3e-4]}, [], N_ITEMS, base=base, runner=noisy)
    row = grid_report_rows(points)[0]
    assert row["valid_ndcg10"] == f"{np.mean([5.0, 5.1, 5.2, 5.3, 5.4]):.2f}±{np.std([5.0, 5.1, 5.2, 5.3, 5.4]):.2f}"
    write_grid_report(tmp_path, points)
    assert (tmp_path / "grid.csv").read_text().startswith("config_hash")
    assert json.loads((tmp_path / "grid.json").read_text())[0]["n_seeds"] == 5
