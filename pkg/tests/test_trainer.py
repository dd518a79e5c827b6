import math

import numpy as np
import pytest
import torch

from cst.data import dataset_from_records, generate_synthetic
from cst.metrics import CountingScorer, build_doc_freq
from cst.model import init_params, save_checkpoint
from cst.objective import RewardTable
from cst.trainer import (OptimizerState, TrainConfig, Trainer, TrainingDiverged, adam_step, cst_pipeline,
                         precompute_rewards, train)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(0, 24, 12, 3, 0.3, val_fraction=0.25)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=4, learning_rate=0.01, d=8, max_len=8, eval_beam=2)
    base.update(kw)
    return TrainConfig(**base)


def _same(a, b):
    return all(np.array_equal(getattr(a, n), getattr(b, n)) for n in a.names())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="WXE", baseline="scb_gt").validate()
    with pytest.raises(ValueError):
        TrainConfig(mode="nope").validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0).validate()
    with pytest.raises(ValueError, match="unknown config keys: colour"):
        TrainConfig.from_dict({"colour": 1})
    cfg = TrainConfig.from_dict({"mode": "XE", "epochs": 3})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert (cfg.d, cfg.learning_rate, cfg.batch_size, cfg.eval_beam) == (512, 1e-4, 64, 5)


def test_adam_zero_grad_and_first_step():
    p = init_params(2, 5, 3, 0)
    state = OptimizerState.zeros(p)
    state.m.out_b[:] = 1.0
    new, st = adam_step(p, p.zeros_like(), state, 0.1)
    assert not _same(new, p)  # a non-zero first moment still moves the parameters
    assert np.allclose(st.m.out_b, 0.9) and st.step == 1
    new, st = adam_step(p, p.zeros_like(), OptimizerState.zeros(p), 0.1)
    assert _same(new, p)
    g = p.zeros_like()
    g.out_b[0] = 1.0
    new, _ = adam_step(p, g, OptimizerState.zeros(p), 0.01)
    assert new.out_b[0] - p.out_b[0] == pytest.approx(-0.01, abs=1e-6)


def test_adam_matches_torch():
    rng = np.random.default_rng(0)
    p = init_params(3, 5, 2, 1)
    tp = [torch.tensor(t.copy(), requires_grad=True) for t in p.tensors().values()]
    opt = torch.optim.Adam(tp, lr=0.003, betas=(0.9, 0.999), eps=1e-8)
    state = OptimizerState.zeros(p)
    for _ in range(10):
        g = p.map(lambda t: rng.standard_normal(t.shape))
        p, state = adam_step(p, g, state, 0.003)
        for t, gt in zip(tp, g.tensors().values()):
            t.grad = torch.tensor(gt)
        opt.step()
    for a, b in zip(p.tensors().values(), tp):
        assert np.allclose(a, b.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_precompute_rewards(tiny):
    table = precompute_rewards(tiny)
    df = build_doc_freq(tiny.references())
    for it in tiny:
        r = table.rewards[it.item_id]
        assert table.baselines[it.item_id] == math.fsum(r) / len(r)
        assert r[0] == CountingScorer("cider", it.captions[1:], df)(it.captions[0])
    records = [{"id": "a", "features": [1.0], "captions": ["red dog runs fast"] * 3},
               {"id": "b", "features": [0.0], "captions": ["blue cat"] * 2}]
    ds, _ = dataset_from_records(records, "build", min_count=0)
    t = precompute_rewards(ds, "cider", "include_self")
    assert t.rewards["a"] == pytest.approx([10.0] * 3) and t.baselines["a"] == pytest.approx(10.0)


def test_wxe_with_unit_rewards_follows_xe_exactly(tiny):
    train_set = tiny.subset("train")
    ones = RewardTable.from_rewards({it.item_id: [1.0] * it.n_captions for it in train_set})
    xe = Trainer(_cfg(mode="XE"), train_set)
    wxe = Trainer(_cfg(mode="WXE"), train_set, ones)
    for epoch in (1, 2, 3):
        ex, ew = xe.run_epoch(epoch), wxe.run_epoch(epoch)
        assert _same(xe.params, wxe.params) and ex.loss == ew.loss


@pytest.mark.parametrize("baseline,factor", [("none", 1), ("scb_gt", 1), ("scb_sampled", 1), ("greedy", 2)])
def test_metric_call_accounting(tiny, baseline, factor):
    train_set = tiny.subset("train")
    t = Trainer(_cfg(mode="RL", baseline=baseline, batch_size=5), train_set)
    log = t.run_epoch(1)
    sizes = [sum(it.n_captions for it in train_set.items[i:i + 5]) for i in range(0, len(train_set), 5)]
    assert log.batch_metric_calls == [factor * s for s in sizes]
    assert log.metric_calls == factor * sum(it.n_captions for it in train_set)


def test_training_is_deterministic(tiny):
    a, la = train(_cfg(mode="RL", baseline="scb_sampled"), tiny)
    b, lb = train(_cfg(mode="RL", baseline="scb_sampled"), tiny)
    assert _same(a, b) and [e.record() for e in la.epochs] == [e.record() for e in lb.epochs]


def test_nan_abort_names_epoch(tiny):
    p = init_params(8, len(tiny.vocab), tiny.feature_dim, 0)
    p.out_w[0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(_cfg(mode="XE"), tiny, params=p)


def test_single_caption_items_use_self_score_baseline(caplog):
    records = [{"id": f"i{k}", "features": [float(k), 1.0], "captions": [f"w{k} x y"], "split": "train"}
               for k in range(4)]
    ds, _ = dataset_from_records(records, "build", min_count=0)
    t = Trainer(_cfg(mode="RL", baseline="scb_gt"), ds)
    assert "single caption" in caplog.text
    df = build_doc_freq(ds.references())
    for it in ds:
        self_score = CountingScorer("cider", it.captions, df)(it.captions[0])
        assert t.rewards.baselines[it.item_id] == t.rewards.rewards[it.item_id][0] == self_score
    # samples are scored against the reference, so r - b is not zero and the model still moves
    before = t.params.copy()
    t.run_epoch(1)
    assert not _same(before, t.params)


def test_pipeline_with_zero_finetune_epochs(tiny):
    pre = _cfg(mode="WXE")
    params, log = cst_pipeline(pre, _cfg(mode="RL", baseline="scb_gt", epochs=0), tiny)
    ref, _ = train(pre, tiny)
    assert _same(params, ref) and len(log.epochs) == 2
    with pytest.raises(ValueError):
        cst_pipeline(_cfg(mode="RL"), _cfg(mode="RL"), tiny)


def test_pipeline_log_is_concatenated(tiny):
    _, log = cst_pipeline(_cfg(mode="XE"), _cfg(mode="RL", baseline="greedy"), tiny)
    assert [e.epoch for e in log.epochs] == [1, 2, 3, 4]
    assert [e.mode for e in log.epochs] == ["XE", "XE", "RL", "RL"]


def test_warm_start_and_best_selection(tiny, tmp_path):
    p = init_params(8, len(tiny.vocab), tiny.feature_dim, 42)
    save_checkpoint(tmp_path / "w.json", p)
    t = Trainer(_cfg(mode="XE", warm_start=str(tmp_path / "w.json")), tiny)
    assert _same(t.params, p)
    params, log = t.fit()
    best = max(log.epochs, key=lambda e: e.val_cider)
    assert log.best_epoch is not None and log.epochs[log.best_epoch - 1].val_cider == best.val_cider


def test_gradient_clipping_changes_trajectory(tiny):
    a, _ = train(_cfg(mode="XE", epochs=1), tiny)
    b, _ = train(_cfg(mode="XE", epochs=1, max_grad_norm=1e-6), tiny)
    assert not _same(a, b)
