"""Training loops: XE, reward-weighted XE on ground truth, and REINFORCE on samples.

Per item the loss is the average over its N sequences (ground-truth captions,
or one model sample per caption slot in RL mode).  Logit gradients of all
items in a batch go through a single batched backward pass and are averaged
over the batch's items before the Adam update.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import DEFAULT_MAX_LEN, Dataset
from .evaluate import evaluate
from .metrics import METRICS, CountingScorer, build_doc_freq
from .model import (ModelParams, ParamGrads, backward, forward_teacher_batch, init_params,
                    load_checkpoint, sample_batch)
from .objective import (RewardTable, greedy_baseline, sampled_scb_baseline, wxe_video_loss,
                        xe_sentence_loss)

log = logging.getLogger(__name__)

MODES = ("XE", "WXE", "RL")
BASELINES = ("none", "scb_gt", "scb_sampled", "greedy")
REWARD_MODES = ("leave_one_out", "include_self")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    mode: str = "WXE"
    baseline: str = "none"
    reward_metric: str = "cider"
    reward_mode: str = "leave_one_out"
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    max_len: int = DEFAULT_MAX_LEN
    d: int = 512
    dropout: float = 0.0
    scale_rewards: bool = False
    max_grad_norm: float | None = None
    eval_beam: int = 5
    select_best: bool = True
    warm_start: str | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.mode == "WXE" and self.baseline != "none":
            raise ValueError("WXE trains on ground truth with b=0; baseline must be 'none'")
        if self.reward_metric not in METRICS:
            raise ValueError(f"reward_metric must be one of {METRICS}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, learning_rate > 0")
        if self.max_len < 1 or self.d < 1 or self.eval_beam < 1:
            raise ValueError("max_len, d and eval_beam must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimizerState:
    m: ParamGrads
    v: ParamGrads
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        z = params.zeros_like()
        return cls(ParamGrads(**z.tensors()), ParamGrads(**z.copy().tensors()))


def adam_step(params: ModelParams, grads: ParamGrads, state: OptimizerState, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    params.check_shapes(grads)
    params.check_shapes(state.m)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    step = state.step + 1
    m = state.m.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, grads)
    bc1, bc2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new = params.map(lambda p, m_, v_: p - lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + eps), m, v)
    return new, OptimizerState(ParamGrads(**m.tensors()), ParamGrads(**v.tensors()), step, b1, b2, eps)


@dataclass
class EpochLog:
    epoch: int
    mode: str
    loss: float
    sample_reward: float | None
    val_cider: float | None
    metric_calls: int
    seconds: float
    batch_metric_calls: list = field(default_factory=list)
    batch_seconds: list = field(default_factory=list)

    def record(self) -> dict:
        """The deterministic part, as written to ``train_log.jsonl``."""
        return {"epoch": self.epoch, "mode": self.mode, "loss": self.loss,
                "sample_reward": self.sample_reward, "val_cider": self.val_cider,
                "metric_calls": self.metric_calls}


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None

    def extend(self, other: "TrainLog") -> None:
        offset = self.epochs[-1].epoch if self.epochs else 0
        for e in other.epochs:
            self.epochs.append(dataclasses.replace(e, epoch=e.epoch + offset))
        if other.best_epoch is not None:
            self.best_epoch = other.best_epoch + offset


def precompute_rewards(dataset: Dataset, metric: str = "cider", mode: str = "leave_one_out",
                       df=None) -> RewardTable:
    """Score every ground-truth caption against its item's other captions.

    ``mode="leave_one_out"`` scores caption i against the remaining N-1
    captions; items with a single caption fall back to scoring it against
    itself.  ``include_self`` scores against all N captions.  CIDEr document
    frequencies come from the whole dataset's references.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if mode not in REWARD_MODES:
        raise ValueError(f"mode must be one of {REWARD_MODES}")
    if metric == "cider" and df is None:
        df = build_doc_freq(dataset.references())
    rewards = {}
    for it in dataset:
        caps = it.captions
        scores = []
        for i, cap in enumerate(caps):
            refs = caps if mode == "include_self" or len(caps) == 1 else caps[:i] + caps[i + 1:]
            scores.append(CountingScorer(metric, refs, df)(cap))
        rewards[it.item_id] = scores
    return RewardTable.from_rewards(rewards)


def _check_finite(value, what: str, epoch: int, items) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(f"non-finite {what} at epoch {epoch}, items {', '.join(items)}")


def _grad_norm_clip(grads: ParamGrads, max_norm: float) -> ParamGrads:
    norm = math.sqrt(sum(float(np.sum(t * t)) for t in grads.tensors().values()))
    if norm <= max_norm:
        return grads
    return grads.map(lambda t: t * (max_norm / norm))


class Trainer:
    """Runs one training stage.  See :func:`train` for the functional entry point."""

    def __init__(self, config: TrainConfig, dataset: Dataset, rewards: RewardTable | str = "compute",
                 val: Dataset | None = None, params: ModelParams | None = None,
                 on_epoch: Callable[[EpochLog], None] | None = None):
        config.validate()
        self.config = config
        if dataset.split == "mixed":
            if val is None and "val" in dataset.splits():
                val = dataset.subset("val")
            dataset = dataset.subset("train")
        if len(dataset) == 0:
            raise ValueError("no training items")
        self.dataset, self.val = dataset, val
        self.on_epoch = on_epoch

        if params is None and config.warm_start:
            params, _ = load_checkpoint(config.warm_start)
        if params is None:
            if dataset.vocab is None:
                raise ValueError("dataset has no vocabulary; cannot size the output layer")
            params = init_params(config.d, len(dataset.vocab), dataset.feature_dim, config.seed)
        if params.D_f != dataset.feature_dim:
            raise ValueError(f"model D_f={params.D_f} but dataset features have {dataset.feature_dim}")
        if dataset.vocab is not None and params.V != len(dataset.vocab):
            raise ValueError(f"model V={params.V} but vocabulary has {len(dataset.vocab)} tokens")
        self.params = params
        self.opt = OptimizerState.zeros(params)

        needs_table = config.mode == "WXE" or (config.mode == "RL" and config.baseline == "scb_gt")
        self.df = build_doc_freq(dataset.references()) if config.reward_metric == "cider" else None
        if isinstance(rewards, str):
            if rewards != "compute":
                raise ValueError("rewards must be a RewardTable or 'compute'")
            rewards = (precompute_rewards(dataset, config.reward_metric, config.reward_mode, self.df)
                       if needs_table else None)
        self.rewards = rewards
        self.metric_calls = [0]
        self.scorers = {}
        if config.mode == "RL":
            self.scorers = {it.item_id: CountingScorer(config.reward_metric, it.captions, self.df,
                                                       self.metric_calls) for it in dataset}
            if config.baseline == "scb_gt" and any(it.n_captions == 1 for it in dataset):
                log.warning("items with a single caption have no leave-one-out reward; their SCB baseline "
                            "is that caption scored against itself")

    def _item_weights(self, it) -> list[float]:
        if self.config.mode == "XE":
            return [1.0] * it.n_captions
        r = self.rewards.rewards[it.item_id]
        if len(r) != it.n_captions:
            raise ValueError(f"reward table has {len(r)} rewards for {it.item_id!r}, expected {it.n_captions}")
        return [x / 10.0 for x in r] if self.config.scale_rewards else list(r)

    def _ground_truth_batch(self, items, epoch: int, rng):
        cfg = self.config
        feats = np.concatenate([np.repeat(it.features[None, :], it.n_captions, axis=0) for it in items])
        targets = [cap for it in items for cap in it.captions]
        cache = forward_teacher_batch(self.params, feats, targets, cfg.dropout, rng)
        dl = np.zeros((cache.T, cache.batch, self.params.V))
        total, row = 0.0, 0
        for it in items:
            n = it.n_captions
            rows = range(row, row + n)
            if cfg.mode == "XE":
                losses = [xe_sentence_loss(cache.row(b), targets[b]) for b in rows]
                value = math.fsum(s.value / n for s in losses)
                grads = [s.logit_grads / n for s in losses]
            else:
                vl = wxe_video_loss([cache.row(b) for b in rows], targets[row:row + n],
                                    self._item_weights(it), [0.0] * n)
                value, grads = vl.value, [s.logit_grads for s in vl.sentences]
            _check_finite(value, "loss", epoch, [it.item_id])
            for b, g in zip(rows, grads):
                dl[:g.shape[0], b] = g
            total += value
            row += n
        return cache, dl, total, None

    def _sample_batch(self, items, epoch: int, rng):
        cfg = self.config
        feats = np.concatenate([np.repeat(it.features[None, :], it.n_captions, axis=0) for it in items])
        seqs, cache = sample_batch(self.params, feats, cfg.max_len, rng)
        dl = np.zeros((cache.T, cache.batch, self.params.V))
        total, row, rewards_all = 0.0, 0, []
        for it in items:
            n = it.n_captions
            rows = range(row, row + n)
            scorer = self.scorers[it.item_id]
            r = [scorer(seqs[b]) for b in rows]
            if cfg.baseline == "none":
                b_ = [0.0] * n
            elif cfg.baseline == "scb_gt":
                b_ = [self.rewards.baselines[it.item_id]] * n
            elif cfg.baseline == "scb_sampled":
                b_ = [sampled_scb_baseline(r)] * n
            else:
                b_ = [greedy_baseline(self.params, it.features, scorer, cfg.max_len) for _ in rows]
            if cfg.scale_rewards:
                r_w, b_ = [x / 10.0 for x in r], [x / 10.0 for x in b_]
            else:
                r_w = r
            vl = wxe_video_loss([cache.row(b) for b in rows], [seqs[b] for b in rows], r_w, b_)
            _check_finite(vl.value, "loss", epoch, [it.item_id])
            for b, s in zip(rows, vl.sentences):
                dl[:s.logit_grads.shape[0], b] = s.logit_grads
            total += vl.value
            rewards_all.extend(r)
            row += n
        return cache, dl, total, rewards_all

    def run_epoch(self, epoch: int) -> EpochLog:
        cfg = self.config
        t0 = time.perf_counter()
        calls0 = self.metric_calls[0]
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(self.dataset))
        items_all = self.dataset.items
        losses, sample_rewards = [], []
        batch_calls, batch_secs = [], []
        for start in range(0, len(order), cfg.batch_size):
            tb, cb = time.perf_counter(), self.metric_calls[0]
            items = [items_all[k] for k in order[start:start + cfg.batch_size]]
            rng = np.random.default_rng([cfg.seed, epoch, 1, start])
            if cfg.mode == "RL":
                cache, dl, total, r = self._sample_batch(items, epoch, rng)
                sample_rewards.extend(r)
            else:
                cache, dl, total, _ = self._ground_truth_batch(items, epoch, rng)
            grads = backward(cache, dl).map(lambda t: t / len(items))
            ids = [it.item_id for it in items]
            for t in grads.tensors().values():
                _check_finite(t, "gradient", epoch, ids)
            if cfg.max_grad_norm:
                grads = _grad_norm_clip(grads, cfg.max_grad_norm)
            self.params, self.opt = adam_step(self.params, grads, self.opt, cfg.learning_rate)
            losses.append(total / len(items))
            batch_calls.append(self.metric_calls[0] - cb)
            batch_secs.append(time.perf_counter() - tb)
        val_cider = None
        if self.val is not None and len(self.val):
            val_cider = evaluate(self.params, self.val, cfg.eval_beam, cfg.max_len).scores["CIDEr"]
        return EpochLog(
            epoch, cfg.mode, math.fsum(losses) / len(losses),
            math.fsum(sample_rewards) / len(sample_rewards) if sample_rewards else None,
            val_cider, self.metric_calls[0] - calls0, time.perf_counter() - t0, batch_calls, batch_secs)

    def fit(self) -> tuple[ModelParams, TrainLog]:
        cfg = self.config
        log.info("training %s (baseline=%s) for %d epochs on %d items", cfg.mode, cfg.baseline,
                 cfg.epochs, len(self.dataset))
        tl = TrainLog()
        best, best_score = self.params, -math.inf
        for epoch in range(1, cfg.epochs + 1):
            e = self.run_epoch(epoch)
            tl.epochs.append(e)
            log.info("epoch %d loss=%.6f sample_reward=%s val_cider=%s", epoch, e.loss,
                     e.sample_reward, e.val_cider)
            if self.on_epoch:
                self.on_epoch(e)
            if e.val_cider is not None and e.val_cider > best_score:
                best, best_score, tl.best_epoch = self.params, e.val_cider, epoch
        if cfg.select_best and tl.best_epoch is not None:
            return best, tl
        return self.params, tl


def train(config: TrainConfig, dataset: Dataset, rewards: RewardTable | str = "compute",
          val: Dataset | None = None, params: ModelParams | None = None,
          on_epoch=None) -> tuple[ModelParams, TrainLog]:
    """Train one stage and return ``(params, log)``.

    With a validation set and ``select_best`` the returned parameters are
    those of the epoch with the best validation CIDEr.
    """
    return Trainer(config, dataset, rewards, val, params, on_epoch).fit()


def cst_pipeline(pretrain_cfg: TrainConfig, finetune_cfg: TrainConfig, dataset: Dataset,
                 val: Dataset | None = None, rewards: RewardTable | str = "compute",
                 on_epoch=None) -> tuple[ModelParams, TrainLog]:
    """XE or WXE pre-training followed by RL fine-tuning from its result."""
    if pretrain_cfg.mode not in ("XE", "WXE"):
        raise ValueError("pre-training mode must be XE or WXE")
    if finetune_cfg.mode != "RL":
        raise ValueError("fine-tuning mode must be RL")
    pre_params, tl = train(pretrain_cfg, dataset, rewards if pretrain_cfg.mode == "WXE" else "compute",
                           val, on_epoch=on_epoch)
    params, ft = train(finetune_cfg, dataset, "compute", val, params=pre_params, on_epoch=on_epoch)
    tl.extend(ft)
    return params, tl


def mean_sample_reward(params: ModelParams, dataset: Dataset, metric: str = "cider", seed: int = 0,
                       max_len: int = DEFAULT_MAX_LEN, df=None) -> float:
    """Average reward of one model sample per caption slot over ``dataset``."""
    if metric == "cider" and df is None:
        df = build_doc_freq(dataset.references())
    feats = np.concatenate([np.repeat(it.features[None, :], it.n_captions, axis=0) for it in dataset])
    seqs, _ = sample_batch(params, feats, max_len, np.random.default_rng(seed))
    rewards, row = [], 0
    for it in dataset:
        scorer = CountingScorer(metric, it.captions, df)
        rewards.extend(scorer(seqs[b]) for b in range(row, row + it.n_captions))
        row += it.n_captions
    return math.fsum(rewards) / len(rewards)
