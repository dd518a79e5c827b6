"""
Baselines for policy-gradient fine-tuning, and what they cost
=============================================================

After weighted pre-training the model is fine-tuned on its own samples.
The self-consensus baseline is looked up from precomputed ground-truth
rewards; the greedy (self-critical) baseline decodes and scores one extra
caption per sample.  Counting metric calls makes the difference exact.
"""

import time

from cst import TrainConfig, generate_synthetic, train
from cst.trainer import mean_sample_reward

ds = generate_synthetic(seed=1, n_items=250, vocab_size=30, captions_per_item=5,
                        consensus_noise=0.5, val_fraction=0.2)
train_set, val = ds.subset("train"), ds.subset("val")

pre, _ = train(TrainConfig(mode="WXE", epochs=30, batch_size=16, learning_rate=0.01, d=32, seed=1),
               train_set, val=val)
print(f"after WXE pre-training: mean sample reward {mean_sample_reward(pre, train_set, seed=99):.3f}")

for baseline in ("scb_gt", "scb_sampled", "greedy"):
    cfg = TrainConfig(mode="RL", baseline=baseline, epochs=10, batch_size=16, learning_rate=0.001, d=32, seed=1)
    t0 = time.perf_counter()
    params, log = train(cfg, train_set, val=val, params=pre)
    secs = time.perf_counter() - t0
    calls = log.epochs[0].metric_calls
    print(f"{baseline:>11}: sample reward {mean_sample_reward(params, train_set, seed=99):.3f}, "
          f"metric calls per epoch {calls}, {secs / len(log.epochs):.2f}s per epoch")
