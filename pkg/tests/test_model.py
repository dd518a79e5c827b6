import math

import numpy as np
import pytest
from scipy import stats

from cst.model import (ModelParams, backward, beam_search, decode_log_prob, forward_teacher,
                       forward_teacher_batch, greedy_decode, init_params, load_checkpoint, log_prob,
                       sample_batch, sample_sequence, save_checkpoint, zero_params)
from cst.objective import xe_sentence_loss
from oracles import EOS, all_sequences, random_params, torch_grads, torch_log_prob, torch_params


def _target(rng, V, T):
    return tuple(int(x) for x in rng.integers(2, V, T - 1)) + (EOS,)


def test_init_params():
    a, b = init_params(2, 5, 3, seed=7), init_params(2, 5, 3, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors().values(), b.tensors().values()))
    assert a.out_w.shape == (5, 2) and a.feat_w.shape == (2, 3)
    forget = np.zeros(8, dtype=bool)
    forget[2:4] = True
    assert np.all(a.lstm_b[forget] == 1.0)
    rest = np.concatenate([t.ravel() for n, t in a.tensors().items() if n != "lstm_b"] + [a.lstm_b[~forget]])
    assert np.all(np.abs(rest) <= 0.08)


def test_forward_alignment_and_normalisation():
    p = init_params(4, 7, 3, 0)
    cache = forward_teacher(p, np.ones(3), (3, 4, 5, EOS))
    assert cache.T == 4 and cache.logits.shape == (4, 1, 7)
    assert np.all(np.abs(cache.probs.sum(axis=-1) - 1) <= 1e-12) and np.all(cache.probs > 0)
    with pytest.raises(ValueError):
        forward_teacher(p, np.ones(2), (3, EOS))


def test_zero_model_is_uniform():
    p = zero_params(3, 6, 2)
    cache = forward_teacher(p, np.zeros(2), (3, 4, EOS))
    assert np.allclose(cache.probs, 1 / 6, atol=1e-15)
    assert log_prob(p, np.zeros(2), (3, 4, EOS)) == pytest.approx(3 * math.log(1 / 6))


def test_log_prob_nonpositive_and_prefix_monotone():
    rng = np.random.default_rng(0)
    for seed in range(20):
        p = random_params(init_params, 4, 7, 3, seed)
        f = rng.standard_normal(3)
        seq = _target(rng, 7, 5)
        full = log_prob(p, f, seq)
        probs = forward_teacher(p, f, seq).probs[:, 0]
        partial = float(np.sum(np.log(probs[np.arange(4), list(seq[:4])])))
        assert full <= 0 and full <= partial


def test_sampling_deterministic_and_eos_model():
    p = random_params(init_params, 4, 7, 3, 1)
    f = np.ones(3)
    assert sample_sequence(p, f, 10, 5)[0] == sample_sequence(p, f, 10, 5)[0]
    q = zero_params(4, 7, 3)
    q.out_b[EOS] = 50.0
    assert sample_sequence(q, f, 10, 0)[0] == (EOS,)
    seq, _ = sample_sequence(p, f, 3, 0)
    assert len(seq) <= 3 and seq[-1] == EOS and 0 not in seq


def test_first_token_distribution_chi_square():
    p = random_params(init_params, 4, 6, 3, 2, scale=0.8)
    f = np.array([0.3, -1.0, 0.5])
    n = 100_000
    seqs, cache = sample_batch(p, np.repeat(f[None], n, axis=0), 4, np.random.default_rng(11))
    probs = cache.probs_list[0][0]
    counts = np.bincount([s[0] for s in seqs], minlength=6)
    assert counts[0] == 0  # BOS is never emitted
    expected = probs[1:] * n
    assert np.all(np.abs(counts[1:] - expected) <= 3 * np.sqrt(expected * (1 - probs[1:])))
    assert stats.chisquare(counts[1:], expected).pvalue > 1e-3


def test_sampled_cache_matches_teacher_forcing_under_policy():
    p = random_params(init_params, 4, 6, 3, 3)
    f = np.array([0.1, 0.2, 0.3])
    for seed in range(10):
        seq, cache = sample_sequence(p, f, 4, seed)
        tf = forward_teacher(p, f, seq, decode_max_len=4)
        assert np.array_equal(cache.row(0).probs, tf.row(0).probs)
        assert decode_log_prob(p, f, seq, 4) == pytest.approx(float(np.sum(np.log(
            tf.row(0).probs[np.arange(len(seq)), list(seq)]))), abs=1e-12)


def test_greedy():
    p = random_params(init_params, 4, 7, 3, 4)
    f = np.ones(3)
    g = greedy_decode(p, f, 6)
    assert g == greedy_decode(p, f, 6)
    # argmax at every step of its own prefix
    probs = forward_teacher(p, f, g, decode_max_len=6).row(0).probs
    for t, tok in enumerate(g):
        assert probs[t, tok] == probs[t].max()
    q = zero_params(4, 7, 3)
    q.out_b[EOS] = math.log(0.9 / 0.1 * 5)  # p(EOS) = 0.9 among the 6 emittable tokens
    assert forward_teacher(q, f, (EOS,), decode_max_len=6).row(0).probs[0, EOS] == pytest.approx(0.9)
    assert greedy_decode(q, f, 6) == (EOS,)


def test_beam_one_is_greedy():
    rng = np.random.default_rng(5)
    for seed in range(100):
        p = random_params(init_params, 4, 6, 3, seed, scale=1.0)
        f = rng.standard_normal(3)
        assert beam_search(p, f, beam=1, max_len=5) == greedy_decode(p, f, 5)


def test_beam_exhaustive_and_dominates_greedy():
    rng = np.random.default_rng(6)
    seqs = all_sequences(4, 3)
    for seed in range(50):
        p = random_params(init_params, 3, 4, 2, seed, scale=1.5)
        f = rng.standard_normal(2)
        scores = [decode_log_prob(p, f, s, 3) for s in seqs]
        best = seqs[int(np.argmax(scores))]
        assert beam_search(p, f, beam=4, max_len=3) == best
        g = decode_log_prob(p, f, greedy_decode(p, f, 3), 3)
        for k in (2, 3):
            lp = decode_log_prob(p, f, beam_search(p, f, beam=k, max_len=3), 3)
            assert g - 1e-12 <= lp <= max(scores) + 1e-12


def _fd_grads(p, loss_fn, eps=1e-5):
    out = {}
    for name, t in p.tensors().items():
        fd = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + eps
            lp = loss_fn()
            t[idx] = old - eps
            lm = loss_fn()
            t[idx] = old
            fd[idx] = (lp - lm) / (2 * eps)
        out[name] = fd
    return out


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def test_backward_zero_and_additive():
    rng = np.random.default_rng(7)
    p = random_params(init_params, 4, 7, 3, 0)
    cache = forward_teacher(p, rng.standard_normal(3), (3, 4, 5, EOS))
    zero = backward(cache, np.zeros((4, 7)))
    assert all(np.all(t == 0) for t in zero.tensors().values())
    g1, g2 = rng.standard_normal((4, 7)), rng.standard_normal((4, 7))
    a, b, ab = backward(cache, g1), backward(cache, g2), backward(cache, g1 + g2)
    for n in a.names():
        assert np.max(np.abs(getattr(ab, n) - getattr(a, n) - getattr(b, n))) <= 1e-12
    with pytest.raises(ValueError):
        backward(cache, np.zeros((3, 7)))


def test_backward_one_hot_logit_finite_differences():
    rng = np.random.default_rng(8)
    for seed in range(5):
        p = random_params(init_params, 4, 7, 3, seed)
        f = rng.standard_normal(3)
        seq = _target(rng, 7, 4)
        k = int(rng.integers(7))
        onehot = np.zeros((4, 7))
        onehot[:, k] = 1.0
        g = backward(forward_teacher(p, f, seq), onehot)
        fd = _fd_grads(p, lambda: float(forward_teacher(p, f, seq).logits[:, 0, k].sum()))
        for n, t in fd.items():
            assert _rel(t, getattr(g, n)) < 1e-6, n


def test_backward_matches_torch_autograd_elementwise():
    rng = np.random.default_rng(9)
    for seed in range(20):
        p = random_params(init_params, 4, 7, 3, seed)
        f = rng.standard_normal(3)
        seq = _target(rng, 7, int(rng.integers(1, 7)))
        cache = forward_teacher(p, f, seq)
        g = backward(cache, xe_sentence_loss(cache, seq).logit_grads)
        tp = torch_params(p)
        ref = torch_grads(tp, -torch_log_prob(tp, f, seq))
        for n, t in ref.items():
            assert np.allclose(getattr(g, n), t, rtol=1e-10, atol=1e-13), n


def test_backward_batched_equals_rowwise_sum():
    rng = np.random.default_rng(10)
    p = random_params(init_params, 4, 7, 3, 1)
    feats = rng.standard_normal((3, 3))
    targets = [(3, EOS), (4, 5, 6, EOS), (2, 2, EOS)]
    cache = forward_teacher_batch(p, feats, targets)
    dl = np.zeros((cache.T, 3, 7))
    rows = []
    for b, t in enumerate(targets):
        s = xe_sentence_loss(cache.row(b), t)
        dl[:len(t), b] = s.logit_grads
        rows.append(backward(forward_teacher(p, feats[b], t), s.logit_grads))
    batched = backward(cache, dl)
    for n in batched.names():
        assert np.allclose(getattr(batched, n), sum(getattr(r, n) for r in rows), rtol=1e-12, atol=1e-14)


def test_backward_with_dropout_finite_differences():
    rng = np.random.default_rng(11)
    p = random_params(init_params, 4, 6, 3, 2)
    f = rng.standard_normal(3)
    seq = (3, 4, EOS)

    def loss():
        c = forward_teacher(p, f, seq, dropout=0.3, rng=np.random.default_rng(0))
        return xe_sentence_loss(c, seq).value

    cache = forward_teacher(p, f, seq, dropout=0.3, rng=np.random.default_rng(0))
    g = backward(cache, xe_sentence_loss(cache, seq).logit_grads)
    for n, t in _fd_grads(p, loss).items():
        assert _rel(t, getattr(g, n)) < 1e-6, n


def test_checkpoint_round_trip(tmp_path):
    p = init_params(3, 5, 2, 0)
    save_checkpoint(tmp_path / "c.json", p, ["<bos>", "<eos>", "<unk>", "a", "b"])
    q, vocab = load_checkpoint(tmp_path / "c.json")
    assert isinstance(q, ModelParams) and vocab[3:] == ["a", "b"]
    assert all(np.array_equal(getattr(p, n), getattr(q, n)) for n in p.names())
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")
