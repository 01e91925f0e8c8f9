import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from slu.corpus import CorpusSpec, Vocab, generate_corpus
from slu.rnnt_model import (RnntConfig, RnntError, greedy_decode_rnnt, grad_check_rnnt, load_rnnt, new_rnnt,
                            rnnt_lattice, rnnt_loss, save_rnnt, train_rnnt)
from slu.targets import TargetSequence, make_target

from oracles import brute_rnnt, rnnt_paths

TINY = dict(encoder_units=8, pred_units=8, pred_embed_dim=8, joint_dim=8)


def random_lattice(rng, T, U, V):
    x = rng.standard_normal((T, U + 1, V)) * 2
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def test_path_count():
    assert sum(1 for _ in rnnt_paths(4, 3)) == math.comb(6, 3)


def test_single_frame_no_symbols():
    lp = random_lattice(np.random.default_rng(0), 1, 0, 5)
    loss, grad = rnnt_loss(lp, [])
    assert loss == pytest.approx(-lp[0, 0, 0], abs=1e-12)
    assert grad[0, 0, 0] == pytest.approx(-1.0)


def test_uniform_two_paths():
    V = 5
    lp = np.full((2, 2, V), -math.log(V))
    loss, _ = rnnt_loss(lp, [3])
    assert loss == pytest.approx(-math.log(2 * V ** -3), abs=1e-12)


@given(seed=st.integers(0, 10_000), T=st.integers(1, 4), U=st.integers(0, 3))
@settings(max_examples=60, deadline=None)
def test_matches_enumeration(seed, T, U):
    rng = np.random.default_rng(seed)
    V = 4
    lp = random_lattice(rng, T, U, V)
    y = list(rng.integers(1, V, size=U))
    loss, grad = rnnt_loss(lp, y)
    ref_loss, ref_grad = brute_rnnt(lp, y)
    assert abs(loss - ref_loss) < 1e-10
    assert np.abs(grad - ref_grad).max() < 1e-8


@given(seed=st.integers(0, 10_000), T=st.integers(1, 30), U=st.integers(0, 12))
@settings(max_examples=40, deadline=None)
def test_forward_backward_agree(seed, T, U):
    rng = np.random.default_rng(seed)
    lat = rnnt_lattice(random_lattice(rng, T, U, 6), list(rng.integers(1, 6, size=U)))
    assert lat.alpha[0, 0] == 0.0
    assert lat.forward_log_likelihood == pytest.approx(lat.backward_log_likelihood, abs=1e-6)
    assert np.allclose(np.logaddexp.reduce(lat.log_probs, axis=-1), 0.0, atol=1e-6)


def test_long_lattice_is_finite():
    rng = np.random.default_rng(1)
    loss, grad = rnnt_loss(random_lattice(rng, 400, 40, 8) * 3, list(rng.integers(1, 8, size=40)))
    assert np.isfinite(loss) and np.isfinite(grad).all()


def test_input_errors():
    lp = random_lattice(np.random.default_rng(0), 3, 2, 4)
    with pytest.raises(RnntError):
        rnnt_loss(lp, [0, 1])
    with pytest.raises(RnntError):
        rnnt_loss(np.zeros((0, 3, 4)), [1, 2])
    with pytest.raises(RnntError):
        rnnt_loss(lp, [1])


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_utterances=6, seed=2))


@pytest.fixture(scope="module")
def model(corpus):
    return new_rnnt(RnntConfig(**TINY), corpus.vocab).eval()


def test_joint_zero_gives_softmax_bias(model):
    f = torch.randn(model.config.joint_dim)
    out = model.joint_projected(f, torch.zeros_like(f))
    assert torch.allclose(out, torch.log_softmax(model.out.bias, 0), atol=1e-12)
    assert abs(torch.logsumexp(out, 0).item()) < 1e-9


def test_joint_permutation_equivariant(corpus):
    m = new_rnnt(RnntConfig(**TINY), corpus.vocab)
    enc, pred = torch.randn(m.encoder.out_dim), torch.randn(m.config.pred_units)
    before = m.joint(enc, pred)
    perm = torch.randperm(len(corpus.vocab))
    with torch.no_grad():
        m.out.weight.copy_(m.out.weight[perm])
        m.out.bias.copy_(m.out.bias[perm])
    assert torch.allclose(m.joint(enc, pred), before[perm], atol=1e-12)


def _biased(corpus, sym):
    m = new_rnnt(RnntConfig(**TINY), corpus.vocab)
    with torch.no_grad():
        m.out.weight.zero_()
        m.out.bias.zero_()
        m.out.bias[sym] = 10.0
    return m


def test_greedy_all_blank_is_empty(corpus):
    assert greedy_decode_rnnt(_biased(corpus, 0), corpus.utterances[0].frames) == []


def test_greedy_length_bounded(corpus):
    frames = corpus.utterances[0].frames
    out = greedy_decode_rnnt(_biased(corpus, 5), frames, max_symbols_per_frame=3)
    assert len(out) == 3 * frames.shape[0] and 0 not in out
    with pytest.raises(RnntError):
        greedy_decode_rnnt(_biased(corpus, 0), np.zeros((0, 16)))


def test_grad_check(model, corpus):
    batch = ([u.frames for u in corpus.utterances[:3]],
             [make_target(u, "spoken", corpus.vocab).symbols for u in corpus.utterances[:3]])
    r = grad_check_rnnt(model, batch, 1e-4, 200)
    assert r.n_coordinates == 200 and r.max_relative_error < 1e-4
    assert grad_check_rnnt(model, batch, 1e-4, 200) == r
    with pytest.raises(ValueError):
        grad_check_rnnt(model, batch, 1e-2)


def test_overfit_single_utterance():
    c = generate_corpus(CorpusSpec(n_utterances=1, noise_sigma=0.0, seed=5))
    target = make_target(c.utterances[0], "spoken", c.vocab)
    m, trace = train_rnnt(c, lambda e: [target], RnntConfig(epochs=150, learning_rate=1e-2, dropout=0.0))
    assert trace[-1] < 0.05
    # greedy can still drop a symbol whose emission mass is spread over many
    # frames, each below the blank probability, so only closeness is required
    out = greedy_decode_rnnt(m, c.utterances[0].frames)
    assert out == target.symbols[:len(out)] and len(out) >= len(target.symbols) - 1


def test_training_deterministic(corpus):
    targets = [make_target(u, "alphabetic", corpus.vocab) for u in corpus.utterances]
    cfg = RnntConfig(epochs=2, batch_size=3, **TINY)
    _, a = train_rnnt(corpus, lambda e: targets, cfg)
    _, b = train_rnnt(corpus, lambda e: targets, cfg)
    assert a == b


def test_vocab_extension_keeps_shared_logits(corpus):
    asr_vocab = Vocab(corpus.vocab.spoken_tokens, [], [])
    src = new_rnnt(RnntConfig(**TINY), asr_vocab).eval()
    dst = new_rnnt(RnntConfig(seed=9, **TINY), corpus.vocab, init=src).eval()
    u = corpus.utterances[0]
    words = list(u.transcript)
    with torch.no_grad():
        a, *_ = src.batch_logits([u.frames], [words])
        b, *_ = dst.batch_logits([u.frames], [words])
    assert torch.equal(a, b[..., :len(asr_vocab)])
    assert not torch.equal(dst.out.weight[len(asr_vocab):], torch.zeros_like(dst.out.weight[len(asr_vocab):]))


def test_identical_vocab_init_reproduces_loss(model, corpus):
    copy = new_rnnt(RnntConfig(seed=3, **TINY), corpus.vocab, init=model).eval()
    frames = [u.frames for u in corpus.utterances]
    ys = [make_target(u, "spoken", corpus.vocab).symbols for u in corpus.utterances]
    assert copy.batch_loss(frames, ys).item() == model.batch_loss(frames, ys).item()


def test_checkpoint_roundtrip(model, corpus, tmp_path):
    save_rnnt(model, tmp_path / "m.json")
    back = load_rnnt(tmp_path / "m.json").eval()
    for (n, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(p, q), n
    u = corpus.utterances[1]
    assert greedy_decode_rnnt(back, u.frames) == greedy_decode_rnnt(model, u.frames)
