"""Acceptance criteria, one test each.

Every test records a verdict before asserting, and the session summary prints
one PASS/FAIL line per criterion. Criteria that this desk-scale setup cannot
meet are strict xfails: they still report FAIL with the measured numbers, and
the analysis lives in the decisions ledger. The grid criteria (5, 6, 7, 9) run
the default grid twice from empty stores, about half an hour on one core;
deselect them with ``-m "not grid"``.
"""

import csv
import io
import random
import time

import numpy as np
import pytest

from slu.align import attention_align, reorder_by_time
from slu.attn_model import AttnConfig, grad_check_attn, new_attn, train_attn
from slu.corpus import CorpusSpec, generate_corpus
from slu.evaluation import slot_f1, wer
from slu.pipeline import PipelineConfig, default_grid, run_grid
from slu.rnnt_model import RnntConfig, grad_check_rnnt, new_rnnt, rnnt_loss
from slu.targets import ParsedTarget, make_target, parse_target

from oracles import brute_rnnt, naive_attention_align

# --- 1-3: exact oracles -------------------------------------------------------


def test_criterion_1_rnnt_loss_matches_enumeration(verdict):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_loss = worst_grad = 0.0
    n = 0
    for T in range(1, 5):
        for U in range(4):
            for _ in range(7):
                x = rng.standard_normal((T, U + 1, 5)) * 2
                lp = x - np.log(np.exp(x).sum(-1, keepdims=True))
                y = list(rng.integers(1, 5, size=U))
                loss, grad = rnnt_loss(lp, y)
                ref_loss, ref_grad = brute_rnnt(lp, y)
                worst_loss = max(worst_loss, abs(loss - ref_loss))
                worst_grad = max(worst_grad, float(np.abs(grad - ref_grad).max()))
                n += 1
    elapsed = time.perf_counter() - start
    ok = n >= 100 and worst_loss < 1e-10 and worst_grad < 1e-8 and elapsed < 10
    verdict(1, ok, f"{n} lattices, max |dloss| {worst_loss:.1e}, max |dgrad| {worst_grad:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_2_gradient_checks(verdict):
    corpus = generate_corpus(CorpusSpec(n_utterances=3, seed=0))
    batch = ([u.frames for u in corpus.utterances],
             [make_target(u, "spoken", corpus.vocab).symbols for u in corpus.utterances])
    start = time.perf_counter()
    r = grad_check_rnnt(new_rnnt(RnntConfig(), corpus.vocab), batch, n_coordinates=200)
    a = grad_check_attn(new_attn(AttnConfig(), corpus.vocab), batch, n_coordinates=200)
    elapsed = time.perf_counter() - start
    ok = (max(r.max_relative_error, a.max_relative_error) < 1e-4 and min(r.n_coordinates, a.n_coordinates) >= 200
          and elapsed < 60)
    verdict(2, ok, f"rnnt {r.max_relative_error:.1e} / attn {a.max_relative_error:.1e} max relative error "
                   f"over {r.n_coordinates}/{a.n_coordinates} coordinates, {elapsed:.1f} s")
    assert ok


def test_criterion_3_attention_align_oracle(verdict):
    corpus = generate_corpus(CorpusSpec(n_utterances=50, seed=4))
    v = corpus.vocab
    parsed = [parse_target(make_target(u, "alphabetic", v).symbols, v) for u in corpus.utterances]
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    mismatches = 0
    for k in range(1000):
        p = parsed[k % len(parsed)]
        alpha = rng.random((int(rng.integers(1, 40)), p.length))
        if k % 2:
            alpha = np.round(alpha, 1)  # many ties
        times = [x.time for x in attention_align(alpha, p)]
        mismatches += times != naive_attention_align(alpha.tolist(), p.spoken_positions)
    # delta peaks: every spoken column points at a chosen frame
    exact = True
    for k in range(100):
        p = parsed[k % len(parsed)]
        alpha = np.zeros((60, p.length))
        alpha[0] = 1.0
        want = []
        for positions in p.spoken_positions:
            frames = rng.integers(0, 60, size=len(positions))
            alpha[:, positions] = 0.0
            alpha[frames, positions] = 1.0
            want.append(sum(int(f) for f in frames) / len(positions))
        exact &= [x.time for x in attention_align(alpha, p)] == want
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and exact and elapsed < 5
    verdict(3, ok, f"{mismatches}/1000 mismatches vs naive oracle, delta peaks exact={exact}, {elapsed:.2f} s")
    assert ok


# --- 4: zero-noise memorization ---------------------------------------------------


@pytest.mark.xfail(strict=True, reason="memorized targets need no attention; see the ledger")
def test_criterion_4_zero_noise_permutation_recovery(verdict):
    corpus = generate_corpus(CorpusSpec(n_utterances=30, noise_sigma=0.0, seed=11))
    v = corpus.vocab
    targets = [make_target(u, "alphabetic", v) for u in corpus.utterances]
    model, trace = train_attn(corpus, lambda epoch: targets, AttnConfig(epochs=120, dropout=0.0))
    model.eval()
    alphas = model.forced_attention_batch([u.frames for u in corpus.utterances], [t.symbols for t in targets])
    hits = 0
    for u, t, alpha in zip(corpus.utterances, targets, alphas):
        p: ParsedTarget = parse_target(t.symbols, v)
        hits += reorder_by_time(p, attention_align(alpha, p), v).symbols == make_target(u, "spoken", v).symbols
    ok = trace[-1] < 0.01 and hits == len(corpus)
    verdict(4, ok, f"{hits}/{len(corpus)} utterances reordered to their spoken order "
                   f"(memorized, final CE {trace[-1]:.4f})")
    assert ok


# --- 5-7, 9: the experiment grid ------------------------------------------------------


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    config = PipelineConfig()
    runs = []
    for name in ("first", "second"):
        start = time.perf_counter()
        table, _ = run_grid(default_grid(config), config, tmp_path_factory.mktemp(name))
        runs.append((table, time.perf_counter() - start))
    rows = {(r["row"], r["model"]): r for r in csv.DictReader(io.StringIO(runs[0][0]))}
    return rows, runs


def _f1(rows, row, model):
    return float(rows[(row, model)]["f1"])


@pytest.mark.grid
def test_criterion_5_rnnt_order_gap_and_recovery(verdict, grid):
    rows, runs = grid
    f2, f3, f7 = (_f1(rows, r, "rnnt") for r in ("2c", "3c", "7c"))
    gap = f2 - f3
    recovery = (f7 - f3) / gap if gap > 0 else float("nan")
    wall = runs[0][1]
    ok = gap >= 0.10 and recovery >= 0.80 and wall <= 30 * 60
    verdict(5, ok, f"rnnt F1 2c {f2:.3f}, 3c {f3:.3f} (gap {100 * gap:.1f} pts), 7c {f7:.3f} "
                   f"(recovers {100 * recovery:.1f}%), grid {wall / 60:.1f} min")
    assert ok


@pytest.mark.grid
@pytest.mark.xfail(strict=True, reason="attention reads alphabetic targets better than spoken ones; see the ledger")
def test_criterion_6_attention_tolerates_order(verdict, grid):
    rows, _ = grid
    rnnt_gap = _f1(rows, "2c", "rnnt") - _f1(rows, "3c", "rnnt")
    f2, f3, f7 = (_f1(rows, r, "attn") for r in ("2c", "3c", "7c"))
    small_gap = f2 - f3 <= rnnt_gap / 3
    no_loss = f7 >= f3
    verdict(6, small_gap and no_loss,
            f"attn F1 2c {f2:.3f}, 3c {f3:.3f}: gap {100 * (f2 - f3):.1f} pts vs limit {100 * rnnt_gap / 3:.1f} "
            f"({'ok' if small_gap else 'too large'}); 7c {f7:.3f} {'>=' if no_loss else '<'} 3c")
    assert small_gap and no_loss


@pytest.mark.grid
@pytest.mark.xfail(strict=True, reason="no noise level puts both aligners under 10% with attention ahead; see the ledger")
def test_criterion_7_noisy_alignment_error(verdict, grid):
    rows, _ = grid
    hmm = float(rows[("align-Hn", "hmm")]["alignment_error"])
    att = float(rows[("align-An", "attn")]["alignment_error"])
    ok = att <= hmm and max(att, hmm) <= 0.10
    verdict(7, ok, f"noisy entity alignment error: attention {100 * att:.1f}%, HMM {100 * hmm:.1f}%")
    assert ok


@pytest.mark.grid
def test_criterion_9_grid_rerun_is_byte_identical(verdict, grid):
    _, runs = grid
    (a, _), (b, _) = runs
    failed = sum(",failed" in line for line in a.splitlines())
    ok = a == b and failed == 0
    verdict(9, ok, f"two runs from empty stores: CSV identical={a == b} ({len(a)} bytes), failed rows {failed}")
    assert ok


# --- 8: metrics -----------------------------------------------------------------------


def test_criterion_8_metric_examples_and_permutation_invariance(verdict):
    A, B, C, D, E = [("toloc.city_name", ("dallas",)), ("fromloc.city_name", ("reno",)),
                     ("stoploc.city_name", ("las", "vegas")), ("airline_name", ("delta",)),
                     ("depart_time.time", ("six", "pm"))]
    f1 = slot_f1({"u": [A, B, C]}, {"u": [A, B, D, E]}).f1
    w = wer([["a", "b", "x"]], [["a", "b", "c", "d"]])
    rnd = random.Random(0)
    pool = [A, B, C, D, E, ("toloc.city_name", ("reno",)), ("airline_name", ("united",))]
    invariant = 0
    for _ in range(1000):
        pred = {f"u{i}": rnd.choices(pool, k=rnd.randint(0, 6)) for i in range(3)}
        ref = {f"u{i}": rnd.choices(pool, k=rnd.randint(0, 6)) for i in range(3)}
        base = slot_f1(pred, ref)
        shuffled = {k: rnd.sample(v, len(v)) for k, v in pred.items()}
        shuffled_ref = {k: rnd.sample(v, len(v)) for k, v in ref.items()}
        invariant += slot_f1(shuffled, shuffled_ref) == base
    ok = abs(f1 - 4 / 7) < 1e-12 and w == 0.5 and invariant == 1000
    verdict(8, ok, f"F1 {f1:.6f} (4/7 = {4 / 7:.6f}), WER {w}, permutation invariant {invariant}/1000")
    assert ok
