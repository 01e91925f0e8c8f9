"""Recovering the spoken order of entity phrases.

Two estimators of a time position per phrase:

* attention: the mean, over the phrase's spoken-token output positions, of the
  frame each position attends to most;
* keyword HMM: Viterbi alignment of ``garbage* token_1+ ... token_k+ garbage*``
  against the whole utterance, one phrase at a time, taking the midpoint of the
  keyword interval.

Phrases are then re-emitted sorted by time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Utterance, Vocab
from .targets import ParsedTarget, TargetSequence, emit


class AlignError(ValueError):
    pass


@dataclass
class PhraseTime:
    phrase_index: int
    time: float
    token_times: list[int]


def attention_align(alpha: np.ndarray, parsed: ParsedTarget) -> list[PhraseTime]:
    """Average attended frame per phrase; argmax ties go to the earliest frame."""
    alpha = np.asarray(alpha)
    n_cols = alpha.shape[1]
    if parsed.length and n_cols != parsed.length:
        raise AlignError(f"alpha has {n_cols} columns for a {parsed.length}-symbol target")
    peaks = np.argmax(alpha, axis=0)
    out = []
    for i, positions in enumerate(parsed.spoken_positions):
        if not positions:
            raise AlignError(f"phrase {i} has no spoken tokens")
        times = [int(peaks[n]) for n in positions]
        out.append(PhraseTime(i, sum(times) / len(times), times))
    return out


def reorder_by_time(parsed: ParsedTarget, times: Sequence[PhraseTime | float], vocab: Vocab,
                    variant: str = "spoken-estimated") -> TargetSequence:
    """Sort phrases by time; equal times keep their input (alphabetic) order."""
    if len(times) != len(parsed.phrases):
        raise AlignError(f"{len(times)} times for {len(parsed.phrases)} phrases")
    if parsed.intent is None:
        raise AlignError("parsed target has no intent")
    t = [x.time if isinstance(x, PhraseTime) else float(x) for x in times]
    order = sorted(range(len(t)), key=lambda i: (t[i], i))
    return emit([parsed.phrases[i] for i in order], parsed.intent, vocab, variant)


def estimated_order(times: Sequence[PhraseTime | float]) -> list[int]:
    """Input-position indices sorted by time (the permutation reorder_by_time applies)."""
    t = [x.time if isinstance(x, PhraseTime) else float(x) for x in times]
    return sorted(range(len(t)), key=lambda i: (t[i], i))


# --- keyword HMM -----------------------------------------------------------

@dataclass
class HmmAlignment:
    start: int
    end: int
    state_spans: list[tuple[str, int, int]]
    score: float

    @property
    def midpoint(self) -> float:
        return (self.start + self.end) / 2


class GaussianScorer:
    """Isotropic Gaussian emissions.

    Keyword token states are centred on the token's embedding with std
    ``keyword_sigma``; the garbage state is one broad Gaussian (std
    ``garbage_sigma``) centred on the mean embedding.
    """

    def __init__(self, embeddings: np.ndarray, keyword_sigma: float, garbage_sigma: float = 1.0,
                 spoken_ids: Sequence[int] | None = None):
        if keyword_sigma <= 0 or garbage_sigma <= 0:
            raise AlignError("emission stds must be positive")
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.keyword_sigma = keyword_sigma
        self.garbage_sigma = garbage_sigma
        rows = self.embeddings if spoken_ids is None else self.embeddings[list(spoken_ids)]
        nonzero = rows[np.linalg.norm(rows, axis=1) > 0]
        self.garbage_mean = nonzero.mean(0) if len(nonzero) else np.zeros(self.embeddings.shape[1])

    @staticmethod
    def _gauss(frames: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
        d = frames.shape[-1]
        sq = ((frames[:, None, :] - mean[None, :, :]) ** 2).sum(-1) if mean.ndim == 2 else \
            ((frames - mean) ** 2).sum(-1)
        return -sq / (2 * sigma ** 2) - 0.5 * d * math.log(2 * math.pi * sigma ** 2)

    def keyword_log_likelihoods(self, frames: np.ndarray, keyword: Sequence[int]) -> np.ndarray:
        return self._gauss(frames, self.embeddings[list(keyword)], self.keyword_sigma)

    def garbage_log_likelihood(self, frames: np.ndarray) -> np.ndarray:
        return self._gauss(frames, self.garbage_mean, self.garbage_sigma)


def hmm_keyword_align(frames: np.ndarray, keyword: Sequence[int], scorer) -> HmmAlignment:
    """Viterbi path through ``[garbage*, token_1+, ..., token_k+, garbage*]``.

    On equal scores the path whose latest state change happened earlier wins.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T, k = frames.shape[0], len(keyword)
    if k == 0:
        raise AlignError("keyword must be nonempty")
    if T < k:
        raise AlignError(f"infeasible alignment: {T} frames for {k} keyword states")
    g = scorer.garbage_log_likelihood(frames)
    em = np.concatenate([g[:, None], scorer.keyword_log_likelihoods(frames, keyword), g[:, None]], axis=1)
    S = k + 2
    delta = np.full(S, -np.inf)
    delta[0], delta[1] = em[0, 0], em[0, 1]
    back = np.zeros((T, S), dtype=bool)  # True: entered from previous state
    for t in range(1, T):
        adv = np.concatenate(([-np.inf], delta[:-1]))
        back[t] = adv > delta
        delta = np.where(back[t], adv, delta) + em[t]
    final = k + 1 if delta[k + 1] >= delta[k] else k
    score = float(delta[final])
    states = np.empty(T, dtype=int)
    s = final
    for t in range(T - 1, -1, -1):
        states[t] = s
        if back[t, s]:
            s -= 1
    if states[0] > 1:
        raise AlignError("backtrace did not reach a start state")
    names = ["garbage"] + [f"kw{i}" for i in range(k)] + ["garbage"]
    spans = []
    for st in range(S):
        idx = np.flatnonzero(states == st)
        if len(idx):
            spans.append((names[st], int(idx[0]), int(idx[-1]) + 1))
        else:
            # empty garbage state: zero-length span at its boundary
            pos = 0 if st == 0 else T
            spans.append((names[st], pos, pos))
    start = spans[1][1]
    end = spans[k][2]
    return HmmAlignment(start, end, spans, score)


def segmentation_score(em_garbage: np.ndarray, em_keyword: np.ndarray, lengths: Sequence[int]) -> float:
    """Log-score of the explicit segmentation ``lengths = [g1, l_1..l_k, g2]``."""
    pos, total = 0, 0.0
    k = em_keyword.shape[1]
    for st, n in enumerate(lengths):
        col = em_garbage if st in (0, k + 1) else em_keyword[:, st - 1]
        total += float(col[pos:pos + n].sum())
        pos += n
    return total


def hmm_phrase_times(frames: np.ndarray, parsed: ParsedTarget, scorer) -> list[PhraseTime]:
    """Keyword-align each phrase independently; time = midpoint of its interval."""
    out = []
    for i, ph in enumerate(parsed.phrases):
        a = hmm_keyword_align(frames, ph.spoken_token_ids, scorer)
        token_mids = [(s + e) / 2 for name, s, e in a.state_spans[1:-1]]
        out.append(PhraseTime(i, a.midpoint, [int(m) for m in token_mids]))
    return out


def true_phrase_times(utt: Utterance, parsed: ParsedTarget) -> list[float]:
    """First frame of each parsed phrase in the generator's ground truth.

    Phrases are matched to entities by (label, tokens); repeated keys are
    matched in spoken order.
    """
    used: set[int] = set()
    out = []
    for ph in parsed.phrases:
        for k, e in enumerate(utt.entities):
            if k not in used and (e.label_name, tuple(utt.transcript[e.start:e.end])) == ph.key():
                used.add(k)
                out.append(float(utt.token_frame_spans[e.start][0]))
                break
        else:
            raise AlignError(f"{utt.id}: phrase {ph.key()} is not an entity of the utterance")
    return out


def alignment_error(estimated: Sequence[Sequence], true: Sequence[Sequence]) -> dict[str, float]:
    """Rank-mismatch error between estimated and true phrase orders.

    Each element of ``estimated`` / ``true`` lists one utterance's phrase
    identifiers in order. An entity is wrong when its position differs.
    """
    if len(estimated) != len(true):
        raise AlignError(f"{len(estimated)} estimated vs {len(true)} true utterances")
    wrong = total = bad_utts = 0
    for est, ref in zip(estimated, true):
        if len(est) != len(ref) or sorted(map(repr, est)) != sorted(map(repr, ref)):
            raise AlignError("estimated and true orders hold different phrases")
        miss = sum(a != b for a, b in zip(est, ref))
        wrong += miss
        total += len(ref)
        bad_utts += miss > 0
    return {
        "entity_error_rate": wrong / total if total else 0.0,
        "utterance_error_rate": bad_utts / len(true) if true else 0.0,
    }
