"""Independent reference implementations used by the tests."""

import itertools
import math

import numpy as np


def rnnt_paths(T, U):
    """All monotonic lattice paths as lists of (t, u, is_blank) edges."""
    for emit_slots in itertools.combinations(range(T + U - 1), U):
        t = u = 0
        edges = []
        for k in range(T + U - 1):
            if k in emit_slots:
                edges.append((t, u, False))
                u += 1
            else:
                edges.append((t, u, True))
                t += 1
        edges.append((t, u, True))  # final blank out of (T-1, U)
        yield edges


def brute_rnnt(log_probs, targets, blank=0):
    """Loss and gradient w.r.t. log_probs by enumerating every alignment."""
    T, U1, V = log_probs.shape
    scores, uses = [], []
    for edges in rnnt_paths(T, U1 - 1):
        idx = [(t, u, blank if b else targets[u]) for t, u, b in edges]
        scores.append(sum(log_probs[i] for i in idx))
        uses.append(idx)
    m = max(scores)
    log_p = m + math.log(sum(math.exp(s - m) for s in scores))
    grad = np.zeros_like(log_probs)
    for s, idx in zip(scores, uses):
        w = math.exp(s - log_p)
        for i in idx:
            grad[i] -= w
    return -log_p, grad


def naive_attention_align(alpha, spoken_positions):
    """Mean over each phrase's spoken positions of the first argmax frame."""
    out = []
    for positions in spoken_positions:
        total = 0
        for n in positions:
            best_t, best = 0, alpha[0][n]
            for t in range(1, len(alpha)):
                if alpha[t][n] > best:
                    best_t, best = t, alpha[t][n]
            total += best_t
        out.append(total / len(positions))
    return out
