"""RNN transducer: transcription net, prediction net, multiplicative joint.

The lattice is indexed ``[t, u]`` with ``t`` in ``[0, T)`` frames and ``u`` in
``[0, U]`` emitted symbols. From node ``(t, u)`` a path either emits
``y[u]`` and moves to ``(t, u+1)`` or emits BLANK and moves to ``(t+1, u)``;
every path ends with the BLANK out of ``(T-1, U)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, Vocab
from .layers import (Encoder, GradCheckResult, NumericalError, VocabMismatch, check_finite, grad_check,
                     load_parameters, pad_frames, pad_symbols, read_checkpoint, save_checkpoint, seed_everything,
                     transfer_parameters)
from .training import TrainConfigMixin, train_loop

log = logging.getLogger(__name__)


class RnntError(ValueError):
    pass


# --- loss ----------------------------------------------------------------

def _linear_recurrence(c: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Solve a[0] = c[0], a[t] = logaddexp(a[t-1] + w[t], c[t]) in log space."""
    s = np.concatenate(([0.0], np.cumsum(w[1:])))
    with np.errstate(invalid="ignore"):
        acc = np.logaddexp.accumulate(c - s)
    return s + acc


@dataclass
class Lattice:
    log_probs: np.ndarray   # (T, U+1, V)
    alpha: np.ndarray       # (T, U+1)
    beta: np.ndarray        # (T, U+1)
    blank_lp: np.ndarray = field(default=None, repr=False)

    @property
    def forward_log_likelihood(self) -> float:
        return float(self.alpha[-1, -1] + self.blank_lp[-1, -1])

    @property
    def backward_log_likelihood(self) -> float:
        return float(self.beta[0, 0])


def lattice_forward_backward(blank_lp: np.ndarray, emit_lp: np.ndarray):
    """Forward and backward log-sums over a transducer lattice.

    ``blank_lp`` is (T, U+1), ``emit_lp`` is (T, U) with ``emit_lp[t, u]`` the
    log-probability of emitting ``y[u]`` at node ``(t, u)``.
    """
    T, U1 = blank_lp.shape
    U = U1 - 1
    alpha = np.empty((T, U1))
    beta = np.empty((T, U1))
    c = np.full(T, -np.inf)
    c[0] = 0.0
    w = np.empty(T)
    for u in range(U1):
        if u > 0:
            c = alpha[:, u - 1] + emit_lp[:, u - 1]
        w[1:] = blank_lp[:-1, u]
        alpha[:, u] = _linear_recurrence(c, w)
    # backward, time reversed; beta[T, U] = 0 is folded into the start term
    wr = np.empty(T)
    for u in range(U, -1, -1):
        d = beta[:, u + 1] + emit_lp[:, u] if u < U else np.full(T, -np.inf)
        if u == U:
            d[-1] = np.logaddexp(d[-1], blank_lp[-1, U])
        rb = blank_lp[::-1, u]
        wr[1:] = rb[1:]
        beta[::-1, u] = _linear_recurrence(d[::-1], wr)
    return alpha, beta


def rnnt_loss_and_grads(blank_lp: np.ndarray, emit_lp: np.ndarray):
    """Negative log-likelihood and its gradient w.r.t. ``blank_lp`` and ``emit_lp``."""
    alpha, beta = lattice_forward_backward(blank_lp, emit_lp)
    T, U1 = blank_lp.shape
    log_p = beta[0, 0]
    beta_next = np.full((T, U1), -np.inf)
    beta_next[:-1] = beta[1:]
    beta_next[-1, -1] = 0.0
    g_blank = -np.exp(alpha + blank_lp + beta_next - log_p)
    g_emit = -np.exp(alpha[:, :-1] + emit_lp + beta[:, 1:] - log_p)
    return -log_p, g_blank, g_emit, alpha, beta


def _check_targets(T: int, targets: Sequence[int], blank: int):
    if T < 1:
        raise RnntError("T must be >= 1")
    if any(int(y) == blank for y in targets):
        raise RnntError("target sequence contains BLANK")


def rnnt_lattice(log_probs: np.ndarray, targets: Sequence[int], blank: int = 0) -> Lattice:
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, U1, _ = log_probs.shape
    _check_targets(T, targets, blank)
    if U1 != len(targets) + 1:
        raise RnntError(f"lattice has U+1={U1} but target length is {len(targets)}")
    blank_lp = log_probs[:, :, blank]
    emit_lp = log_probs[:, np.arange(U1 - 1), np.asarray(targets, dtype=int)] if U1 > 1 else np.zeros((T, 0))
    alpha, beta = lattice_forward_backward(blank_lp, emit_lp)
    return Lattice(log_probs, alpha, beta, blank_lp=blank_lp)


def rnnt_loss(log_probs: np.ndarray, targets: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """Return ``(-log P(targets), d loss / d log_probs)`` for one (T, U+1, V) lattice."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, U1, V = log_probs.shape
    _check_targets(T, targets, blank)
    if U1 != len(targets) + 1:
        raise RnntError(f"lattice has U+1={U1} but target length is {len(targets)}")
    y = np.asarray(targets, dtype=int)
    blank_lp = log_probs[:, :, blank]
    emit_lp = log_probs[:, np.arange(U1 - 1), y]
    loss, g_blank, g_emit, _, _ = rnnt_loss_and_grads(blank_lp, emit_lp)
    grad = np.zeros_like(log_probs)
    grad[:, :, blank] = g_blank
    if U1 > 1:
        grad[:, np.arange(U1 - 1), y] += g_emit
    return float(loss), grad


class _RnntLossFn(torch.autograd.Function):
    """Summed loss over padded (B, T, U+1, V) joint logits; one dense gradient buffer.

    Taking logits rather than log-probs folds the log-softmax backward into
    ``g - softmax * sum(g)``, which is much cheaper than autograd's version.
    """

    @staticmethod
    def forward(ctx, logits, targets, lengths, target_lengths, blank):
        lp = torch.log_softmax(logits.detach(), dim=-1).numpy()
        grad = np.zeros_like(lp)
        total = 0.0
        for b in range(lp.shape[0]):
            T, U = int(lengths[b]), int(target_lengths[b])
            y = targets[b, :U].numpy()
            lpb = lp[b, :T, :U + 1]
            loss, gb, ge, _, _ = rnnt_loss_and_grads(lpb[:, :, blank], lpb[:, np.arange(U), y])
            total += loss
            grad[b, :T, :U + 1, blank] = gb
            grad[b, :T, :U][:, np.arange(U), y] += ge
        grad -= np.exp(lp) * grad.sum(-1, keepdims=True)
        ctx.save_for_backward(torch.from_numpy(grad))
        return logits.new_tensor(total)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None, None


# --- model ---------------------------------------------------------------

@dataclass
class RnntConfig(TrainConfigMixin):
    frame_dim: int = 16
    encoder_layers: int = 2
    encoder_units: int = 48
    pred_embed_dim: int = 32
    pred_units: int = 64
    joint_dim: int = 32
    vocab_size: int = 0
    dropout: float = 0.1
    max_symbols_per_frame: int = 4

    def validate(self) -> None:
        super().validate()
        for name in ("frame_dim", "encoder_layers", "encoder_units", "pred_embed_dim", "pred_units",
                     "joint_dim", "max_symbols_per_frame"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class RnntModel(nn.Module):
    VOCAB_PARAMS = {"embed.weight": 0, "out.weight": 0, "out.bias": 0}

    def __init__(self, config: RnntConfig, vocab: Vocab):
        super().__init__()
        config = replace(config, vocab_size=len(vocab))
        config.validate()
        self.config = config
        self.vocab = vocab
        self.blank = vocab.blank_id
        V = len(vocab)
        self.encoder = Encoder(config.frame_dim, config.encoder_layers, config.encoder_units, config.dropout)
        self.embed = nn.Embedding(V, config.pred_embed_dim)
        self.pred = nn.LSTM(config.pred_embed_dim, config.pred_units, batch_first=True)
        self.enc_proj = nn.Linear(self.encoder.out_dim, config.joint_dim)
        self.pred_proj = nn.Linear(config.pred_units, config.joint_dim)
        self.out = nn.Linear(config.joint_dim, V)
        # product starts near enc_proj(f) instead of ~0, avoiding the all-blank plateau
        nn.init.ones_(self.pred_proj.bias)
        # the default Linear init keeps logits nearly input-independent, and training
        # then sits on a plateau where only the prediction net (an LM) gets used
        for lin in (self.enc_proj, self.out):
            nn.init.normal_(lin.weight, std=3.0 / math.sqrt(lin.in_features))

    def joint_logits(self, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return self.out(torch.tanh(f * g))

    def joint_projected(self, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.joint_logits(f, g), dim=-1)

    def joint(self, enc: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
        """Log-distribution over vocab+BLANK from an encoder frame and prediction-net output."""
        return self.joint_projected(self.enc_proj(enc), self.pred_proj(pred))

    def prediction(self, symbols: torch.Tensor, state=None):
        return self.pred(self.embed(symbols), state)

    def batch_logits(self, frames: Sequence[np.ndarray], targets: Sequence[Sequence[int]]):
        x, lengths = pad_frames(frames)
        y, ylen = pad_symbols(targets, fill=self.blank)
        y = y[:, :int(ylen.max())]
        enc = self.encoder(x, lengths)
        start = torch.full((len(targets), 1), self.blank, dtype=torch.long)
        g, _ = self.prediction(torch.cat([start, y], dim=1))
        f = self.enc_proj(enc)[:, :, None, :]
        gp = self.pred_proj(g)[:, None, :, :]
        return self.joint_logits(f, gp), lengths, y, ylen

    def batch_loss(self, frames, targets) -> torch.Tensor:
        """Mean per-utterance negative log-likelihood."""
        for t in targets:
            _check_targets(1, t, self.blank)
        logits, lengths, y, ylen = self.batch_logits(frames, targets)
        return _RnntLossFn.apply(logits, y, lengths, ylen, self.blank) / len(targets)

    @torch.no_grad()
    def greedy_decode(self, frames: np.ndarray, max_symbols_per_frame: int | None = None) -> list[int]:
        cap = max_symbols_per_frame or self.config.max_symbols_per_frame
        x, lengths = pad_frames([frames])
        f = self.enc_proj(self.encoder(x, lengths))[0]
        sym = torch.full((1, 1), self.blank, dtype=torch.long)
        g, state = self.prediction(sym)
        gp = self.pred_proj(g[0, 0])
        out: list[int] = []
        for t in range(f.shape[0]):
            for _ in range(cap):
                k = int(torch.argmax(self.joint_projected(f[t], gp)))
                if k == self.blank:
                    break
                out.append(k)
                g, state = self.prediction(torch.full((1, 1), k, dtype=torch.long), state)
                gp = self.pred_proj(g[0, 0])
        return out


def greedy_decode_rnnt(model: RnntModel, frames: np.ndarray, max_symbols_per_frame: int = 4) -> list[int]:
    if len(frames) == 0:
        raise RnntError("frames must be nonempty")
    model.eval()
    return model.greedy_decode(frames, max_symbols_per_frame)


def new_rnnt(config: RnntConfig, vocab: Vocab, init: "RnntModel | None" = None) -> RnntModel:
    seed_everything(config.seed)
    model = RnntModel(config, vocab)
    if init is not None:
        if not isinstance(init, RnntModel):
            raise VocabMismatch("init model is not a transducer")
        transfer_parameters(model, init, vocab, init.vocab, RnntModel.VOCAB_PARAMS)
    return model


def train_rnnt(corpus: Corpus, target_provider: Callable[[int], list], config: RnntConfig,
               init: RnntModel | None = None, epochs: int | None = None,
               progress: Callable[[int, float], None] | None = None):
    """Train on ``target_provider(epoch)`` targets (epochs count from 1).

    ``init=None`` starts from random weights; otherwise weights are copied from
    ``init``, with new vocab rows randomly initialized. Returns ``(model, trace)``.
    """
    model = new_rnnt(config, corpus.vocab, init)
    trace = train_loop(model, corpus, target_provider, model.config,
                       config.epochs if epochs is None else epochs, progress)
    return model, trace


def save_rnnt(model: RnntModel, path, extra: dict | None = None) -> None:
    save_checkpoint(path, "rnnt", model, model.config, model.vocab, extra)


def rnnt_from_checkpoint(doc: dict) -> RnntModel:
    config = RnntConfig(**doc["config"])
    model = RnntModel(config, Vocab.from_dict(doc["vocab"]))
    load_parameters(model, doc["params"])
    return model


def load_rnnt(path) -> RnntModel:
    doc = read_checkpoint(path)
    if doc["model_type"] != "rnnt":
        raise ValueError(f"{path}: model_type is {doc['model_type']!r}, expected 'rnnt'")
    return rnnt_from_checkpoint(doc)


__all__ = [
    "Lattice", "NumericalError", "grad_check_rnnt", "RnntConfig", "RnntError", "RnntModel", "check_finite", "greedy_decode_rnnt",
    "lattice_forward_backward", "load_rnnt", "new_rnnt", "rnnt_lattice", "rnnt_loss", "save_rnnt", "train_rnnt",
]


def grad_check_rnnt(model: RnntModel, batch, epsilon: float = 1e-4, n_coordinates: int = 200,
                    seed: int = 0) -> GradCheckResult:
    """Finite-difference check of the full loss (encoder, prediction net, joint, lattice)."""
    frames, targets = batch
    return grad_check(model, frames, [list(t) for t in targets], epsilon, n_coordinates, seed)
