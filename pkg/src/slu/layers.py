"""Pieces shared by the attention and transducer models."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Vocab

CHECKPOINT_FORMAT = "slu-checkpoint"
CHECKPOINT_VERSION = 1

torch.set_default_dtype(torch.float64)


class NumericalError(RuntimeError):
    """Training diverged (NaN/Inf loss or parameters)."""


class VocabMismatch(ValueError):
    pass


class Encoder(nn.Module):
    """Stacked bidirectional LSTM over feature frames."""

    def __init__(self, frame_dim: int, layers: int, units: int, dropout: float = 0.0):
        super().__init__()
        # unit-norm frames have per-dimension scale 1/sqrt(d); rescale to unit variance
        self.input_scale = math.sqrt(frame_dim)
        self.lstm = nn.LSTM(frame_dim, units, num_layers=layers, bidirectional=True,
                            batch_first=True, dropout=dropout if layers > 1 else 0.0)
        self.out_dim = 2 * units

    def forward(self, frames: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = nn.utils.rnn.pack_padded_sequence(frames * self.input_scale, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=frames.shape[1])
        return out


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([f.shape[0] for f in frames])
    T = int(lengths.max())
    d = frames[0].shape[1]
    out = torch.zeros(len(frames), T, d)
    for b, f in enumerate(frames):
        out[b, :f.shape[0]] = torch.from_numpy(np.asarray(f, dtype=np.float64))
    return out, lengths


def pad_symbols(seqs: Sequence[Sequence[int]], fill: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs])
    out = torch.full((len(seqs), max(1, int(lengths.max()))), fill, dtype=torch.long)
    for b, s in enumerate(seqs):
        out[b, :len(s)] = torch.tensor(list(s), dtype=torch.long)
    return out, lengths


def check_finite(module: nn.Module, loss: torch.Tensor | float, where: str) -> None:
    value = float(loss.detach() if isinstance(loss, torch.Tensor) else loss)
    if not math.isfinite(value):
        raise NumericalError(f"{where}: loss is {value}")
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalError(f"{where}: parameter {name} is not finite")


def transfer_parameters(dst: nn.Module, src: nn.Module, dst_vocab: Vocab, src_vocab: Vocab,
                        vocab_params: dict[str, int]) -> None:
    """Copy ``src`` weights into ``dst``.

    ``vocab_params`` names parameters with a vocab-indexed axis (name -> axis).
    Along that axis, rows of symbols present in both vocabs are copied by
    token string; rows for new symbols keep ``dst``'s random init.
    """
    for tok in src_vocab.tokens:
        if tok in dst_vocab.index:
            for ids_kind in ("is_spoken", "is_label", "is_intent"):
                if getattr(src_vocab, ids_kind)(src_vocab.index[tok]) != getattr(dst_vocab, ids_kind)(dst_vocab.index[tok]):
                    raise VocabMismatch(f"token {tok!r} changes kind between vocabs")
    if src_vocab.tokens[0] != dst_vocab.tokens[0]:
        raise VocabMismatch("blank symbols differ")
    shared = [(dst_vocab.index[t], i) for i, t in enumerate(src_vocab.tokens) if t in dst_vocab.index]
    dst_idx = torch.tensor([d for d, _ in shared])
    src_idx = torch.tensor([s for _, s in shared])
    src_params = dict(src.named_parameters())
    with torch.no_grad():
        for name, p in dst.named_parameters():
            q = src_params[name]
            if name in vocab_params:
                axis = vocab_params[name]
                p.index_copy_(axis, dst_idx, q.index_select(axis, src_idx))
            else:
                if p.shape != q.shape:
                    raise VocabMismatch(f"parameter {name}: shape {tuple(q.shape)} -> {tuple(p.shape)}")
                p.copy_(q)


def save_checkpoint(path: str | Path, model_type: str, model: nn.Module, config, vocab: Vocab,
                    extra: dict | None = None) -> None:
    """JSON checkpoint.

    Layout::

        {"format": "slu-checkpoint", "version": 1, "model_type": "attn" | "rnnt",
         "config": {...}, "vocab": {...},
         "params": [{"name": str, "shape": [int], "data": [float, ...]}, ...],
         "extra": {...}}

    ``data`` is the row-major flattening; parameter order is ``named_parameters()`` order.
    Floats are written with shortest round-trip repr, so loading is exact.
    """
    params = [{"name": n, "shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
              for n, p in model.named_parameters()]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_type": model_type,
        "config": asdict(config),
        "vocab": vocab.to_dict(),
        "params": params,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def read_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an slu checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc


def load_parameters(model: nn.Module, params: list[dict]) -> None:
    by_name = {p["name"]: p for p in params}
    with torch.no_grad():
        for name, p in model.named_parameters():
            rec = by_name[name]
            p.copy_(torch.tensor(rec["data"]).reshape(rec["shape"]))


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@dataclass
class GradCheckResult:
    max_relative_error: float
    max_absolute_error: float
    n_coordinates: int


def grad_check(model: nn.Module, frames: Sequence[np.ndarray], targets: Sequence[Sequence[int]],
               epsilon: float = 1e-4, n_coordinates: int = 200, seed: int = 0,
               floor: float = 1e-6) -> GradCheckResult:
    """Central differences of ``model.batch_loss`` against its backward pass.

    Coordinates are sampled without replacement, at least one from every
    parameter tensor. Relative error is ``|a - n| / max(|a|, |n|, floor)``, so
    coordinates whose gradient is essentially zero are judged by absolute
    error. Dropout is disabled for the duration of the check.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must be in [1e-6, 1e-3]")
    was_training = model.training
    model.eval()
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    model.batch_loss(frames, targets).backward()
    analytic = [p.grad.detach().reshape(-1).clone() for p in params]
    model.zero_grad()

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(params))]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    taken = {offsets[i] + j for i, j in picks}
    pool = np.setdiff1d(np.arange(offsets[-1]), np.fromiter(taken, dtype=np.int64))
    extra = rng.choice(pool, size=max(0, min(n_coordinates - len(picks), len(pool))), replace=False)
    for flat in np.sort(extra):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.append((i, int(flat - offsets[i])))

    max_rel = max_abs = 0.0
    with torch.no_grad():
        for i, j in picks:
            view = params[i].view(-1)
            orig = float(view[j])
            view[j] = orig + epsilon
            up = float(model.batch_loss(frames, targets))
            view[j] = orig - epsilon
            down = float(model.batch_loss(frames, targets))
            view[j] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[i][j])
            err = abs(a - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(a), abs(numeric), floor))
    model.train(was_training)
    return GradCheckResult(max_rel, max_abs, len(picks))
