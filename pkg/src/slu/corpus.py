"""Synthetic ATIS-like corpora.

Utterances come from a small slot-filling grammar: an intent-specific carrier
phrase followed by slot clauses in random order ("to dallas", "from reno",
"that makes a stop in las vegas", ...). Each spoken token is rendered into a
run of feature frames, a fixed unit-norm embedding per token plus isotropic
Gaussian noise. Token durations are jittered per token, which plays the role
of speed/tempo perturbation.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BLANK = "<blank>"

CITIES = [
    "dallas", "reno", "las vegas", "boston", "denver", "atlanta", "seattle",
    "new york", "san francisco", "pittsburgh", "philadelphia", "salt lake city",
    "baltimore", "houston", "miami", "phoenix", "chicago", "oakland",
]
TIMES = [
    "six pm", "noon", "eight am", "nine pm", "ten am", "five pm",
    "midnight", "seven am", "four pm", "eleven am",
]
AIRLINES = [
    "delta", "united", "american airlines", "us air", "continental",
    "alaska airlines", "northwest", "twa",
]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]

# intent -> carrier phrases that open the utterance
CARRIERS = {
    "flight": ["i want a flight", "show me flights", "i would like to fly"],
    "airfare": ["how much is a ticket", "what are the fares", "show me the cost of flights"],
    "airline": ["which airlines fly", "what airline has flights"],
    "flight_time": ["what time are flights", "when do flights leave"],
}

# slot -> (label name, clause templates, filler inventory key, inclusion probability)
SLOTS = {
    "from": ("fromloc.city_name", ["from {}", "leaving from {}"], "city", 0.85),
    "to": ("toloc.city_name", ["to {}", "going to {}"], "city", 0.9),
    "stop": ("stoploc.city_name", ["that makes a stop in {}", "with a stop in {}"], "city", 0.35),
    "time": ("depart_time.time", ["at {}", "leaving at {}"], "time", 0.4),
    "airline": ("airline_name", ["on {}", "flying {}"], "airline", 0.35),
    "day": ("depart_date.day_name", ["on {}", "next {}"], "day", 0.35),
}
LABEL_NAMES = sorted(s[0] for s in SLOTS.values())
TRAILERS = ["please", "if possible"]


class CorpusError(ValueError):
    """Invalid corpus spec or content; ``field`` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class CorpusSpec:
    n_utterances: int = 500
    n_cities: int = 14
    n_times: int = 8
    n_airlines: int = 6
    intents: list[str] = field(default_factory=lambda: ["flight", "airfare", "airline", "flight_time"])
    frame_dim: int = 16
    frames_per_token_range: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_utterances < 0:
            raise CorpusError("n_utterances", "must be nonnegative")
        for name, limit in (("n_cities", len(CITIES)), ("n_times", len(TIMES)), ("n_airlines", len(AIRLINES))):
            value = getattr(self, name)
            if not 1 <= value <= limit:
                raise CorpusError(name, f"must be in [1, {limit}], got {value}")
        if self.n_cities < 3:
            raise CorpusError("n_cities", "need at least 3 distinct cities for from/to/stop")
        if not self.intents:
            raise CorpusError("intents", "must be nonempty")
        for intent in self.intents:
            if intent not in CARRIERS:
                raise CorpusError("intents", f"unknown intent {intent!r}; known: {sorted(CARRIERS)}")
        if len(set(self.intents)) != len(self.intents):
            raise CorpusError("intents", "duplicate intent names")
        if self.frame_dim < 1:
            raise CorpusError("frame_dim", "must be >= 1")
        lo, hi = self.frames_per_token_range
        if lo < 1 or hi < lo:
            raise CorpusError("frames_per_token_range", f"need 1 <= lo <= hi, got {(lo, hi)}")
        if not self.noise_sigma >= 0:
            raise CorpusError("noise_sigma", "must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise CorpusError("seed", "must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CorpusError(sorted(unknown)[0], "unknown field")
        data = dict(data)
        if "frames_per_token_range" in data:
            data["frames_per_token_range"] = tuple(data["frames_per_token_range"])
        if "intents" in data:
            data["intents"] = list(data["intents"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_token_range"] = list(self.frames_per_token_range)
        return d


class Vocab:
    """Token table: blank, spoken words, entity labels, intents (in that id order)."""

    def __init__(self, spoken: Sequence[str], labels: Sequence[str], intents: Sequence[str], blank: str = BLANK):
        self.tokens = [blank, *spoken, *labels, *intents]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("vocab", "token strings must be unique")
        for lab in labels:
            if not (lab.startswith("B-") or lab.startswith("I-")):
                raise CorpusError("vocab", f"label token {lab!r} lacks B-/I- prefix")
        for it in intents:
            if not it.startswith("INTENT-"):
                raise CorpusError("vocab", f"intent token {it!r} lacks INTENT- prefix")
        self.blank_id = 0
        self.spoken_range = range(1, 1 + len(spoken))
        self.label_range = range(self.spoken_range.stop, self.spoken_range.stop + len(labels))
        self.intent_range = range(self.label_range.stop, self.label_range.stop + len(intents))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.to_dict() == other.to_dict()

    @property
    def spoken_tokens(self) -> list[str]:
        return self.tokens[self.spoken_range.start:self.spoken_range.stop]

    @property
    def label_tokens(self) -> list[str]:
        return self.tokens[self.label_range.start:self.label_range.stop]

    @property
    def intent_tokens(self) -> list[str]:
        return self.tokens[self.intent_range.start:self.intent_range.stop]

    def is_spoken(self, i: int) -> bool:
        return i in self.spoken_range

    def is_label(self, i: int) -> bool:
        return i in self.label_range

    def is_intent(self, i: int) -> bool:
        return i in self.intent_range

    def ids(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise CorpusError("token", f"unknown token {e.args[0]!r}") from None

    def strings(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def b_label(self, name: str) -> int:
        return self.index["B-" + name]

    def i_label(self, name: str) -> int:
        return self.index["I-" + name]

    def intent_id(self, name: str) -> int:
        return self.index["INTENT-" + name]

    def to_dict(self) -> dict:
        return {
            "blank": self.tokens[0],
            "spoken_tokens": self.spoken_tokens,
            "label_tokens": self.label_tokens,
            "intent_tokens": self.intent_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["spoken_tokens"], d["label_tokens"], d["intent_tokens"], blank=d.get("blank", BLANK))


@dataclass(frozen=True)
class EntityAnnotation:
    label_name: str
    start: int
    end: int


@dataclass
class Utterance:
    id: str
    frames: np.ndarray
    transcript: list[int]
    entities: list[EntityAnnotation]
    intent: int
    token_frame_spans: list[tuple[int, int]]

    def validate(self, vocab: Vocab) -> None:
        """Check the type invariants; raise CorpusError on violation."""
        n = len(self.transcript)
        if any(not vocab.is_spoken(t) for t in self.transcript):
            raise CorpusError("transcript", f"{self.id}: non-spoken token id")
        prev_end = 0
        for ent in self.entities:
            if not (prev_end <= ent.start < ent.end <= n):
                raise CorpusError("entities", f"{self.id}: bad or unordered span {ent}")
            if ent.label_name not in LABEL_NAMES:
                raise CorpusError("entities", f"{self.id}: unknown label {ent.label_name}")
            prev_end = ent.end
        if not vocab.is_intent(self.intent):
            raise CorpusError("intent", f"{self.id}: not an intent token")
        if len(self.token_frame_spans) != n:
            raise CorpusError("token_frame_spans", f"{self.id}: one span per token required")
        pos = 0
        for s, e in self.token_frame_spans:
            if s != pos or e <= s:
                raise CorpusError("token_frame_spans", f"{self.id}: spans must tile the frames")
            pos = e
        if pos != self.frames.shape[0]:
            raise CorpusError("frames", f"{self.id}: frame count {self.frames.shape[0]} != span total {pos}")


@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocab
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def subset(self, ids: Iterable[str]) -> "Corpus":
        wanted = set(ids)
        return Corpus(self.spec, self.vocab, [u for u in self.utterances if u.id in wanted])

    def split(self, n_test: int) -> tuple["Corpus", "Corpus"]:
        """Split off the last ``n_test`` utterances as a test set."""
        cut = len(self.utterances) - n_test
        if cut < 0:
            raise CorpusError("n_test", "larger than the corpus")
        return (Corpus(self.spec, self.vocab, self.utterances[:cut]),
                Corpus(self.spec, self.vocab, self.utterances[cut:]))


def _inventory(spec: CorpusSpec) -> dict[str, list[str]]:
    return {
        "city": CITIES[:spec.n_cities],
        "time": TIMES[:spec.n_times],
        "airline": AIRLINES[:spec.n_airlines],
        "day": DAYS,
    }


def build_vocab(spec: CorpusSpec) -> Vocab:
    words: set[str] = set()
    for intent in spec.intents:
        for phrase in CARRIERS[intent]:
            words.update(phrase.split())
    for label, templates, kind, _ in SLOTS.values():
        for tpl in templates:
            words.update(tpl.replace("{}", "").split())
    for fillers in _inventory(spec).values():
        for value in fillers:
            words.update(value.split())
    for phrase in TRAILERS:
        words.update(phrase.split())
    labels = [f"{p}-{name}" for name in LABEL_NAMES for p in ("B", "I")]
    intents = [f"INTENT-{i}" for i in spec.intents]
    return Vocab(sorted(words), labels, intents)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def token_embeddings(spec: CorpusSpec, vocab: Vocab) -> np.ndarray:
    """Unit-norm embedding per vocab id (rows for non-spoken ids are zero)."""
    rng = _rng(spec.seed, 1)
    n = len(vocab.spoken_range)
    emb = rng.standard_normal((n, spec.frame_dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    table = np.zeros((len(vocab), spec.frame_dim))
    table[vocab.spoken_range.start:vocab.spoken_range.stop] = emb
    return table


def render_frames(tokens: Sequence[int], spec: CorpusSpec, rng: np.random.Generator,
                  vocab: Vocab, embeddings: np.ndarray | None = None):
    """Render spoken token ids into ``(frames, token_frame_spans)``."""
    for t in tokens:
        if not vocab.is_spoken(t):
            raise CorpusError("tokens", f"unknown spoken token id {t}")
    if embeddings is None:
        embeddings = token_embeddings(spec, vocab)
    lo, hi = spec.frames_per_token_range
    durations = rng.integers(lo, hi + 1, size=len(tokens))
    ends = np.cumsum(durations)
    spans = [(int(e - d), int(e)) for d, e in zip(durations, ends)]
    T = int(ends[-1]) if len(tokens) else 0
    frames = np.repeat(embeddings[list(tokens)], durations, axis=0).reshape(T, spec.frame_dim)
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
    return frames, spans


def _sample_sentence(intent: str, inv: dict[str, list[str]], rng: np.random.Generator):
    words = rng.choice(CARRIERS[intent]).split()
    slots = [k for k, (_, _, _, p) in SLOTS.items() if rng.random() < p]
    if not slots:
        slots = [rng.choice(["from", "to"])]
    if "airline" in slots and "day" in slots and rng.random() < 0.5:
        slots.remove("day")
    rng.shuffle(slots)
    cities = list(rng.choice(inv["city"], size=3, replace=False))
    entities = []
    for slot in slots:
        label, templates, kind, _ = SLOTS[slot]
        value = cities.pop() if kind == "city" else str(rng.choice(inv[kind]))
        prefix, _, suffix = str(rng.choice(templates)).partition("{}")
        words += prefix.split()
        start = len(words)
        words += value.split()
        entities.append((label, start, len(words)))
        words += suffix.split()
    if rng.random() < 0.2:
        words += str(rng.choice(TRAILERS)).split()
    return words, entities


def generate_utterance(spec: CorpusSpec, vocab: Vocab, index: int, embeddings: np.ndarray) -> Utterance:
    rng = _rng(spec.seed, 2, index)
    inv = _inventory(spec)
    intent = str(rng.choice(spec.intents))
    words, ents = _sample_sentence(intent, inv, rng)
    transcript = vocab.ids(words)
    frames, spans = render_frames(transcript, spec, rng, vocab, embeddings)
    return Utterance(
        id=f"utt{index:05d}",
        frames=frames,
        transcript=transcript,
        entities=[EntityAnnotation(lab, s, e) for lab, s, e in ents],
        intent=vocab.intent_id(intent),
        token_frame_spans=spans,
    )


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Pure function of ``spec``; utterance ``i`` uses RNG stream (seed, i)."""
    spec.validate()
    vocab = build_vocab(spec)
    emb = token_embeddings(spec, vocab)
    utts = [generate_utterance(spec, vocab, i, emb) for i in range(spec.n_utterances)]
    return Corpus(spec, vocab, utts)


def make_noisy(corpus: Corpus, extra_sigma: float, seed: int) -> Corpus:
    """Add independent Gaussian noise of std ``extra_sigma`` to every frame."""
    if not extra_sigma >= 0:
        raise CorpusError("extra_sigma", "must be >= 0")
    out = []
    for u in corpus.utterances:
        rng = _rng(seed, 3, zlib.crc32(u.id.encode()))
        frames = u.frames + extra_sigma * rng.standard_normal(u.frames.shape) if extra_sigma > 0 else u.frames.copy()
        out.append(Utterance(u.id, frames, list(u.transcript), list(u.entities), u.intent, list(u.token_frame_spans)))
    return Corpus(corpus.spec, corpus.vocab, out)


# --- serialization -------------------------------------------------------

def utterance_to_json(u: Utterance, vocab: Vocab) -> dict:
    return {
        "id": u.id,
        "frames": u.frames.tolist(),
        "transcript": vocab.strings(u.transcript),
        "entities": [{"label": e.label_name, "start": e.start, "end": e.end} for e in u.entities],
        "intent": vocab.tokens[u.intent],
        "token_frame_spans": [list(s) for s in u.token_frame_spans],
    }


def utterance_from_json(d: dict, vocab: Vocab, frame_dim: int) -> Utterance:
    frames = np.asarray(d["frames"], dtype=np.float64).reshape(-1, frame_dim)
    u = Utterance(
        id=d["id"],
        frames=frames,
        transcript=vocab.ids(d["transcript"]),
        entities=[EntityAnnotation(e["label"], e["start"], e["end"]) for e in d["entities"]],
        intent=vocab.ids([d["intent"]])[0],
        token_frame_spans=[tuple(s) for s in d["token_frame_spans"]],
    )
    u.validate(vocab)
    return u


def vocab_path_for(corpus_path: Path) -> Path:
    return corpus_path.with_name(corpus_path.stem + ".vocab.json")


def save_corpus(corpus: Corpus, path: str | Path, extra: dict | None = None) -> None:
    """Write ``path`` (JSON lines) plus the ``<stem>.vocab.json`` sidecar.

    ``extra`` maps utterance id to additional per-utterance fields (e.g. targets).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for u in corpus.utterances:
            rec = utterance_to_json(u, corpus.vocab)
            if extra and u.id in extra:
                rec.update(extra[u.id])
            f.write(json.dumps(rec) + "\n")
    side = {"vocab": corpus.vocab.to_dict(), "corpus_spec": corpus.spec.to_dict()}
    vocab_path_for(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    side = json.loads(vocab_path_for(path).read_text())
    spec = CorpusSpec.from_dict(side["corpus_spec"])
    vocab = Vocab.from_dict(side["vocab"])
    with open(path) as f:
        utts = [utterance_from_json(json.loads(line), vocab, spec.frame_dim) for line in f if line.strip()]
    return Corpus(spec, vocab, utts)
