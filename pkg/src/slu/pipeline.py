"""Experiment grid: row definitions, a content-addressed artifact store, runners.

Every row starts from a per-family ASR model trained on word-only transcripts
of a disjoint utterance split, then adapts it to SLU targets. Artifacts are
keyed by a hash of everything that determines them, so rows share work (the
alphabetic-order attention model of row 3 is also the aligner of rows 6/7)
and a cold rerun reproduces a warm one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from filelock import FileLock

from .align import (GaussianScorer, alignment_error, attention_align, estimated_order, hmm_phrase_times,
                    reorder_by_time, true_phrase_times)
from .attn_model import AttnConfig, AttnModel, load_attn, save_attn, train_attn
from .corpus import Corpus, CorpusSpec, Vocab, generate_corpus, load_corpus, make_noisy, save_corpus, token_embeddings
from .evaluation import ScoreReport, score_predictions
from .rnnt_model import RnntConfig, load_rnnt, save_rnnt, train_rnnt
from .targets import TargetSequence, epoch_targets, make_target, parse_target

log = logging.getLogger(__name__)

FAMILIES = ("rnnt", "attn")
CONDITIONS = {"c": "clean", "n": "noisy"}
CSV_COLUMNS = ["row", "model", "condition", "f1", "intent", "wer", "alignment_error", "status"]


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing and automatic building is off."""

    def __init__(self, row: str, family: str, needed_by: str):
        super().__init__(f"row {row} ({family}) must be built before {needed_by}; "
                         f"run it first or allow automatic dependency builds")
        self.row = row
        self.family = family


# --- configuration -----------------------------------------------------------

@dataclass
class PipelineConfig:
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(n_utterances=1000, seed=1))
    n_asr: int = 300                  # leading utterances used only for ASR pretraining
    n_test: int = 100                 # trailing utterances held out for scoring
    noisy_sigma: float = 0.5          # total per-dimension frame noise of the noisy condition
    noise_seed: int = 7
    asr_epochs: int = 15
    pretrain_epochs: int = 5
    finetune_epochs: int = 5
    rnnt: RnntConfig = field(default_factory=RnntConfig)
    attn: AttnConfig = field(default_factory=AttnConfig)
    hmm_keyword_sigma: float | None = None   # None: the clean corpus sigma (an unadapted model)
    hmm_garbage_sigma: float = 1.0
    decode_max_len: int = 60
    seed: int = 0

    def validate(self) -> None:
        self.corpus.validate()
        self.rnnt.validate()
        self.attn.validate()
        if self.n_asr < 1 or self.n_test < 1:
            raise ValueError("n_asr and n_test must be >= 1")
        if self.corpus.n_utterances - self.n_asr - self.n_test < 1:
            raise ValueError("corpus too small for the ASR and test splits")
        if self.noisy_sigma < self.corpus.noise_sigma:
            raise ValueError("noisy_sigma must be >= corpus.noise_sigma")
        for name in ("asr_epochs", "pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.decode_max_len < 1:
            raise ValueError("decode_max_len must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"] = self.corpus.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline config field {sorted(unknown)[0]!r}")
        data = dict(data)
        if "corpus" in data:
            data["corpus"] = CorpusSpec.from_dict({**CorpusSpec(n_utterances=1000, seed=1).to_dict(),
                                                   **data["corpus"]})
        for name, typ in (("rnnt", RnntConfig), ("attn", AttnConfig)):
            if name in data:
                allowed = {f.name for f in fields(typ)}
                bad = set(data[name]) - allowed
                if bad:
                    raise ValueError(f"unknown {name} config field {sorted(bad)[0]!r}")
                data[name] = typ(**data[name])
        return cls(**data)

    def family_config(self, family: str):
        return {"rnnt": self.rnnt, "attn": self.attn}[family]


# --- rows ------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseSpec:
    phase: str      # "train" (single phase), "pretrain" or "finetune"
    target: str     # full | spoken | alphabetic | random | aligned
    epochs: int


@dataclass(frozen=True)
class ExperimentSpec:
    row: str
    family: str                     # rnnt | attn; alignment-only rows use hmm | attn
    condition: str                  # clean | noisy
    recipe: tuple[PhaseSpec, ...]
    alignment: str | None           # None | hmm | attn
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RowDef:
    label: str
    recipe: tuple[tuple[str, str], ...]   # (phase, target); epochs come from the config
    alignment: str | None = None


ROWS: dict[str, RowDef] = {
    "1": RowDef("Full transcripts", (("train", "full"),)),
    "2": RowDef("Entities, spoken order", (("train", "spoken"),)),
    "3": RowDef("Entities, alphabetic order", (("train", "alphabetic"),)),
    "4": RowDef("Random order augmentation", (("pretrain", "random"), ("finetune", "alphabetic"))),
    "4-control": RowDef("Control: alphabetic order in both pre-training and fine-tuning",
                        (("pretrain", "alphabetic"), ("finetune", "alphabetic"))),
    "5": RowDef("Spoken order alignment-H", (("train", "aligned"),), "hmm"),
    "6": RowDef("Spoken order alignment-A", (("train", "aligned"),), "attn"),
    "7": RowDef("+ Random order augmentation", (("pretrain", "random"), ("finetune", "aligned")), "attn"),
    "align-H": RowDef("Entity alignment error, keyword HMM", (), "hmm"),
    "align-A": RowDef("Entity alignment error, attention (aligner is attention row 3)", (), "attn"),
}

_ROW_RE = re.compile(r"^(?:(?P<num>[1-7])(?P<c1>[cn])(?P<ctl>-control)?|(?P<al>align-[HA])(?P<c2>[cn]))$")


def parse_row(row: str) -> tuple[str, str]:
    """Row id -> (ROWS key, condition). ``4-control`` is the clean control; ``4n-control`` the noisy one."""
    if row == "4-control":
        return "4-control", "clean"
    m = _ROW_RE.match(row)
    if not m or (m["ctl"] and m["num"] != "4"):
        raise ValueError(f"unknown row {row!r}; expected e.g. 3c, 7n, 4-control, align-Hn")
    if m["al"]:
        return m["al"], CONDITIONS[m["c2"]]
    return ("4-control" if m["ctl"] else m["num"]), CONDITIONS[m["c1"]]


def experiment_spec(row: str, family: str, config: PipelineConfig, seed: int | None = None) -> ExperimentSpec:
    key, condition = parse_row(row)
    rd = ROWS[key]
    if key.startswith("align-"):
        family = rd.alignment
    elif family not in FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    total = config.pretrain_epochs + config.finetune_epochs
    budget = {"train": total, "pretrain": config.pretrain_epochs, "finetune": config.finetune_epochs}
    recipe = tuple(PhaseSpec(p, t, budget[p]) for p, t in rd.recipe)
    return ExperimentSpec(row, family, condition, recipe, rd.alignment, config.seed if seed is None else seed)


def default_grid(config: PipelineConfig) -> list[ExperimentSpec]:
    """Clean rows 1-7 and the control for both families, plus the noisy alignment comparison."""
    clean = ["1c", "2c", "3c", "4c", "4-control", "5c", "6c", "7c"]
    specs = [experiment_spec(r, f, config) for f in FAMILIES for r in clean]
    specs.append(experiment_spec("3n", "attn", config))
    specs += [experiment_spec(r, "", config) for r in ("align-Hc", "align-Ac", "align-Hn", "align-An")]
    return specs


def explain(specs: Sequence[ExperimentSpec]) -> str:
    lines = []
    for s in specs:
        key, _ = parse_row(s.row)
        steps = ["asr-pretrained init"] if s.recipe else []
        for p in s.recipe:
            if p.target == "aligned":
                steps.append(f"align({s.alignment})")
            steps.append(f"{p.phase}({p.target}, {p.epochs} ep)")
        if not s.recipe:
            steps.append(f"align({s.alignment})")
        lines.append(f"[{s.row}] {s.family:<4} {s.condition:<5} {ROWS[key].label}: " + " -> ".join(steps))
    return "\n".join(lines)


# --- artifact store ----------------------------------------------------------

def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


class ArtifactStore:
    """Directories ``<root>/<kind>-<hash>``; a ``DONE`` marker makes one visible.

    Builds run into a temporary directory under a per-key file lock, so
    concurrent processes never build the same artifact twice.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.root / key

    def exists(self, key: str) -> bool:
        return (self.path(key) / "DONE").exists()

    def build(self, key: str, builder: Callable[[Path], None], inputs: dict) -> Path:
        final = self.path(key)
        with FileLock(str(self.root / f"{key}.lock")):
            if self.exists(key):
                return final
            tmp = self.root / f"{key}.tmp"
            shutil.rmtree(tmp, ignore_errors=True)
            tmp.mkdir()
            (tmp / "inputs.json").write_text(json.dumps(inputs, indent=1, sort_keys=True) + "\n")
            builder(tmp)
            (tmp / "DONE").write_text("")
            shutil.rmtree(final, ignore_errors=True)
            os.replace(tmp, final)
        return final


@dataclass
class Splits:
    asr: Corpus | None
    train: Corpus
    test: Corpus


@dataclass
class RunRecord:
    spec: ExperimentSpec
    input_hash: str
    metrics: ScoreReport | None
    alignment: dict | None
    wall_time: float
    artifacts: dict[str, str]
    status: str = "ok"

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "input_hash": self.input_hash,
                "metrics": self.metrics.to_dict() if self.metrics else None, "alignment": self.alignment,
                "wall_time": self.wall_time, "artifacts": self.artifacts, "status": self.status}


# family -> (train, save, load)
FAMILY_IO = {"rnnt": (train_rnnt, save_rnnt, load_rnnt), "attn": (train_attn, save_attn, load_attn)}


def write_targets(path: Path, ids: Sequence[str], targets: Sequence[Sequence[int]], vocab: Vocab,
                   extra: Sequence[dict] | None = None) -> None:
    with open(path, "w") as f:
        for k, (i, t) in enumerate(zip(ids, targets)):
            rec = {"id": i, "symbols": vocab.strings(t)}
            if extra:
                rec.update(extra[k])
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_targets(path: str | Path, vocab: Vocab) -> dict[str, list[int]]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = vocab.ids(rec["symbols"])
    return out


class Pipeline:
    """Resolves and builds the artifacts behind experiment rows."""

    def __init__(self, config: PipelineConfig, out_dir: str | Path, auto: bool = True):
        config.validate()
        self.config = config
        self.out_dir = Path(out_dir)
        self.store = ArtifactStore(self.out_dir / "store")
        self.auto = auto
        self._splits: dict[str, Splits] = {}
        self._models: dict[str, object] = {}

    # data
    def data_inputs(self, condition: str) -> dict:
        c = self.config
        d = {"kind": "data", "corpus": c.corpus.to_dict(), "n_asr": c.n_asr, "n_test": c.n_test}
        if condition == "noisy":
            d.update(noisy_sigma=c.noisy_sigma, noise_seed=c.noise_seed)
        return d

    def data_key(self, condition: str) -> str:
        return f"data-{condition}-{content_hash(self.data_inputs(condition))}"

    def splits(self, condition: str) -> Splits:
        key = self.data_key(condition)
        if key in self._splits:
            return self._splits[key]
        c = self.config

        def build(d: Path) -> None:
            full = generate_corpus(c.corpus)
            rest = Corpus(full.spec, full.vocab, full.utterances[c.n_asr:])
            if condition == "noisy":
                extra = math.sqrt(c.noisy_sigma ** 2 - c.corpus.noise_sigma ** 2)
                rest = make_noisy(rest, extra, c.noise_seed)
            else:
                save_corpus(Corpus(full.spec, full.vocab, full.utterances[:c.n_asr]), d / "asr.jsonl")
            train, test = rest.split(c.n_test)
            save_corpus(train, d / "train.jsonl")
            save_corpus(test, d / "test.jsonl")

        path = self.store.build(key, build, self.data_inputs(condition))
        asr = load_corpus(path / "asr.jsonl") if (path / "asr.jsonl").exists() else None
        out = Splits(asr, load_corpus(path / "train.jsonl"), load_corpus(path / "test.jsonl"))
        self._splits[key] = out
        return out

    # models
    def _family_config(self, family: str, seed: int, epochs: int):
        return replace(self.config.family_config(family), seed=seed, epochs=epochs)

    def asr_key(self, family: str, seed: int) -> tuple[str, dict]:
        inputs = {"kind": "asr", "family": family, "data": self.data_key("clean"),
                  "config": asdict(self._family_config(family, seed, self.config.asr_epochs))}
        return f"asr-{family}-{content_hash(inputs)}", inputs

    def asr_model(self, family: str, seed: int, needed_by: str):
        key, inputs = self.asr_key(family, seed)
        if not self.store.exists(key) and not self.auto:
            raise DependencyError("asr", family, needed_by)

        def build(d: Path) -> None:
            asr = self.splits("clean").asr
            vocab = Vocab(asr.vocab.spoken_tokens, [], [])
            assert vocab.tokens == asr.vocab.tokens[:len(vocab)]  # spoken ids are shared
            corpus = Corpus(asr.spec, vocab, asr.utterances)
            targets = [TargetSequence(list(u.transcript), "full") for u in corpus.utterances]
            train, save, _ = FAMILY_IO[family]
            model, trace = train(corpus, lambda epoch: targets, self._family_config(family, seed,
                                                                                    self.config.asr_epochs))
            save(model, d / "model.json", {"trace": trace})

        return self._load(family, self.store.build(key, build, inputs) / "model.json")

    def _load(self, family: str, path: Path):
        p = str(path)
        if p not in self._models:
            self._models[p] = FAMILY_IO[family][2](path)
        return self._models[p]

    def phase_keys(self, spec: ExperimentSpec) -> list[tuple[str, dict]]:
        """Artifact key of the model produced by each recipe phase."""
        parent, _ = self.asr_key(spec.family, spec.seed)
        out = []
        for k, ph in enumerate(spec.recipe):
            inputs = {"kind": "model", "family": spec.family, "init": parent,
                      "data": self.data_key(spec.condition), "phase": asdict(ph),
                      "config": asdict(self._family_config(spec.family, spec.seed, ph.epochs))}
            if ph.target == "aligned":
                inputs["aligned"] = self.aligned_key(spec)[0]
            if ph.target == "random":
                inputs["augment_seed"] = spec.seed
            key = f"model-{spec.family}-{content_hash(inputs)}"
            out.append((key, inputs))
            parent = key
        return out

    def _aligner_spec(self, spec: ExperimentSpec) -> ExperimentSpec:
        return experiment_spec("3" + spec.condition[0], "attn", self.config, spec.seed)

    def aligned_key(self, spec: ExperimentSpec) -> tuple[str, dict]:
        c = self.config
        inputs = {"kind": "aligned", "method": spec.alignment, "data": self.data_key(spec.condition)}
        if spec.alignment == "attn":
            inputs["aligner"] = self.phase_keys(self._aligner_spec(spec))[-1][0]
        else:
            inputs["scorer"] = {"keyword_sigma": c.hmm_keyword_sigma or c.corpus.noise_sigma,
                                "garbage_sigma": c.hmm_garbage_sigma}
        return f"aligned-{spec.alignment}-{content_hash(inputs)}", inputs

    def aligned_targets(self, spec: ExperimentSpec) -> tuple[Path, dict]:
        key, inputs = self.aligned_key(spec)
        if spec.alignment == "attn" and not self.store.exists(key):
            aligner = self._aligner_spec(spec)
            if not self.store.exists(inputs["aligner"]) and not self.auto:
                raise DependencyError(aligner.row, "attn", f"row {spec.row} ({spec.family})")

        def build(d: Path) -> None:
            train = self.splits(spec.condition).train
            vocab = train.vocab
            if spec.alignment == "attn":
                model = self.final_model(self._aligner_spec(spec))
                alphas = _forced_attention_all(model, train)
            else:
                s = inputs["scorer"]
                scorer = GaussianScorer(token_embeddings(train.spec, vocab), s["keyword_sigma"],
                                        s["garbage_sigma"], vocab.spoken_range)
            targets, est, true, extra = [], [], [], []
            for k, u in enumerate(train.utterances):
                parsed = parse_target(make_target(u, "alphabetic", vocab).symbols, vocab)
                if spec.alignment == "attn":
                    times = attention_align(alphas[k], parsed)
                else:
                    times = hmm_phrase_times(u.frames, parsed, scorer)
                targets.append(reorder_by_time(parsed, times, vocab).symbols)
                est.append(estimated_order(times))
                true.append(estimated_order(true_phrase_times(u, parsed)))
                extra.append({"estimated_order": est[-1], "true_order": true[-1]})
            write_targets(d / "targets.jsonl", [u.id for u in train.utterances], targets, vocab, extra)
            report = {"method": spec.alignment, **alignment_error(est, true)}
            (d / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")

        path = self.store.build(key, build, inputs)
        return path / "targets.jsonl", json.loads((path / "report.json").read_text())

    def _provider(self, spec: ExperimentSpec, ph: PhaseSpec, train: Corpus):
        vocab = train.vocab
        if ph.target == "random":
            return lambda epoch: epoch_targets(train, "pretrain", epoch, spec.seed)
        if ph.target == "aligned":
            by_id = read_targets(self.aligned_targets(spec)[0], vocab)
            fixed = [TargetSequence(by_id[u.id], "spoken-estimated") for u in train.utterances]
        else:
            fixed = [make_target(u, ph.target, vocab) for u in train.utterances]
        return lambda epoch: fixed

    def final_model(self, spec: ExperimentSpec):
        if not spec.recipe:
            raise ValueError(f"row {spec.row} trains no model")
        init = self.asr_model(spec.family, spec.seed, f"row {spec.row} ({spec.family})")
        train = self.splits(spec.condition).train
        path = None
        for ph, (key, inputs) in zip(spec.recipe, self.phase_keys(spec)):
            def build(d: Path, ph=ph, init=init) -> None:
                fit, save, _ = FAMILY_IO[spec.family]
                model, trace = fit(train, self._provider(spec, ph, train),
                                   self._family_config(spec.family, spec.seed, ph.epochs), init=init)
                save(model, d / "model.json", {"trace": trace})

            path = self.store.build(key, build, inputs) / "model.json"
            init = self._load(spec.family, path)
        return init

    # rows
    def record_key(self, spec: ExperimentSpec) -> tuple[str, dict]:
        inputs = {"kind": "run", "spec": spec.to_dict(), "test": self.data_key(spec.condition),
                  "decode_max_len": self.config.decode_max_len}
        if spec.recipe:
            inputs["model"] = self.phase_keys(spec)[-1][0]
        if spec.alignment:
            inputs["aligned"] = self.aligned_key(spec)[0]
        return f"run-{spec.row}-{spec.family}-{content_hash(inputs)}", inputs

    def run(self, spec: ExperimentSpec) -> RunRecord:
        start = time.perf_counter()
        key, inputs = self.record_key(spec)

        def build(d: Path) -> None:
            doc = {"spec": spec.to_dict(), "metrics": None, "alignment": None}
            if spec.alignment:
                doc["alignment"] = self.aligned_targets(spec)[1]
            if spec.recipe:
                model = self.final_model(spec)
                test = self.splits(spec.condition).test
                preds = decode_all(model, test, self.config.decode_max_len)
                write_targets(d / "predictions.jsonl", [u.id for u in test.utterances],
                               [preds[u.id] for u in test.utterances], test.vocab)
                doc["metrics"] = score_predictions(preds, test).to_dict()
            (d / "record.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

        path = self.store.build(key, build, inputs)
        doc = json.loads((path / "record.json").read_text())
        artifacts = {"record": str(path)}
        if spec.recipe:
            artifacts["model"] = str(self.store.path(self.phase_keys(spec)[-1][0]) / "model.json")
        if spec.alignment:
            artifacts["aligned"] = str(self.store.path(self.aligned_key(spec)[0]))
        metrics = ScoreReport(**doc["metrics"]) if doc["metrics"] else None
        return RunRecord(spec, key.rsplit("-", 1)[1], metrics, doc["alignment"],
                         time.perf_counter() - start, artifacts)


def _forced_attention_all(model: AttnModel, corpus: Corpus, batch: int = 32) -> list[np.ndarray]:
    model.eval()
    targets = [make_target(u, "alphabetic", corpus.vocab).symbols for u in corpus.utterances]
    out = []
    for i in range(0, len(targets), batch):
        out += model.forced_attention_batch([u.frames for u in corpus.utterances[i:i + batch]],
                                            targets[i:i + batch])
    return out


def decode_all(model, corpus: Corpus, max_len: int = 60, batch: int = 32) -> dict[str, list[int]]:
    """Greedy decodes keyed by utterance id, for either family."""
    model.eval()
    utts = corpus.utterances
    if isinstance(model, AttnModel):
        out = {}
        for i in range(0, len(utts), batch):
            res = model.decode_batch([u.frames for u in utts[i:i + batch]], max_len)
            out.update({u.id: r.symbols for u, r in zip(utts[i:i + batch], res)})
        return out
    return {u.id: model.greedy_decode(u.frames) for u in utts}


# --- entry points --------------------------------------------------------------

def run_experiment(spec: ExperimentSpec, config: PipelineConfig, out_dir: str | Path,
                   auto: bool = True) -> RunRecord:
    torch.set_num_threads(1)
    return Pipeline(config, out_dir, auto).run(spec)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _grid_worker(args) -> RunRecord | str:
    spec, config, out_dir, auto = args
    try:
        return run_experiment(spec, config, out_dir, auto)
    except Exception as e:  # recorded in the table, not fatal to the grid
        log.exception("row %s (%s) failed", spec.row, spec.family)
        return f"failed: {type(e).__name__}: {e}"


def results_table(specs: Sequence[ExperimentSpec], results: Sequence[RunRecord | str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for spec, r in zip(specs, results):
        if isinstance(r, str):
            w.writerow([spec.row, spec.family, spec.condition, "", "", "", "", r])
            continue
        m = r.metrics
        al = r.alignment["entity_error_rate"] if r.alignment else None
        w.writerow([spec.row, spec.family, spec.condition, _fmt(m and m.f1), _fmt(m and m.intent_accuracy),
                    _fmt(m and m.wer), _fmt(al), r.status])
    return buf.getvalue()


def run_grid(specs: Sequence[ExperimentSpec], config: PipelineConfig, out_dir: str | Path,
             auto: bool = True, jobs: int = 1) -> tuple[str, list[RunRecord | str]]:
    """Run ``specs``; writes ``results.csv`` and ``results.json`` under ``out_dir``.

    A failing row gets a ``failed: ...`` status and the grid carries on. The
    CSV holds only quantities determined by the inputs, so reruns match byte
    for byte; wall times and paths go to the JSON.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.validate()
    args = [(s, config, out_dir, auto) for s in specs]
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_grid_worker, args))
    else:
        results = [_grid_worker(a) for a in args]
    table = results_table(specs, results)
    (out_dir / "results.csv").write_text(table)
    doc = [r.to_dict() if not isinstance(r, str) else {"spec": s.to_dict(), "status": r}
           for s, r in zip(specs, results)]
    (out_dir / "results.json").write_text(json.dumps({"config": config.to_dict(), "rows": doc}, indent=1) + "\n")
    return table, results
