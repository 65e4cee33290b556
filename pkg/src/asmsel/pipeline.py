"""
In-memory wiring of the full method: tokenize, detect stop units, select
segments, train and evaluate the segment classifier.  The CLI persists the
same stages to disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from .asm_init import AsmInventory, AsmSequence, fit_inventory, tokenize_initial
from .classifier import EvalReport, evaluate, train_classifier
from .errors import ContractError
from .features import FeatureConfig, FrameMatrix
from .hmm import GmmHmmSet, train_tokenizer, viterbi_decode
from .selection import SegmentBatch, baseline_segments, select_utterance
from .stop import METRICS, StopAsmSet, collect_stats, score, select_stop_asms

logger = logging.getLogger(__name__)

ENV_PREFIX = "ASMSEL_"


@dataclass(frozen=True)
class PipelineConfig:
    # front-end
    sample_rate: int = 48000
    n_fft: int = 2048
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    log_floor: float = 1e-10
    feature_kind: str = "LMFB"
    n_ceps: int = 20
    # tokenizer
    D: int = 64
    n_segments: int = 50
    seg_len: int = 20
    kmeans_iters: int = 100
    n_states: int = 6
    n_gauss: int = 4
    em_iters: int = 10
    hmm_iters: int = 10
    stability: float = 0.995
    tokenizer: str = "initial"
    # stop units
    metric: str = "SAT"
    P: int = 3
    idf_occurrences: bool = False
    # classifier
    epochs: int = 30
    lr: float = 0.5
    batch_size: int = 256
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.metric.upper() not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "metric", self.metric.upper())
        if self.tokenizer not in ("initial", "hmm"):
            raise ContractError(f"tokenizer must be 'initial' or 'hmm', got {self.tokenizer!r}")
        if self.seg_len < 1 or self.n_segments < 1:
            raise ContractError("seg_len and n_segments must be positive")
        if self.D < 2 or not 0 <= self.P <= self.D:
            raise ContractError(f"need D >= 2 and 0 <= P <= D (D={self.D}, P={self.P})")
        if self.tokenizer == "hmm" and self.seg_len < self.n_states:
            raise ContractError(f"seg_len {self.seg_len} shorter than n_states {self.n_states}")
        self.feature_config()

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.n_fft, self.window_ms, self.hop_ms, self.n_mels, self.log_floor,
                             self.feature_kind, self.n_ceps)

    def fingerprint(self, *names: str) -> str:
        """Hash of the named fields (all fields when none are given)."""
        d = asdict(self)
        if names:
            d = {k: d[k] for k in names}
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            name = key.strip()
            if name not in types:
                raise ContractError(f"unknown config key {name!r}")
            kw[name] = _coerce(name, types[name], raw)
        return cls(**kw)

    @classmethod
    def load(cls, path=None, env=None, **overrides) -> "PipelineConfig":
        """Read ``key = value`` lines, then apply ``ASMSEL_<KEY>`` overrides and kwargs."""
        values = {}
        if path is not None:
            values.update(parse_config_text(Path(path).read_text()))
        env = os.environ if env is None else env
        names = {f.name.upper(): f.name for f in fields(cls)}
        for key, raw in env.items():
            if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):] in names:
                values[names[key[len(ENV_PREFIX):]]] = raw
        cfg = cls.from_mapping(values)
        return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(name, typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ContractError(f"config key {name}: cannot parse {raw!r} as {typ}") from None
    return raw


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def initial_tokenization(train: Sequence[FrameMatrix], cfg: PipelineConfig,
                         others: Sequence[FrameMatrix] = ()):
    inv = fit_inventory(train, cfg.D, cfg.seed, cfg.n_segments, cfg.seg_len,
                        max_iters=cfg.kmeans_iters)
    seqs = [tokenize_initial(fm, inv, cfg.n_segments, cfg.seg_len) for fm in list(train) + list(others)]
    return inv, seqs


def hmm_tokenization(train: Sequence[FrameMatrix], train_init: Sequence[AsmSequence],
                     cfg: PipelineConfig, others: Sequence[FrameMatrix] = ()):
    models, train_seqs, trace = train_tokenizer(
        train, train_init, cfg.D, cfg.n_states, cfg.n_gauss, cfg.hmm_iters, cfg.stability,
        cfg.em_iters, cfg.seed)
    other_seqs = [viterbi_decode(fm, models).sequence for fm in others]
    return models, list(train_seqs) + other_seqs, trace


def stop_units(train_seqs: Sequence[AsmSequence], cfg: PipelineConfig, metric: str | None = None) -> StopAsmSet:
    metric = (metric or cfg.metric).upper()
    stats = collect_stats(train_seqs, cfg.D)
    kw = {"use_occurrences": cfg.idf_occurrences} if metric == "IDF" else {}
    return select_stop_asms(score(stats, metric, **kw), metric, cfg.P)


def make_batches(utts: Sequence[FrameMatrix], seqs: Sequence[AsmSequence] | None,
                 stop: StopAsmSet | None, labels: Sequence[int], seg_len: int) -> list[SegmentBatch]:
    """Selected segments, or whole-utterance segments when ``stop`` is None."""
    out = []
    for i, fm in enumerate(utts):
        if stop is None:
            batch = baseline_segments(fm, seg_len)
            batch.label = labels[i]
        else:
            batch = select_utterance(fm, seqs[i], stop.selected, seg_len, labels[i])
        out.append(batch)
    return out


def train_and_evaluate(train_batches, test_batches, n_classes: int, cfg: PipelineConfig,
                       classes=None):
    model = train_classifier(train_batches, n_classes, cfg.epochs, cfg.lr, cfg.seed,
                             cfg.batch_size, cfg.l2, classes)
    return model, evaluate(test_batches, model, classes=classes)


@dataclass
class ExperimentResult:
    baseline: EvalReport
    selected: dict[str, EvalReport]
    stop_sets: dict[str, StopAsmSet]
    train_seqs: list[AsmSequence] = field(repr=False, default_factory=list)
    test_seqs: list[AsmSequence] = field(repr=False, default_factory=list)
    inventory: AsmInventory | None = field(repr=False, default=None)
    models: GmmHmmSet | None = field(repr=False, default=None)

    def accuracies(self) -> dict[str, float]:
        out = {"baseline": self.baseline.accuracy}
        out.update({m: r.accuracy for m, r in self.selected.items()})
        return out


def run_experiment(train: Sequence[FrameMatrix], train_labels: Sequence[int],
                   test: Sequence[FrameMatrix], test_labels: Sequence[int], n_classes: int,
                   cfg: PipelineConfig, metrics: Sequence[str] = METRICS,
                   classes=None) -> ExperimentResult:
    """Baseline and per-metric selected accuracies on one train/test split."""
    inv, seqs = initial_tokenization(train, cfg, test)
    models = None
    if cfg.tokenizer == "hmm":
        models, seqs, _ = hmm_tokenization(train, seqs[:len(train)], cfg, test)
    train_seqs, test_seqs = seqs[:len(train)], seqs[len(train):]

    base_tr = make_batches(train, None, None, train_labels, cfg.seg_len)
    base_te = make_batches(test, None, None, test_labels, cfg.seg_len)
    _, baseline = train_and_evaluate(base_tr, base_te, n_classes, cfg, classes)

    selected, stops = {}, {}
    for metric in metrics:
        stop = stop_units(train_seqs, cfg, metric)
        tr = make_batches(train, train_seqs, stop, train_labels, cfg.seg_len)
        te = make_batches(test, test_seqs, stop, test_labels, cfg.seg_len)
        _, selected[stop.metric] = train_and_evaluate(tr, te, n_classes, cfg, classes)
        stops[stop.metric] = stop
        logger.info("%s stop units %s: accuracy %.4f", stop.metric, stop.selected,
                    selected[stop.metric].accuracy)
    return ExperimentResult(baseline, selected, stops, train_seqs, test_seqs, inv, models)
