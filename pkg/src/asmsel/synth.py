"""
Synthetic labeled scene corpora with planted class-specific event units and
class-independent filler units.

Frames are generated directly in feature space: every unit has a prototype
vector, and a unit occurrence emits a run of prototype-plus-Gaussian-noise
frames.  An optional waveform mode renders each unit as a sinusoid mixture so
the audio front-end can be exercised end to end.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .asm_init import AsmSequence
from .errors import ContractError
from .features import FeatureConfig, FrameMatrix, Waveform, compute_features


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    n_event_units: int = 2
    n_filler_units: int = 3
    dim: int = 16
    noise: float = 1.0
    spread: float = 3.0
    instance_spread: float = 0.0
    min_separation: float = 4.0
    units_per_utterance: int = 50
    span_range: tuple[int, int] = (15, 25)
    filler_rate: float = 0.5
    n_train: int = 200
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.filler_rate < 1.0:
            raise ContractError(f"filler_rate must be strictly between 0 and 1, got {self.filler_rate}")
        if self.n_classes < 2 or self.n_event_units < 1 or self.n_filler_units < 1:
            raise ContractError("need >= 2 classes, >= 1 event unit per class and >= 1 filler unit")
        lo, hi = self.span_range
        if not 1 <= lo <= hi:
            raise ContractError(f"bad span_range {self.span_range}")
        if self.units_per_utterance < 1 or self.n_train < 1 or self.n_test < 0:
            raise ContractError("utterance length and split sizes must be positive")
        if self.noise <= 0 or self.dim < 1:
            raise ContractError("noise and dim must be positive")

    @property
    def n_units(self) -> int:
        return self.n_classes * self.n_event_units + self.n_filler_units

    def event_ids(self, c: int) -> list[int]:
        return list(range(c * self.n_event_units, (c + 1) * self.n_event_units))

    @property
    def filler_ids(self) -> list[int]:
        start = self.n_classes * self.n_event_units
        return list(range(start, start + self.n_filler_units))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["span_range"] = list(self.span_range)
        return d


@dataclass
class SynthCorpus:
    spec: SynthSpec
    prototypes: np.ndarray
    utterances: list[FrameMatrix]
    labels: list[int]
    splits: list[str]
    truth: list[AsmSequence]
    filler_ids: list[int] = field(default_factory=list)

    def split(self, name: str):
        idx = [i for i, s in enumerate(self.splits) if s == name]
        return ([self.utterances[i] for i in idx], [self.labels[i] for i in idx],
                [self.truth[i] for i in idx])

    @property
    def class_names(self) -> list[str]:
        return [f"scene{c}" for c in range(self.spec.n_classes)]


def make_prototypes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit mean vectors, pairwise at least ``min_separation * noise`` apart."""
    need = spec.min_separation * spec.noise
    protos = []
    for _ in range(10000):
        cand = rng.normal(0.0, spec.spread * spec.noise, spec.dim)
        if all(np.linalg.norm(cand - p) >= need for p in protos):
            protos.append(cand)
            if len(protos) == spec.n_units:
                return np.array(protos)
    raise ContractError("could not place well separated prototypes; raise spread or dim")


def _unit_plan(spec: SynthSpec, label: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    events = spec.event_ids(label)
    fillers = spec.filler_ids
    lo, hi = spec.span_range
    plan = []
    for _ in range(spec.units_per_utterance):
        if rng.random() < spec.filler_rate:
            unit = fillers[rng.integers(len(fillers))]
        else:
            unit = events[rng.integers(len(events))]
        plan.append((unit, int(rng.integers(lo, hi + 1))))
    return plan


def _plans(spec: SynthSpec):
    """Per-utterance (id, split, label, plan, rng), all derived from ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    proto_seq, *utt_seqs = root.spawn(1 + spec.n_train + spec.n_test)
    prototypes = make_prototypes(spec, np.random.default_rng(proto_seq))
    out = []
    for i, ss in enumerate(utt_seqs):
        rng = np.random.default_rng(ss)
        split = "train" if i < spec.n_train else "test"
        label = i % spec.n_classes
        uid = f"{split}_{i:05d}"
        out.append((uid, split, label, _unit_plan(spec, label, rng), rng))
    return prototypes, out


def _plan_tokens(plan):
    tokens, pos = [], 0
    for unit, length in plan:
        tokens.append((unit, pos, pos + length))
        pos += length
    return tokens


def generate_corpus(spec: SynthSpec, fingerprint: str = "synth") -> SynthCorpus:
    """Feature-space corpus; classes are assigned round-robin so splits are balanced."""
    prototypes, plans = _plans(spec)
    utts, labels, splits, truth = [], [], [], []
    for uid, split, label, plan, rng in plans:
        tokens = _plan_tokens(plan)
        frames = np.concatenate([
            prototypes[u] + spec.instance_spread * spec.noise * rng.standard_normal(spec.dim)
            + spec.noise * rng.standard_normal((e - s, spec.dim))
            for u, s, e in tokens])
        utts.append(FrameMatrix(frames, fingerprint, uid))
        labels.append(label)
        splits.append(split)
        truth.append(AsmSequence(uid, tokens))
    return SynthCorpus(spec, prototypes, utts, labels, splits, truth, spec.filler_ids)


def _tone_bank(spec: SynthSpec, sample_rate: int, rng: np.random.Generator, n_tones: int = 3):
    nyq = sample_rate / 2.0
    freqs = rng.uniform(0.03 * nyq, 0.8 * nyq, (spec.n_units, n_tones))
    amps = rng.uniform(0.05, 0.25, (spec.n_units, n_tones))
    return freqs, amps


def generate_waveforms(spec: SynthSpec, sample_rate: int = 16000, hop_ms: float = 10.0,
                       noise_level: float = 0.01):
    """Render every utterance as audio: each unit is a fixed sinusoid mixture.

    Unit spans are counted in hops, so ``span`` frames of a unit last
    ``span * hop`` samples.  Returns ``(waveforms, labels, splits, truth)``;
    truth spans are in hop units and only approximate the analysis frames.
    """
    _, plans = _plans(spec)
    freqs, amps = _tone_bank(spec, sample_rate, np.random.default_rng([spec.seed, 1]))
    hop = int(round(hop_ms * 1e-3 * sample_rate))
    waves, labels, splits, truth = [], [], [], []
    for uid, split, label, plan, rng in plans:
        tokens = _plan_tokens(plan)
        chunks = []
        for u, s, e in tokens:
            t = np.arange((e - s) * hop) / sample_rate
            phase = rng.uniform(0, 2 * np.pi, freqs.shape[1])
            x = (amps[u, :, None] * np.sin(2 * np.pi * freqs[u, :, None] * t + phase[:, None])).sum(0)
            chunks.append(x + noise_level * rng.standard_normal(len(t)))
        # trailing pad so the final frame's window fits
        chunks.append(np.zeros(hop * 2))
        waves.append((uid, Waveform(np.clip(np.concatenate(chunks), -1, 1), sample_rate)))
        labels.append(label)
        splits.append(split)
        truth.append(AsmSequence(uid, tokens))
    return waves, labels, splits, truth


def waveform_corpus(spec: SynthSpec, cfg: FeatureConfig, sample_rate: int = 16000) -> SynthCorpus:
    """Waveform-mode corpus pushed through :func:`compute_features`."""
    waves, labels, splits, truth = generate_waveforms(spec, sample_rate, cfg.hop_ms)
    utts = [compute_features(w, cfg, uid) for uid, w in waves]
    return SynthCorpus(spec, np.zeros((spec.n_units, cfg.dim)), utts, labels, splits, truth,
                       spec.filler_ids)
