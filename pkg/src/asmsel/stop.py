"""Stop-unit detection from unit occurrence statistics of the training set."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .asm_init import AsmSequence
from .errors import ContractError

METRICS = ("MP", "IDF", "VP", "SAT")
# True when a high score marks a stop unit.
DESCENDING = {"MP": True, "IDF": False, "VP": False, "SAT": True}


@dataclass
class TokenStats:
    """Per-utterance unit probabilities and corpus counts.

    ``prob[i, j]`` is the count of unit ``j`` in utterance ``i`` divided by
    the utterance's token count.
    """

    prob: np.ndarray       # (N, D)
    doc_freq: np.ndarray   # (D,) utterances containing the unit
    occ_count: np.ndarray  # (D,) total occurrences

    @property
    def n_utterances(self) -> int:
        return self.prob.shape[0]

    @property
    def n_units(self) -> int:
        return self.prob.shape[1]


@dataclass
class StopAsmSet:
    metric: str
    scores: np.ndarray
    selected: list[int]

    @property
    def P(self) -> int:
        return len(self.selected)

    def __contains__(self, unit):
        return unit in self.selected

    def ranking(self) -> list[int]:
        return rank_units(self.scores, self.metric)

    @classmethod
    def empty(cls, n_units: int, metric: str = "SAT"):
        return cls(metric, np.zeros(n_units), [])


def collect_stats(seqs: Sequence[AsmSequence], D: int) -> TokenStats:
    if not seqs:
        raise ContractError("cannot collect unit statistics from an empty corpus")
    counts = np.zeros((len(seqs), D))
    for i, seq in enumerate(seqs):
        if len(seq) == 0:
            raise ContractError(f"{seq.utterance_id}: utterance has no tokens")
        seq.check_units(D)
        counts[i] = np.bincount(seq.units, minlength=D)
    prob = counts / counts.sum(axis=1, keepdims=True)
    return TokenStats(prob, (counts > 0).sum(axis=0), counts.sum(axis=0).astype(np.int64))


def score_mp(stats: TokenStats) -> np.ndarray:
    return stats.prob.sum(axis=0) / stats.n_utterances


def score_idf(stats: TokenStats, use_occurrences: bool = False) -> np.ndarray:
    """Smoothed inverse document frequency, natural log.

    With ``use_occurrences`` the raw occurrence count replaces the number of
    utterances containing the unit; scores can then go negative.
    """
    n_j = stats.occ_count if use_occurrences else stats.doc_freq
    N = stats.n_utterances
    return np.log((N + 1.0) / (n_j + 1.0))


def score_vp(stats: TokenStats) -> np.ndarray:
    mp = score_mp(stats)
    return ((stats.prob - mp) ** 2).sum(axis=0) / stats.n_utterances


def score_sat(stats: TokenStats, eps: float = 1e-12) -> np.ndarray:
    return score_mp(stats) / np.maximum(np.sqrt(score_vp(stats)), eps)


def score(stats: TokenStats, metric: str, **kw) -> np.ndarray:
    metric = metric.upper()
    fn = {"MP": score_mp, "IDF": score_idf, "VP": score_vp, "SAT": score_sat}.get(metric)
    if fn is None:
        raise ContractError(f"unknown stop metric {metric!r}; choose from {', '.join(METRICS)}")
    return fn(stats, **kw)


def rank_units(scores, metric: str) -> list[int]:
    """Unit ids from most to least stop-like; equal scores keep id order."""
    s = np.asarray(scores, dtype=np.float64)
    key = -s if DESCENDING[metric.upper()] else s
    return [int(j) for j in np.lexsort((np.arange(len(s)), key))]


def select_stop_asms(scores, metric: str, P: int = 3) -> StopAsmSet:
    metric = metric.upper()
    if metric not in DESCENDING:
        raise ContractError(f"unknown stop metric {metric!r}")
    scores = np.asarray(scores, dtype=np.float64)
    if P > len(scores):
        raise ContractError(f"cannot select {P} stop units from {len(scores)}")
    if P < 0:
        raise ContractError("P must be non-negative")
    return StopAsmSet(metric, scores, rank_units(scores, metric)[:P])


def detect_stop_units(seqs: Sequence[AsmSequence], D: int, metric: str = "SAT", P: int = 3,
                      **kw) -> StopAsmSet:
    return select_stop_asms(score(collect_stats(seqs, D), metric, **kw), metric, P)
