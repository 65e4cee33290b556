"""
Initial acoustic segment inventory: fixed-length segmentation, segment means,
K-means clustering and nearest-centroid tokenization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, FingerprintMismatch
from .features import FrameMatrix

logger = logging.getLogger(__name__)


class Token(NamedTuple):
    unit: int
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class AsmSequence:
    """Ordered unit tokens of one utterance.

    Tokens are contiguous from frame 0; ``n_frames`` is the end of the last
    token, which may be less than the utterance length when trailing frames
    were never tokenized (fixed segmentation ignores them).
    """

    utterance_id: str
    tokens: list[Token]

    def __post_init__(self):
        self.tokens = [Token(int(u), int(s), int(e)) for u, s, e in self.tokens]
        pos = 0
        for tok in self.tokens:
            if tok.start != pos or tok.end <= tok.start:
                raise ContractError(
                    f"{self.utterance_id}: token {tok} breaks contiguity at frame {pos}")
            if tok.unit < 0:
                raise ContractError(f"{self.utterance_id}: negative unit id in {tok}")
            pos = tok.end

    @property
    def n_frames(self) -> int:
        return self.tokens[-1].end if self.tokens else 0

    @property
    def units(self) -> list[int]:
        return [t.unit for t in self.tokens]

    def __len__(self):
        return len(self.tokens)

    def frame_labels(self, n_frames: int | None = None) -> np.ndarray:
        """Per-frame unit id; frames not covered by any token get -1."""
        n = self.n_frames if n_frames is None else n_frames
        labels = np.full(n, -1, dtype=np.int64)
        for u, s, e in self.tokens:
            labels[s:min(e, n)] = u
        return labels

    def drop_short_tail(self, min_len: int) -> "AsmSequence":
        """Copy without a final token shorter than ``min_len`` frames."""
        if self.tokens and self.tokens[-1].length < min_len and len(self.tokens) > 1:
            return AsmSequence(self.utterance_id, self.tokens[:-1])
        return self

    def check_units(self, n_units: int):
        for tok in self.tokens:
            if tok.unit >= n_units:
                raise ContractError(
                    f"{self.utterance_id}: unit {tok.unit} outside inventory of {n_units}")

    @classmethod
    def from_labels(cls, utterance_id: str, labels: Sequence[int], boundaries: Iterable[int]):
        """Build tokens from a frame-label array and token start frames."""
        starts = sorted(set(boundaries) | {0})
        ends = starts[1:] + [len(labels)]
        return cls(utterance_id, [(int(labels[s]), s, e) for s, e in zip(starts, ends)])


@dataclass
class AsmInventory:
    centroids: np.ndarray
    fingerprint: str = ""
    seed: int = 0
    inertia: list[float] = field(default_factory=list, compare=False)
    n_iter: int = field(default=0, compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ContractError(f"inventory needs at least 2 centroids, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ContractError("inventory centroids must be finite")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def fixed_segment(fm: FrameMatrix, n_segments: int = 50, seg_len: int = 20) -> list[tuple[int, int]]:
    """Consecutive ``seg_len`` spans from frame 0, at most ``n_segments`` of them.

    Short utterances get fewer spans with the last one clamped to T; frames
    beyond ``n_segments * seg_len`` are not covered.
    """
    T = fm.n_frames
    if T <= 0:
        raise ContractError(f"{fm.utterance_id}: no frames to segment")
    spans = []
    for k in range(n_segments):
        start = k * seg_len
        if start >= T:
            break
        spans.append((start, min(start + seg_len, T)))
    return spans


def segment_means(fm: FrameMatrix, spans) -> np.ndarray:
    out = np.empty((len(spans), fm.dim))
    for k, (s, e) in enumerate(spans):
        if e <= s or s < 0 or e > fm.n_frames:
            raise ContractError(f"{fm.utterance_id}: invalid span [{s}, {e})")
        out[k] = fm.frames[s:e].mean(axis=0)
    return out


def squared_distances(X: np.ndarray, C: np.ndarray, block: int = 1 << 22) -> np.ndarray:
    """Exact pairwise squared Euclidean distances, computed in row blocks.

    Differences are formed explicitly (no ``|x|^2 - 2x.c + |c|^2`` expansion)
    so exactly equidistant points compare equal.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    out = np.empty((X.shape[0], C.shape[0]))
    rows = max(1, block // max(1, C.size))
    for i in range(0, X.shape[0], rows):
        diff = X[i:i + rows, None, :] - C[None, :, :]
        out[i:i + rows] = np.einsum("mdf,mdf->md", diff, diff)
    return out


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [X[rng.integers(len(X))]]
    closest = squared_distances(X, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(len(X), p=closest / total)
        else:
            idx = rng.integers(len(X))
        centroids.append(X[idx])
        closest = np.minimum(closest, squared_distances(X, X[idx][None])[:, 0])
    return np.array(centroids)


def kmeans_fit(vectors, D: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6,
               fingerprint: str = "") -> AsmInventory:
    """Lloyd's K-means with k-means++ seeding.

    Parameters
    ----------
    vectors : (M, F) array
        Segment mean vectors of the training material.
    D : int
        Number of centroids (acoustic units).
    seed : int
        Seed for the k-means++ draws; the fit is deterministic given it.
    max_iters, tol : int, float
        Stop when the max-norm centroid shift drops below ``tol`` or after
        ``max_iters`` update steps.

    Returns
    -------
    AsmInventory
        Centroids plus the per-iteration inertia trace in ``inertia``.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"kmeans_fit expects an (M, F) matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ContractError("kmeans_fit input has non-finite values")
    if D < 2:
        raise ContractError(f"need at least 2 clusters, got D={D}")
    if X.shape[0] < D:
        raise ContractError(f"{X.shape[0]} vectors cannot support D={D} clusters")

    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, D, rng)
    inertia = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        dist = squared_distances(X, C)
        labels = dist.argmin(axis=1)
        point_cost = dist[np.arange(len(X)), labels]
        inertia.append(float(point_cost.sum()))

        new_C = C.copy()
        counts = np.bincount(labels, minlength=D)
        for j in np.flatnonzero(counts):
            new_C[j] = X[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # farthest points from their own centroid, one per empty cluster
            order = np.argsort(-point_cost, kind="stable")
            for j, idx in zip(empty, order):
                new_C[j] = X[idx]
            logger.debug("k-means iter %d: re-seeded %d empty clusters", n_iter, len(empty))
        shift = np.max(np.abs(new_C - C))
        C = new_C
        if shift < tol:
            break
    logger.info("k-means: D=%d, %d iterations, inertia %.4g", D, n_iter, inertia[-1])
    return AsmInventory(C, fingerprint, seed, inertia, n_iter)


def assign_nearest(means: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, i.e. the lowest unit id on ties
    return squared_distances(means, centroids).argmin(axis=1)


def tokenize_initial(fm: FrameMatrix, inv: AsmInventory, n_segments: int = 50,
                     seg_len: int = 20) -> AsmSequence:
    if inv.fingerprint and fm.fingerprint and inv.fingerprint != fm.fingerprint:
        raise FingerprintMismatch(
            f"{fm.utterance_id}: features {fm.fingerprint} vs inventory {inv.fingerprint}")
    if fm.dim != inv.dim:
        raise ContractError(f"{fm.utterance_id}: feature dim {fm.dim} != inventory dim {inv.dim}")
    spans = fixed_segment(fm, n_segments, seg_len)
    units = assign_nearest(segment_means(fm, spans), inv.centroids)
    return AsmSequence(fm.utterance_id, [(int(u), s, e) for u, (s, e) in zip(units, spans)])


def fit_inventory(corpus: Sequence[FrameMatrix], D: int = 64, seed: int = 0,
                  n_segments: int = 50, seg_len: int = 20, **kw) -> AsmInventory:
    """Cluster the fixed-segment means of every training utterance."""
    if not corpus:
        raise ContractError("empty training corpus")
    means = np.vstack([segment_means(fm, fixed_segment(fm, n_segments, seg_len)) for fm in corpus])
    return kmeans_fit(means, D, seed=seed, fingerprint=corpus[0].fingerprint, **kw)
