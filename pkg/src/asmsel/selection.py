"""
Segment selection: drop frames tokenized as stop units, then cut the
surviving fragments into fixed-length, zero-padded segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .asm_init import AsmSequence
from .errors import ContractError
from .features import FrameMatrix


@dataclass
class Fragment:
    utterance_id: str
    frames: np.ndarray
    origin: tuple[int, int]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class SegmentBatch:
    """Fixed-length segments of one utterance.

    ``segments`` has shape ``(n, seg_len, F)``; ``lengths[k]`` counts the
    real frames at the head of segment ``k``, the rest is zero padding.
    """

    utterance_id: str
    segments: np.ndarray
    lengths: np.ndarray
    label: int | None = None
    fallback: bool = False
    origins: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def __len__(self):
        return self.segments.shape[0]

    @property
    def seg_len(self) -> int:
        return self.segments.shape[1]

    @property
    def pad_mask(self) -> np.ndarray:
        """Boolean ``(n, seg_len)``, True on real frames."""
        return np.arange(self.seg_len)[None, :] < self.lengths[:, None]

    @property
    def n_real_frames(self) -> int:
        return int(self.lengths.sum())


def block_frames(fm: FrameMatrix, seq: AsmSequence, stop_units: Iterable[int]) -> list[Fragment]:
    """Remove the frames of every token whose unit is a stop unit.

    Frames past the last token (left untokenized by fixed segmentation) are
    kept.  Maximal runs of surviving frames become fragments.
    """
    if seq.utterance_id != fm.utterance_id:
        raise ContractError(f"sequence {seq.utterance_id} does not belong to {fm.utterance_id}")
    if seq.n_frames > fm.n_frames:
        raise ContractError(f"{fm.utterance_id}: sequence covers {seq.n_frames} frames "
                            f"but the utterance has {fm.n_frames}")
    stop = set(int(u) for u in stop_units)
    keep = np.ones(fm.n_frames, dtype=bool)
    for u, s, e in seq.tokens:
        if u in stop:
            keep[s:e] = False
    edges = np.diff(np.concatenate([[0], keep.view(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [Fragment(fm.utterance_id, fm.frames[s:e], (int(s), int(e))) for s, e in zip(starts, ends)]


def resegment_pad(frags: list[Fragment], seg_len: int = 20, utterance_id: str = "",
                  dim: int | None = None) -> SegmentBatch:
    """Chop every fragment into ``seg_len`` pieces, zero-padding the last piece.

    Fragments are never joined, so no segment spans a removed region.
    """
    if seg_len < 1:
        raise ContractError("seg_len must be at least 1")
    if frags:
        utterance_id = utterance_id or frags[0].utterance_id
        dim = frags[0].frames.shape[1]
    pieces, lengths, origins = [], [], []
    for frag in frags:
        for s in range(0, len(frag), seg_len):
            chunk = frag.frames[s:s + seg_len]
            seg = np.zeros((seg_len, chunk.shape[1]))
            seg[:len(chunk)] = chunk
            pieces.append(seg)
            lengths.append(len(chunk))
            origins.append((frag.origin[0] + s, frag.origin[0] + s + len(chunk)))
    segments = np.stack(pieces) if pieces else np.zeros((0, seg_len, dim or 0))
    return SegmentBatch(utterance_id, segments, np.asarray(lengths, dtype=np.int64), origins=origins)


def baseline_segments(fm: FrameMatrix, seg_len: int = 20) -> SegmentBatch:
    """Whole-utterance segmentation used when no selection is applied."""
    whole = Fragment(fm.utterance_id, fm.frames, (0, fm.n_frames))
    return resegment_pad([whole], seg_len)


def select_utterance(fm: FrameMatrix, seq: AsmSequence, stop_units: Iterable[int],
                     seg_len: int = 20, label: int | None = None) -> SegmentBatch:
    frags = block_frames(fm, seq, stop_units)
    if frags:
        batch = resegment_pad(frags, seg_len, fm.utterance_id)
    else:
        batch = baseline_segments(fm, seg_len)
        batch.fallback = True
    batch.label = label
    return batch
