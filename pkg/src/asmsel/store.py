"""
Binary and text containers for every pipeline artifact.

All binary headers are little-endian.  Feature frames are stored as 32-bit
floats; model parameters as 64-bit floats so they round-trip exactly.
Writes go to a temporary file in the target directory and are renamed into
place, so a reader never sees a half-written artifact.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable

import numpy as np

from .asm_init import AsmInventory, AsmSequence
from .classifier import SoftmaxClassifier
from .errors import AsmSelError, ContractError
from .features import FrameMatrix
from .hmm import GmmHmmSet
from .selection import SegmentBatch
from .stop import StopAsmSet

FEATURES_MAGIC = b"ASMF1"
INVENTORY_MAGIC = b"ASMC1"
HMM_MAGIC = b"ASMH1"
MODEL_MAGIC = b"ASML1"


class CorruptArtifact(AsmSelError, OSError):
    """A stored artifact is truncated or has the wrong header."""


@contextmanager
def atomic_open(path, mode="wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str):
    with atomic_open(path, "w") as fh:
        fh.write(text)


def write_bytes(path, blob: bytes):
    with atomic_open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.buf = io.BytesIO(blob)
        self.path = path

    def take(self, n: int) -> bytes:
        data = self.buf.read(n)
        if len(data) != n:
            raise CorruptArtifact(f"{self.path}: truncated artifact")
        return data

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def floats(self, shape, dtype="<f8"):
        n = int(np.prod(shape))
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n * size), dtype=dtype).astype(np.float64).reshape(shape)

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def magic(self, expected: bytes):
        got = self.buf.read(len(expected))
        if got != expected:
            raise CorruptArtifact(f"{self.path}: expected {expected!r} header, got {got!r}")

    def done(self):
        if self.buf.read(1):
            raise CorruptArtifact(f"{self.path}: trailing bytes after artifact")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _read(path) -> _Reader:
    return _Reader(Path(path).read_bytes(), path)


# ---- feature frames ---------------------------------------------------------

def encode_frames(frames: np.ndarray, utterance_id: str) -> bytes:
    frames = np.asarray(frames)
    T, F = frames.shape
    return (FEATURES_MAGIC + _string(utterance_id) + struct.pack("<II", T, F)
            + np.ascontiguousarray(frames, dtype="<f4").tobytes())


def save_frames(path, fm: FrameMatrix):
    write_bytes(path, encode_frames(fm.frames, fm.utterance_id))


def load_frames(path, fingerprint: str = "") -> FrameMatrix:
    r = _read(path)
    r.magic(FEATURES_MAGIC)
    uid = r.string()
    T, F = r.u32(2)
    frames = r.floats((T, F), "<f4")
    r.done()
    return FrameMatrix(frames, fingerprint, uid)


def quantize(fm: FrameMatrix) -> FrameMatrix:
    """The frame matrix exactly as it will read back from disk."""
    return FrameMatrix(fm.frames.astype(np.float32).astype(np.float64), fm.fingerprint, fm.utterance_id)


# ---- inventory --------------------------------------------------------------

def save_inventory(path, inv: AsmInventory):
    D, F = inv.centroids.shape
    write_bytes(path, INVENTORY_MAGIC + struct.pack("<IIq", D, F, inv.seed) + _f8(inv.centroids))


def load_inventory(path, fingerprint: str = "") -> AsmInventory:
    r = _read(path)
    r.magic(INVENTORY_MAGIC)
    D, F = r.u32(2)
    (seed,) = struct.unpack("<q", r.take(8))
    centroids = r.floats((D, F))
    r.done()
    return AsmInventory(centroids, fingerprint, seed)


# ---- GMM-HMM set ------------------------------------------------------------

def save_hmms(path, models: GmmHmmSet):
    D, S, G, F = models.means.shape
    parts = [HMM_MAGIC, struct.pack("<IIII", D, S, G, F)]
    for u in range(D):
        parts += [_f8(models.weights[u]), _f8(models.means[u]), _f8(models.variances[u]),
                  _f8(models.transitions[u])]
    parts.append(_f8(models.var_floor))
    write_bytes(path, b"".join(parts))


def load_hmms(path, fingerprint: str = "") -> GmmHmmSet:
    r = _read(path)
    r.magic(HMM_MAGIC)
    D, S, G, F = r.u32(4)
    w = np.empty((D, S, G))
    mu = np.empty((D, S, G, F))
    var = np.empty((D, S, G, F))
    trans = np.empty((D, S, S + 1))
    for u in range(D):
        w[u] = r.floats((S, G))
        mu[u] = r.floats((S, G, F))
        var[u] = r.floats((S, G, F))
        trans[u] = r.floats((S, S + 1))
    floor = r.floats((F,))
    r.done()
    return GmmHmmSet(w, mu, var, trans, floor, fingerprint)


# ---- classifier -------------------------------------------------------------

def save_classifier(path, model: SoftmaxClassifier):
    C, F = model.weights.shape
    parts = [MODEL_MAGIC, struct.pack("<II", C, F), _f8(model.weights), _f8(model.bias),
             _f8(model.mean), _f8(model.scale)]
    parts += [_string(name) for name in model.classes]
    write_bytes(path, b"".join(parts))


def load_classifier(path) -> SoftmaxClassifier:
    r = _read(path)
    r.magic(MODEL_MAGIC)
    C, F = r.u32(2)
    W, b = r.floats((C, F)), r.floats((C,))
    mean, scale = r.floats((F,)), r.floats((F,))
    names = [r.string() for _ in range(C)]
    r.done()
    return SoftmaxClassifier(W, b, mean, scale, names)


# ---- unit sequences ---------------------------------------------------------

def format_sequence(seq: AsmSequence) -> str:
    return seq.utterance_id + "\t" + ",".join(f"{u}:{s}:{e}" for u, s, e in seq.tokens)


def parse_sequence(line: str) -> AsmSequence:
    try:
        uid, body = line.rstrip("\n").split("\t")
        tokens = [tuple(int(v) for v in tok.split(":")) for tok in body.split(",") if tok]
        if any(len(t) != 3 for t in tokens):
            raise ValueError("token needs unit:start:end")
    except ValueError as exc:
        raise ContractError(f"bad sequence line {line[:60]!r}: {exc}") from None
    return AsmSequence(uid, tokens)


def save_sequences(path, seqs: Iterable[AsmSequence]):
    write_text(path, "".join(format_sequence(s) + "\n" for s in seqs))


def load_sequences(path) -> list[AsmSequence]:
    with open(path) as fh:
        return [parse_sequence(line) for line in fh if line.strip()]


# ---- stop units -------------------------------------------------------------

def format_stop_set(stop: StopAsmSet) -> str:
    lines = [f"metric={stop.metric} P={stop.P}"]
    lines += [f"{j}\t{float(stop.scores[j])!r}" for j in stop.ranking()]
    lines.append("selected: " + ",".join(str(j) for j in stop.selected))
    return "\n".join(lines) + "\n"


def parse_stop_set(text: str) -> StopAsmSet:
    lines = [l for l in text.splitlines() if l.strip()]
    try:
        head = dict(kv.split("=") for kv in lines[0].split())
        metric, P = head["metric"], int(head["P"])
        rows = [l.split("\t") for l in lines[1:-1]]
        scores = np.empty(len(rows))
        for j, val in rows:
            scores[int(j)] = float(val)
        sel_text = lines[-1].split(":", 1)[1].strip()
        selected = [int(v) for v in sel_text.split(",")] if sel_text else []
    except (ValueError, KeyError, IndexError) as exc:
        raise ContractError(f"malformed stop-unit file: {exc}") from None
    if len(selected) != P:
        raise ContractError(f"stop-unit file declares P={P} but selects {len(selected)}")
    return StopAsmSet(metric, scores, selected)


def save_stop_set(path, stop: StopAsmSet):
    write_text(path, format_stop_set(stop))


def load_stop_set(path) -> StopAsmSet:
    return parse_stop_set(Path(path).read_text())


# ---- segment stores ---------------------------------------------------------

def save_segment_store(directory, batches: Iterable[SegmentBatch]):
    """One ASMF1 file per segment plus ``manifest.tsv``.

    Manifest columns: utterance id, segment count, fallback flag (0/1),
    label, and the comma-separated real-frame count of every segment.
    """
    directory = Path(directory)
    rows = []
    for batch in batches:
        for k in range(len(batch)):
            write_bytes(directory / "segments" / batch.utterance_id / f"{k:04d}.asmf",
                        encode_frames(batch.segments[k], f"{batch.utterance_id}#{k}"))
        label = "" if batch.label is None else str(batch.label)
        lengths = ",".join(str(int(n)) for n in batch.lengths)
        rows.append(f"{batch.utterance_id}\t{len(batch)}\t{int(batch.fallback)}\t{label}\t{lengths}\n")
    write_text(directory / "manifest.tsv", "".join(rows))


def load_segment_store(directory) -> list[SegmentBatch]:
    directory = Path(directory)
    batches = []
    for line in (directory / "manifest.tsv").read_text().splitlines():
        if not line.strip():
            continue
        uid, count, fallback, label, lengths = line.split("\t")
        segs = [load_frames(directory / "segments" / uid / f"{k:04d}.asmf").frames
                for k in range(int(count))]
        lens = np.array([int(v) for v in lengths.split(",")] if lengths else [], dtype=np.int64)
        seg_arr = np.stack(segs) if segs else np.zeros((0, 0, 0))
        batches.append(SegmentBatch(uid, seg_arr, lens, int(label) if label else None, fallback == "1"))
    return batches
