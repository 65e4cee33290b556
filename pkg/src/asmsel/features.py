"""
Audio decoding and frame-level log-mel / cepstral feature extraction.

The front-end follows the usual short-time recipe: Hann-windowed frames,
zero-padded to ``n_fft`` points, power spectrum, triangular mel filters with
unit peak spanning 0 Hz to Nyquist, then a floored natural log.  MFCCs are an
orthonormal DCT-II of the log-mel rows.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.io.wavfile

from .errors import AudioFormatError, ContractError

logger = logging.getLogger(__name__)

LMFB = "LMFB"
MFCC = "MFCC"


@dataclass(frozen=True)
class Waveform:
    """Normalized audio samples, shape ``(channels, n_samples)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[np.newaxis, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ContractError(f"waveform must have 1 or 2 channels, got shape {s.shape}")
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(s)):
            raise ContractError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 2048
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    log_floor: float = 1e-10
    feature_kind: str = LMFB
    n_ceps: int = 20

    def __post_init__(self):
        if self.feature_kind not in (LMFB, MFCC):
            raise ContractError(f"feature_kind must be LMFB or MFCC, got {self.feature_kind!r}")
        if self.hop_ms <= 0 or self.window_ms <= 0:
            raise ContractError("window_ms and hop_ms must be positive")
        if self.hop_ms > self.window_ms:
            raise ContractError(f"hop_ms ({self.hop_ms}) exceeds window_ms ({self.window_ms})")
        if self.log_floor <= 0:
            raise ContractError("log_floor must be positive")
        if self.feature_kind == MFCC and self.n_ceps > self.n_mels:
            raise ContractError(f"n_ceps ({self.n_ceps}) exceeds n_mels ({self.n_mels})")

    def window_length(self, sample_rate: int) -> int:
        return int(round(self.window_ms * 1e-3 * sample_rate))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * 1e-3 * sample_rate))

    @property
    def dim(self) -> int:
        return self.n_mels if self.feature_kind == LMFB else self.n_ceps

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]


@dataclass
class FrameMatrix:
    """Feature frames of one utterance, shape ``(T, F)``."""

    frames: np.ndarray
    fingerprint: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] == 0:
            raise ContractError(
                f"{self.utterance_id or 'utterance'}: frame matrix must be T x F with T > 0, "
                f"got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ContractError(f"{self.utterance_id}: frame matrix has non-finite entries")
        self.frames = f

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


_SUPPORTED_DTYPES = {np.dtype("<i2"): 32768.0, np.dtype("<f4"): 1.0}


def load_audio(path, expected_rate: int) -> Waveform:
    """Read a 16-bit integer or 32-bit float PCM WAV file.

    No resampling is done: a file at any other rate is rejected.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.io.wavfile.WavFileWarning)
            rate, data = scipy.io.wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise AudioFormatError(f"{path}: cannot read WAV ({exc})") from exc
    scale = _SUPPORTED_DTYPES.get(data.dtype.newbyteorder("<"))
    if scale is None:
        raise AudioFormatError(
            f"{path}: unsupported sample encoding {data.dtype} (need int16 or float32)")
    if rate != expected_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz != expected {expected_rate} Hz")
    samples = data.astype(np.float64) / scale
    samples = samples.T if samples.ndim == 2 else samples
    if samples.ndim == 2 and samples.shape[0] > 2:
        raise AudioFormatError(f"{path}: {samples.shape[0]} channels, only mono/stereo supported")
    return Waveform(samples, rate)


def downmix(w: Waveform) -> Waveform:
    if w.channels == 1:
        return w
    return Waveform(w.samples.mean(axis=0, keepdims=True), w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters with unit peak, shape ``(n_mels, n_fft // 2 + 1)``.

    Filter edges are equally spaced on the mel scale between 0 Hz and
    Nyquist.  Narrow low-frequency filters may fall between FFT bins and end
    up all-zero; their outputs then sit at the log floor.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def hann(n: int) -> np.ndarray:
    # periodic Hann, as used for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = frame_count(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def mel_energies(x: np.ndarray, sample_rate: int, cfg: FeatureConfig) -> np.ndarray:
    """Linear (pre-log) mel filter energies of a mono signal, shape ``(T, n_mels)``."""
    win = cfg.window_length(sample_rate)
    hop = cfg.hop_length(sample_rate)
    if cfg.n_fft < win:
        raise ContractError(f"n_fft ({cfg.n_fft}) shorter than window ({win} samples)")
    if len(x) < win:
        raise ContractError(f"signal of {len(x)} samples shorter than one window ({win})")
    frames = frame_signal(np.asarray(x, dtype=np.float64), win, hop) * hann(win)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    return power @ mel_filterbank(cfg.n_mels, cfg.n_fft, sample_rate).T


def compute_features(w: Waveform, cfg: FeatureConfig, utterance_id: str = "") -> FrameMatrix:
    """LMFB (or MFCC) frames of a mono waveform."""
    if w.channels != 1:
        raise ContractError(f"{utterance_id}: compute_features needs mono input, downmix first")
    energies = mel_energies(w.samples[0], w.sample_rate, cfg)
    feats = np.log(np.maximum(energies, cfg.log_floor))
    if cfg.feature_kind == MFCC:
        feats = scipy.fft.dct(feats, type=2, norm="ortho", axis=1)[:, :cfg.n_ceps]
    return FrameMatrix(feats, cfg.fingerprint(), utterance_id)


def extract_file(path, cfg: FeatureConfig, sample_rate: int, utterance_id: str = "") -> FrameMatrix:
    wav = downmix(load_audio(path, sample_rate))
    return compute_features(wav, cfg, utterance_id or Path(path).stem)
