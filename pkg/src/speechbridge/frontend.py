"""Deterministic signal frontend: log-mel analysis, pitch, prompt windows.

Analysis constants (24 kHz audio, 960-sample frames, 240-sample hop, 40 mel
bands spanning 0-12 kHz) live in the global config with these values as
defaults.  Conventions the rest of the system relies on:

* frame count is ``ceil(len(waveform) / hop)``; frame ``t`` is a 960-sample
  window centred on sample ``t*hop + hop/2`` with zero padding at the edges;
* mel filters are triangular on the HTK mel scale and normalized to unit
  weight sum; energies are log-compressed with floor 1e-5, so digital
  silence maps to ``log(1e-5)`` in every band;
* everything here is a pure function: equal inputs give bitwise-equal
  outputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 24000
FRAME_SIZE = 960
HOP = 240
N_MELS = 40
MEL_FLOOR = 1e-5
PROMPT_SECONDS = 3.0
PROMPT_FRAMES = int(PROMPT_SECONDS * SAMPLE_RATE / HOP)  # 300


class FrontendError(ValueError):
    """Bad sample rate, empty input, or malformed container file."""


@dataclass
class MelSpectrogram:
    """Time-major matrix of log-mel energies, the system's acoustic currency."""

    frames: np.ndarray      # (T, 40) float32
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    floor: float = MEL_FLOOR

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FrontendError(f"mel frames must be (T, {N_MELS}), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise FrontendError("mel spectrogram needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise FrontendError("mel frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def log_floor(self) -> float:
        return float(np.log(self.floor))


@dataclass
class PitchContour:
    """Per-frame f0 in Hz; 0 marks unvoiced frames."""

    f0: np.ndarray          # (T,) float32

    def __post_init__(self) -> None:
        self.f0 = np.asarray(self.f0, dtype=np.float32)

    def voiced(self) -> np.ndarray:
        return self.f0 > 0


@dataclass
class PromptClip:
    """Fixed-length mel window for the prompt encoder.

    ``frames`` always has PROMPT_FRAMES rows; when the source was shorter,
    rows past ``n_valid`` are log-floor padding.
    """

    frames: np.ndarray      # (PROMPT_FRAMES, 40) float32
    n_valid: int
    start: int              # window start frame in the source

    def __post_init__(self) -> None:
        if self.frames.shape != (PROMPT_FRAMES, N_MELS):
            raise FrontendError(
                f"prompt clip must be ({PROMPT_FRAMES}, {N_MELS}), got {self.frames.shape}")


# ---------------------------------------------------------------------------
# framing + mel analysis
# ---------------------------------------------------------------------------

def _frame_signal(waveform: np.ndarray, frame_size: int, hop: int) -> np.ndarray:
    """(T, frame_size) view with T = ceil(len/hop), windows centred per hop."""
    n = len(waveform)
    n_frames = -(-n // hop)  # ceil
    left = (frame_size - hop) // 2
    right = (n_frames - 1) * hop + frame_size - left - n
    padded = np.pad(waveform.astype(np.float64), (left, max(right, 0)))
    strided = np.lib.stride_tricks.sliding_window_view(padded, frame_size)
    return strided[::hop][:n_frames]


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = FRAME_SIZE,
                   sample_rate: int = SAMPLE_RATE, fmin: float = 0.0,
                   fmax: float = 12000.0) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular filters, each normalized to unit sum."""
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - mid, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        total = bank[m].sum()
        if total > 0:
            bank[m] /= total
    return bank


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def _filterbank(n_mels, n_fft, sample_rate, fmin, fmax) -> np.ndarray:
    key = (n_mels, n_fft, sample_rate, fmin, fmax)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax)
    return _FILTERBANK_CACHE[key]


def mel_spectrogram(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE,
                    frame_size: int = FRAME_SIZE, hop: int = HOP,
                    n_mels: int = N_MELS, fmin: float = 0.0,
                    fmax: float = 12000.0, floor: float = MEL_FLOOR) -> MelSpectrogram:
    """Log-mel analysis of a 24 kHz waveform; T = ceil(len/hop) frames."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) == 0:
        raise FrontendError("waveform must be a non-empty 1-D array")
    if sample_rate != SAMPLE_RATE:
        raise FrontendError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate}")
    frames = _frame_signal(waveform, frame_size, hop)
    window = np.hanning(frame_size + 1)[:-1]
    spectrum = np.fft.rfft(frames * window, axis=1)
    power = np.abs(spectrum) ** 2
    bank = _filterbank(n_mels, frame_size, sample_rate, fmin, fmax)
    mel_power = power @ bank.T
    logmel = np.log(np.maximum(mel_power, floor))
    return MelSpectrogram(frames=logmel.astype(np.float32), hop=hop,
                          sample_rate=sample_rate, floor=floor)


# ---------------------------------------------------------------------------
# pitch
# ---------------------------------------------------------------------------

def extract_pitch(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE,
                  frame_size: int = FRAME_SIZE, hop: int = HOP,
                  fmin: float = 50.0, fmax: float = 600.0,
                  voicing_threshold: float = 0.3) -> PitchContour:
    """Frame-level f0 by normalized autocorrelation over 960-sample windows.

    A frame is voiced when the autocorrelation peak over the candidate lag
    range reaches ``voicing_threshold``; unvoiced frames report 0.  Peak lag
    is refined by parabolic interpolation.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) == 0:
        raise FrontendError("waveform must be a non-empty 1-D array")
    if sample_rate != SAMPLE_RATE:
        raise FrontendError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate}")

    frames = _frame_signal(waveform, frame_size, hop)
    lag_min = int(round(sample_rate / fmax))
    lag_max = int(round(sample_rate / fmin))
    n_fft = 1 << (2 * frame_size - 1).bit_length()

    f0 = np.zeros(frames.shape[0], dtype=np.float32)
    for t, x in enumerate(frames):
        if np.max(np.abs(x)) < 1e-6:
            continue
        spec = np.fft.rfft(x, n_fft)
        raw = np.fft.irfft(spec * np.conj(spec), n_fft)[: frame_size]
        # normalized cross-correlation r(l) = num(l) / sqrt(e0(l) * e1(l))
        # with e0(l) = sum_{i<N-l} x_i^2 and e1(l) = sum_{i>=l} x_i^2
        sq = np.cumsum(x * x)
        e_total = sq[-1]
        e0 = np.empty(frame_size)
        e0[0] = e_total
        e0[1:] = sq[frame_size - 2::-1]
        e1 = np.empty(frame_size)
        e1[0] = e_total
        e1[1:] = e_total - sq[: frame_size - 1]
        norm = np.sqrt(np.maximum(e0 * e1, 1e-20))
        r = raw / norm
        band = r[lag_min: lag_max + 1]
        r_max = float(np.max(band))
        if r_max < voicing_threshold:
            continue
        # earliest lag within a small margin of the max, then hill-climb to
        # its local peak: lag multiples of the true period also score ~1,
        # so a bare argmax would report subharmonics
        peak = int(np.nonzero(band >= r_max - 0.02)[0][0]) + lag_min
        while peak + 1 <= lag_max and r[peak + 1] > r[peak]:
            peak += 1
        while peak - 1 >= lag_min and r[peak - 1] > r[peak]:
            peak -= 1
        lag = float(peak)
        if lag_min < peak < lag_max:
            a, b, c = r[peak - 1], r[peak], r[peak + 1]
            denom = a - 2 * b + c
            if abs(denom) > 1e-12:
                lag += 0.5 * (a - c) / denom
        candidate = sample_rate / lag
        if fmin <= candidate <= fmax:
            f0[t] = candidate
    return PitchContour(f0=f0)


# ---------------------------------------------------------------------------
# prompt windows
# ---------------------------------------------------------------------------

def random_prompt_clip(mel: MelSpectrogram, seed: int) -> PromptClip:
    """Contiguous PROMPT_FRAMES-long window, start uniform over valid range.

    Sources shorter than the window are kept whole and right-padded with the
    log floor; ``n_valid`` marks where real frames end.
    """
    t = mel.n_frames
    if t <= PROMPT_FRAMES:
        frames = np.full((PROMPT_FRAMES, N_MELS), mel.log_floor, dtype=np.float32)
        frames[:t] = mel.frames
        return PromptClip(frames=frames, n_valid=t, start=0)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    start = int(rng.integers(0, t - PROMPT_FRAMES + 1))
    window = np.array(mel.frames[start:start + PROMPT_FRAMES], dtype=np.float32)
    return PromptClip(frames=window, n_valid=PROMPT_FRAMES, start=start)


# ---------------------------------------------------------------------------
# mel binary container (shape header + 32-bit floats, little endian)
# ---------------------------------------------------------------------------

_MEL_MAGIC = b"SBMEL\x00"
_MEL_HEADER = struct.Struct("<6sHIIIIf")  # magic, version, T, D, sample_rate, hop, floor


def save_mel(mel: MelSpectrogram, path) -> None:
    t, d = mel.frames.shape
    header = _MEL_HEADER.pack(_MEL_MAGIC, 1, t, d, mel.sample_rate, mel.hop, mel.floor)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def load_mel(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        raw = fh.read(_MEL_HEADER.size)
        if len(raw) != _MEL_HEADER.size:
            raise FrontendError(f"{path}: truncated mel container")
        magic, version, t, d, sample_rate, hop, floor = _MEL_HEADER.unpack(raw)
        if magic != _MEL_MAGIC or version != 1:
            raise FrontendError(f"{path}: not a v1 mel container")
        data = np.frombuffer(fh.read(t * d * 4), dtype="<f4").reshape(t, d)
    return MelSpectrogram(frames=np.array(data), hop=hop,
                          sample_rate=sample_rate, floor=floor)


# ---------------------------------------------------------------------------
# optional listening path: mel inversion + phase reconstruction
# ---------------------------------------------------------------------------

def _stft(waveform: np.ndarray, frame_size: int = FRAME_SIZE, hop: int = HOP) -> np.ndarray:
    frames = _frame_signal(waveform, frame_size, hop)
    window = np.hanning(frame_size + 1)[:-1]
    return np.fft.rfft(frames * window, axis=1)


def _istft(spectrum: np.ndarray, n_samples: int, frame_size: int = FRAME_SIZE,
           hop: int = HOP) -> np.ndarray:
    window = np.hanning(frame_size + 1)[:-1]
    frames = np.fft.irfft(spectrum, frame_size, axis=1) * window
    left = (frame_size - hop) // 2
    total = left + (spectrum.shape[0] - 1) * hop + frame_size
    acc = np.zeros(total)
    norm = np.zeros(total)
    wsq = window * window
    for t in range(spectrum.shape[0]):
        start = t * hop
        acc[start:start + frame_size] += frames[t]
        norm[start:start + frame_size] += wsq
    acc = acc / np.maximum(norm, 1e-8)
    return acc[left:left + n_samples]


def invert_mel(mel: MelSpectrogram, n_iter: int = 32) -> np.ndarray:
    """Rough waveform from a log-mel matrix: filterbank pseudo-inverse, then
    Griffin-Lim phase reconstruction (zero initial phase, fixed iterations,
    fully deterministic).  A listening convenience, not a vocoder.
    """
    bank = _filterbank(N_MELS, FRAME_SIZE, mel.sample_rate, 0.0, 12000.0)
    mel_power = np.exp(mel.frames.astype(np.float64))
    power = np.clip(mel_power @ np.linalg.pinv(bank).T, 0.0, None)
    magnitude = np.sqrt(power)
    n_samples = mel.n_frames * mel.hop
    spectrum = magnitude.astype(np.complex128)
    for _ in range(n_iter):
        wav = _istft(spectrum, n_samples)
        phase = np.angle(_stft(wav))
        spectrum = magnitude * np.exp(1j * phase)
    wav = _istft(spectrum, n_samples)
    peak = np.max(np.abs(wav))
    if peak > 1.0:
        wav = wav / peak
    return wav
