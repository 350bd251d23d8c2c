"""Synthetic paired speech/phoneme corpus.

Content (phoneme identity) and speaker factors (pitch, formant position,
gain) are orthogonal by construction: every non-silent phoneme id owns a
fixed spectral-peak template, and a speaker renders it as a harmonic stack
at their base f0 with the peaks moved by their formant-shift ratio.  That
gives ground truth for every question the embedding model is later asked:
same content + different speaker, known durations, known pitch.

Everything is a pure function of (config, seed): per-utterance RNG streams
are derived with ``numpy.random.SeedSequence``, so generation order or
parallel scheduling cannot change the output, and a rerun with the same
seed is byte-identical (WAV files included).
"""
from __future__ import annotations

import json
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MANIFEST_VERSION = 1
SILENCE_SYMBOL = "sil"
PARTITIONS = ("pretrain", "finetune_labeled", "speech_only", "test")

# Pool of invented phoneme labels; ids beyond the pool fall back to "p<i>".
_LABELS = ("aa", "ee", "ii", "oo", "uu", "nn", "ss", "rr", "kk", "tt", "mm", "ll")


class CorpusError(ValueError):
    """Invalid corpus configuration or manifest contents."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered phoneme alphabet with silence reserved at index 0."""

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.symbols) < 2:
            raise CorpusError("inventory needs silence plus at least one phoneme")
        if len(set(self.symbols)) != len(self.symbols):
            raise CorpusError("inventory labels must be unique")
        if self.symbols[0] != SILENCE_SYMBOL:
            raise CorpusError(f"index 0 must be {SILENCE_SYMBOL!r}")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @classmethod
    def default(cls, n_phonemes: int) -> "PhonemeInventory":
        labels = [SILENCE_SYMBOL]
        for i in range(n_phonemes):
            labels.append(_LABELS[i] if i < len(_LABELS) else f"p{i}")
        return cls(tuple(labels))


@dataclass(frozen=True)
class SpeakerSpec:
    """Paralinguistic factors of one synthetic voice."""

    speaker_id: str
    base_f0: float          # Hz
    formant_shift: float    # ratio applied to spectral peak positions
    amplitude: float        # linear peak gain

    def __post_init__(self) -> None:
        if not 60.0 <= self.base_f0 <= 400.0:
            raise CorpusError(f"base_f0 {self.base_f0} outside [60, 400] Hz")
        if not 0.7 <= self.formant_shift <= 1.4:
            raise CorpusError(f"formant_shift {self.formant_shift} outside [0.7, 1.4]")


@dataclass(frozen=True)
class PhonemeSequence:
    """Phoneme ids with integer frame durations."""

    ids: tuple[int, ...]
    durations: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.durations):
            raise CorpusError("ids and durations must have equal length")
        if any(d < 1 for d in self.durations):
            raise CorpusError("all durations must be >= 1 frame")
        if any(i < 0 for i in self.ids):
            raise CorpusError("phoneme ids must be non-negative")

    @property
    def total_frames(self) -> int:
        return int(sum(self.durations))

    def frame_ids(self) -> np.ndarray:
        """Per-frame phoneme id, length ``total_frames``."""
        return np.repeat(np.asarray(self.ids, dtype=np.int64),
                         np.asarray(self.durations, dtype=np.int64))


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker: SpeakerSpec
    phonemes: PhonemeSequence
    wav_path: str           # relative to the manifest's directory
    sample_rate: int = 24000
    partition: str = "pretrain"

    def __post_init__(self) -> None:
        if self.partition not in PARTITIONS:
            raise CorpusError(f"unknown partition {self.partition!r}")


@dataclass
class CorpusManifest:
    """Serializable index of the corpus: inventory, utterances, partitions."""

    inventory: PhonemeInventory
    utterances: list[Utterance]
    sample_rate: int = 24000
    hop: int = 240
    version: int = MANIFEST_VERSION

    def partition(self, name: str) -> list[Utterance]:
        if name not in PARTITIONS:
            raise CorpusError(f"unknown partition {name!r}")
        return [u for u in self.utterances if u.partition == name]

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "sample_rate": self.sample_rate,
            "hop": self.hop,
            "inventory": list(self.inventory.symbols),
            "utterances": [
                {
                    "id": u.utt_id,
                    "speaker": {
                        "speaker_id": u.speaker.speaker_id,
                        "base_f0": u.speaker.base_f0,
                        "formant_shift": u.speaker.formant_shift,
                        "amplitude": u.speaker.amplitude,
                    },
                    "phoneme_ids": list(u.phonemes.ids),
                    "durations": list(u.phonemes.durations),
                    "wav": u.wav_path,
                    "sample_rate": u.sample_rate,
                    "partition": u.partition,
                }
                for u in self.utterances
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        payload = json.loads(text)
        if payload.get("version") != MANIFEST_VERSION:
            raise CorpusError(f"unsupported manifest version {payload.get('version')!r}")
        utterances = []
        for rec in payload["utterances"]:
            spk = rec["speaker"]
            utterances.append(Utterance(
                utt_id=rec["id"],
                speaker=SpeakerSpec(spk["speaker_id"], spk["base_f0"],
                                    spk["formant_shift"], spk["amplitude"]),
                phonemes=PhonemeSequence(tuple(rec["phoneme_ids"]),
                                         tuple(rec["durations"])),
                wav_path=rec["wav"],
                sample_rate=rec["sample_rate"],
                partition=rec["partition"],
            ))
        return cls(inventory=PhonemeInventory(tuple(payload["inventory"])),
                   utterances=utterances,
                   sample_rate=payload["sample_rate"],
                   hop=payload["hop"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def validate_files(self, root: str | Path) -> None:
        root = Path(root)
        for u in self.utterances:
            if not (root / u.wav_path).is_file():
                raise CorpusError(f"missing wav file: {u.wav_path}")


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 2
    n_utterances: int = 8
    n_phonemes: int = 6
    min_phones: int = 4
    max_phones: int = 8
    min_dur: int = 3
    max_dur: int = 20
    shared_content: bool = True
    edge_silence: bool = True
    seed: int = 0
    sample_rate: int = 24000
    hop: int = 240

    @classmethod
    def from_flat(cls, cfg: dict) -> "CorpusConfig":
        return cls(
            n_speakers=cfg["corpus.n_speakers"],
            n_utterances=cfg["corpus.n_utterances"],
            n_phonemes=cfg["corpus.n_phonemes"],
            min_phones=cfg["corpus.min_phones"],
            max_phones=cfg["corpus.max_phones"],
            min_dur=cfg["corpus.min_dur"],
            max_dur=cfg["corpus.max_dur"],
            shared_content=cfg["corpus.shared_content"],
            edge_silence=cfg["corpus.edge_silence"],
            seed=cfg["corpus.seed"],
            sample_rate=cfg["mel.sample_rate"],
            hop=cfg["mel.hop"],
        )


# ---------------------------------------------------------------------------
# waveform synthesis
# ---------------------------------------------------------------------------

def phoneme_peaks(phoneme_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed spectral-peak template (center Hz, relative amplitude) for an id.

    A golden-ratio hop over the id spreads the three peaks so that
    neighbouring ids stay spectrally distinct.  Id 0 (silence) has no
    template; callers must not ask for it.
    """
    if phoneme_id < 1:
        raise CorpusError("silence (id 0) has no spectral template")
    golden = 0.6180339887498949
    u = (phoneme_id * golden) % 1.0
    centers = np.array([
        280.0 + 420.0 * u,
        900.0 + 1300.0 * ((u + 0.33) % 1.0),
        2400.0 + 900.0 * ((u + 0.67) % 1.0),
    ])
    amps = np.array([1.0, 0.63, 0.35])
    return centers, amps


def _peak_envelope(freqs: np.ndarray, centers: np.ndarray, amps: np.ndarray,
                   bandwidth: float = 140.0) -> np.ndarray:
    """Spectral envelope value at ``freqs`` for a peak template."""
    env = np.full(freqs.shape, 0.06)   # weak broadband base keeps mels non-floored
    for c, a in zip(centers, amps):
        env += a * np.exp(-0.5 * ((freqs - c) / bandwidth) ** 2)
    return env


_EDGE_FADE = 120  # samples of raised-cosine fade at segment boundaries


def render_utterance(phonemes: PhonemeSequence, speaker: SpeakerSpec,
                     sample_rate: int = 24000, hop: int = 240) -> np.ndarray:
    """Deterministic waveform for one utterance, float64 in [-1, 1].

    Each non-silent segment is a harmonic stack at the speaker's base f0
    whose partial amplitudes sample the phoneme's peak envelope (peaks
    scaled by the speaker's formant shift).  Length is exactly
    ``sum(durations) * hop`` samples.
    """
    total = phonemes.total_frames * hop
    out = np.zeros(total, dtype=np.float64)
    f0 = speaker.base_f0
    max_freq = 0.42 * sample_rate
    n_harm = max(1, int(max_freq // f0))
    k = np.arange(1, n_harm + 1)

    cursor = 0
    for pid, dur in zip(phonemes.ids, phonemes.durations):
        seg_len = dur * hop
        if pid != 0:
            centers, amps = phoneme_peaks(pid)
            env = _peak_envelope(k * f0, centers * speaker.formant_shift, amps)
            t = (cursor + np.arange(seg_len)) / sample_rate
            # phase 2*pi*k*f0*t is continuous across segments by construction
            seg = np.sin(2.0 * np.pi * f0 * np.outer(k, t))
            sig = env @ seg
            fade = min(_EDGE_FADE, seg_len // 2)
            if fade > 0:
                ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
                sig[:fade] *= ramp
                sig[-fade:] *= ramp[::-1]
            out[cursor:cursor + seg_len] = sig
        cursor += seg_len

    peak = np.max(np.abs(out))
    if peak > 0:
        out *= speaker.amplitude / peak
    return out


def write_wav(path: str | Path, waveform: np.ndarray, sample_rate: int = 24000) -> None:
    """Write mono 16-bit PCM."""
    samples = np.clip(waveform, -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM back to float64 in [-1, 1]."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise CorpusError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


_SPK_STREAM, _CONTENT_STREAM = 1, 2


def _sample_speaker(seed: int, index: int) -> SpeakerSpec:
    rng = _rng(seed, _SPK_STREAM, index)
    return SpeakerSpec(
        speaker_id=f"spk{index:02d}",
        base_f0=float(rng.uniform(110.0, 320.0)),
        formant_shift=float(rng.uniform(0.8, 1.3)),
        amplitude=float(rng.uniform(0.3, 0.6)),
    )


def _sample_content(cfg: CorpusConfig, index: int) -> PhonemeSequence:
    rng = _rng(cfg.seed, _CONTENT_STREAM, index)
    n = int(rng.integers(cfg.min_phones, cfg.max_phones + 1))
    ids = list(rng.integers(1, cfg.n_phonemes + 1, size=n))
    durs = list(rng.integers(cfg.min_dur, cfg.max_dur + 1, size=n))
    if cfg.edge_silence:
        ids = [0] + ids + [0]
        durs = ([int(rng.integers(cfg.min_dur, cfg.max_dur + 1))] + durs
                + [int(rng.integers(cfg.min_dur, cfg.max_dur + 1))])
    return PhonemeSequence(tuple(int(i) for i in ids), tuple(int(d) for d in durs))


def synth_corpus(cfg: CorpusConfig, out_dir: str | Path) -> CorpusManifest:
    """Render the full corpus under ``out_dir`` and write its manifest.

    ``out_dir/wav/<id>.wav`` plus ``out_dir/manifest.json``.  Identical
    config and seed reproduce the exact same bytes.
    """
    if cfg.n_speakers < 1:
        raise CorpusError("need at least one speaker")
    if cfg.n_phonemes < 1:
        raise CorpusError("need at least one content phoneme")
    if not 1 <= cfg.min_dur <= cfg.max_dur:
        raise CorpusError("bad duration range")
    if cfg.shared_content and cfg.n_utterances % cfg.n_speakers != 0:
        raise CorpusError("shared_content requires n_utterances divisible by n_speakers")

    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    inventory = PhonemeInventory.default(cfg.n_phonemes)
    speakers = [_sample_speaker(cfg.seed, s) for s in range(cfg.n_speakers)]

    utterances = []
    for idx in range(cfg.n_utterances):
        if cfg.shared_content:
            spk_i, content_i = divmod(idx, cfg.n_utterances // cfg.n_speakers)
        else:
            spk_i, content_i = idx % cfg.n_speakers, idx
        speaker = speakers[spk_i]
        phonemes = _sample_content(cfg, content_i)
        utt_id = f"u{idx:03d}_{speaker.speaker_id}"
        wav_rel = f"wav/{utt_id}.wav"
        waveform = render_utterance(phonemes, speaker, cfg.sample_rate, cfg.hop)
        write_wav(wav_dir / f"{utt_id}.wav", waveform, cfg.sample_rate)
        utterances.append(Utterance(utt_id=utt_id, speaker=speaker,
                                    phonemes=phonemes, wav_path=wav_rel,
                                    sample_rate=cfg.sample_rate))

    manifest = CorpusManifest(inventory=inventory, utterances=utterances,
                              sample_rate=cfg.sample_rate, hop=cfg.hop)
    manifest.save(out_dir / "manifest.json")
    return manifest


def split_corpus(manifest: CorpusManifest, ratios: dict[str, float],
                 seed: int = 0) -> CorpusManifest:
    """Reassign partition tags by the given fractions, deterministically.

    Counts use largest-remainder rounding so round fractions of round counts
    are exact.  Utterance-level assignment; the input manifest is untouched.
    """
    for name, frac in ratios.items():
        if name not in PARTITIONS:
            raise CorpusError(f"unknown partition {name!r}")
        if not 0.0 <= frac <= 1.0:
            raise CorpusError(f"fraction for {name} outside [0, 1]: {frac}")
    if abs(sum(ratios.values()) - 1.0) > 1e-9:
        raise CorpusError(f"fractions must sum to 1, got {sum(ratios.values())}")

    n = len(manifest.utterances)
    names = [p for p in PARTITIONS if ratios.get(p, 0.0) > 0.0]
    targets = [ratios[p] * n for p in names]
    counts = [int(np.floor(t)) for t in targets]
    remainders = [t - c for t, c in zip(targets, counts)]
    by_remainder = sorted(range(len(names)), key=lambda i: (-remainders[i], i))
    for i in by_remainder[: n - sum(counts)]:
        counts[i] += 1

    order = _rng(seed, 3).permutation(n)
    assignment = {}
    pos = 0
    for name, count in zip(names, counts):
        for j in order[pos:pos + count]:
            assignment[int(j)] = name
        pos += count

    utterances = [replace(u, partition=assignment[i])
                  for i, u in enumerate(manifest.utterances)]
    return CorpusManifest(inventory=manifest.inventory, utterances=utterances,
                          sample_rate=manifest.sample_rate, hop=manifest.hop)
