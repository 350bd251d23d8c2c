"""Inference pipelines over a frozen model: TTS, voice conversion, recognition.

Output frame counts are fixed by the input (sum of durations for TTS, the
source's frame count for VC); everything is deterministic given the
checkpoint because prompts use the posterior mean and the prompt window is
cut with the configured seed.  Pipelines stop at mel spectrograms; waveform
rendering is a listening convenience only (``frontend.invert_mel``).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import PhonemeSequence
from .frontend import MelSpectrogram, mel_spectrogram, random_prompt_clip, save_mel

log = logging.getLogger("speechbridge")


class TaskError(ValueError):
    """Bad request contents."""


@dataclass
class TtsRequest:
    phonemes: PhonemeSequence       # durations are oracle inputs (see predict_durations)
    prompt_wav: np.ndarray
    request_id: str = ""


@dataclass
class VcRequest:
    source_wav: np.ndarray
    prompt_wav: np.ndarray
    request_id: str = ""

    def __post_init__(self) -> None:
        if len(np.atleast_1d(self.source_wav)) == 0 or len(np.atleast_1d(self.prompt_wav)) == 0:
            raise TaskError("source and prompt waveforms must be non-empty")


def _prompt_vector(model, prompt_wav: np.ndarray, flat_cfg: dict) -> torch.Tensor:
    mel = mel_spectrogram(np.asarray(prompt_wav, dtype=np.float64))
    clip = random_prompt_clip(mel, int(flat_cfg.get("infer.prompt_seed", 0)))
    latent = model.encode_prompt(clip.frames, n_valid=clip.n_valid, mode="infer")
    return latent.g


def tts_infer(model, request: TtsRequest, flat_cfg: dict) -> MelSpectrogram:
    """Phoneme stream -> decoder, conditioned on the prompt speaker vector."""
    g = _prompt_vector(model, request.prompt_wav, flat_cfg)
    emb = model.encode_phonemes(request.phonemes.ids, request.phonemes.durations)
    frames = model.decode(emb, g)
    return MelSpectrogram(frames=frames.numpy().astype(np.float32))


def vc_infer(model, request: VcRequest, flat_cfg: dict) -> MelSpectrogram:
    """Speech stream -> decoder: re-render the source with the prompt's voice."""
    g = _prompt_vector(model, request.prompt_wav, flat_cfg)
    source_mel = mel_spectrogram(np.asarray(request.source_wav, dtype=np.float64))
    emb = model.encode_speech(source_mel.frames)
    frames = model.decode(emb, g)
    return MelSpectrogram(frames=frames.numpy().astype(np.float32))


def asr_infer(model, waveform: np.ndarray, flat_cfg: dict | None = None) -> PhonemeSequence:
    """Frame-level argmax over the recognition head, collapsed into runs."""
    from .evaluate import collapse_runs
    mel = mel_spectrogram(np.asarray(waveform, dtype=np.float64))
    emb = model.encode_speech(mel.frames)
    logits = model.decode_phonemes(emb)
    frame_ids = logits.argmax(dim=-1).numpy()
    runs = collapse_runs(frame_ids)
    return PhonemeSequence(ids=tuple(i for i, _ in runs),
                           durations=tuple(n for _, n in runs))


def predict_durations(manifest, ids) -> tuple[int, ...]:
    """Per-phoneme mean durations from a manifest; demo fallback only.

    The real system receives durations from an external predictor, so the
    pipelines treat them as oracle inputs.  This helper exists so the CLI can
    serve requests that omit durations; it is not used anywhere in training
    or evaluation.
    """
    totals: dict[int, list[int]] = {}
    for utt in manifest.utterances:
        for pid, dur in zip(utt.phonemes.ids, utt.phonemes.durations):
            totals.setdefault(pid, []).append(dur)
    overall = [d for durs in totals.values() for d in durs]
    fallback = int(round(np.mean(overall))) if overall else 8
    return tuple(max(1, int(round(np.mean(totals[i])))) if i in totals else fallback
                 for i in ids)


# ---------------------------------------------------------------------------
# batch runners over request files
# ---------------------------------------------------------------------------

def _load_requests(path: str | Path) -> list[dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    requests = payload.get("requests")
    if not isinstance(requests, list):
        raise TaskError(f"{path}: expected an object with a 'requests' list")
    return requests


def _read_wav_field(rec: dict, key: str, base: Path) -> np.ndarray:
    from .corpus import read_wav
    if key not in rec:
        raise TaskError(f"request {rec.get('id', '?')}: missing field {key!r}")
    waveform, _rate = read_wav(base / rec[key])
    return waveform


def _maybe_plot(mel: MelSpectrogram, path: Path, enabled: bool) -> None:
    if not enabled:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.imshow(mel.frames.T, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel band")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def run_tts_requests(model, input_path: str | Path, out_dir: str | Path,
                     flat_cfg: dict, manifest=None) -> list[Path]:
    """Serve a TTS request file; each entry writes ``<id>.mel``.

    Request fields: ``id``, ``phoneme_ids``, ``prompt_wav`` (path relative to
    the request file), optional ``durations`` (falls back to manifest means).
    """
    input_path = Path(input_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rec in _load_requests(input_path):
        ids = tuple(int(i) for i in rec["phoneme_ids"])
        if "durations" in rec:
            durations = tuple(int(d) for d in rec["durations"])
        elif manifest is not None:
            durations = predict_durations(manifest, ids)
        else:
            raise TaskError(f"request {rec.get('id', '?')}: no durations and no manifest to estimate them")
        request = TtsRequest(phonemes=PhonemeSequence(ids, durations),
                             prompt_wav=_read_wav_field(rec, "prompt_wav", input_path.parent),
                             request_id=str(rec.get("id", len(outputs))))
        mel = tts_infer(model, request, flat_cfg)
        out = out_dir / f"{request.request_id}.mel"
        save_mel(mel, out)
        _maybe_plot(mel, out.with_suffix(".png"), bool(flat_cfg.get("infer.save_plots")))
        outputs.append(out)
        log.info("tts %s -> %s (%d frames)", request.request_id, out, mel.n_frames)
    return outputs


def run_vc_requests(model, input_path: str | Path, out_dir: str | Path,
                    flat_cfg: dict) -> list[Path]:
    """Serve a VC request file; fields: ``id``, ``source_wav``, ``prompt_wav``."""
    input_path = Path(input_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rec in _load_requests(input_path):
        request = VcRequest(source_wav=_read_wav_field(rec, "source_wav", input_path.parent),
                            prompt_wav=_read_wav_field(rec, "prompt_wav", input_path.parent),
                            request_id=str(rec.get("id", len(outputs))))
        mel = vc_infer(model, request, flat_cfg)
        out = out_dir / f"{request.request_id}.mel"
        save_mel(mel, out)
        _maybe_plot(mel, out.with_suffix(".png"), bool(flat_cfg.get("infer.save_plots")))
        outputs.append(out)
        log.info("vc %s -> %s (%d frames)", request.request_id, out, mel.n_frames)
    return outputs


def run_asr_requests(model, input_path: str | Path, out_dir: str | Path,
                     flat_cfg: dict, inventory=None) -> list[Path]:
    """Serve an ASR request file; fields: ``id``, ``wav``.  Writes ``<id>.json``
    with run-collapsed ids, durations, and symbols when an inventory is given."""
    input_path = Path(input_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rec in _load_requests(input_path):
        waveform = _read_wav_field(rec, "wav", input_path.parent)
        request_id = str(rec.get("id", len(outputs)))
        seq = asr_infer(model, waveform, flat_cfg)
        payload = {"ids": list(seq.ids), "durations": list(seq.durations)}
        if inventory is not None:
            payload["symbols"] = [inventory.symbols[i] for i in seq.ids]
        out = out_dir / f"{request_id}.json"
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        outputs.append(out)
        log.info("asr %s -> %s (%d runs)", request_id, out, len(seq.ids))
    return outputs
