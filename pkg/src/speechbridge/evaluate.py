"""Objective metrics and the evaluation report.

Word-level error rates from an external transcriber are out of reach here
(they need a vocoder and a third-party recognizer), so recognition quality
is reported as phoneme accuracy: one minus the normalized edit distance
between run-collapsed phoneme id sequences.  Pitch error (MSEP) is reported
in raw Hz^2 over mutually voiced frames.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .corpus import PhonemeSequence
from .frontend import MelSpectrogram, PitchContour, extract_pitch, invert_mel

log = logging.getLogger("speechbridge")


class EvalError(ValueError):
    """Shape mismatch or an undefined metric (e.g. no voiced frames)."""


def _to_matrix(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    if x.ndim != 2:
        raise EvalError("expected a (T, d) or (B, T, d) embedding array")
    return x


def frame_retrieval_accuracy(speech, phoneme) -> dict[str, float]:
    """Fraction of frames whose nearest cross-modal neighbour is their own slot.

    Cosine similarity on both axes of the flattened frame-by-frame matrix;
    scale-invariant in either embedding.
    """
    s = _to_matrix(speech)
    p = _to_matrix(phoneme)
    if s.shape != p.shape:
        raise EvalError(f"shape mismatch: {s.shape} vs {p.shape}")
    s = s / np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-12)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    sim = s @ p.T
    diag = np.arange(sim.shape[0])
    return {
        "speech_to_phoneme": float(np.mean(np.argmax(sim, axis=1) == diag)),
        "phoneme_to_speech": float(np.mean(np.argmax(sim, axis=0) == diag)),
    }


def msep(pred: PitchContour, gt: PitchContour) -> float:
    """Mean squared f0 error (Hz^2) over frames voiced in both contours."""
    if len(pred.f0) != len(gt.f0):
        raise EvalError(f"contour lengths differ: {len(pred.f0)} vs {len(gt.f0)}")
    both = pred.voiced() & gt.voiced()
    if not both.any():
        raise EvalError("no mutually voiced frames")
    diff = pred.f0[both].astype(np.float64) - gt.f0[both].astype(np.float64)
    return float(np.mean(diff ** 2))


def collapse_runs(ids) -> list[tuple[int, int]]:
    """Run-length encode an id sequence into (id, length) pairs."""
    out: list[tuple[int, int]] = []
    for i in ids:
        i = int(i)
        if out and out[-1][0] == i:
            out[-1] = (i, out[-1][1] + 1)
        else:
            out.append((i, 1))
    return out


def edit_distance(a: list[int], b: list[int]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != bj))
        prev = cur
    return prev[len(b)]


def phoneme_accuracy(pred: PhonemeSequence, gt: PhonemeSequence) -> float:
    """1 - normalized edit distance between run-collapsed id sequences."""
    gt_ids = [i for i, _ in collapse_runs(gt.ids)]
    if not gt_ids:
        raise EvalError("ground-truth sequence is empty")
    pred_ids = [i for i, _ in collapse_runs(pred.ids)]
    dist = edit_distance(pred_ids, gt_ids)
    return float(np.clip(1.0 - dist / len(gt_ids), 0.0, 1.0))


def mel_mse(pred: MelSpectrogram | np.ndarray, gt: MelSpectrogram | np.ndarray) -> float:
    a = pred.frames if isinstance(pred, MelSpectrogram) else np.asarray(pred)
    b = gt.frames if isinstance(gt, MelSpectrogram) else np.asarray(gt)
    if a.shape != b.shape:
        raise EvalError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


# ---------------------------------------------------------------------------
# report generation
# ---------------------------------------------------------------------------

def _pitch_of_mel(mel: MelSpectrogram) -> PitchContour:
    """Pitch of a predicted mel via deterministic phase reconstruction."""
    wav = invert_mel(mel)
    contour = extract_pitch(wav)
    f0 = contour.f0[: mel.n_frames]
    if len(f0) < mel.n_frames:
        f0 = np.pad(f0, (0, mel.n_frames - len(f0)))
    return PitchContour(f0=f0)


def eval_report(model, data, flat_cfg: dict, out_dir: str | Path,
                tasks: tuple[str, ...] = ("tts", "vc", "asr"),
                step: int | None = None,
                train_log: str | Path | None = None) -> dict:
    """Run the selected pipelines over the test partition and write a report.

    Emits ``report.txt`` (aligned metric table), ``metrics.json``, and plot
    images (similarity heatmap, mel comparison, loss curves when a training
    log is supplied).  Deterministic given (checkpoint, partition).
    """
    from . import tasks as task_ops
    from .trainer import CorpusData, embed_partition

    if not isinstance(data, CorpusData):
        raise EvalError("eval_report needs a CorpusData instance")
    unknown = set(tasks) - {"tts", "vc", "asr"}
    if unknown:
        raise EvalError(f"unknown tasks: {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_idxs = data.indices("test")
    if not test_idxs:
        raise EvalError("test partition is empty")

    rows: list[tuple[str, str, float]] = []
    metrics: dict[str, float] = {}

    speech, phoneme = embed_partition(model, data, test_idxs)
    retrieval = frame_retrieval_accuracy(torch.cat(speech), torch.cat(phoneme))
    for key, value in retrieval.items():
        rows.append(("embed", f"retrieval_{key}", value))
        metrics[f"retrieval_{key}"] = value

    utts = {i: data.manifest.utterances[i] for i in test_idxs}

    if "tts" in tasks:
        mses, pitch_errors = [], []
        for i in test_idxs:
            utt = utts[i]
            request = task_ops.TtsRequest(phonemes=utt.phonemes,
                                          prompt_wav=data.items[i].waveform)
            pred = task_ops.tts_infer(model, request, flat_cfg)
            t = min(pred.n_frames, data.items[i].mel.n_frames)
            mses.append(mel_mse(pred.frames[:t], data.items[i].mel.frames[:t]))
            pitch_errors.append(_task_msep(pred, data.items[i].waveform))
        rows.append(("tts", "mel_mse", float(np.mean(mses))))
        rows.append(("tts", "msep", float(np.mean(pitch_errors))))
        metrics["tts_mel_mse"] = float(np.mean(mses))
        metrics["tts_msep"] = float(np.mean(pitch_errors))

    if "vc" in tasks:
        mses, pitch_errors = [], []
        for i in test_idxs:
            request = task_ops.VcRequest(source_wav=data.items[i].waveform,
                                         prompt_wav=data.items[i].waveform)
            pred = task_ops.vc_infer(model, request, flat_cfg)
            mses.append(mel_mse(pred.frames, data.items[i].mel.frames))
            pitch_errors.append(_task_msep(pred, data.items[i].waveform))
        rows.append(("vc", "mel_mse", float(np.mean(mses))))
        rows.append(("vc", "msep", float(np.mean(pitch_errors))))
        metrics["vc_mel_mse"] = float(np.mean(mses))
        metrics["vc_msep"] = float(np.mean(pitch_errors))

    if "asr" in tasks:
        accs = []
        for i in test_idxs:
            utt = utts[i]
            pred = task_ops.asr_infer(model, data.items[i].waveform, flat_cfg)
            accs.append(phoneme_accuracy(pred, utt.phonemes))
        rows.append(("asr", "acc", float(np.mean(accs))))
        metrics["asr_acc"] = float(np.mean(accs))

    lines = ["# evaluation report",
             f"step: {step if step is not None else 'n/a'}",
             f"test_utterances: {len(test_idxs)}",
             "",
             f"{'task':<8}{'metric':<28}{'value':>14}"]
    for task, metric, value in rows:
        lines.append(f"{task:<8}{metric:<28}{value:>14.6f}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    _plot_similarity(torch.cat(speech), torch.cat(phoneme), out_dir / "similarity.png")
    _plot_mel_comparison(model, data, test_idxs[0], flat_cfg, out_dir / "mel_comparison.png")
    if train_log:
        _plot_loss_curves(train_log, out_dir / "loss_curves.png")
    log.info("report written to %s", out_dir / "report.txt")
    return metrics


def _task_msep(pred_mel: MelSpectrogram, gt_waveform: np.ndarray) -> float:
    pred_pitch = _pitch_of_mel(pred_mel)
    gt_pitch = extract_pitch(gt_waveform)
    t = min(len(pred_pitch.f0), len(gt_pitch.f0))
    try:
        return msep(PitchContour(pred_pitch.f0[:t]), PitchContour(gt_pitch.f0[:t]))
    except EvalError:
        return float("nan")


def _plot_similarity(speech, phoneme, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    s = _to_matrix(speech)
    p = _to_matrix(phoneme)
    s = s / np.maximum(np.linalg.norm(s, axis=1, keepdims=True), 1e-12)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(s @ p.T, origin="lower", aspect="auto", cmap="magma")
    ax.set_xlabel("phoneme frame")
    ax.set_ylabel("speech frame")
    ax.set_title("cross-modal cosine similarity")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_mel_comparison(model, data, idx: int, flat_cfg: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from . import tasks as task_ops
    item = data.items[idx]
    utt = data.manifest.utterances[idx]
    tts = task_ops.tts_infer(model, task_ops.TtsRequest(utt.phonemes, item.waveform), flat_cfg)
    vc = task_ops.vc_infer(model, task_ops.VcRequest(item.waveform, item.waveform), flat_cfg)
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    for ax, (title, mel) in zip(axes, [("ground truth", item.mel.frames),
                                       ("tts", tts.frames), ("vc", vc.frames)]):
        ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", cmap="viridis")
        ax.set_title(title)
        ax.set_ylabel("mel band")
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_loss_curves(train_log: str | Path, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    records = [json.loads(line) for line in Path(train_log).read_text().splitlines() if line]
    if not records:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in records]
    for key in ("total", "contrastive", "mse", "kl"):
        if key in records[0]:
            ax.plot(steps, [r.get(key, np.nan) for r in records], label=key, linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
