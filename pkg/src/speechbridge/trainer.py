"""Pretraining loop and the three fine-tuning schedules.

Determinism contract: the parameter trajectory is a pure function of
(seed, config, corpus).  Every stochastic choice a step makes (batch
indices, prompt-window starts, the VAE epsilon, dropout masks) draws from
an RNG stream derived from (seed, step), never from loop history, so a run
resumed from a step-K checkpoint replays the exact trajectory of an
uninterrupted run.  Checkpoints carry the Adam moments for the same reason.

Fine-tunes freeze sub-networks by name; frozen networks run in eval mode
and their per-utterance embeddings are computed once up front.  A frozen
parameter's bytes are identical before and after any schedule here.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .corpus import CorpusManifest, read_wav
from .frontend import MelSpectrogram, mel_spectrogram, random_prompt_clip
from .losses import (LossBreakdown, contrastive_loss, embedding_mse_loss,
                     kl_margin_loss, masked_mse, mse_loss, phoneme_ce_loss,
                     similarity_matrix, total_loss)
from .model import BridgeModel, SUBNETWORKS

log = logging.getLogger("speechbridge")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# stream tags for per-step seed derivation
_BATCH, _CLIP, _EPS, _TORCH = 11, 13, 17, 19


class TrainerError(RuntimeError):
    """Bad partitions, inconsistent data, or a non-finite loss."""


def _seed_int(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)[0] >> 1)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------

@dataclass
class UtteranceFeatures:
    utt_id: str
    speaker_id: str
    partition: str
    mel: MelSpectrogram
    frame_ids: np.ndarray       # (T,) int64 phoneme id per frame
    waveform: np.ndarray


class CorpusData:
    """Manifest plus per-utterance features, computed once and cached."""

    def __init__(self, manifest: CorpusManifest, root: str | Path):
        self.manifest = manifest
        self.root = Path(root)
        self.inventory_size = manifest.inventory.size
        self.items: list[UtteranceFeatures] = []
        for utt in manifest.utterances:
            waveform, rate = read_wav(self.root / utt.wav_path)
            mel = mel_spectrogram(waveform, rate)
            frame_ids = utt.phonemes.frame_ids()
            diff = mel.n_frames - len(frame_ids)
            if abs(diff) > 1:
                raise TrainerError(
                    f"{utt.utt_id}: mel frames ({mel.n_frames}) and duration sum "
                    f"({len(frame_ids)}) differ by more than one frame")
            if diff != 0:   # corpus invariant allows a one-frame slack
                t = min(mel.n_frames, len(frame_ids))
                mel = MelSpectrogram(mel.frames[:t], mel.hop, mel.sample_rate, mel.floor)
                frame_ids = frame_ids[:t]
            self.items.append(UtteranceFeatures(
                utt_id=utt.utt_id, speaker_id=utt.speaker.speaker_id,
                partition=utt.partition, mel=mel, frame_ids=frame_ids,
                waveform=waveform))

    @classmethod
    def load(cls, manifest_path: str | Path) -> "CorpusData":
        path = Path(manifest_path)
        return cls(CorpusManifest.load(path), path.parent)

    def indices(self, partition: str, speaker: str | None = None) -> list[int]:
        out = [i for i, item in enumerate(self.items)
               if item.partition == partition
               and (speaker is None or item.speaker_id == speaker)]
        return out

    def log_floor(self) -> float:
        return self.items[0].mel.log_floor if self.items else float(np.log(1e-5))


@dataclass
class Batch:
    mel: torch.Tensor           # (B, T, 40)
    valid: torch.Tensor         # (B, T) bool
    frame_ids: torch.Tensor     # (B, T) long, padded with silence id 0
    clips: torch.Tensor         # (B, 300, 40)
    clip_valid: torch.Tensor    # (B, 300) bool
    idxs: list[int]


def make_batch(data: CorpusData, idxs: list[int], clip_seeds: list[int],
               dtype: torch.dtype = torch.float32) -> Batch:
    t_max = max(data.items[i].mel.n_frames for i in idxs)
    b = len(idxs)
    floor = data.log_floor()
    mel = np.full((b, t_max, 40), floor, dtype=np.float32)
    valid = np.zeros((b, t_max), dtype=bool)
    frame_ids = np.zeros((b, t_max), dtype=np.int64)
    clips = np.empty((b, 300, 40), dtype=np.float32)
    clip_valid = np.zeros((b, 300), dtype=bool)
    for j, (i, seed) in enumerate(zip(idxs, clip_seeds)):
        item = data.items[i]
        t = item.mel.n_frames
        mel[j, :t] = item.mel.frames
        valid[j, :t] = True
        frame_ids[j, :t] = item.frame_ids
        clip = random_prompt_clip(item.mel, seed)
        clips[j] = clip.frames
        clip_valid[j, :clip.n_valid] = True
    return Batch(mel=torch.from_numpy(mel).to(dtype),
                 valid=torch.from_numpy(valid),
                 frame_ids=torch.from_numpy(frame_ids),
                 clips=torch.from_numpy(clips).to(dtype),
                 clip_valid=torch.from_numpy(clip_valid),
                 idxs=list(idxs))


# ---------------------------------------------------------------------------
# configuration and shared machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    variant: str = "full"
    freeze: frozenset = frozenset()
    grad_clip_norm: float = 1.0
    warmup_steps: int = 0
    checkpoint_interval: int = 500
    log_interval: int = 100
    l2_normalize: bool = True

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise TrainerError("lr must be positive")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")

    @classmethod
    def from_flat(cls, cfg: dict) -> "TrainConfig":
        freeze = frozenset(n.strip() for n in str(cfg["train.freeze"]).split(",") if n.strip())
        unknown = freeze - set(SUBNETWORKS)
        if unknown:
            raise TrainerError(f"unknown sub-networks in train.freeze: {sorted(unknown)}")
        return cls(lr=cfg["train.lr"], batch_size=cfg["train.batch_size"],
                   max_steps=cfg["train.max_steps"], seed=cfg["train.seed"],
                   variant=cfg["loss.variant"], freeze=freeze,
                   grad_clip_norm=cfg["train.grad_clip_norm"],
                   warmup_steps=cfg["train.warmup_steps"],
                   checkpoint_interval=cfg["train.checkpoint_interval"],
                   log_interval=cfg["train.log_interval"],
                   l2_normalize=cfg["loss.l2_normalize"])


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path | None
    steps: int
    last_record: dict = field(default_factory=dict)


def _sample_batch(pool: list[int], batch_size: int,
                  rng: np.random.Generator) -> list[int]:
    """Batch of utterance indices; the whole pool when it is small enough."""
    if len(pool) <= batch_size:
        return list(pool)
    return [pool[int(k)] for k in rng.choice(len(pool), size=batch_size, replace=False)]


def variant_subnetworks(variant: str) -> tuple[str, ...]:
    """Sub-networks that receive gradients under a loss variant."""
    nets = ["speech_encoder", "phoneme_encoder", "temperature"]
    if variant != "no_decoder":
        nets += ["prompt_encoder", "decoder"]
    if variant == "plus_phoneme_decoder":
        nets += ["phoneme_decoder"]
    return tuple(nets)


def set_trainable(model: BridgeModel, subnetworks: tuple[str, ...]) -> list[torch.nn.Parameter]:
    """Enable grads exactly for the named sub-networks; return their params."""
    trainable = []
    for name in SUBNETWORKS:
        if name == "temperature":
            if isinstance(model.log_tau, torch.nn.Parameter):
                model.log_tau.requires_grad_(name in subnetworks)
                if name in subnetworks:
                    trainable.append(model.log_tau)
            continue
        module = getattr(model, name)
        enabled = name in subnetworks
        for p in module.parameters():
            p.requires_grad_(enabled)
            if enabled:
                trainable.append(p)
    return trainable


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                            foreach=False)


def _set_lr(optimizer, cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    if cfg.warmup_steps > 0:
        lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    return lr


def _check_finite(breakdown: LossBreakdown, step: int, out_dir: Path) -> None:
    if torch.isfinite(breakdown.total):
        return
    dump = {"step": step, **breakdown.to_floats()}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2, sort_keys=True))
    raise TrainerError(f"non-finite loss at step {step}; diagnostics in {out_dir/'nan_dump.json'}")


def _clip_and_step(optimizer, params, breakdown: LossBreakdown,
                   clip_norm: float) -> float:
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, clip_norm))
    optimizer.step()
    return grad_norm


class _JsonlLog:
    """Line-delimited structured training log, one record per step."""

    def __init__(self, path: Path, append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def embed_partition(model: BridgeModel, data: CorpusData, idxs: list[int]
                    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Per-utterance (S, P) embeddings in eval mode, one forward each."""
    speech, phoneme = [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in idxs:
            item = data.items[i]
            mel = torch.from_numpy(np.array(item.mel.frames, dtype=np.float32))[None]
            ids = torch.from_numpy(item.frame_ids)[None]
            speech.append(model.speech_encoder(mel)[0])
            phoneme.append(model.phoneme_encoder(model.phoneme_encoder.embed(ids))[0])
    model.train(was_training)
    return speech, phoneme


def retrieval_probe(model: BridgeModel, data: CorpusData, idxs: list[int]) -> dict:
    """Frame retrieval over the whole set of utterances, both directions."""
    from .evaluate import frame_retrieval_accuracy
    speech, phoneme = embed_partition(model, data, idxs)
    s = torch.cat(speech, dim=0)
    p = torch.cat(phoneme, dim=0)
    return frame_retrieval_accuracy(s, p)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def compute_pretrain_losses(model: BridgeModel, batch: Batch, variant: str,
                            l2_normalize: bool,
                            eps_generator: torch.Generator | None) -> LossBreakdown:
    """Forward all required networks for one batch and combine the variant."""
    s = model.speech_encoder(batch.mel, batch.valid)
    p = model.phoneme_encoder(model.phoneme_encoder.embed(batch.frame_ids), batch.valid)
    sim = similarity_matrix(s, p, model.temperature(), l2_normalize, batch.valid)
    contrastive = contrastive_loss(sim)
    if variant == "no_decoder":
        return total_loss("no_decoder", contrastive=contrastive)

    mu, sigma = model.prompt_encoder(batch.clips, batch.clip_valid)
    eps = torch.randn(mu.shape, generator=eps_generator, dtype=mu.dtype)
    g = mu + sigma * eps
    mel_s = model.decoder(s, g, batch.valid)
    mel_p = model.decoder(p, g, batch.valid)
    rec = mse_loss(mel_s, mel_p, batch.mel, batch.valid)
    kl = kl_margin_loss(mu, sigma, model.config.kl_margin)
    if variant == "full":
        return total_loss("full", contrastive=contrastive, mse=rec, kl=kl)
    if variant == "plus_embed_mse":
        return total_loss("plus_embed_mse", contrastive=contrastive, mse=rec,
                          kl=kl, embed_mse=embedding_mse_loss(s, p, batch.valid))
    ce = (phoneme_ce_loss(model.phoneme_decoder(s, batch.valid), batch.frame_ids, batch.valid)
          + phoneme_ce_loss(model.phoneme_decoder(p, batch.valid), batch.frame_ids, batch.valid))
    return total_loss("plus_phoneme_decoder", contrastive=contrastive, mse=rec,
                      kl=kl, phoneme_ce=ce)


def pretrain(model: BridgeModel, data: CorpusData, flat_cfg: dict,
             out_dir: str | Path, resume_from: str | Path | None = None) -> TrainResult:
    """Joint contrastive pretraining on the manifest's pretrain partition."""
    cfg = TrainConfig.from_flat(flat_cfg)
    out_dir = Path(out_dir)
    part = data.indices("pretrain")
    if not part:
        raise TrainerError("pretrain partition is empty")

    trainable_names = tuple(n for n in variant_subnetworks(cfg.variant)
                            if n not in cfg.freeze)
    params = set_trainable(model, trainable_names)
    optimizer = _make_optimizer(params, cfg)

    start_step = 0
    if resume_from is not None:
        state = ckpt_io.load_checkpoint(resume_from)
        ckpt_io.restore_model(model, state)
        ckpt_io.restore_optimizer(optimizer, model, state)
        start_step = state.step
        log.info("resumed from %s at step %d", resume_from, start_step)

    logger = _JsonlLog(out_dir / "train_log.jsonl", append=start_step > 0)
    model.train()
    record: dict = {}
    try:
        for step in range(start_step, cfg.max_steps):
            t0 = time.perf_counter()
            lr = _set_lr(optimizer, cfg, step)
            torch.manual_seed(_seed_int(cfg.seed, step, _TORCH))  # dropout stream
            rng = _rng(cfg.seed, step, _BATCH)
            idxs = _sample_batch(part, cfg.batch_size, rng)
            clip_seeds = [_seed_int(cfg.seed, step, _CLIP, j) for j in range(len(idxs))]
            batch = make_batch(data, idxs, clip_seeds)
            eps_gen = torch.Generator().manual_seed(_seed_int(cfg.seed, step, _EPS))

            breakdown = compute_pretrain_losses(model, batch, cfg.variant,
                                                cfg.l2_normalize, eps_gen)
            _check_finite(breakdown, step, out_dir)
            grad_norm = _clip_and_step(optimizer, params, breakdown, cfg.grad_clip_norm)

            record = {"step": step + 1, "lr": lr, "grad_norm": grad_norm,
                      "tau": float(model.temperature()),
                      "time": time.perf_counter() - t0,
                      **breakdown.to_floats()}
            if (step + 1) % cfg.log_interval == 0 or step + 1 == cfg.max_steps:
                probe = retrieval_probe(model, data, part)
                record.update({f"retrieval_{k}": v for k, v in probe.items()})
                model.train()
                log.info("step %d/%d total=%.4f retrieval=%.3f/%.3f",
                         step + 1, cfg.max_steps, record["total"],
                         probe["speech_to_phoneme"], probe["phoneme_to_speech"])
            logger.write(record)

            if cfg.checkpoint_interval > 0 and (step + 1) % cfg.checkpoint_interval == 0 \
                    and step + 1 < cfg.max_steps:
                ckpt_io.save_checkpoint(out_dir / f"checkpoint_step{step + 1}.bin",
                                        model, flat_cfg, step + 1, optimizer)
    finally:
        logger.close()

    final = ckpt_io.save_checkpoint(out_dir / "checkpoint_final.bin", model,
                                    flat_cfg, cfg.max_steps, optimizer)
    return TrainResult(checkpoint_path=final, log_path=logger.path,
                       steps=cfg.max_steps, last_record=record)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _finetune_config(flat_cfg: dict, steps_key: str, variant: str = "full") -> TrainConfig:
    return TrainConfig(lr=flat_cfg["finetune.lr"],
                       batch_size=flat_cfg["finetune.batch_size"],
                       max_steps=flat_cfg[steps_key],
                       seed=flat_cfg["finetune.seed"], variant=variant,
                       grad_clip_norm=flat_cfg["train.grad_clip_norm"],
                       log_interval=flat_cfg["train.log_interval"],
                       l2_normalize=flat_cfg["loss.l2_normalize"])


def _pad_embeddings(embs: list[torch.Tensor], mels: list[np.ndarray],
                    ids: list[np.ndarray], floor: float
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack per-utterance (T_i, d) embeddings and targets into a padded batch."""
    b = len(embs)
    t_max = max(e.shape[0] for e in embs)
    d = embs[0].shape[1]
    emb = torch.zeros(b, t_max, d)
    mel = torch.full((b, t_max, 40), floor)
    valid = torch.zeros(b, t_max, dtype=torch.bool)
    targets = torch.zeros(b, t_max, dtype=torch.long)
    for j, e in enumerate(embs):
        t = e.shape[0]
        emb[j, :t] = e
        mel[j, :t] = torch.from_numpy(np.asarray(mels[j], dtype=np.float32))
        valid[j, :t] = True
        targets[j, :t] = torch.from_numpy(np.asarray(ids[j], dtype=np.int64))
    return emb, mel, valid, targets


def _reconstruction_stage(model: BridgeModel, data: CorpusData, idxs: list[int],
                          cfg: TrainConfig, *, stream: str, train_prompt: bool,
                          sample_g: bool, seed_salt: int,
                          jsonl: _JsonlLog | None, out_dir: Path,
                          stage: str) -> dict:
    """Shared decoder-training loop over frozen-encoder embeddings.

    ``stream`` picks which frozen embedding feeds the decoder ("speech" or
    "phoneme").  Stage 1 of TTS and the whole of VC train decoder + prompt
    encoder with a sampled g and the hinged KL; stage 2 trains the decoder
    alone on the posterior mean.
    """
    speech, phoneme = embed_partition(model, data, idxs)
    embs = speech if stream == "speech" else phoneme
    cache = {i: (embs[k], data.items[i].mel.frames, data.items[i].frame_ids)
             for k, i in enumerate(idxs)}

    nets = ("decoder", "prompt_encoder") if train_prompt else ("decoder",)
    params = set_trainable(model, nets)
    optimizer = _make_optimizer(params, cfg)
    model.train()
    if not train_prompt:
        model.prompt_encoder.eval()
    floor = data.log_floor()
    record: dict = {}
    for step in range(cfg.max_steps):
        t0 = time.perf_counter()
        lr = _set_lr(optimizer, cfg, step)
        torch.manual_seed(_seed_int(cfg.seed, seed_salt, step, _TORCH))
        rng = _rng(cfg.seed, seed_salt, step, _BATCH)
        chosen = _sample_batch(idxs, cfg.batch_size, rng)
        emb, mel, valid, _ = _pad_embeddings(
            [cache[i][0] for i in chosen], [cache[i][1] for i in chosen],
            [cache[i][2] for i in chosen], floor)
        clips = np.empty((len(chosen), 300, 40), dtype=np.float32)
        clip_valid = np.zeros((len(chosen), 300), dtype=bool)
        for j, i in enumerate(chosen):
            clip = random_prompt_clip(data.items[i].mel,
                                      _seed_int(cfg.seed, seed_salt, step, _CLIP, j))
            clips[j] = clip.frames
            clip_valid[j, :clip.n_valid] = True
        clips_t = torch.from_numpy(clips)
        clip_valid_t = torch.from_numpy(clip_valid)

        if train_prompt:
            mu, sigma = model.prompt_encoder(clips_t, clip_valid_t)
        else:
            with torch.no_grad():
                mu, sigma = model.prompt_encoder(clips_t, clip_valid_t)
        if sample_g:
            eps_gen = torch.Generator().manual_seed(_seed_int(cfg.seed, seed_salt, step, _EPS))
            g = mu + sigma * torch.randn(mu.shape, generator=eps_gen, dtype=mu.dtype)
        else:
            g = mu

        pred = model.decoder(emb, g, valid)
        rec = masked_mse(pred, mel, valid)
        if train_prompt:
            kl = kl_margin_loss(mu, sigma, model.config.kl_margin)
            loss = rec + kl
        else:
            kl = None
            loss = rec
        breakdown = LossBreakdown(variant=f"finetune_{stage}", mse=rec, kl=kl,
                                  total=loss)
        _check_finite(breakdown, step, out_dir)
        grad_norm = _clip_and_step(optimizer, params, breakdown, cfg.grad_clip_norm)
        record = {"stage": stage, "step": step + 1, "lr": lr, "mse": float(rec),
                  "total": float(loss), "grad_norm": grad_norm,
                  "time": time.perf_counter() - t0}
        if kl is not None:
            record["kl"] = float(kl)
        if jsonl is not None:
            jsonl.write(record)
    return record


def finetune_tts(model: BridgeModel, data: CorpusData, flat_cfg: dict,
                 out_dir: str | Path) -> TrainResult:
    """Two-stage TTS fine-tune: speech-only reconstruction, then labeled pairs.

    Both encoders are frozen throughout; stage 1 trains decoder + prompt
    encoder on the speech_only partition, stage 2 continues the decoder
    alone on the finetune_labeled pairs through the phoneme stream.
    """
    out_dir = Path(out_dir)
    speech_only = data.indices("speech_only")
    labeled = data.indices("finetune_labeled")
    if not speech_only:
        raise TrainerError("speech_only partition is empty")
    if not labeled:
        raise TrainerError("finetune_labeled partition is empty")

    jsonl = _JsonlLog(out_dir / "train_log.jsonl", append=False)
    try:
        cfg1 = _finetune_config(flat_cfg, "finetune.tts_stage1_steps")
        _reconstruction_stage(model, data, speech_only, cfg1, stream="speech",
                              train_prompt=True, sample_g=True, seed_salt=101,
                              jsonl=jsonl, out_dir=out_dir, stage="tts_stage1")
        cfg2 = _finetune_config(flat_cfg, "finetune.tts_stage2_steps")
        record = _reconstruction_stage(model, data, labeled, cfg2, stream="phoneme",
                                       train_prompt=False, sample_g=False,
                                       seed_salt=102, jsonl=jsonl,
                                       out_dir=out_dir, stage="tts_stage2")
    finally:
        jsonl.close()
    final = ckpt_io.save_checkpoint(out_dir / "checkpoint_final.bin", model,
                                    flat_cfg, cfg1.max_steps + cfg2.max_steps)
    return TrainResult(checkpoint_path=final, log_path=jsonl.path,
                       steps=cfg1.max_steps + cfg2.max_steps, last_record=record)


def finetune_vc(model: BridgeModel, data: CorpusData, flat_cfg: dict,
                out_dir: str | Path) -> TrainResult:
    """Voice-conversion fine-tune: decoder + prompt encoder on the target
    speaker's speech-only data.  No phoneme labels are read anywhere on this
    path; the loss sees only mels and prompt windows."""
    out_dir = Path(out_dir)
    speaker = str(flat_cfg.get("finetune.vc_speaker", "")) or None
    idxs = data.indices("speech_only", speaker=speaker)
    if not idxs:
        suffix = f" for speaker {speaker}" if speaker else ""
        raise TrainerError("speech_only partition is empty" + suffix)
    jsonl = _JsonlLog(out_dir / "train_log.jsonl", append=False)
    try:
        cfg = _finetune_config(flat_cfg, "finetune.vc_steps")
        record = _reconstruction_stage(model, data, idxs, cfg, stream="speech",
                                       train_prompt=True, sample_g=True,
                                       seed_salt=201, jsonl=jsonl,
                                       out_dir=out_dir, stage="vc")
    finally:
        jsonl.close()
    final = ckpt_io.save_checkpoint(out_dir / "checkpoint_final.bin", model,
                                    flat_cfg, cfg.max_steps)
    return TrainResult(checkpoint_path=final, log_path=jsonl.path,
                       steps=cfg.max_steps, last_record=record)


def train_asr_head(model: BridgeModel, data: CorpusData, flat_cfg: dict,
                   out_dir: str | Path) -> TrainResult:
    """Train the phoneme-decoder head on frame-level targets; everything else
    is frozen.  Targets are the ground-truth duration expansion."""
    out_dir = Path(out_dir)
    labeled = data.indices("finetune_labeled")
    if not labeled:
        raise TrainerError("finetune_labeled partition is empty")

    cfg = _finetune_config(flat_cfg, "finetune.asr_steps")
    speech, _ = embed_partition(model, data, labeled)
    cache = {i: (speech[k], data.items[i].mel.frames, data.items[i].frame_ids)
             for k, i in enumerate(labeled)}
    params = set_trainable(model, ("phoneme_decoder",))
    optimizer = _make_optimizer(params, cfg)
    model.train()
    floor = data.log_floor()

    jsonl = _JsonlLog(out_dir / "train_log.jsonl", append=False)
    record: dict = {}
    try:
        for step in range(cfg.max_steps):
            t0 = time.perf_counter()
            lr = _set_lr(optimizer, cfg, step)
            torch.manual_seed(_seed_int(cfg.seed, 301, step, _TORCH))
            rng = _rng(cfg.seed, 301, step, _BATCH)
            chosen = _sample_batch(labeled, cfg.batch_size, rng)
            emb, _, valid, targets = _pad_embeddings(
                [cache[i][0] for i in chosen], [cache[i][1] for i in chosen],
                [cache[i][2] for i in chosen], floor)
            logits = model.phoneme_decoder(emb, valid)
            ce = phoneme_ce_loss(logits, targets, valid)
            breakdown = LossBreakdown(variant="asr_head", phoneme_ce=ce, total=ce)
            _check_finite(breakdown, step, out_dir)
            grad_norm = _clip_and_step(optimizer, params, breakdown, cfg.grad_clip_norm)
            record = {"stage": "asr_head", "step": step + 1, "lr": lr,
                      "phoneme_ce": float(ce), "total": float(ce),
                      "grad_norm": grad_norm, "time": time.perf_counter() - t0}
            jsonl.write(record)
    finally:
        jsonl.close()
    final = ckpt_io.save_checkpoint(out_dir / "checkpoint_final.bin", model,
                                    flat_cfg, cfg.max_steps)
    return TrainResult(checkpoint_path=final, log_path=jsonl.path,
                       steps=cfg.max_steps, last_record=record)
