"""Flat key=value configuration shared by the CLI, trainer, and pipelines.

One namespace for the whole project: every tunable has a default here, config
files and ``--set`` overrides may only touch known keys, and the effective
config is echoed into run logs and checkpoints so any run can be reproduced
from its artifacts.  File format: one ``key = value`` per line, ``#`` starts
a comment, blank lines ignored.  Values are typed by their default (bool,
int, float, or string).
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, malformed line, or a value that does not parse."""


# Defaults are toy-scale and CPU-friendly; configs/paper_scale.cfg records the
# published full-scale settings for documentation only.
DEFAULTS: dict[str, object] = {
    # ---- synthetic corpus -------------------------------------------------
    "corpus.seed": 0,
    "corpus.n_speakers": 2,
    "corpus.n_utterances": 8,
    "corpus.n_phonemes": 6,          # content phonemes; inventory adds "sil" at index 0
    "corpus.min_phones": 4,          # content phonemes per utterance
    "corpus.max_phones": 8,
    "corpus.min_dur": 3,             # frames per phoneme
    "corpus.max_dur": 20,
    "corpus.shared_content": True,   # every speaker reads the same scripts
    "corpus.edge_silence": True,     # leading/trailing silence segment
    "corpus.dir": "corpus",
    # ---- partition split (fractions must sum to 1) ------------------------
    "split.pretrain": 1.0,
    "split.finetune_labeled": 0.0,
    "split.speech_only": 0.0,
    "split.test": 0.0,
    "split.seed": 0,
    "split.out": "corpus/manifest_split.json",
    # ---- signal frontend ---------------------------------------------------
    "mel.sample_rate": 24000,
    "mel.frame_size": 960,
    "mel.hop": 240,
    "mel.n_mels": 40,
    "mel.fmin": 0.0,
    "mel.fmax": 12000.0,
    "mel.floor": 1e-5,
    "pitch.voicing_threshold": 0.3,
    "pitch.fmin": 50.0,
    "pitch.fmax": 600.0,
    # ---- model widths (layer counts are fixed, see model.py) ---------------
    "model.d": 16,
    "model.hidden": 32,
    "model.phoneme_dim": 64,
    "model.prompt_dim": 32,
    "model.heads": 4,
    "model.dropout": 0.1,
    "model.inventory_size": 0,       # 0 = resolve from the manifest at run time
    "model.seed": 0,
    "model.toy_scale": True,
    # ---- loss --------------------------------------------------------------
    "loss.variant": "full",          # full | no_decoder | plus_embed_mse | plus_phoneme_decoder
    "loss.l2_normalize": True,
    "loss.learnable_tau": True,
    "loss.tau_init": 14.285714285714286,   # 1/0.07
    "loss.tau_max": 100.0,
    "loss.kl_margin": 0.5,
    # ---- pretraining -------------------------------------------------------
    "train.lr": 2e-4,
    "train.batch_size": 8,
    "train.max_steps": 2000,
    "train.seed": 0,
    "train.grad_clip_norm": 1.0,
    "train.warmup_steps": 0,
    "train.checkpoint_interval": 500,
    "train.log_interval": 100,       # retrieval probe + console cadence
    "train.freeze": "",              # comma list of sub-network names
    "train.dir": "runs/pretrain",
    "train.resume": "",              # checkpoint path to resume from
    # ---- fine-tuning -------------------------------------------------------
    "finetune.lr": 1e-3,
    "finetune.tts_stage1_steps": 400,
    "finetune.tts_stage2_steps": 400,
    "finetune.vc_steps": 400,
    "finetune.asr_steps": 800,
    "finetune.batch_size": 8,
    "finetune.seed": 0,
    "finetune.init_checkpoint": "runs/pretrain/checkpoint_final.bin",
    "finetune.vc_speaker": "",       # target speaker id; empty = whole speech_only partition
    "finetune.dir": "runs/finetune",
    # ---- shared data paths (relative to --workdir) --------------------------
    "data.manifest": "corpus/manifest.json",
    # ---- inference ----------------------------------------------------------
    "infer.checkpoint": "runs/finetune/checkpoint_final.bin",
    "infer.input": "requests.json",
    "infer.dir": "infer_out",
    "infer.prompt_seed": 0,
    "infer.save_plots": False,
    # ---- evaluation ---------------------------------------------------------
    "eval.checkpoint": "runs/finetune/checkpoint_final.bin",
    "eval.tasks": "tts,vc,asr",
    "eval.dir": "eval_out",
    "eval.train_log": "",            # optional train log for the loss-curve plot
}


def default_config() -> dict[str, object]:
    """Fresh copy of the full default configuration."""
    return dict(DEFAULTS)


def parse_value(key: str, text: str) -> object:
    """Parse ``text`` into the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return text


def apply_overrides(cfg: dict[str, object], pairs: list[str]) -> dict[str, object]:
    """Apply ``key=value`` override strings in place and return ``cfg``."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, text = pair.split("=", 1)
        key = key.strip()
        cfg[key] = parse_value(key, text)
    return cfg


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> dict[str, object]:
    """Defaults, then the optional config file, then ``--set`` overrides."""
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            cfg[key] = parse_value(key, value)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def format_config(cfg: dict[str, object]) -> str:
    """Render a config as a parse-able, sorted key=value listing."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: dict[str, object], path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
