"""Command-line entry point; the project's only human interface.

Every subcommand reads the same flat config schema (``--config`` file plus
repeatable ``--set key=value`` overrides) and resolves all paths against
``--workdir``.  Runs echo their effective config next to their outputs, so a
run is reproducible from its artifacts alone.  Exit codes: 0 success,
1 usage error, 2 runtime failure.  ``SPEECHBRIDGE_LOG_LEVEL`` (error | info
| debug) controls verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError

log = logging.getLogger("speechbridge")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="speechbridge", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", default=None, help="config file (key = value lines)")
            p.add_argument("--set", dest="overrides", action="append", default=[],
                           metavar="KEY=VALUE", help="override one config key")
            p.add_argument("--workdir", default=".", help="base directory for all relative paths")
        return p

    add("synth-corpus", "render the synthetic corpus and write its manifest")
    add("split", "assign partition tags by the split.* fractions")
    add("pretrain", "joint contrastive pretraining on the pretrain partition")
    add("finetune-tts", "two-stage TTS fine-tune (speech-only, then labeled pairs)")
    add("finetune-vc", "decoder+prompt fine-tune on target-speaker speech")
    add("train-asr", "train the phoneme recognition head on labeled pairs")
    add("infer-tts", "serve a TTS request file, writing mel containers")
    add("infer-vc", "serve a VC request file, writing mel containers")
    add("infer-asr", "serve an ASR request file, writing phoneme JSON")
    add("eval", "metric report + plots over the test partition")
    inspect = add("inspect-checkpoint", "print a checkpoint's config echo and sizes",
                  needs_config=False)
    inspect.add_argument("checkpoint", help="checkpoint file to inspect")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SPEECHBRIDGE_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"SPEECHBRIDGE_LOG_LEVEL must be error|info|debug, got {level!r}")
    logging.basicConfig(level=levels[level],
                        format="%(asctime)s %(levelname)s %(message)s",
                        datefmt="%H:%M:%S")
    log.setLevel(levels[level])


def _load(args) -> tuple[dict, Path]:
    workdir = Path(args.workdir)
    config_path = args.config
    if config_path is not None and not Path(config_path).is_absolute():
        config_path = workdir / config_path
    cfg = cfgmod.load_config(config_path, args.overrides)
    if args.overrides:
        log.info("overrides: %s", ", ".join(args.overrides))
    return cfg, workdir


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.save_config(cfg, out_dir / "config_used.cfg")


def _load_corpus(cfg: dict, workdir: Path):
    from .trainer import CorpusData
    return CorpusData.load(workdir / cfg["data.manifest"])


def _load_model_cfg(cfg: dict, workdir: Path, key: str):
    """Model from a checkpoint; the current config wins for run-time knobs."""
    from .checkpoint import load_model
    model, ckpt_cfg, step = load_model(workdir / cfg[key])
    return model, ckpt_cfg, step


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_synth_corpus(args) -> int:
    from .corpus import CorpusConfig, synth_corpus
    cfg, workdir = _load(args)
    out = workdir / cfg["corpus.dir"]
    manifest = synth_corpus(CorpusConfig.from_flat(cfg), out)
    _echo_config(cfg, out)
    log.info("wrote %d utterances to %s", len(manifest.utterances), out)
    return 0


def _cmd_split(args) -> int:
    from .corpus import CorpusManifest, split_corpus
    cfg, workdir = _load(args)
    manifest = CorpusManifest.load(workdir / cfg["data.manifest"])
    ratios = {name: cfg[f"split.{name}"]
              for name in ("pretrain", "finetune_labeled", "speech_only", "test")
              if cfg[f"split.{name}"] > 0}
    out = workdir / cfg["split.out"]
    split_corpus(manifest, ratios, seed=cfg["split.seed"]).save(out)
    log.info("wrote split manifest to %s", out)
    return 0


def _cmd_pretrain(args) -> int:
    from .model import ModelConfig, init_model
    from .trainer import pretrain
    cfg, workdir = _load(args)
    data = _load_corpus(cfg, workdir)
    if cfg["model.inventory_size"] == 0:
        cfg["model.inventory_size"] = data.inventory_size
    model = init_model(ModelConfig.from_flat(cfg), seed=cfg["model.seed"])
    log.info("parameters: %s", model.parameter_counts())
    out = workdir / cfg["train.dir"]
    _echo_config(cfg, out)
    resume = cfg["train.resume"] or None
    if resume is not None:
        resume = workdir / resume
    result = pretrain(model, data, cfg, out, resume_from=resume)
    log.info("checkpoint: %s", result.checkpoint_path)
    return 0


def _finetune(args, runner) -> int:
    cfg, workdir = _load(args)
    data = _load_corpus(cfg, workdir)
    model, _ckpt_cfg, _step = _load_model_cfg(cfg, workdir, "finetune.init_checkpoint")
    out = workdir / cfg["finetune.dir"]
    _echo_config(cfg, out)
    result = runner(model, data, cfg, out)
    log.info("checkpoint: %s", result.checkpoint_path)
    return 0


def _cmd_finetune_tts(args) -> int:
    from .trainer import finetune_tts
    return _finetune(args, finetune_tts)


def _cmd_finetune_vc(args) -> int:
    from .trainer import finetune_vc
    return _finetune(args, finetune_vc)


def _cmd_train_asr(args) -> int:
    from .trainer import train_asr_head
    return _finetune(args, train_asr_head)


def _cmd_infer_tts(args) -> int:
    from .corpus import CorpusManifest
    from .tasks import run_tts_requests
    cfg, workdir = _load(args)
    model, _, _ = _load_model_cfg(cfg, workdir, "infer.checkpoint")
    manifest = None
    manifest_path = workdir / cfg["data.manifest"]
    if manifest_path.is_file():
        manifest = CorpusManifest.load(manifest_path)
    outputs = run_tts_requests(model, workdir / cfg["infer.input"],
                               workdir / cfg["infer.dir"], cfg, manifest)
    log.info("wrote %d mel files", len(outputs))
    return 0


def _cmd_infer_vc(args) -> int:
    from .tasks import run_vc_requests
    cfg, workdir = _load(args)
    model, _, _ = _load_model_cfg(cfg, workdir, "infer.checkpoint")
    outputs = run_vc_requests(model, workdir / cfg["infer.input"],
                              workdir / cfg["infer.dir"], cfg)
    log.info("wrote %d mel files", len(outputs))
    return 0


def _cmd_infer_asr(args) -> int:
    from .corpus import CorpusManifest
    from .tasks import run_asr_requests
    cfg, workdir = _load(args)
    model, _, _ = _load_model_cfg(cfg, workdir, "infer.checkpoint")
    inventory = None
    manifest_path = workdir / cfg["data.manifest"]
    if manifest_path.is_file():
        inventory = CorpusManifest.load(manifest_path).inventory
    outputs = run_asr_requests(model, workdir / cfg["infer.input"],
                               workdir / cfg["infer.dir"], cfg, inventory)
    log.info("wrote %d transcriptions", len(outputs))
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import eval_report
    cfg, workdir = _load(args)
    data = _load_corpus(cfg, workdir)
    model, _, step = _load_model_cfg(cfg, workdir, "eval.checkpoint")
    tasks = tuple(t.strip() for t in cfg["eval.tasks"].split(",") if t.strip())
    train_log = cfg["eval.train_log"] or None
    if train_log is not None:
        train_log = workdir / train_log
    out = workdir / cfg["eval.dir"]
    _echo_config(cfg, out)
    eval_report(model, data, cfg, out, tasks=tasks, step=step, train_log=train_log)
    return 0


def _cmd_inspect_checkpoint(args) -> int:
    from .checkpoint import describe
    print(describe(args.checkpoint))
    return 0


_HANDLERS = {
    "synth-corpus": _cmd_synth_corpus,
    "split": _cmd_split,
    "pretrain": _cmd_pretrain,
    "finetune-tts": _cmd_finetune_tts,
    "finetune-vc": _cmd_finetune_vc,
    "train-asr": _cmd_train_asr,
    "infer-tts": _cmd_infer_tts,
    "infer-vc": _cmd_infer_vc,
    "infer-asr": _cmd_infer_asr,
    "eval": _cmd_eval,
    "inspect-checkpoint": _cmd_inspect_checkpoint,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _HANDLERS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        log.error("%s", exc, exc_info=log.isEnabledFor(logging.DEBUG))
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
