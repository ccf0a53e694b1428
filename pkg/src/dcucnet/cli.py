"""``dcucnet`` command line: synth, train, enhance, eval, gradcheck.

Exit codes: 0 ok, 2 I/O or file format, 3 training diverged,
4 checkpoint integrity, 5 gradient check failed, 64 usage or configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, build, read_kv
from .errors import ChecksumError, DcucError, FormatError, InvalidInput, TrainingDiverged

EXIT_OK = 0
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5
EXIT_USAGE = 64

log = logging.getLogger("dcucnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- synth ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import CorpusSpec, build_corpus

    try:
        spec = CorpusSpec(num_scenes=args.scenes, duration_s=args.duration, snr_lo_db=args.snr_lo,
                          snr_hi_db=args.snr_hi, seed=args.seed)
    except InvalidInput as exc:
        raise UsageError(str(exc)) from exc
    corpus = build_corpus(spec)
    corpus.write(args.out)
    for i, digest in enumerate(corpus.checksums()):
        print(f"scene={i} sha256={digest}")
    _say(f"wrote {len(corpus)} scenes to {args.out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------

def _load_train_config(args):
    from .model import ModelConfig, micro_config
    from .train import TrainConfig

    values = read_kv(args.config) if args.config else {}
    model_kv, train_kv = {}, {}
    for key, val in values.items():
        section, _, rest = key.partition(".")
        if section == "model" and rest:
            model_kv[rest] = val
        elif section == "train" and rest:
            train_kv[rest] = val
        else:
            raise ConfigError(f"unknown config key {key!r} (expected model.* or train.*)", key)
    flags = {
        "epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size,
        "seed": args.seed, "crop_s": args.crop_s,
    }
    for k, v in flags.items():
        if v is not None:
            train_kv[k] = str(v)

    def prefixed(exc, prefix):
        key = f"{prefix}.{exc.key}" if exc.key else None
        return ConfigError(str(exc).replace(repr(exc.key), repr(key)) if exc.key else str(exc), key)

    try:
        model_cfg = build(ModelConfig, model_kv, micro_config() if args.micro else None)
    except ConfigError as exc:
        raise prefixed(exc, "model") from None
    try:
        train_cfg = build(TrainConfig, train_kv)
    except ConfigError as exc:
        raise prefixed(exc, "train") from None
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_corpus
    from .model import DCUCNet
    from .train import train

    model_cfg, train_cfg = _load_train_config(args)
    corpus = load_corpus(args.corpus)
    scenes = corpus.split("train")
    if args.max_scenes:
        scenes = scenes[: args.max_scenes]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.jsonl")

    ckpt_dir = Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def on_checkpoint(model, step):
        if ckpt_dir:
            save_checkpoint(ckpt_dir / f"step{step:06d}.dcuc", model)

    model = DCUCNet(model_cfg)
    _say(f"training on {len(scenes)} scenes, {train_cfg.epochs} epochs")
    model, history = train(model, scenes, train_cfg, history_path, on_checkpoint)
    save_checkpoint(out, model)
    print(f"checkpoint={out}")
    print(f"history={history_path}")
    print(f"steps={len(history)}")
    print(f"final_loss={history[-1]['loss'] if history else float('nan')}")
    if args.figures:
        from .plotting import plot_history

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        print(f"figure={plot_history(history, fig_dir / 'loss.png')}")
    return EXIT_OK


# -- enhance ----------------------------------------------------------------------

def cmd_enhance(args) -> int:
    import torch

    from .checkpoint import load_checkpoint
    from .dsp.wavio import read_wav, write_wav
    from .model import enhance
    from .train import si_snr
    from .visual import read_dvid

    model = load_checkpoint(args.ckpt, dtype=torch.float64)
    noisy = read_wav(args.input)
    video = read_dvid(args.video)
    out = enhance(noisy, video, model)
    write_wav(args.out, out)
    print(f"output={args.out}")
    print(f"samples={len(out)}")
    if args.ref:
        clean = read_wav(args.ref)
        gain = si_snr(out, clean) - si_snr(noisy, clean)
        _say(f"si_snr_improvement_db={gain:.3f}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def cmd_eval(args) -> int:
    import torch

    from .checkpoint import load_checkpoint
    from .data import SPLITS, load_corpus
    from .train import evaluate

    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; choose from {', '.join(SPLITS)}")
    model = load_checkpoint(args.ckpt, dtype=torch.float64)
    if args.audio_only:
        model.config = dataclasses.replace(model.config, use_visual=False)
    corpus = load_corpus(args.corpus)
    scenes = corpus.split(args.split)
    if not scenes:
        raise UsageError(f"split {args.split!r} is empty")
    details = []
    result = evaluate(model, scenes, details=details)
    sys.stdout.write(result.as_lines())
    if args.figures:
        from .plotting import plot_improvements, plot_spectrograms

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        sc, enhanced, *_ = details[0]
        idx = sc.meta.get("index", 0)
        path = plot_spectrograms({"noisy": sc.noisy, "clean": sc.clean, "enhanced": enhanced},
                                 fig_dir / f"spectrogram_scene{idx}.png", model.config.stft)
        print(f"figure={path}")
        labels = [f"{d[0].meta.get('index', i)}:{d[0].meta.get('noise_kind', '?')}" for i, d in enumerate(details)]
        path = plot_improvements(labels, [d[2] for d in details], [d[3] for d in details],
                                 fig_dir / f"si_snr_{args.split}.png")
        print(f"figure={path}")
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_checks

    reports = run_checks(args.scope, eps=args.eps)
    for r in reports:
        print(r.to_json())
        sys.stdout.flush()
    failed = [r.op for r in reports if not r.passed]
    _say(f"{len(reports) - len(failed)}/{len(reports)} gradient checks passed")
    if failed:
        _say("failed: " + ", ".join(failed))
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcucnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic audio-visual corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snr-lo", type=float, default=0.0)
    s.add_argument("--snr-hi", type=float, default=10.0)
    s.add_argument("--duration", type=float, default=2.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a corpus' train split")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config", help="key=value file with model.* and train.* entries")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history path (default: <out>.history.jsonl)")
    t.add_argument("--micro", action="store_true", help="start from the tiny test topology")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--crop-s", type=float)
    t.add_argument("--max-scenes", type=int)
    t.add_argument("--figures", help="directory for the loss-curve figure")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance one noisy WAV with its DVID video")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--video", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ref", help="clean reference WAV; reports SI-SNR improvement on stderr")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="SI-SNR evaluation on a corpus split")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--split", default="test")
    v.add_argument("--audio-only", action="store_true", help="zero the visual embedding")
    v.add_argument("--figures", help="directory for spectrogram and per-utterance figures")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--scope", choices=("kernel", "model", "all"), default="kernel")
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _say(f"dcucnet {args.command}: {exc}")
        return EXIT_USAGE
    except ChecksumError as exc:
        _say(f"dcucnet {args.command}: {exc}")
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        _say(f"dcucnet {args.command}: {exc}")
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        _say(f"dcucnet {args.command}: {exc}")
        return EXIT_IO
    except DcucError as exc:
        _say(f"dcucnet {args.command}: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
