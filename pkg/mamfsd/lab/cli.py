"""
MAM-FSD command line: gen-data, train, eval, decode, export-attention, ablate.

Exit codes: 0 success, 1 usage, 2 data/config/format error, 3 numerical failure.
"""

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, TextIO

import numpy as np

from .base import (ConfigError, DataError, FormatError, InfeasibleLabelError, NonFiniteError, ShapeError,
                   discover_profiles)
from .config import RunConfig, load_config
from .data import (GlossVocab, SynthSpec, augment, default_threads, frame_difference_map, load_split,
                   synth_generate, upsample_nearest, write_pgm)
from .model import MamFsdModel, check_video, load_model
from .serialization import load_tensor
from .trainer import EvalResult, check_dataset, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class LabArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors reported as exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ============================================================================
# HELPERS
# ============================================================================

def beam_width(raw: str) -> int:
    """argparse type for beam widths: an integer of at least 1."""
    try:
        width = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid beam width: {raw!r}") from None
    if width < 1:
        raise argparse.ArgumentTypeError(f"beam width must be at least 1, got {width}")
    return width


def apply_overrides(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    for item in overrides:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        config = config.with_value(key.strip(), value)
    return config


def read_input_video(path: Path, model: MamFsdModel) -> np.ndarray:
    """MFT1 video, center-cropped to the model resolution."""
    try:
        video = load_tensor(path)
    except OSError as exc:
        raise DataError(f"cannot read video {path}: {exc}") from None
    resolution = model.config.model.resolution
    check_video(video, resolution)
    return augment(video, "eval", config=model.config.data, size=resolution)


@dataclass(frozen=True)
class ReferenceCheck:
    """Soft check that a reference split (usually train) scores no worse than the evaluated one."""

    split: str
    reference_wer: float
    wer: float

    @property
    def ok(self) -> bool:
        return self.reference_wer <= self.wer


def write_report(result: EvalResult, out: TextIO, compare: Optional[EvalResult] = None,
                 reference: Optional[ReferenceCheck] = None) -> None:
    """Per-sample CSV plus a pooled line and, with ``reference``, a check line."""
    header = "id,wer,ins,del,sub,ref_len,logprob"
    out.write(header + (",compare_logprob" if compare else "") + "\n")
    for k, row in enumerate(result.rows):
        b = row.breakdown
        line = f"{row.id},{b.wer:.2f},{b.ins},{b.dels},{b.subs},{b.ref_len},{row.logprob:.6f}"
        if compare:
            line += f",{compare.rows[k].logprob:.6f}"
        out.write(line + "\n")
    p = result.pooled
    out.write(f"pooled,{p.wer:.2f},{p.ins},{p.dels},{p.subs},{p.ref_len},\n")
    if reference:
        status = "ok" if reference.ok else "warning"
        out.write(f"reference,{reference.split},{reference.reference_wer:.2f},{status}\n")


def export_attention(model: MamFsdModel, video: np.ndarray, stage: int, out_dir: Path) -> int:
    """
    Write per-frame PGMs and a CSV of the channel-averaged MAM map of ``stage``,
    upsampled to the input resolution, plus the inter-frame difference maps.

    Returns the number of attention frames written.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = model.attention_map(video, stage)
    maps = upsample_nearest(maps, video.shape[-1] // maps.shape[-1])
    diffs = frame_difference_map(video)

    for prefix, frames in (("attention", maps), ("diff", diffs)):
        with open(out_dir / f"{prefix}.csv", 'w', encoding='utf-8', newline='\n') as f:
            f.write("frame,y,x,value\n")
            for t, frame in enumerate(frames):
                write_pgm(out_dir / f"{prefix}_{t:03d}.pgm", frame)
                for (y, x), value in np.ndenumerate(frame):
                    f.write(f"{t},{y},{x},{float(value)!r}\n")
    return len(maps)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen_data(args) -> int:
    spec = SynthSpec.from_profile(args.spec)
    counts = synth_generate(spec, args.out, args.seed, default_threads())
    for split, count in counts.items():
        print(f"{split}\t{count}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = apply_overrides(load_config(args.config), args.overrides)
    if args.no_mam:
        config = config.replace(mam=dataclasses.replace(config.mam, count=0))
    if args.no_distill:
        config = config.replace(distill=dataclasses.replace(config.distill, alpha=0.0, beta=0.0, lam=0.0))
    summary = train(config, args.data, args.out, args.seed, default_threads())
    print(f"best_epoch\t{summary.best_epoch}\ndev_wer\t{summary.final_dev_wer:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.ckpt, args.config)
    check_dataset(model.config, args.data)
    records = load_split(args.data, args.split)
    beam = model.config.decode.beam if args.beam is None else args.beam
    result = evaluate(model, records, beam, desc=args.split)
    compare = None
    if args.compare_beam is not None:
        compare = evaluate(model, records, args.compare_beam, desc=f"{args.split} beam {args.compare_beam}")
        if beam >= args.compare_beam:
            worse = sum(r.logprob < c.logprob for r, c in zip(result.rows, compare.rows))
            if worse:
                logger.warning("beam %d scored below beam %d on %d of %d samples",
                               beam, args.compare_beam, worse, len(records))

    reference = None
    if args.reference_split:
        ref_result = evaluate(model, load_split(args.data, args.reference_split), beam, desc=args.reference_split)
        reference = ReferenceCheck(args.reference_split, ref_result.pooled.wer, result.pooled.wer)
        if not reference.ok:
            logger.warning("%s WER %.2f%% is above %s WER %.2f%%", args.reference_split,
                           reference.reference_wer, args.split, reference.wer)

    if args.report:
        with open(args.report, 'w', encoding='utf-8', newline='\n') as f:
            write_report(result, f, compare, reference)
    else:
        write_report(result, sys.stdout, compare, reference)
    logger.info("%s WER %.2f%% (beam %d, %d samples)", args.split, result.pooled.wer, beam, len(records))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = load_model(args.ckpt, args.config)
    video = read_input_video(args.video, model)
    decoded = model.decode(video, model.config.decode.beam if args.beam is None else args.beam)
    names = GlossVocab.load(args.glosses, model.config.model.vocab_size).names
    glosses = " ".join(names[g - 1] for g in decoded.labeling)
    print(f"{' '.join(map(str, decoded.labeling))}\t{glosses}\t{decoded.logprob:.6f}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model = load_model(args.ckpt, args.config)
    video = read_input_video(args.video, model)
    frames = export_attention(model, video, args.stage, args.out)
    print(f"wrote {frames} attention maps to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = apply_overrides(load_config(args.config), args.overrides)
    rows = []
    for value in args.values:
        config = base.with_value(args.key, value)
        for seed in args.seeds:
            run_dir = args.out / f"{args.key}={value}" / f"seed{seed}"
            summary = train(config, args.data, run_dir, seed, default_threads())
            rows.append((value, seed, summary.best_dev_wer))
            logger.info("%s=%s seed %d: best dev WER %.2f%%", args.key, value, seed, summary.best_dev_wer)

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "ablation.csv", 'w', encoding='utf-8', newline='\n') as f:
        f.write("key,value,seed,best_dev_wer\n")
        for value, seed, score in rows:
            f.write(f"{args.key},{value},{seed},{score:.2f}\n")
        for value in args.values:
            median = float(np.median([s for v, _, s in rows if v == value]))
            f.write(f"{args.key},{value},median,{median:.2f}\n")
            print(f"{args.key}={value}\tmedian dev WER {median:.2f}")
    return EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog="mamfsd", description=__doc__,
                               formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging verbosity")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the synthetic gloss dataset")
    p.add_argument("--spec", default="synth_default.json",
                   help=f"Generation profile name or path (bundled: {', '.join(discover_profiles('synth_'))})")
    p.add_argument("--out", type=Path, required=True, help="Dataset directory")
    p.add_argument("--seed", type=int, default=0, help="Dataset seed")
    p.set_defaults(handler=cmd_gen_data)

    def add_config(p):
        p.add_argument("--config", type=Path, help="Run configuration (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a configuration value, e.g. train.epochs=5")

    p = sub.add_parser("train", help="Train a model")
    add_config(p)
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--out", type=Path, required=True, help="Run directory")
    p.add_argument("--seed", type=int, default=0, help="Run seed")
    p.add_argument("--no-mam", action="store_true", help="Disable motor attention (mam.count=0)")
    p.add_argument("--no-distill", action="store_true", help="Zero every self-distillation weight")
    p.set_defaults(handler=cmd_train)

    def add_checkpoint(p):
        p.add_argument("--ckpt", type=Path, required=True, help="Checkpoint (.mfck)")
        p.add_argument("--config", type=Path, help="Run config (default: config.ini beside the checkpoint)")

    p = sub.add_parser("eval", help="Corpus WER of a checkpoint on one split")
    add_checkpoint(p)
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--split", default="test", help="Split to evaluate")
    p.add_argument("--beam", type=beam_width, help="Beam width (default: decode.beam)")
    p.add_argument("--compare-beam", type=beam_width, help="Also report labeling log-probabilities at this width")
    p.add_argument("--reference-split", help="Also score this split (e.g. train) and report whether its WER "
                   "stays at or below the evaluated split's")
    p.add_argument("--report", type=Path, help="Write the CSV report here instead of stdout")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("decode", help="Decode one video")
    add_checkpoint(p)
    p.add_argument("--video", type=Path, required=True, help="Video tensor (.mft)")
    p.add_argument("--beam", type=beam_width, help="Beam width (default: decode.beam)")
    p.add_argument("--glosses", default="gloss_default.json",
                   help=f"Gloss vocabulary profile (bundled: {', '.join(discover_profiles('gloss_'))})")
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("export-attention", help="Write motor attention maps of one video")
    add_checkpoint(p)
    p.add_argument("--video", type=Path, required=True, help="Video tensor (.mft)")
    p.add_argument("--stage", type=int, required=True, choices=[1, 2, 3, 4], help="Backbone stage")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.set_defaults(handler=cmd_export_attention)

    p = sub.add_parser("ablate", help="Train one run per (value, seed) and report medians")
    add_config(p)
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--out", type=Path, required=True, help="Ablation directory")
    p.add_argument("--key", required=True, help="Config key to vary, e.g. mam.count")
    p.add_argument("--values", nargs="+", required=True, help="Values of --key")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="Run seeds")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except NonFiniteError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DataError, FormatError, InfeasibleLabelError, ShapeError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
