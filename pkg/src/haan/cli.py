"""``haan`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(unreadable inputs, corrupt checkpoints, numeric failures).
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels, asm, inference
from . import imageproc as ip
from .checkpoint import load_checkpoint
from .data import list_pngs
from .errors import ConfigError, HaanError
from .metrics import evaluate, file_digest, write_report
from .training import (
    SsmConfig,
    TrainConfig,
    networks_from_checkpoint,
    ssm_from_checkpoint,
    stderr_progress,
    train,
    train_ssm,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage problems map to 1 here
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _parse_airlight(text):
    if text == "auto":
        return None
    try:
        rgb = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--airlight must be 'r,g,b' or 'auto', got {text!r}") from None
    if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
        raise UsageError(f"--airlight needs three values in [0, 1], got {text!r}")
    return np.array(rgb)


def _fmt_rgb(rgb):
    return ",".join(f"{v:.6f}" for v in rgb)


def _threads_from_env():
    raw = os.environ.get("HAAN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HAAN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"HAAN_THREADS must be >= 0, got {n}")
    return n


def _image_inputs(path):
    p = _existing(path, "input")
    if p.is_dir():
        files = list_pngs(p)
        if not files:
            raise FileNotFoundError(f"no PNG images in {p}")
        return files
    return [p]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, rng):
    if args.beta < 0:
        raise UsageError(f"--beta must be non-negative, got {args.beta}")
    if args.dmax <= 0:
        raise UsageError(f"--dmax must be positive, got {args.dmax}")
    a = _parse_airlight(args.airlight)
    image = ip.load_image(_existing(args.clear, "input image"))
    depth = asm.load_depth(_existing(args.depth, "depth map"), args.dmax)
    if depth.shape != image.shape[:2]:
        depth = np.clip(ip.resize(depth, *image.shape[:2]), 0.0, None)
    if a is None:
        a = asm.sample_airlight(rng)
    print(f"airlight {_fmt_rgb(a)}")
    t = asm.transmission_from_depth(depth, args.beta)
    out = asm.invert_fog(image, t, a) if args.invert else asm.synthesize_fog(image, t, a)
    ip.save_image(out, args.out)
    return EXIT_OK


def cmd_derive(args, rng):
    src = _existing(args.input, "input image")
    image = ip.load_image(src)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "wb": ip.white_balance(image),
        "ce": ip.contrast_enhance(image),
        "gc": ip.gamma_correct(image),
    }
    for tag, img in outputs.items():
        ip.save_image(img, outdir / f"{src.stem}_{tag}.png")
    return EXIT_OK


def _train_common(args, cfg_cls, runner):
    cfg = cfg_cls.from_json(_existing(args.config, "config"))
    if not cfg.checkpoint_out:
        raise ConfigError("field 'checkpoint_out' is required")
    _log(f"seed {cfg.seed}")
    runner(cfg, progress=stderr_progress)
    ckpt = load_checkpoint(cfg.checkpoint_out)  # refuse to report success on an unreadable file
    _log(f"wrote {cfg.checkpoint_out} (step {ckpt.step}, {len(ckpt.sections)} sections)")
    return EXIT_OK


def cmd_train(args, rng):
    return _train_common(args, TrainConfig, train)


def cmd_train_ssm(args, rng):
    return _train_common(args, SsmConfig, train_ssm)


def load_defogger(ckpt_path, use_ctr=False):
    """Unit image -> defogged unit image, from a training checkpoint."""
    ckpt = load_checkpoint(_existing(ckpt_path, "checkpoint"))
    if not any(k.startswith("defog.") for k in ckpt.sections):
        raise ConfigError(f"{ckpt_path}: checkpoint holds no removal network")
    nets = networks_from_checkpoint(ckpt)
    return lambda image: inference.defog_image(nets, image, use_ctr=use_ctr)


def cmd_defog(args, rng):
    files = _image_inputs(args.input)
    defog = load_defogger(args.ckpt, args.use_ctr)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    failed = 0
    for f in files:
        try:
            out = defog(ip.load_image(f))
        except (OSError, HaanError) as exc:
            failed += 1
            _log(f"skipped {f}: {exc}")
            continue
        ip.save_image(out, outdir / f"{f.stem}.png")
    if failed == len(files):
        raise RuntimeError("no image could be processed")
    return EXIT_OK


def cmd_eval(args, rng):
    foggy = _image_inputs(args.foggy)
    refs = {}
    if args.ref:
        refs = {p.stem: p for p in _image_inputs(args.ref)}
    items = []
    for f in foggy:
        ref = refs.pop(f.stem, None)
        if args.ref and ref is None:
            _log(f"no reference for {f.name}")
        items.append((f.stem, f, ref))
    for stem in sorted(refs):
        _log(f"reference {stem} has no foggy counterpart")
    defog = load_defogger(args.ckpt, args.use_ctr)
    report = evaluate(items, defog, checkpoint_id=file_digest(args.ckpt), dataset=args.foggy)
    write_report(report, args.report)
    agg = report["aggregate"]
    _log(f"scored {agg['scored']}/{agg['count']} images")
    return EXIT_OK


def cmd_segment_sky(args, rng):
    image = ip.load_image(_existing(args.input, "input image"))
    ssm = ssm_from_checkpoint(load_checkpoint(_existing(args.ckpt, "checkpoint")))
    prob, rgb, source = inference.segment_sky(ssm, image)
    ip.save_image(prob, args.out)
    if source == "sky":
        print(f"airlight {_fmt_rgb(rgb)} (sky region)")
    else:
        print(f"airlight {_fmt_rgb(rgb)} (dark-channel fallback: sky covers under 1% of the image)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="haan", description="Unsupervised single-image defogging toolkit.")
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw made by the command")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="add synthetic fog to a clear image (or remove it with --invert)")
    s.add_argument("--clear", "--in", dest="clear", required=True, help="input PNG")
    s.add_argument("--depth", required=True, help="single-channel depth PNG")
    s.add_argument("--beta", type=float, required=True, help="scattering coefficient")
    s.add_argument("--airlight", required=True, help="'r,g,b' in [0,1] or 'auto'")
    s.add_argument("--dmax", type=float, default=1.0, help="depth of a 255 byte (default 1.0)")
    s.add_argument("--invert", action="store_true", help="treat the input as foggy and recover the scene")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("derive", help="write white-balanced, contrast-enhanced and gamma-corrected copies")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_derive)

    s = sub.add_parser("train", help="adversarial training from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-ssm", help="supervised sky segmenter training from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train_ssm)

    s = sub.add_parser("defog", help="defog a PNG or every PNG in a directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--use-ctr", action="store_true", help="refine with the attention-fusion network")
    s.set_defaults(func=cmd_defog)

    s = sub.add_parser("eval", help="score defogging against references")
    s.add_argument("--foggy", required=True)
    s.add_argument("--ref", help="directory of clear references paired by file stem")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--use-ctr", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("segment-sky", help="sky probability mask and airlight estimate")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="mask PNG")
    s.set_defaults(func=cmd_segment_sky)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _kernels.set_threads(_threads_from_env())
        rng = np.random.default_rng(args.seed)
        if not args.command.startswith("train"):  # training takes its seed from the config
            _log(f"seed {args.seed}")
        return args.func(args, rng)
    except UsageError as exc:
        _log(str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_USAGE
    except (OSError, HaanError, RuntimeError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
