"""``mgp`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error (parse / shape / numeric).
Outputs are written only under ``--out`` / ``--out-dir``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, io, model
from . import tensor as T
from .errors import MgpError
from .inversion import (TASK_LAYERS, InversionConfig, invert, load_state, manipulate, render, save_state,
                        write_trace)
from .objective import TaskSpec


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_FMT = argparse.ArgumentDefaultsHelpFormatter


def _add_models(p):
    p.add_argument("--gen", default=str(model.TOY_GEN_PATH), help="generator checkpoint (MGC1)")
    p.add_argument("--phi", default=str(model.TOY_PHI_PATH), help="perceptual extractor checkpoint (MGC1)")


def _add_inversion(p, layer):
    _add_models(p)
    p.add_argument("--target", required=True, help="input image (binary PPM/PGM)")
    p.add_argument("--codes", type=int, default=20, help="number of latent codes N")
    p.add_argument("--layer", type=int, default=layer, help="composition layer")
    p.add_argument("--steps", type=int, default=1000, help="Adam steps")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--seed", type=int, default=None, help="seed; MGP_SEED is used when absent, else 0")
    p.add_argument("--beta1", type=float, default=0.9, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2")
    p.add_argument("--eps", type=float, default=1e-8, help="Adam epsilon")
    p.add_argument("--wp", type=float, default=1.0, help="pixel term weight")
    p.add_argument("--wf", type=float, default=1.0, help="perceptual term weight")
    p.add_argument("--init-state", default=None, help="state directory whose codes initialize the run")
    p.add_argument("--log-every", type=int, default=1, help="trace sampling interval")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--verbose", action="store_true", help="print the loss trace")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgp", description="Multi-code GAN-prior inversion and restoration.",
                     formatter_class=_FMT)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("invert", help="reconstruct an image", formatter_class=_FMT)
    _add_inversion(p, TASK_LAYERS["reconstruct"])

    p = sub.add_parser("colorize", help="colorize a grayscale image", formatter_class=_FMT)
    _add_inversion(p, TASK_LAYERS["colorize"])

    p = sub.add_parser("sr", help="super-resolve a low-resolution image", formatter_class=_FMT)
    _add_inversion(p, TASK_LAYERS["super_resolve"])
    p.add_argument("--factor", type=int, default=4, help="downsampling factor of the input")

    p = sub.add_parser("inpaint", help="fill hidden pixels", formatter_class=_FMT)
    _add_inversion(p, TASK_LAYERS["inpaint"])
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--mask", help="mask file (MTD1 [1,1,H,W] or PGM), 1/white = known pixel")
    g.add_argument("--center-crop", type=int, help="hide a centered box of this size")
    g.add_argument("--random-crop", type=float, help="hide this fraction of pixels at random")
    p.add_argument("--mask-seed", type=int, default=0, help="seed for --random-crop")

    p = sub.add_parser("denoise", help="remove noise", formatter_class=_FMT)
    _add_inversion(p, TASK_LAYERS["denoise"])
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="add Gaussian noise of this sigma to the target first (0: target is already noisy)")
    p.add_argument("--noise-seed", type=int, default=0, help="seed for --noise-sigma")

    p = sub.add_parser("manipulate", help="shift every code along a direction", formatter_class=_FMT)
    p.add_argument("--gen", default=str(model.TOY_GEN_PATH), help="generator checkpoint (MGC1)")
    p.add_argument("--state", required=True, help="state directory from a previous run")
    p.add_argument("--direction", required=True, help="direction tensor (MTD1, [1,D,1,1])")
    p.add_argument("--magnitude", type=float, default=1.0, help="step along the direction")
    p.add_argument("--out-dir", required=True, help="output directory")

    p = sub.add_parser("sweep", help="ablation over number of codes or layer", formatter_class=_FMT)
    _add_models(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--targets", nargs="+", help="target images")
    src.add_argument("--synthetic", type=int, help="use this many synthetic scenes as targets")
    p.add_argument("--axis", choices=("codes", "layer"), required=True, help="swept quantity")
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--codes", type=int, default=20, help="N when sweeping layers")
    p.add_argument("--layer", type=int, default=TASK_LAYERS["reconstruct"], help="layer when sweeping N")
    p.add_argument("--steps", type=int, default=1000, help="Adam steps per run")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--verbose", action="store_true", help="print per-value summary")

    p = sub.add_parser("attribute", help="label codes by the region they control", formatter_class=_FMT)
    p.add_argument("--gen", default=str(model.TOY_GEN_PATH), help="generator checkpoint (MGC1)")
    p.add_argument("--state", required=True, help="state directory from a previous run")
    p.add_argument("--mask", action="append", default=[], metavar="LABEL=PATH",
                   help="candidate region mask (MTD1 or PGM); repeatable")
    p.add_argument("--threshold", type=float, default=0.2, help="importances above this are zeroed")
    p.add_argument("--magnitude", action="store_true", help="compare |alpha| instead of alpha")
    p.add_argument("--out-dir", required=True, help="output directory")

    p = sub.add_parser("make-toy", help="write a seeded toy checkpoint", formatter_class=_FMT)
    p.add_argument("--kind", choices=("gen", "phi"), default="gen", help="generator or perceptual net")
    p.add_argument("--seed", type=int, default=None, help="seed (default 7 for gen, 11 for phi)")
    p.add_argument("--depth", type=int, default=8, help="generator blocks")
    p.add_argument("--latent-dim", type=int, default=64, help="latent dimension")
    p.add_argument("--out", required=True, help="checkpoint path; metadata goes next to it as .txt")

    p = sub.add_parser("info", help="describe a checkpoint", formatter_class=_FMT)
    p.add_argument("checkpoint", help="MGC1 file")
    return parser


# ------------------------------------------------------------------ helpers


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MGP_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MGP_SEED must be an integer, got {env!r}") from None


def _load_models(args):
    g = model.load_checkpoint(args.gen)
    phi = model.load_checkpoint(args.phi)
    if not isinstance(g, model.Generator) or not isinstance(phi, model.PerceptualExtractor):
        raise UsageError("--gen must be a generator checkpoint and --phi an extractor checkpoint")
    return g, phi


def _config(args, g) -> InversionConfig:
    init = {}
    if args.init_state:
        codes = load_state(args.init_state).codes
        if len(codes) != args.codes:
            raise UsageError(f"--init-state has {len(codes)} codes but --codes is {args.codes}")
        init = dict(init_policy="from_codes", init_codes=codes)
    if args.layer not in g.valid_layers():
        raise UsageError(f"--layer must be in 1..{g.num_weighted - 1}, got {args.layer}")
    try:
        return InversionConfig(num_codes=args.codes, ell=args.layer, steps=args.steps,
                               learning_rate=args.lr, seed=_seed(args), adam_beta1=args.beta1,
                               adam_beta2=args.beta2, adam_eps=args.eps, wp=args.wp, wf=args.wf,
                               log_every=args.log_every, **init)
    except MgpError as e:
        raise UsageError(str(e)) from None


def _load_mask(path) -> T.Tensor:
    p = Path(path)
    if p.suffix == ".mtd":
        return T.load_tensor(p)
    img = io.read_ppm(p)
    if img.channels != 1:
        raise UsageError(f"mask image {path} must be a PGM")
    arr = np.frombuffer(img.pixels, dtype=np.uint8).reshape(1, 1, img.height, img.width)
    return T.Tensor((arr > 127).astype(np.float64))


def _run_task(args, kind, out_name, prepare):
    g, phi = _load_models(args)
    config = _config(args, g)
    out = Path(args.out_dir)
    target = io.load_image(args.target)
    spec, extras = prepare(target)
    spec = TaskSpec(kind, **spec)
    result = invert(g, phi, spec, config)
    out.mkdir(parents=True, exist_ok=True)
    for name, write in extras.items():
        write(out / name)
    io.save_image(result.image, out / out_name)
    write_trace(result.loss_trace, out / "trace.csv")
    save_state(result.final_state, out / "state")
    if args.verbose:
        for row in result.loss_trace:
            print(f"step {row.step} pixel {row.pixel:.6g} perceptual {row.perceptual:.6g} total {row.total:.6g}")
    first, last = result.loss_trace[0], result.loss_trace[-1]
    print(f"{kind}: loss {first.total:.6g} -> {last.total:.6g} over {config.steps} steps; wrote {out}")


def _rgb(t: T.Tensor, what: str) -> T.Tensor:
    if t.shape[1] != 3:
        raise UsageError(f"{what} must be an RGB (P6) image")
    return t


def cmd_invert(args):
    _run_task(args, "reconstruct", "reconstruction.ppm",
              lambda t: (dict(reference=_rgb(t, "--target")), {}))


def cmd_colorize(args):
    from .objective import gray

    def prepare(t):
        ref = gray(t).detach() if t.shape[1] == 3 else t
        return dict(reference=ref), {"input.pgm": lambda p: io.save_image(ref, p)}

    _run_task(args, "colorize", "colorized.ppm", prepare)


def cmd_sr(args):
    if args.factor < 1:
        raise UsageError(f"--factor must be >= 1, got {args.factor}")
    _run_task(args, "super_resolve", "super_resolved.ppm",
              lambda t: (dict(reference=_rgb(t, "--target"), sr_factor=args.factor), {}))


def cmd_inpaint(args):
    def prepare(t):
        t = _rgb(t, "--target")
        _, _, h, w = t.shape
        if args.mask:
            mask = _load_mask(args.mask)
        elif args.center_crop is not None:
            mask = io.center_crop_mask(h, w, args.center_crop)
        else:
            mask = io.random_crop_mask(h, w, args.random_crop, args.mask_seed)
        if mask.shape != (1, 1, h, w):
            raise UsageError(f"mask shape {list(mask.shape)} does not match target {h}x{w}")
        visible = T.Tensor(t.data * np.repeat(mask.data, 3, axis=1))
        extras = {"mask.pgm": lambda p: io.write_ppm(io.mask_image(mask), p),
                  "input.ppm": lambda p: io.save_image(visible, p)}
        return dict(reference=t, mask=mask), extras

    _run_task(args, "inpaint", "inpainted.ppm", prepare)


def cmd_denoise(args):
    def prepare(t):
        t = _rgb(t, "--target")
        if args.noise_sigma:
            noisy, _ = io.degrade(t, "gaussian_noise", sigma=args.noise_sigma, seed=args.noise_seed)
            return dict(reference=noisy), {"noisy.ppm": lambda p: io.save_image(noisy, p)}
        return dict(reference=t), {}

    _run_task(args, "denoise", "denoised.ppm", prepare)


def cmd_manipulate(args):
    g = model.load_checkpoint(args.gen)
    state = load_state(args.state)
    edited = manipulate(state, T.load_tensor(args.direction), args.magnitude)
    image = render(g, edited)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_image(image, out / "manipulated.ppm")
    save_state(edited, out / "state")
    print(f"manipulate: magnitude {args.magnitude}; wrote {out}")


def _ints(text, flag):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} must be comma-separated integers, got {text!r}") from None


def cmd_sweep(args):
    g, phi = _load_models(args)
    if args.synthetic is not None:
        size = g.output_shape()[-1]
        targets = [analysis.synthetic_scene(i, size) for i in range(args.synthetic)]
    else:
        targets = [io.load_image(p) for p in args.targets]
    axis = "num_codes" if args.axis == "codes" else "layer"
    values = _ints(args.values, "--values")
    if not values:
        raise UsageError("--values is empty")
    try:
        base = InversionConfig(num_codes=args.codes, ell=args.layer, steps=args.steps,
                               learning_rate=args.lr)
    except MgpError as e:
        raise UsageError(str(e)) from None
    result = analysis.sweep(g, phi, targets, axis, values, base, seeds=_ints(args.seeds, "--seeds"),
                            workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_sweep_csv(result, out)
    if args.verbose:
        for pt in result.points:
            print(f"{axis} {pt.axis_value} psnr {pt.mean_psnr:.4f} loss {pt.mean_loss:.6g} std {pt.std:.6g}")
    print(f"sweep: {len(result.runs)} runs; wrote {out}")


def cmd_attribute(args):
    g = model.load_checkpoint(args.gen)
    state = load_state(args.state)
    masks = []
    for item in args.mask:
        label, sep, path = item.partition("=")
        if not sep or not label:
            raise UsageError(f"--mask expects LABEL=PATH, got {item!r}")
        masks.append((label, _load_mask(path)))
    report = analysis.attribute_codes(g, state, masks, args.threshold, args.magnitude)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.table())
    width = max(2, len(str(len(report.codes) - 1)))
    for c in report.codes:
        T.save_tensor(c.difference_map, out / f"diff_{c.index:0{width}d}.mtd")
        d = c.difference_map.data
        peak = d.max()
        scaled = d / peak * 2.0 - 1.0 if peak > 0 else np.full_like(d, -1.0)
        io.save_image(T.Tensor(scaled), out / f"diff_{c.index:0{width}d}.pgm")
    sys.stdout.write(report.table())


def cmd_make_toy(args):
    if args.kind == "gen":
        seed = 7 if args.seed is None else args.seed
        m = model.make_toy_generator(seed, args.depth, args.latent_dim)
    else:
        seed = 11 if args.seed is None else args.seed
        m = model.make_toy_extractor(seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(m, out)
    model.sidecar_path(out).write_text(model.describe(m, seed=seed))
    print(f"make-toy: wrote {out}")


def cmd_info(args):
    sys.stdout.write(model.describe(model.load_checkpoint(args.checkpoint)))


COMMANDS = {
    "invert": cmd_invert, "colorize": cmd_colorize, "sr": cmd_sr, "inpaint": cmd_inpaint,
    "denoise": cmd_denoise, "manipulate": cmd_manipulate, "sweep": cmd_sweep,
    "attribute": cmd_attribute, "make-toy": cmd_make_toy, "info": cmd_info,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except MgpError as e:
        print(f"mgp: {e.category}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"mgp: io error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
