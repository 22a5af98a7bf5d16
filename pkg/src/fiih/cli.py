"""Command-line interface: ``fiih <verb> ...``.

Every successful run writes a JSON manifest next to its primary output
(``<output>.manifest.json``). Failures exit nonzero with a one-line
diagnostic on stderr and leave no primary output behind.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import quality
from .channel import AttackSpec, apply_attack, detect_mask, field_fill
from .imageio import CoverDatabase, RunManifest, file_digest, read_pixels, read_png, write_png
from .inn import CouplingStack
from .numerics import serialize
from .pipeline import HideMode, combine, cover_id, dequantize, extract, hide, reveal, to_planar
from .training import (
    DatasetSplit,
    TrainConfig,
    TrainState,
    TrainingError,
    eval_to_csv,
    evaluate,
    log_to_csv,
    synthetic_images,
    train,
)

SWEEPS = {
    "gaussian": [AttackSpec.gaussian(s) for s in (10, 20, 30)],
    "dropout": [AttackSpec.dropout(r) for r in (0.1, 0.3, 0.5, 0.7, 0.9)],
    "jpeg": [AttackSpec.jpeg(q) for q in (20, 40, 80)],
}
SWEEPS["all"] = SWEEPS["gaussian"] + SWEEPS["dropout"] + SWEEPS["jpeg"]


class CliError(Exception):
    pass


def _check_outputs(paths, force: bool) -> None:
    for p in paths:
        if p is not None and Path(p).exists() and not force:
            raise CliError(f"refusing to overwrite {p} (pass --force)")


def _load_model(path) -> CouplingStack:
    if path is None:
        raise CliError("no model given (use --model PATH)")
    if not Path(path).exists():
        raise CliError(f"model file {path} does not exist")
    return CouplingStack.load(path)


def _manifest_path(output) -> Path:
    return Path(str(output) + ".manifest.json")


def _sidecar_path(stego: Path) -> Path:
    return stego.with_suffix(".json")


def _float_payload_path(stego: Path) -> Path:
    return stego.with_suffix(".f64.bin")


def _read_sidecar(path: Path) -> dict:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise CliError(f"sidecar {path} does not exist") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"sidecar {path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    for key in ("cover_id", "mode", "model_hash"):
        if key not in data:
            raise CliError(f"sidecar {path}: missing field {key!r}")
    return data


def _parse_attack(text: str) -> AttackSpec:
    try:
        return AttackSpec.from_json(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"attack spec: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _parse_sweep(text: str) -> list[AttackSpec]:
    if text in SWEEPS:
        return SWEEPS[text]
    if text in ("none", "clean", ""):
        return []
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"sweep must be one of {sorted(SWEEPS)} or a JSON list of attack specs ({exc.msg})") from None
    if isinstance(items, dict):
        items = [items]
    return [AttackSpec.from_dict(d) for d in items]


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _mode(args) -> HideMode:
    return HideMode.parse(args.mode)


# verbs


def cmd_init_model(args) -> list[Path]:
    out = Path(args.output)
    _check_outputs([out], args.force)
    stack = CouplingStack.init(
        args.blocks,
        seed=_seed(args),
        clamp_k=args.clamp_k,
        sigma_variant=args.sigma_variant,
        n_layers=args.layers,
        growth=args.growth,
        zero_final=args.random_final is None,
        final_scale=args.random_final or 1.0,
    )
    stack.save(out)
    return [out]


def cmd_hide(args) -> list[Path]:
    stack = _load_model(args.model)
    mode = _mode(args)
    out = Path(args.output)
    sidecar = _sidecar_path(out)
    payload = _float_payload_path(out) if args.float else None
    _check_outputs([out, sidecar, payload], args.force)
    secret_px, cover_px = read_pixels(args.secret), read_pixels(args.cover)
    if secret_px.shape != cover_px.shape:
        raise CliError(f"secret is {secret_px.shape[1]}x{secret_px.shape[0]} but cover is {cover_px.shape[1]}x{cover_px.shape[0]}")
    if secret_px.shape[0] % 2 or secret_px.shape[1] % 2:
        raise CliError(f"image dimensions must be even, got {secret_px.shape[1]}x{secret_px.shape[0]}")
    result = hide(to_planar(secret_px), to_planar(cover_px), stack, mode, floor=1 if args.floor_lift else 0)
    write_png(out, result.stego_pixels)
    meta = {
        "cover_id": result.cover_id,
        "mode": mode.value,
        "model_hash": stack.digest(),
        "float_stego": None,
    }
    written = [out, sidecar]
    if payload is not None:
        serialize.save(payload, {"stego": result.stego}, {"kind": "fiih-float-stego", "cover_id": result.cover_id})
        meta["float_stego"] = payload.name
        written.append(payload)
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return written


def cmd_reveal(args) -> list[Path]:
    stack = _load_model(args.model)
    out = Path(args.output)
    _check_outputs([out], args.force)
    stego_path = Path(args.stego)
    sidecar = _read_sidecar(Path(args.sidecar) if args.sidecar else _sidecar_path(stego_path))
    if sidecar["model_hash"] != stack.digest():
        logging.getLogger(__name__).warning("model hash differs from the one recorded at hide time")
    db = CoverDatabase(args.cover_db)
    if sidecar["cover_id"] not in db:
        raise CliError(f"cover {sidecar['cover_id'][:16]} not found in database {args.cover_db} ({len(db)} covers indexed)")
    cover = db.lookup(sidecar["cover_id"])
    mode = HideMode.parse(sidecar["mode"])
    use_float = sidecar.get("float_stego") and not args.quantized
    if use_float:
        arrays, _ = serialize.load(stego_path.parent / sidecar["float_stego"])
        stego = arrays["stego"]
    else:
        stego = read_png(stego_path)
    if stego.shape != cover.shape:
        raise CliError(f"stego shape {stego.shape} does not match cover shape {cover.shape}")
    ref = read_png(args.reference) if args.reference else None
    if args.fill:
        residual = field_fill(stego, cover, detect_mask(stego), args.fill, args.fill_passes, mode).encoded
    else:
        residual = extract(stego, cover, mode)
    secret = reveal(residual, stack)
    write_png(out, secret)
    if ref is not None:
        rep = quality.report(secret, ref)
        psnr_text = "inf" if np.isinf(rep.psnr_db) else f"{rep.psnr_db:.4f}"
        print(f"psnr_db={psnr_text} ssim={rep.ssim:.6f} mse={rep.mse:.6e}")
    return [out]


def cmd_attack(args) -> list[Path]:
    out = Path(args.output)
    _check_outputs([out], args.force)
    spec = _parse_attack(args.spec)
    stego = read_png(args.stego)
    if spec.kind == "dropout":
        # lift exact zeros so only dropped pixels read as 0 at the receiver
        stego = np.maximum(stego, 1.0 / 255.0)
        attacked, _ = apply_attack(stego, spec, seed=_seed(args))
    else:
        attacked = apply_attack(stego, spec, seed=_seed(args))
    write_png(out, attacked)
    return [out]


def cmd_fill(args) -> list[Path]:
    out = Path(args.output)
    _check_outputs([out], args.force)
    received = read_png(args.received)
    cover = read_png(args.cover)
    if received.shape != cover.shape:
        raise CliError(f"received shape {received.shape} does not match cover shape {cover.shape}")
    mode = _mode(args)
    res = field_fill(received, cover, detect_mask(received), args.neighborhood, args.passes, mode)
    write_png(out, combine(cover, res.encoded, mode))
    if res.unfilled:
        print(f"unfilled_pixels={res.unfilled}")
    return [out]


def _dataset(args) -> DatasetSplit:
    if args.synthetic:
        return synthetic_images(args.synthetic, args.size or 64, seed=_seed(args))
    if not args.dataset:
        raise CliError("give a dataset directory or --synthetic N")
    data = DatasetSplit.from_dir(args.dataset, args.size)
    if len(data) == 0:
        raise CliError(f"dataset {args.dataset} contains no PNG images")
    return data


def cmd_evaluate(args) -> list[Path]:
    stack = _load_model(args.model)
    out = Path(args.output)
    _check_outputs([out], args.force)
    data = _dataset(args)
    if len(data) < 2:
        raise CliError("evaluation needs at least two images (one secret/cover pair)")
    attacks = _parse_sweep(args.sweep)
    rows = evaluate(
        stack, data, attacks, _mode(args), float_mode=args.float,
        fill=None if args.no_fill else args.neighborhood, fill_passes=args.passes, seed=_seed(args),
    )
    out.write_text(eval_to_csv(rows))
    return [out]


def cmd_train(args) -> list[Path]:
    out = Path(args.output)
    loss_csv = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    _check_outputs([out, loss_csv], args.force)
    if args.resume:
        state, saved = TrainState.load(args.resume)
        config = TrainConfig.from_dict(saved)
    else:
        if not args.config:
            raise CliError("train needs a config file (or --resume CHECKPOINT)")
        config = TrainConfig.from_file(args.config)
        state = None
    if args.seed is not None and not args.resume:
        config.seed = args.seed
    data = _dataset(args)
    state = train(config, data, state=state, checkpoint=args.checkpoint, stop_after=args.stop_after)
    state.stack.save(out)
    loss_csv.write_text(log_to_csv(state.log))
    return [out, loss_csv]


def cmd_residual_report(args) -> list[Path]:
    out = Path(args.output) if args.output else None
    _check_outputs([out], args.force)
    report = residual_report(read_pixels(args.stego), read_pixels(args.cover))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
        return []
    out.write_text(text)
    return [out]


def residual_report(stego_px: np.ndarray, cover_px: np.ndarray) -> dict:
    """Per-channel statistics of ``stego - cover`` in 8-bit gray levels.

    The 256-bin histogram has one bin per integer residual in [-128, 127];
    values outside are counted in the end bins.
    """
    if stego_px.shape != cover_px.shape:
        raise CliError(f"stego shape {stego_px.shape} does not match cover shape {cover_px.shape}")
    diff = stego_px.astype(np.int64) - cover_px.astype(np.int64)
    channels = {}
    for c, name in enumerate("RGB"):
        d = diff[..., c].ravel()
        hist = np.bincount(np.clip(d, -128, 127) + 128, minlength=256)
        channels[name] = {
            "mean": float(d.mean()),
            "std": float(d.std()),
            "max_abs": int(np.abs(d).max()) if d.size else 0,
            "histogram": hist.tolist(),
        }
    return {"units": "gray levels", "histogram_range": [-128, 127], "channels": channels}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="RNG seed (default 0; train defaults to the config's seed)")
    common.add_argument("--model", help="coupling-stack parameter file")
    common.add_argument("--mode", choices=["subtract", "add"], default="subtract")
    fq = common.add_mutually_exclusive_group()
    fq.add_argument("--float", action="store_true", help="lossless float stego (invertibility experiments)")
    fq.add_argument("--quantized", action="store_true", help="8-bit stego (default)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fiih", description="Fully invertible image hiding.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", parents=[common], help="write a fresh coupling-stack model")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--blocks", type=int, default=16)
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--growth", type=int, default=32)
    p.add_argument("--clamp-k", type=float, default=2.0)
    p.add_argument("--sigma-variant", choices=["centered", "plain"], default="centered")
    p.add_argument("--random-final", type=float, metavar="SCALE",
                   help="randomise the last layer of every subnet at SCALE x the usual init (default: zero)")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("hide", parents=[common], help="embed a secret PNG into a cover PNG")
    p.add_argument("secret")
    p.add_argument("cover")
    p.add_argument("-o", "--output", required=True, help="stego PNG; sidecar written next to it")
    p.add_argument("--floor-lift", action="store_true", help="lift zero pixels to 1/255 (for dropout channels)")
    p.set_defaults(func=cmd_hide)

    p = sub.add_parser("reveal", parents=[common], help="recover the secret from a stego PNG")
    p.add_argument("stego")
    p.add_argument("--sidecar")
    p.add_argument("--cover-db", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--reference", help="true secret PNG; prints PSNR/SSIM of the recovery")
    p.add_argument("--fill", choices=["four", "nine"], help="field-fill dropped pixels before revealing")
    p.add_argument("--fill-passes", type=int, default=3)
    p.set_defaults(func=cmd_reveal)

    p = sub.add_parser("attack", parents=[common], help="apply a channel distortion")
    p.add_argument("stego")
    p.add_argument("--spec", required=True, help='JSON, e.g. \'{"kind":"jpeg","qf":80}\'')
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("fill", parents=[common], help="restore a dropout-damaged stego PNG")
    p.add_argument("received")
    p.add_argument("--cover", required=True)
    p.add_argument("--neighborhood", choices=["four", "nine"], default="nine")
    p.add_argument("--passes", type=int, default=3)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fill)

    p = sub.add_parser("evaluate", parents=[common], help="robustness sweep over a dataset")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic images instead of a directory")
    p.add_argument("--size", type=int, help="centre-crop images to SIZE x SIZE")
    p.add_argument("--sweep", default="all", help=f"one of {sorted(SWEEPS)}, 'none', or a JSON list of attack specs")
    p.add_argument("--neighborhood", choices=["four", "nine"], default="nine")
    p.add_argument("--passes", type=int, default=3)
    p.add_argument("--no-fill", action="store_true", help="skip field filling under dropout")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", parents=[common], help="train a coupling stack")
    p.add_argument("config", nargs="?", help="JSON or TOML training config")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--size", type=int)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--log", help="loss CSV path (default: <output>.loss.csv)")
    p.add_argument("--checkpoint", help="write a resumable checkpoint after every epoch")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--stop-after", type=int, metavar="EPOCH", help="stop once this many epochs are done")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("residual-report", parents=[common], help="statistics of stego - cover")
    p.add_argument("stego")
    p.add_argument("cover")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_residual_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        outputs = args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"fiih {args.command}: error: {msg}", file=sys.stderr)
        return 1
    if outputs:
        manifest = RunManifest(
            command=" ".join(str(a) for a in (argv if argv is not None else sys.argv[1:])),
            seed=getattr(args, "seed", None),
            model_hash=file_digest(args.model) if getattr(args, "model", None) else None,
            config_hash=file_digest(args.config) if getattr(args, "config", None) else None,
            outputs=[str(p) for p in outputs],
        )
        manifest.write(_manifest_path(outputs[0]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
