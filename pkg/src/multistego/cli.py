"""Command line entry point: ``multistego <subcommand> [flags]``.

Settings resolve as defaults < ``--config`` file < ``MULTISTEGO_*`` environment
variables < flags. Every run writes a JSON manifest (resolved settings, seeds,
output paths) next to its outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ConfigError, TrainConfig, env_overrides, format_milestones, read_config_file

log = logging.getLogger("multistego")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


_TRAIN_DEFAULTS = TrainConfig().to_dict()

DEFAULTS = {
    "train": {**_TRAIN_DEFAULTS, "resume": ""},
    "encode": {"model": "", "cover": "", "secret": [], "out": "", "quant": "quantize-8bit"},
    "decode": {"model": "", "container": "", "out_dir": ""},
    "evaluate": {"model": "", "data_root": "", "n_images": 2000, "split_mode": "disjoint",
                 "seed": 0, "samples": 10, "out_dir": "runs/eval", "gain": 10.0},
    "lsb-encode": {"cover": "", "secret": [], "out": "", "bits_per_secret": 0},
    "lsb-decode": {"container": "", "k": 3, "bits_per_secret": 0, "out_dir": ""},
    "grad-check": {"k": 2, "size": 8, "probes": 50, "h": 1e-3, "seed": 0, "tol": 1e-4,
                   "out_dir": "runs/grad-check"},
    "synth-data": {"out": "", "classes": 4, "per_class": 10, "seed": 0},
}

REQUIRED = {
    "encode": ("model", "cover", "secret", "out"),
    "decode": ("model", "container", "out_dir"),
    "evaluate": ("model", "data_root"),
    "lsb-encode": ("cover", "secret", "out"),
    "lsb-decode": ("container", "out_dir"),
    "train": ("data_root",),
    "synth-data": ("out",),
}


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser():
    parser = _Parser(prog="multistego", description="Multi-image deep steganography toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add(p, "--config")
    _add(p, "--data-root")
    _add(p, "--out-dir")
    _add(p, "--k", type=int)
    _add(p, "--lambda-c", type=float)
    _add(p, "--lambda-s", type=float)
    _add(p, "--noise-std", type=float)
    _add(p, "--lr-milestones", help="epoch:rate,... e.g. 0:0.001,200:0.0003")
    _add(p, "--phase1-epochs", type=int)
    _add(p, "--phase1-batch", type=int)
    _add(p, "--phase2-epochs", type=int)
    _add(p, "--phase2-batch", type=int)
    _add(p, "--n-images", type=int)
    _add(p, "--split-mode", choices=["disjoint", "shared"])
    _add(p, "--checkpoint-every", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--init-seed", type=int)
    _add(p, "--resume", help="checkpoint to continue from")

    p = sub.add_parser("encode", help="hide secret images in a cover image")
    _add(p, "--config")
    _add(p, "--model")
    _add(p, "--cover")
    _add(p, "--secret", action="append", help="repeat once per secret, in decode order")
    _add(p, "--out")
    _add(p, "--quant", choices=["quantize-8bit", "float-passthrough"])

    p = sub.add_parser("decode", help="recover secret images from a container")
    _add(p, "--config")
    _add(p, "--model")
    _add(p, "--container", help="container PNG or float .npy sidecar")
    _add(p, "--out-dir")

    p = sub.add_parser("evaluate", help="metrics over a dataset sample")
    _add(p, "--config")
    _add(p, "--model")
    _add(p, "--data-root")
    _add(p, "--n-images", type=int)
    _add(p, "--split-mode", choices=["disjoint", "shared"])
    _add(p, "--seed", type=int)
    _add(p, "--samples", type=int)
    _add(p, "--out-dir")
    _add(p, "--gain", type=float)

    p = sub.add_parser("lsb-encode", help="LSB baseline embed")
    _add(p, "--config")
    _add(p, "--cover")
    _add(p, "--secret", action="append")
    _add(p, "--out")
    _add(p, "--bits-per-secret", type=int, help="default: min(4, 7 // k)")

    p = sub.add_parser("lsb-decode", help="LSB baseline extract")
    _add(p, "--config")
    _add(p, "--container")
    _add(p, "--k", type=int)
    _add(p, "--bits-per-secret", type=int)
    _add(p, "--out-dir")

    p = sub.add_parser("grad-check", help="finite-difference gradient check on a tiny model")
    _add(p, "--config")
    _add(p, "--k", type=int)
    _add(p, "--size", type=int)
    _add(p, "--probes", type=int)
    _add(p, "--h", type=float)
    _add(p, "--seed", type=int)
    _add(p, "--tol", type=float)
    _add(p, "--out-dir")

    p = sub.add_parser("synth-data", help="write a synthetic class-folder image dataset")
    _add(p, "--config")
    _add(p, "--out")
    _add(p, "--classes", type=int)
    _add(p, "--per-class", type=int)
    _add(p, "--seed", type=int)
    return parser


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, list):
        return [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(command, args, environ=None):
    defaults = DEFAULTS[command]
    values = dict(defaults)
    layers = []
    if getattr(args, "config", None):
        try:
            layers.append(read_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    layers.append(env_overrides(defaults, environ))
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                raise UsageError(f"unknown setting {key!r} for {command}")
            values[key] = _coerce(key, value, defaults[key])
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for key in REQUIRED.get(command, ()):
        if values[key] in ("", [], None):
            raise UsageError(f"{command}: missing required setting --{key.replace('_', '-')}")
    return values


def write_manifest(path, command, argv, settings, outputs, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "multistego",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "settings": settings,
        "outputs": [str(o) for o in outputs],
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


# -- subcommands ------------------------------------------------------------

def cmd_train(s, argv):
    from .checkpoint import load_checkpoint
    from .image_data import build_dataset, split_dataset
    from .plotting import plot_loss_curves

    fields = {k: v for k, v in s.items() if k in _TRAIN_DEFAULTS}
    if isinstance(fields["lr_milestones"], (list, tuple)):
        fields["lr_milestones"] = format_milestones(fields["lr_milestones"])
    config = TrainConfig.from_dict(fields)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = build_dataset(config.data_root, config.n_images, seed=config.seed)
    split = split_dataset(records, config.k, mode=config.split_mode)
    split.write_manifest(out / "split.tsv")
    resume = load_checkpoint(s["resume"], k=config.k) if s["resume"] else None

    from .training import train
    ckpt = train(config, split, out_dir=out, resume=resume)
    outputs = [out / "checkpoint.mstg", out / "history.csv", out / "split.tsv"]
    if ckpt.history:
        outputs.append(plot_loss_curves(ckpt.history, out / "loss_curve.png"))
    write_manifest(out / "manifest.json", "train", argv, config.to_dict(), outputs,
                   seeds={"seed": config.seed, "init_seed": config.init_seed},
                   final_epoch=ckpt.epoch)
    last = ckpt.history[-1] if ckpt.history else None
    if last:
        print(f"trained {ckpt.epoch} epochs; final total loss {last.total:.4f}")
    return EXIT_OK


def cmd_encode(s, argv):
    from .checkpoint import load_checkpoint
    from .codec import QuantPolicy, encode_file

    ckpt = load_checkpoint(s["model"])
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = encode_file(ckpt.model, s["cover"], s["secret"], out, QuantPolicy(s["quant"]))
    outputs = [out] + ([summary.sidecar] if summary.sidecar else [])
    dist = {"mse_float": summary.mse_float, "mse_quantized": summary.mse_quantized,
            "psnr_float": summary.psnr_float, "psnr_quantized": summary.psnr_quantized}
    write_manifest(out.with_name(out.stem + ".manifest.json"), "encode", argv, s, outputs,
                   distortion=dist)
    print(f"wrote {out}; cover MSE {summary.mse_float:.6g} (float) "
          f"{summary.mse_quantized:.6g} (8-bit)")
    return EXIT_OK


def cmd_decode(s, argv):
    from .checkpoint import load_checkpoint
    from .codec import decode_file

    ckpt = load_checkpoint(s["model"])
    paths = decode_file(ckpt.model, s["container"], s["out_dir"])
    write_manifest(Path(s["out_dir"]) / "manifest.json", "decode", argv, s, paths)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


def cmd_evaluate(s, argv):
    from .checkpoint import fingerprint, load_checkpoint
    from .codec import save_image
    from .image_data import build_dataset, split_dataset
    from .metrics import diff_image, evaluate_dataset
    from .plotting import plot_loss_curves, plot_result_grid

    ckpt = load_checkpoint(s["model"])
    records = build_dataset(s["data_root"], s["n_images"], seed=s["seed"])
    split = split_dataset(records, ckpt.k, mode=s["split_mode"])
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_dataset(ckpt.model, split, s["samples"], seed=s["seed"],
                              checkpoint_id=fingerprint(ckpt.model), keep_images=True)
    outputs = [out / "eval.csv", out / "eval.json", out / "results.png"]
    report.write_csv(outputs[0])
    report.write_json(outputs[1])
    imgs = report.images
    plot_result_grid(imgs["cover"], imgs["secrets"], imgs["container"], imgs["decoded"],
                     outputs[2], gain=s["gain"])
    g = f"{s['gain']:g}"
    for row, image in enumerate(report.image_ids()):
        p = out / f"image{image}_cover_diff_gain{g}.png"
        save_image(diff_image(imgs["cover"][row], imgs["container"][row], s["gain"]), p)
        outputs.append(p)
        for i in range(ckpt.k):
            p = out / f"image{image}_secret{i + 1}_diff_gain{g}.png"
            save_image(diff_image(imgs["secrets"][row, i], imgs["decoded"][row, i], s["gain"]), p)
            outputs.append(p)
    if ckpt.history:
        outputs.append(plot_loss_curves(ckpt.history, out / "loss_curve.png"))
    write_manifest(out / "manifest.json", "evaluate", argv, s, outputs,
                   seeds={"seed": s["seed"]}, checkpoint=report.checkpoint)
    for role, st in report.aggregate().items():
        print(f"{role}: mse={st['mse_mean']:.6g} psnr={st['psnr_mean']:.3f} ssim={st['ssim_mean']:.4f}")
    return EXIT_OK


def cmd_lsb_encode(s, argv):
    from .codec import LsbPlan, lsb_encode_file

    k = len(s["secret"])
    plan = LsbPlan(k, s["bits_per_secret"]) if s["bits_per_secret"] else LsbPlan.default(k)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    lsb_encode_file(s["cover"], s["secret"], out, plan)
    write_manifest(out.with_name(out.stem + ".manifest.json"), "lsb-encode", argv, s, [out],
                   plan={"k": plan.k, "bits_per_secret": plan.bits_per_secret})
    print(f"wrote {out} (k={plan.k}, {plan.bits_per_secret} bits per secret)")
    return EXIT_OK


def cmd_lsb_decode(s, argv):
    from .codec import LsbPlan, lsb_decode_file

    k = s["k"]
    plan = LsbPlan(k, s["bits_per_secret"]) if s["bits_per_secret"] else LsbPlan.default(k)
    paths = lsb_decode_file(s["container"], s["out_dir"], plan)
    write_manifest(Path(s["out_dir"]) / "manifest.json", "lsb-decode", argv, s, paths,
                   plan={"k": plan.k, "bits_per_secret": plan.bits_per_secret})
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


def cmd_grad_check(s, argv):
    import torch

    from .stego_net import NetworkSpec, init_params
    from .training import fixed_batch, grad_check

    model = init_params(NetworkSpec(k=s["k"]), seed=s["seed"], dtype=torch.float64)
    batch = fixed_batch(s["k"], batch_size=2, size=s["size"], seed=s["seed"], dtype=torch.float64)
    err = grad_check(model, batch, probe_count=s["probes"], h=s["h"], seed=s["seed"])
    out = Path(s["out_dir"])
    result = out / "grad_check.json"
    out.mkdir(parents=True, exist_ok=True)
    result.write_text(json.dumps({"max_relative_error": err, "tol": s["tol"],
                                  "passed": err < s["tol"]}, indent=2) + "\n")
    write_manifest(out / "manifest.json", "grad-check", argv, s, [result], seeds={"seed": s["seed"]})
    status = "PASS" if err < s["tol"] else "FAIL"
    print(f"max relative error {err:.3e} (tol {s['tol']:g}) {status}")
    return EXIT_OK if err < s["tol"] else EXIT_RUNTIME


def cmd_synth_data(s, argv):
    from .synthetic import write_dataset

    root = write_dataset(s["out"], s["classes"], s["per_class"], seed=s["seed"])
    write_manifest(Path(root) / "manifest.json", "synth-data", argv, s, [root], seeds={"seed": s["seed"]})
    print(f"wrote {s['classes'] * s['per_class']} images under {root}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "lsb-encode": cmd_lsb_encode,
    "lsb-decode": cmd_lsb_decode,
    "grad-check": cmd_grad_check,
    "synth-data": cmd_synth_data,
}


def run(argv=None, environ=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        settings = resolve(args.command, args, environ)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("resolved %s settings: %s", args.command, json.dumps(settings, default=str))
    try:
        return COMMANDS[args.command](settings, argv)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
