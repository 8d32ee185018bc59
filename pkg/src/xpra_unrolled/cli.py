"""Command-line interface: ``python3 -m xpra_unrolled <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .forward import simulate
from .io import (config_from_manifest, config_manifest, export_image, load_config, load_dataset,
                 parse_scene_text, read_pdis, save_dataset, write_pdis)
from .metrics import PsnrConfig, evaluate_split, format_db
from .prior import PriorConfig
from .rng import Xoshiro256
from .scene import DistributionConfig, build_dataset, rasterize_permittivity
from .train import TrainConfig, make_optimizer, predict, train
from .unrolled import LinearSystem, build_model, tikhonov_image
from .xpra import assemble_kernel


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def cmd_gen_data(args) -> int:
    config, run = load_config(args.config)
    fractions = (run["split_train"], run["split_val"], run["split_test"])
    workers = 1 if run["reproducible"] else run["workers"]
    progress = None
    if args.verbose:
        progress = lambda i, n: print(f"sample {i}/{n}", file=sys.stderr)  # noqa: E731
    ds = build_dataset(config, args.count, args.seed, fractions, DistributionConfig(),
                       run["noise_sigma_db"], workers, progress)
    path = save_dataset(ds, args.out, args.seed, {"noise_sigma_db": repr(run["noise_sigma_db"])})
    print(f"wrote {path} ({len(ds.train)}/{len(ds.val)}/{len(ds.test)} train/val/test)")
    return 0


def cmd_simulate(args) -> int:
    config, run = load_config(args.config)
    specs = parse_scene_text(Path(args.scene).read_text(encoding="utf-8"))
    perm = rasterize_permittivity(specs, config.forward_grid)
    rng = Xoshiro256(args.seed)
    meas = simulate(config, perm, run["noise_sigma_db"], rng)
    manifest = config_manifest(config)
    manifest.update(kind="measurements", links=str(len(meas.links)), noise_sigma_db=repr(run["noise_sigma_db"]))
    write_pdis(args.out, {"delta_p": meas.delta_p}, manifest)
    print(f"wrote {args.out} ({len(meas.links)} links)")
    return 0


def _reconstructor(method: str, model_path, config):
    """Returns (callable on (n, L) stacks, LinearSystem)."""
    if method == "tik-init":
        if model_path:
            model, sysm, _, _, _ = load_checkpoint(model_path)
            if not hasattr(model, "lam0") or not model.lam0:
                raise SystemExit("error: checkpoint has no Tikhonov init layer")
            l1, l2 = (float(t.value) for t in model.lam0)
        else:
            sysm = LinearSystem.build(assemble_kernel(config))
            l1 = l2 = 1e-2 * sysm.mean_eig
        return (lambda x: tikhonov_image(sysm, None, l1, l2, x)), sysm
    if not model_path:
        raise SystemExit(f"error: --model is required for method {method}")
    model, sysm, _, _, _ = load_checkpoint(model_path)
    if model.kind != method:
        raise SystemExit(f"error: checkpoint holds a {model.kind} model, not {method}")
    return (lambda x: predict(model, sysm, x)), sysm


def cmd_invert(args) -> int:
    records, manifest = read_pdis(args.measurements)
    if "delta_p" not in records:
        raise SystemExit("error: measurement file has no delta_p record")
    config = config_from_manifest(manifest)
    recon, sysm = _reconstructor(args.method, args.model, config)
    dp = np.atleast_2d(records["delta_p"])
    if dp.shape[-1] != sysm.op.A.shape[0]:
        raise SystemExit(f"error: {dp.shape[-1]} measurements, model expects {sysm.op.A.shape[0]}")
    img = recon(dp)
    img = img[0] if records["delta_p"].ndim == 1 else img
    out = config_manifest(config)
    out.update(kind="image", method=args.method)
    write_pdis(args.out, {"image": img}, out)
    print(f"wrote {args.out} image {img.shape}")
    return 0


def cmd_train(args) -> int:
    config, run = load_config(args.config)
    ds = load_dataset(args.data)
    if ds.config != config:
        raise SystemExit("error: dataset was generated with a different scene configuration")
    sysm = LinearSystem.build(assemble_kernel(config))
    pc = PriorConfig(run["levels"], run["channels"])
    model = build_model(run["model"], sysm, run["layers"], pc, seed=args.seed)
    tc = TrainConfig(epochs=args.epochs, batch_size=run["batch_size"], lr_reg=run["lr_reg"],
                     lr_other=run["lr_other"], seed=args.seed)
    x = np.array([s.measurements for s in ds.train])
    y = np.array([s.ground_truth for s in ds.train])
    opt = make_optimizer(model, tc)
    extra = {"seed": str(args.seed), "batch_size": str(tc.batch_size),
             "lr_reg": repr(tc.lr_reg), "lr_other": repr(tc.lr_other)}

    def ckpt(epoch, model, opt, rng, losses):
        save_checkpoint(args.out_ckpt, model, config, opt, epoch, rng, losses, extra)

    result = train(model, sysm, x, y, tc, optimizer=opt, checkpoint=ckpt,
                   log=lambda e, l: print(f"epoch {e} loss {l:.10g}"))
    print(f"wrote {args.out_ckpt} after {len(result.losses)} epochs")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    split = ds.split(args.split)
    if args.model == "tik-init":
        recon, _ = _reconstructor("tik-init", None, ds.config)
    else:
        model, sysm, config, _, _ = load_checkpoint(args.model)
        if config != ds.config:
            raise SystemExit("error: model and dataset scene configurations differ")
        recon = lambda x: predict(model, sysm, x)  # noqa: E731
    score = evaluate_split(recon, split, PsnrConfig.parse(args.psnr_peak))
    lines = ["index,psnr_db"] + [f"{i},{format_db(v)}" for i, v in zip(score.indices, score.values)]
    lines.append(f"mean,{format_db(score.mean)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def cmd_export(args) -> int:
    records, _ = read_pdis(args.input)
    name = args.record or ("image" if "image" in records else next(iter(records)))
    img = np.asarray(records[name])
    if img.ndim == 3:
        img = img[args.index]
    if img.ndim != 2:
        raise SystemExit(f"error: record {name!r} is not an image")
    out = args.out or str(Path(args.input).with_suffix("." + args.format))
    export_image(img, out, args.format, args.peak)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xpra_unrolled", description="Phaseless xPRA imaging with unrolled PGM.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=_u64, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", help="simulate measurements for a scene file")
    s.add_argument("--config", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=_u64, default=0, help="noise stream seed")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("invert", help="reconstruct an image from measurements")
    i.add_argument("--method", required=True, choices=["tk-dprior", "tv", "di", "dprior", "tik-init"])
    i.add_argument("--model")
    i.add_argument("--measurements", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_invert)

    t = sub.add_parser("train", help="train an unrolled model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--seed", type=_u64, default=0)
    t.add_argument("--out-ckpt", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR over a dataset split")
    e.add_argument("--model", required=True, help="checkpoint path, or 'tik-init'")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--psnr-peak", default="0.8775", help="fixed peak value or 'max'")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write an image record as PGM or CSV")
    x.add_argument("--in", dest="input", required=True)
    x.add_argument("--format", choices=["pgm", "csv"], required=True)
    x.add_argument("--out")
    x.add_argument("--record")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--peak", type=float, default=0.8775)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
