"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 certification
failure (a probe ran and the model violated its contract).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from saim import checkpoint as ckpt_io
from saim.config import ORDERS, ConfigError, TrainConfig, load_config, toy_config
from saim.imageio import (
    generate_synthetic,
    load_ppm,
    normalize_colors,
    save_ppm,
    save_raw_batch,
)
from saim.model import SAIM, build_model, export_encoder, group_of
from saim.objective import LossKind
from saim.patching import patchify
from saim.permutation import raster_plan, sample_plan
from saim.probes import (
    attention_map,
    certify_no_leakage,
    grad_check,
    permutation_distribution_test,
    reconstruct,
    tiny_config,
)
from saim.rng import Xoshiro256
from saim.trainer import model_from_checkpoint, pretrain, set_deterministic

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CERT = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4

log = logging.getLogger("saim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("--ckpt", type=Path, help="checkpoint to read")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic kernels; requires --seed")
    return p


def _model_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--order", choices=ORDERS, help="prediction order")
    p.add_argument("--loss", choices=[k.value for k in LossKind], help="reconstruction loss")
    p.add_argument("--kernel-size", type=int, help="target smoothing kernel size (0 disables)")
    p.add_argument("--sigma", type=float, help="target smoothing sigma")
    p.add_argument("--share-weights", action="store_true", help="decoder reuses encoder blocks")
    p.add_argument("--decoder-depth", type=int, help="number of decoder blocks")
    return p


def build_parser() -> argparse.ArgumentParser:
    common, model = _common(), _model_flags()
    parser = _Parser(prog="saim", description="Stochastic autoregressive image modeling toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n", type=int, default=800, help="number of images")
    g.add_argument("--size", type=int, default=32, help="image side in pixels")

    t = sub.add_parser("pretrain", parents=[common, model], help="run pretraining")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--resume", action="store_true", help="continue from --ckpt")

    probe = sub.add_parser("probe", help="verification probes")
    psub = probe.add_subparsers(dest="probe", required=True, parser_class=_Parser)
    pl = psub.add_parser("leakage", parents=[common, model], help="certify causal masking")
    pl.add_argument("--trials", type=int, default=16, help="perturbation trials")
    pl.add_argument("--tolerance", type=float, default=0.0, help="allowed prediction change")
    pg = psub.add_parser("grad", parents=[common], help="finite-difference gradient check")
    pg.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    pp = psub.add_parser("perm", parents=[common], help="visible-count distribution test")
    pp.add_argument("--n", type=int, default=16, help="number of tokens")
    pp.add_argument("--samples", type=int, default=100_000, help="sampled plans")
    pp.add_argument("--exact", action="store_true", help="enumerate all orders")

    viz = sub.add_parser("viz", help="visualizations")
    vsub = viz.add_subparsers(dest="viz", required=True, parser_class=_Parser)
    va = vsub.add_parser("attention", parents=[common], help="last-layer attention map (PGM)")
    va.add_argument("--image", type=Path, help="input PPM/PGM (default: a synthetic image)")
    va.add_argument("--query-token", type=int, default=0, help="query token index")
    vr = vsub.add_parser("reconstruct", parents=[common, model],
                         help="original | prediction side by side (PPM)")
    vr.add_argument("--image", type=Path, help="input PPM/PGM (default: a synthetic image)")

    sub.add_parser("export-encoder", parents=[common], help="write encoder-only checkpoint")
    ic = sub.add_parser("inspect-ckpt", parents=[common], help="list checkpoint tensors")
    ic.add_argument("path", nargs="?", type=Path, help="checkpoint (or use --ckpt)")
    return parser


# ---------------------------------------------------------------------------
# helpers

_RANDOMIZED = {"gen-data", "pretrain", "probe", "viz"}


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else toy_config()
    return apply_overrides(cfg, args)


def apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    upd: dict = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "order", None):
        upd["order"] = args.order
    if getattr(args, "steps", None) is not None:
        upd["total_steps"] = args.steps
        upd["warmup_steps"] = min(cfg.warmup_steps, args.steps)
        upd["checkpoint_every"] = min(cfg.checkpoint_every, args.steps)
    model = cfg.model
    if getattr(args, "share_weights", False):
        model = dataclasses.replace(model, share_weights=True)
    if getattr(args, "decoder_depth", None) is not None:
        model = dataclasses.replace(model, decoder_depth=args.decoder_depth)
    loss = cfg.loss
    if getattr(args, "loss", None):
        loss = dataclasses.replace(loss, kind=LossKind(args.loss))
    ksize = getattr(args, "kernel_size", None)
    sigma = getattr(args, "sigma", None)
    if ksize is not None or sigma is not None:
        old = loss.smoothing or (9, 1.0)
        k = old[0] if ksize is None else ksize
        s = old[1] if sigma is None else sigma
        loss = dataclasses.replace(loss, smoothing=None if k == 0 else (k, s))
    return dataclasses.replace(cfg, model=model, loss=loss, **upd)


def _load_model(args) -> tuple[SAIM, TrainConfig]:
    """Model from --ckpt, or a freshly initialized one from the config."""
    if args.ckpt:
        ck = ckpt_io.load(args.ckpt)
        cfg = TrainConfig.from_dict(ck.meta["config"])
        return model_from_checkpoint(ck), apply_overrides(cfg, args)
    cfg = _train_config(args)
    return build_model(cfg.model, Xoshiro256(cfg.seed).spawn()), cfg


def _input_image(args, cfg: TrainConfig) -> np.ndarray:
    if args.image:
        img = load_ppm(args.image)
    else:
        img, _ = generate_synthetic(1, cfg.model.image_size, args.seed or 0, cfg.model.in_chans)
    want = (cfg.model.in_chans, cfg.model.image_size, cfg.model.image_size)
    if img.shape[1:] != want:
        raise ValueError(f"image shape {img.shape[1:]} does not match model input {want}")
    return normalize_colors(img, cfg.augment)


def _require(args, name: str) -> Path:
    value = getattr(args, name)
    if value is None:
        raise UsageError(f"--{name} is required for this command")
    return value


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = _require(args, "out")
    images, labels = generate_synthetic(args.n, args.size, args.seed or 0)
    out.mkdir(parents=True, exist_ok=True)
    save_raw_batch(out / "images.simb", images)
    (out / "labels.txt").write_text("".join(f"{int(y)}\n" for y in labels), encoding="utf-8")
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = _require(args, "out")
    if args.resume:
        resume = _require(args, "ckpt")
        trainer = pretrain(toy_config(), out, resume=resume)
    else:
        trainer = pretrain(_train_config(args), out)
    loss = trainer.history[-1][2] if trainer.history else float("nan")
    print(f"finished step {trainer.step} loss {loss:.6f}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.probe == "leakage":
        model, _ = _load_model(args)
        report = certify_no_leakage(model, args.trials, args.tolerance, seed=args.seed or 0)
        for line in report.lines():
            print(line)
        return EXIT_OK if report.passed else EXIT_CERT
    if args.probe == "grad":
        res = grad_check(tiny_config(), eps=args.eps, seed=args.seed or 0)
        for name, err in res.per_tensor.items():
            print(f"{name}\t{err:.3e}")
        ok = res.all_finite and res.max_rel_error < GRAD_TOLERANCE
        print(f"grad max_rel_error={res.max_rel_error:.3e} params={res.n_checked} "
              f"verdict={'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_CERT
    res = permutation_distribution_test(
        args.n, args.samples, Xoshiro256(args.seed or 0), exact=True if args.exact else None
    )
    print(f"perm n={res.n} exact={res.exact} counts={res.counts.tolist()} "
          f"chi2={res.chi2:.4f} p={res.p_value:.4f} verdict={'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_CERT


def cmd_viz(args) -> int:
    out = _require(args, "out")
    model, cfg = _load_model(args)
    img = _input_image(args, cfg)
    if args.viz == "attention":
        patches = torch.from_numpy(np.ascontiguousarray(patchify(img, cfg.model.patch_size).values))
        amap = attention_map(model, patches, args.query_token)
        out.write_bytes(amap.to_pgm())
        print(f"wrote {cfg.model.grid}x{cfg.model.grid} attention map to {out}")
        return EXIT_OK
    n = cfg.model.n_tokens
    plan = raster_plan(n) if cfg.order == "raster" else sample_plan(n, Xoshiro256(args.seed or 0))
    pic = reconstruct(model, img, [plan], cfg.loss, cfg.augment)
    save_ppm(out, pic)
    print(f"wrote reconstruction to {out}")
    return EXIT_OK


def cmd_export_encoder(args) -> int:
    src, out = _require(args, "ckpt"), _require(args, "out")
    ck = ckpt_io.load(src)
    model = model_from_checkpoint(ck)
    tensors = {k: v.numpy().copy() for k, v in export_encoder(model).items()}
    meta = {"kind": "encoder", "config": ck.meta["config"]["model"], "step": ck.meta.get("step")}
    ckpt_io.save(out, ckpt_io.Checkpoint(tensors, meta))
    print(f"wrote encoder ({sum(v.size for k, v in tensors.items() if k != 'pos_embed')} "
          f"parameters) to {out}")
    return EXIT_OK


def inspect_lines(ck: ckpt_io.Checkpoint) -> list[str]:
    lines = []
    totals = {"encoder": 0, "decoder": 0, "head": 0}
    buffers = optimizer = 0
    for name, arr in ck.tensors.items():
        dims = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name}\t{dims}\t{arr.size}")
        if name.startswith("opt."):
            optimizer += arr.size
        elif name == "pos_embed" or name.startswith("plan."):
            buffers += arr.size
        else:
            totals[group_of(name)] += arr.size
    total = sum(totals.values())
    lines.append(f"kind: {ck.meta.get('kind', '?')}  step: {ck.meta.get('step', '?')}")
    lines.append(
        f"parameters: encoder {totals['encoder']}  decoder {totals['decoder']}  "
        f"head {totals['head']}  total {total}"
    )
    lines.append(f"buffers: {buffers}  optimizer state: {optimizer}")
    return lines


def cmd_inspect(args) -> int:
    path = args.path or args.ckpt
    if path is None:
        raise UsageError("inspect-ckpt needs a checkpoint path")
    for line in inspect_lines(ckpt_io.load(path)):
        print(line)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "viz": cmd_viz,
    "export-encoder": cmd_export_encoder,
    "inspect-ckpt": cmd_inspect,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.deterministic and args.command in _RANDOMIZED and args.seed is None:
            raise UsageError("--deterministic requires --seed")
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        set_deterministic(True)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"saim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ckpt_io.CheckpointError, OSError, ValueError, IndexError,
            FloatingPointError, KeyError) as e:
        print(f"saim: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
