"""Batch command-line surface over the library.

Subcommands map one-to-one onto library calls; output files and stdout
report lines are identical to what the corresponding API calls produce.
Exit codes: 0 success, 1 gradient check failed, 2 usage or data error.

Global flags may appear before or after the subcommand: --seed, --threads
(caps BLAS worker threads, never changes numerical output), --f64 (64-bit
parameter math), --quiet (suppress progress lines).
"""

from __future__ import annotations

import argparse
import os
import sys

METRIC_CHOICES = ("variance", "entropy", "laplacian", "mse")
_METRIC_ALIASES = {"mse": "recon_mse"}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
    # subcommands re-declare the globals with SUPPRESS so their defaults
    # never clobber values parsed before the subcommand name
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="seed for stochastic steps")
    parser.add_argument("--threads", type=int, default=default,
                        help="cap worker threads (output is thread-count independent)")
    parser.add_argument("--f64", action="store_true", default=default,
                        help="force 64-bit parameter math")
    parser.add_argument("--quiet", action="store_true", default=default,
                        help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxmae", description=__doc__)
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complexity", help="score a volume's coarse patches")
    _global_flags(p, suppress=True)
    p.add_argument("--input", required=True)
    p.add_argument("--metric", choices=METRIC_CHOICES, default="variance")
    p.add_argument("--coarse-edge", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_complexity)

    p = sub.add_parser("tokenize", help="build the mixed-scale token layout")
    _global_flags(p, suppress=True)
    p.add_argument("--input", required=True)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--base-edge", type=int, default=4)
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--bg-thresh", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_tokenize)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    _global_flags(p, suppress=True)
    p.add_argument("--profile", choices=("toy", "paper"), required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--data", default=None, help="directory of .vol volumes")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--dry-run", action="store_true", help="echo the profile config and exit")
    p.add_argument("--force", action="store_true",
                   help="actually run the paper profile despite its memory footprint")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by central differences")
    _global_flags(p, suppress=True)
    p.add_argument("--config", choices=("toy",), default="toy")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--patch-norm", action="store_true")
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one head gradient to demonstrate detection")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("phantom", help="generate a synthetic volume")
    _global_flags(p, suppress=True)
    p.add_argument("--edge", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_phantom)
    return parser


def _resolve(args) -> None:
    args.seed = 0 if args.seed is None else args.seed
    args.f64 = bool(args.f64)
    args.quiet = bool(args.quiet)


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def cmd_complexity(args) -> int:
    from .complexity import complexity_map, write_complexity_map
    from .volume import load_volume, pad_to_multiple

    vol = pad_to_multiple(load_volume(args.input), args.coarse_edge)
    metric = _METRIC_ALIASES.get(args.metric, args.metric)
    cmap = complexity_map(vol, args.coarse_edge, metric)
    write_complexity_map(cmap, args.out)
    _say(args, f"wrote {args.out}")
    return 0


def cmd_tokenize(args) -> int:
    from .tokenizer import token_count_report, tokenize, write_token_layout
    from .volume import load_volume, pad_to_multiple

    coarse = args.base_edge * (1 << (args.scales - 1))
    vol = pad_to_multiple(load_volume(args.input), coarse)
    layout = tokenize(
        vol, tau=args.tau, base_edge=args.base_edge,
        num_scales=args.scales, bg_thresh=args.bg_thresh,
    )
    write_token_layout(layout, args.out)
    rep = token_count_report(layout)
    fine = rep.per_scale[0]
    print(
        f"tokens={rep.total} fine={fine} coarse={rep.total - fine} "
        f"uniform_fine={rep.uniform_fine_total} reduction={rep.reduction_ratio!r}"
    )
    return 0


def _paper_settings() -> list[tuple[str, object]]:
    return [
        ("optimizer", "AdamW"),
        ("beta1", 0.9),
        ("beta2", 0.95),
        ("lr_schedule", "warmup cosine"),
        ("learning_rate", 2e-4),
        ("min_learning_rate", 1e-6),
        ("weight_decay", 0.05),
        ("warmup_epochs", 5),
        ("batch_size", 24),
        ("epochs", 35),
        ("encoder_depth", 12),
        ("encoder_heads", 12),
        ("embed_dim", 768),
        ("decoder_depth", 8),
        ("decoder_heads", 16),
        ("decoder_dim", 512),
        ("mask_ratio", 0.75),
        ("tau", 0.25),
        ("num_scales", 2),
        ("base_edge", 4),
        ("bg_thresh", 0.001),
    ]


def cmd_pretrain(args) -> int:
    import numpy as np

    from .errors import VoxmaeError
    from .model import ModelConfig
    from .train import TrainConfig, train_volumes
    from .volume import load_volume, pad_to_multiple

    if args.profile == "paper":
        for key, value in _paper_settings():
            print(f"{key} = {value}")
        if args.dry_run:
            return 0
        if not args.force:
            print("error: the paper profile needs accelerator-scale memory; "
                  "pass --force to run it anyway", file=sys.stderr)
            return 2

    if not args.data or not args.out:
        print("error: --data and --out are required to train", file=sys.stderr)
        return 2
    from pathlib import Path

    paths = sorted(Path(args.data).glob("*.vol"))
    if not paths:
        raise VoxmaeError(f"no .vol volumes found in {args.data}")

    if args.profile == "paper":
        base_cfg = ModelConfig.paper_profile()
        train_cfg_template = TrainConfig(seed=args.seed)
    else:
        base_cfg = ModelConfig.toy_profile()
        train_cfg_template = TrainConfig(
            lr=2e-2, min_lr=1e-5, weight_decay=0.0, warmup_epochs=5,
            epochs=50, batch=1, seed=args.seed,
        )

    coarse = base_cfg.base_edge * (1 << (base_cfg.num_scales - 1))
    volumes = [pad_to_multiple(load_volume(p), coarse) for p in paths]
    frames = volumes[0].dims[3]
    model_cfg = ModelConfig.from_dict({**base_cfg.to_dict(), "frames": frames})
    epochs = args.epochs if args.epochs is not None else train_cfg_template.epochs
    train_cfg = TrainConfig(
        lr=train_cfg_template.lr,
        min_lr=train_cfg_template.min_lr,
        betas=train_cfg_template.betas,
        weight_decay=train_cfg_template.weight_decay,
        warmup_epochs=min(train_cfg_template.warmup_epochs, epochs),
        epochs=epochs,
        batch=min(train_cfg_template.batch, len(volumes)),
        seed=args.seed,
    )

    progress = None if args.quiet else (lambda ep, loss: print(f"epoch {ep}: loss {loss:.6f}"))
    result = train_volumes(
        model_cfg, train_cfg, volumes,
        tau=args.tau, mask_ratio=args.mask_ratio, out_dir=args.out,
        dtype=np.float64 if args.f64 else np.float32,
        progress=progress,
    )
    _say(args, f"final epoch loss {result.epoch_losses[-1]:.6f}; wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .model import ModelConfig
    from .train import gradcheck

    cfg = ModelConfig.toy_profile(
        num_scales=args.scales, patch_norm_targets=args.patch_norm
    )
    report = gradcheck(
        cfg, seed=args.seed, tolerance=args.tol,
        mask_ratio=args.ratio, sample_budget=args.budget,
        fault="psi" if args.inject_fault else None,
    )
    status = "PASS" if report.passed else "FAIL"
    print(
        f"gradcheck: {status} max_rel_err={report.max_rel_err:.3e} "
        f"worst={report.worst_param} checked={report.num_checked}"
    )
    return 0 if report.passed else 1


def cmd_phantom(args) -> int:
    from .train import PhantomSpec, make_phantom
    from .volume import write_raw_volume

    vol = make_phantom(PhantomSpec(edge=args.edge, frames=args.frames, seed=args.seed))
    write_raw_volume(vol, args.out)
    _say(args, f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    _resolve(args)

    from .errors import VoxmaeError

    try:
        return args.handler(args)
    except (VoxmaeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
