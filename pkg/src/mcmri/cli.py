"""Command-line front end.

Every verb confines its outputs to ``--out`` and finishes by writing a
``run.json`` manifest there (arguments, config hash, input paths, produced
files). Failures print a single ``error: <category>: <message>`` line and
exit with 2 for usage problems, 3 for configuration problems, 1 for
anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from .errors import (
    ConfigurationError,
    DomainError,
    InfeasibleBudgetError,
    StateError,
    ValidationError,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcmri",
        description="Joint k-space sampling / multi-contrast reconstruction lab",
    )
    sub = parser.add_subparsers(dest="verb", metavar="verb")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        return p

    p = add("gen-data", "generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, default=32, help="number of samples")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--contrasts", type=int, default=5)
    p.add_argument("--delta-t", type=float, default=10.0, help="echo spacing in ms")
    p.add_argument("--noise", type=float, default=0.0, help="complex noise sigma")

    def add_train_flags(p, with_data=True):
        if with_data:
            p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--baseline", default=None, choices=sorted("abcdefg"),
                       help="baseline id (see docs)")
        p.add_argument("--alpha", type=float, default=None, help="total sparsity")
        p.add_argument("--ratio-mode", default=None, choices=("fixed", "learnable"))
        p.add_argument("--blocks", type=int, default=None, help="cascade length")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None, help="learning rate")
        p.add_argument("--grad-clip", type=float, default=None,
                       help="gradient-norm cap (recommended for train-map)")
        p.add_argument("--loss", default=None, choices=("mse", "mse_ssim"))
        p.add_argument("--preselect", type=int, default=None,
                       help="always-sampled central columns")

    p = add("train", "train sampling + reconstruction on image loss")
    add_train_flags(p)

    p = add("train-map", "train sampling + budgets + reconstruction on map loss")
    add_train_flags(p)
    p.add_argument("--regressor", required=True, help="fitted regressor .npz")

    p = add("eval", "evaluate a checkpoint (or 'zero-filled') on a dataset split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", default=None,
                   help="checkpoint path, or 'zero-filled' for the unlearned pipeline")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--regressor", default=None, help="adds map metrics when given")
    p.add_argument("--alpha", type=float, default=0.25,
                   help="sparsity for the zero-filled pipeline")
    p.add_argument("--preselect", type=int, default=None,
                   help="preselected columns for the zero-filled pipeline")

    p = add("ablate-blocks", "train once per cascade length and tabulate")
    add_train_flags(p)
    p.add_argument("--blocks-list", default="1,2,3", help="comma-separated lengths")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")

    p = add("fit-regressor", "fit and freeze the per-pixel decay regressor")
    p.add_argument("--contrasts", type=int, default=5)
    p.add_argument("--delta-t", type=float, default=10.0)
    p.add_argument("--n", type=int, default=200_000, help="simulated decays")
    p.add_argument("--epochs", type=int, default=20)

    p = add("plot-masks", "emit mask probability and histogram figures")
    p.add_argument("--checkpoint", default=None, help="trained checkpoint")

    p = add("plot-maps", "emit reconstruction and map comparison figures")
    p.add_argument("--checkpoint", default=None, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--regressor", default=None, help="map fitter; analytic fit if absent")
    p.add_argument("--sample-index", type=int, default=0)

    return parser


# ---------------------------------------------------------------------------
# shared plumbing

def _apply_thread_cap() -> None:
    raw = os.environ.get("MCMRI_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"MCMRI_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError(f"MCMRI_THREADS must be >= 1, got {n}")
    import torch
    torch.set_num_threads(n)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, args, inputs, outputs, config_text=None) -> None:
    payload = config_text if config_text is not None else json.dumps(
        {k: v for k, v in sorted(vars(args).items()) if k != "verb"}, sort_keys=True)
    manifest = {
        "verb": args.verb,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "verb"},
        "config_sha256": hashlib.sha256(payload.encode()).hexdigest(),
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
    }
    from .trainer import _atomic_write_text
    _atomic_write_text(out / "run.json", json.dumps(manifest, indent=2))


def _load_split(data_dir, split: str):
    from .phantom import load_manifest
    root = Path(data_dir)
    if not (root / "manifest.json").exists():
        raise ConfigurationError(f"no dataset manifest under {root}")
    _, splits = load_manifest(root)
    samples = splits.get(split, [])
    if not samples:
        raise ValidationError(f"dataset split {split!r} is empty")
    return samples


def _geometry_of(samples):
    C, H, W = samples[0].images.shape
    return H, W, C, float(samples[0].delta_t)


def _effective_config(args, samples):
    """TrainConfig from (optional) config file, CLI overrides, and the
    dataset's geometry. Returns (config, text echoed into the checkpoint)."""
    from .trainer import TrainConfig, config_from_text, config_to_text
    verbatim = None
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        verbatim = path.read_text()
        cfg = config_from_text(verbatim)
    else:
        cfg = TrainConfig()
    overrides = {
        "baseline_id": args.baseline,
        "alpha_total": args.alpha,
        "ratio_mode": getattr(args, "ratio_mode", None),
        "n_blocks": args.blocks,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "grad_clip": getattr(args, "grad_clip", None),
        "loss": args.loss,
        "preselect": args.preselect,
        "seed": args.seed,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    H, W, C, dt = _geometry_of(samples)
    geometry = {"height": H, "width": W, "n_contrasts": C, "delta_t": dt}
    changes.update({k: v for k, v in geometry.items() if getattr(cfg, k) != v})
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
        return cfg, config_to_text(cfg)
    return cfg, (verbatim if verbatim is not None else config_to_text(cfg))


def _eval_split(args, default="val"):
    return getattr(args, "split", default)


def _print(line: str) -> None:
    print(line)


# ---------------------------------------------------------------------------
# verb handlers

def _cmd_gen_data(args) -> int:
    from .phantom import write_dataset
    out = _out_dir(args)
    if args.seed is None:
        args.seed = 0
    write_dataset(out, n_samples=args.n, seed=args.seed, H=args.height,
                  W=args.width, C=args.contrasts, delta_t=args.delta_t,
                  noise_sigma=args.noise)
    produced = sorted(p.name for p in out.glob("*.npz")) + ["manifest.json"]
    _write_run_manifest(out, args, inputs=[], outputs=produced)
    _print(f"wrote {args.n} samples under {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .trainer import train_reconstruction
    out = _out_dir(args)
    samples = _load_split(args.data, "train")
    try:
        eval_samples = _load_split(args.data, "val")
    except ValidationError:
        eval_samples = samples
    cfg, text = _effective_config(args, samples)
    result = train_reconstruction(cfg, samples, out_dir=out,
                                  eval_samples=eval_samples, config_text=text)
    produced = ["checkpoint.npz", "log.jsonl", "report.json", "report.csv"]
    _write_run_manifest(out, args, inputs=[args.data], outputs=produced,
                        config_text=text)
    _print(f"trained {cfg.label}: mean PSNR {result.report.mean_psnr:.2f} dB, "
           f"mean SSIM {result.report.mean_ssim:.4f}")
    return EXIT_OK


def _cmd_train_map(args) -> int:
    from .trainer import load_regressor, train_map_driven
    out = _out_dir(args)
    samples = _load_split(args.data, "train")
    try:
        eval_samples = _load_split(args.data, "val")
    except ValidationError:
        eval_samples = samples
    fitter = load_regressor(args.regressor)
    cfg, text = _effective_config(args, samples)
    result = train_map_driven(cfg, samples, fitter, out_dir=out,
                              eval_samples=eval_samples, config_text=text)
    produced = ["checkpoint.npz", "log.jsonl", "report.json", "report.csv"]
    _write_run_manifest(out, args, inputs=[args.data, args.regressor],
                        outputs=produced, config_text=text)
    _print(f"map-trained {cfg.label} ({cfg.ratio_mode} budgets): "
           f"map PSNR {result.report.map_psnr_bg:.2f} dB (with background), "
           f"{result.report.map_psnr_nbg:.2f} dB (foreground only)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .trainer import (TrainConfig, _atomic_write_text, build_training_parts,
                          evaluate, load_checkpoint, load_regressor)
    if not args.checkpoint:
        raise ConfigurationError("eval needs --checkpoint (a path or 'zero-filled')")
    out = _out_dir(args)
    samples = _load_split(args.data, args.split)
    fitter = load_regressor(args.regressor) if args.regressor else None
    inputs = [args.data]
    seed = 1234 if args.seed is None else args.seed
    if args.checkpoint == "zero-filled":
        H, W, C, dt = _geometry_of(samples)
        preselect = args.preselect if args.preselect is not None else max(
            1, min(TrainConfig().preselect, round(args.alpha * W)))
        cfg = TrainConfig(baseline_id="a", alpha_total=args.alpha, height=H,
                          width=W, n_contrasts=C, delta_t=dt, seed=seed,
                          preselect=preselect)
        _, bank, budget = build_training_parts(cfg)
        model = None
    else:
        cfg, model, bank, budget = load_checkpoint(args.checkpoint)
        inputs.append(args.checkpoint)
    report = evaluate(model, bank, budget, samples, cfg, seed=seed, fitter=fitter)
    _atomic_write_text(out / "report.json", report.to_json())
    _atomic_write_text(out / "report.csv", report.to_csv())
    if args.regressor:
        inputs.append(args.regressor)
    _write_run_manifest(out, args, inputs=inputs,
                        outputs=["report.json", "report.csv"])
    _print(f"evaluated {args.checkpoint} on {args.split}: "
           f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def _cmd_ablate_blocks(args) -> int:
    import csv as csv_mod
    import io as io_mod

    from .trainer import _atomic_write_text, run_ablation_nblocks
    out = _out_dir(args)
    samples = _load_split(args.data, "train")
    try:
        eval_samples = _load_split(args.data, "val")
    except ValidationError:
        eval_samples = samples
    cfg, text = _effective_config(args, samples)
    blocks = [int(x) for x in args.blocks_list.split(",") if x.strip()]
    seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
    if not blocks:
        raise ConfigurationError("--blocks-list is empty")
    rows = run_ablation_nblocks(cfg, samples, blocks, seeds=seeds,
                                eval_samples=eval_samples)
    _atomic_write_text(out / "ablation.json", json.dumps(rows, indent=2))
    buf = io_mod.StringIO()
    writer = csv_mod.DictWriter(buf, fieldnames=["n_blocks", "mean_psnr", "mean_ssim"])
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r[k] for k in ("n_blocks", "mean_psnr", "mean_ssim")})
    _atomic_write_text(out / "ablation.csv", buf.getvalue())
    _write_run_manifest(out, args, inputs=[args.data],
                        outputs=["ablation.json", "ablation.csv"], config_text=text)
    for r in rows:
        _print(f"blocks={r['n_blocks']}: mean PSNR {r['mean_psnr']:.2f} dB, "
               f"mean SSIM {r['mean_ssim']:.4f}")
    return EXIT_OK


def _cmd_fit_regressor(args) -> int:
    import torch

    from .t2star import T2StarRegressor, simulate_regressor_dataset
    from .trainer import save_regressor
    out = _out_dir(args)
    reg = T2StarRegressor(C=args.contrasts, delta_t=args.delta_t)
    seed = 0 if args.seed is None else args.seed
    reg.fit(n=args.n, seed=seed, epochs=args.epochs)
    path = out / "regressor.npz"
    save_regressor(path, reg)
    signals, labels = simulate_regressor_dataset(5000, seed=seed + 1,
                                                 C=args.contrasts,
                                                 delta_t=args.delta_t)
    mae = float(torch.mean(torch.abs(reg.predict(signals) - labels)))
    _write_run_manifest(out, args, inputs=[], outputs=["regressor.npz"])
    _print(f"fitted regressor ({args.contrasts} contrasts): "
           f"held-out MAE {mae:.3f} ms -> {path}")
    return EXIT_OK


def _require_checkpoint(args):
    from .trainer import load_checkpoint
    if not args.checkpoint:
        raise ConfigurationError("this command needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def _cmd_plot_masks(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch

    from .metrics import mask_histogram
    from .trainer import _atomic_write_text
    out = _out_dir(args)
    cfg, _, bank, budget = _require_checkpoint(args)
    gen = torch.Generator().manual_seed(1234 if args.seed is None else args.seed)
    with torch.no_grad():
        alphas = budget.alphas().detach()
        masks = bank.sample(cfg.height, generator=gen, alphas=alphas)
    probs = bank.prob_columns()

    produced = []
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for c in range(cfg.n_contrasts):
        ax.plot(probs[c].numpy(), label=f"contrast {c} (a={float(alphas[c]):.3f})")
    ax.set_xlabel("column index")
    ax.set_ylabel("sampling probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "mask_probs.png", dpi=120)
    plt.close(fig)
    produced.append("mask_probs.png")

    for c in range(cfg.n_contrasts):
        counts = mask_histogram(masks[c], bin_len=10)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(range(len(counts)), counts.numpy(), width=0.85)
        ax.set_xlabel("column bin (10 columns each)")
        ax.set_ylabel("sampled columns")
        ax.set_title(f"contrast {c}: {int(masks[c, 0].sum())} of {cfg.width} columns")
        fig.tight_layout()
        name = f"hist_contrast_{c}.png"
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
        produced.append(name)

    lines = ["".join(str(int(v)) for v in masks[c, 0]) for c in range(cfg.n_contrasts)]
    _atomic_write_text(out / "mask_columns.txt", "\n".join(lines) + "\n")
    produced.append("mask_columns.txt")
    _write_run_manifest(out, args, inputs=[args.checkpoint], outputs=produced)
    _print(f"wrote {len(produced)} mask figures under {out}")
    return EXIT_OK


def _cmd_plot_maps(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch

    from .t2star import T2_MAX_MS, synthesize_map
    from .trainer import _prepare_images, load_regressor, reconstruct_batch
    out = _out_dir(args)
    cfg, model, bank, budget = _require_checkpoint(args)
    samples = _load_split(args.data, args.split)
    if not 0 <= args.sample_index < len(samples):
        raise ValidationError(
            f"sample index {args.sample_index} outside split of {len(samples)}")
    sample = samples[args.sample_index]
    fitter = load_regressor(args.regressor) if args.regressor else "loglinear"

    data = _prepare_images([sample], cfg)
    gen = torch.Generator().manual_seed(1234 if args.seed is None else args.seed)
    with torch.no_grad():
        alphas = budget.alphas().detach()
        masks = bank.sample(cfg.height, generator=gen, alphas=alphas)
        zf = reconstruct_batch(None, data, masks)
        rec = reconstruct_batch(model, data, masks)
        map_ref = synthesize_map(data[0], fitter, delta_t=cfg.delta_t)
        map_rec = synthesize_map(rec[0], fitter, delta_t=cfg.delta_t)

    C = cfg.n_contrasts
    fig, axes = plt.subplots(3, C, figsize=(2.2 * C, 6.8))
    for c in range(C):
        for row, (img, label) in enumerate([(data, "full"), (zf, "zero-filled"),
                                            (rec, "reconstructed")]):
            ax = axes[row, c] if C > 1 else axes[row]
            ax.imshow(torch.abs(img[0, c]).numpy(), cmap="gray")
            ax.set_axis_off()
            if c == 0:
                ax.set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(out / "reconstructions.png", dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (img, label) in zip(axes, [
        (map_ref, "map from full data"),
        (map_rec, "map from reconstruction"),
        (torch.abs(map_rec - map_ref), "absolute error"),
    ]):
        im = ax.imshow(img.numpy(), vmin=0,
                       vmax=T2_MAX_MS if label != "absolute error" else None,
                       cmap="viridis")
        ax.set_axis_off()
        ax.set_title(label, fontsize=8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out / "maps.png", dpi=120)
    plt.close(fig)

    inputs = [args.checkpoint, args.data]
    if args.regressor:
        inputs.append(args.regressor)
    _write_run_manifest(out, args, inputs=inputs,
                        outputs=["reconstructions.png", "maps.png"])
    _print(f"wrote reconstruction and map panels under {out}")
    return EXIT_OK


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "train-map": _cmd_train_map,
    "eval": _cmd_eval,
    "ablate-blocks": _cmd_ablate_blocks,
    "fit-regressor": _cmd_fit_regressor,
    "plot-masks": _cmd_plot_masks,
    "plot-maps": _cmd_plot_maps,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    if args.verb is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        _apply_thread_cap()
        return _HANDLERS[args.verb](args)
    except (ConfigurationError, InfeasibleBudgetError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, DomainError, StateError) as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"error: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
