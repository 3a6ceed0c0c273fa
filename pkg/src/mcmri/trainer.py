"""Joint training of sampling masks, budget allocation, and reconstruction.

Two mutually exclusive objectives are provided: image-domain training
(:func:`train_reconstruction`) and map-domain training through a frozen
per-pixel fitter (:func:`train_map_driven`). Both share the step structure

    allocate budgets -> sample masks -> reconstruct -> loss -> optimizer step
    -> re-project every mask onto its (possibly updated) budget

so the per-column probabilities satisfy their sparsity constraint after every
single step, not just at convergence.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .budget import BudgetAllocation
from .errors import ConfigurationError, StateError, ValidationError
from .kspace import fft2c, ifft2c
from .maskgen import ProbabilisticMask, center_columns, replicate_mask
from .metrics import MetricsReport, mask_histogram, psnr, ssim
from .phantom import MultiContrastSample, normalize
from .recon import ReconModelConfig, build_reconstructor
from .t2star import T2_MAX_MS, T2StarRegressor, foreground_mask, synthesize_map

# Baseline grid: mask handling x reconstruction backbone. Letters follow the
# package's canonical ordering from weakest coupling to strongest.
BASELINES = {
    "a": dict(mask_mode="random", mask_shared=True, variant="unet", share_net=True),
    "b": dict(mask_mode="learnable", mask_shared=True, variant="unet", share_net=True),
    "c": dict(mask_mode="learnable", mask_shared=False, variant="unet", share_net=False),
    "d": dict(mask_mode="learnable", mask_shared=False, variant="unet", share_net=True),
    "e": dict(mask_mode="learnable", mask_shared=False, variant="gru_unet", share_net=True),
    "f": dict(mask_mode="learnable", mask_shared=False, variant="ru_net", share_net=True),
    "g": dict(mask_mode="learnable", mask_shared=False, variant="hru_net", share_net=True),
}


def baseline_label(baseline_id: str) -> str:
    b = BASELINES[baseline_id]
    mask = ("rm" if b["mask_mode"] == "random" else "lm") + ("-s" if b["mask_shared"] else "-i")
    net = b["variant"] + ("-s" if b["share_net"] else "-i")
    return f"{mask}/{net}"


@dataclass
class TrainConfig:
    """Everything one run needs, round-trippable through flat key=value text."""

    baseline_id: str = "g"
    alpha_total: float = 0.25
    ratio_mode: str = "fixed"        # fixed | learnable
    loss: str = "mse"                # mse | mse_ssim
    ssim_weight: float = 0.1
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    grad_clip: float | None = None   # global gradient-norm cap, None = off
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    height: int = 64
    width: int = 64
    n_contrasts: int = 5
    delta_t: float = 10.0
    depth: int = 4
    channels: tuple = (16, 32, 64, 128)
    n_blocks: int = 3
    preselect: int = 6
    slope: float = 5.0

    def __post_init__(self):
        if self.baseline_id not in BASELINES:
            raise ConfigurationError(
                f"baseline_id must be one of {sorted(BASELINES)}, got {self.baseline_id!r}"
            )
        if self.ratio_mode not in ("fixed", "learnable"):
            raise ConfigurationError(f"ratio_mode must be fixed|learnable, got {self.ratio_mode!r}")
        if self.loss not in ("mse", "mse_ssim"):
            raise ConfigurationError(f"loss must be mse|mse_ssim, got {self.loss!r}")
        if self.ratio_mode == "learnable" and self.mask_shared:
            raise ConfigurationError(
                "learnable per-contrast budgets need individual masks "
                f"(baseline {self.baseline_id!r} shares one mask)"
            )
        for name in ("epochs", "batch_size", "n_contrasts", "preselect"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if isinstance(self.channels, list):
            self.channels = tuple(self.channels)

    @property
    def mask_mode(self) -> str:
        return BASELINES[self.baseline_id]["mask_mode"]

    @property
    def mask_shared(self) -> bool:
        return BASELINES[self.baseline_id]["mask_shared"]

    @property
    def variant(self) -> str:
        return BASELINES[self.baseline_id]["variant"]

    @property
    def share_net(self) -> bool:
        return BASELINES[self.baseline_id]["share_net"]

    @property
    def label(self) -> str:
        return baseline_label(self.baseline_id)

    def recon_config(self) -> ReconModelConfig:
        return ReconModelConfig(
            depth=self.depth,
            channels=self.channels,
            n_blocks=self.n_blocks,
            variant=self.variant,
            share_across_contrasts=self.share_net,
            n_contrasts=None if self.share_net else self.n_contrasts,
        )


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    field_map = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in field_map:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        kwargs[key] = _parse_value(field_map[key], value, lineno)
    return TrainConfig(**kwargs)


def _parse_value(f, value: str, lineno: int):
    try:
        if f.type in ("int", int):
            return int(value)
        if f.type in ("float", float):
            return float(value)
        if f.type == "float | None":
            return None if value.lower() == "none" else float(value)
        if f.type in ("tuple", tuple):
            return tuple(int(x.strip()) for x in value.split(",") if x.strip())
        return value
    except ValueError as exc:
        raise ConfigurationError(f"line {lineno}: bad value for {f.name}: {value!r}") from exc


# ---------------------------------------------------------------------------
# mask bank

class MaskBank(nn.Module):
    """Per-contrast column masks for one run.

    ``random`` mode draws one binary realization at construction and never
    changes it; ``learnable`` mode holds one :class:`ProbabilisticMask` per
    contrast (or a single shared one) and re-samples every call.
    """

    def __init__(self, d: int, n_contrasts: int, alpha_total: float, mode: str,
                 shared: bool, preselect: int, slope: float = 5.0, seed: int = 0):
        super().__init__()
        if mode not in ("random", "learnable"):
            raise ConfigurationError(f"mask mode must be random|learnable, got {mode!r}")
        self.d = d
        self.n_contrasts = n_contrasts
        self.mode = mode
        self.shared = shared
        if mode == "random":
            if not shared:
                raise ConfigurationError("random masks are only supported in shared form")
            n_cols = round(alpha_total * d)
            if n_cols < preselect:
                raise ConfigurationError(
                    f"alpha={alpha_total} affords {n_cols} columns, fewer than "
                    f"the {preselect} preselected"
                )
            cols = torch.zeros(d)
            center = center_columns(d, preselect)
            cols[center] = 1.0
            rest = torch.tensor([i for i in range(d) if i not in set(center.tolist())])
            gen = torch.Generator().manual_seed(seed)
            pick = rest[torch.randperm(len(rest), generator=gen)[: n_cols - preselect]]
            cols[pick] = 1.0
            self.register_buffer("fixed_cols", cols)
        else:
            n = 1 if shared else n_contrasts
            self.masks = nn.ModuleList([
                ProbabilisticMask(d, alpha_total, preselect_count=preselect,
                                  seed=seed + 97 * i, slope=slope)
                for i in range(n)
            ])

    @property
    def trainable(self) -> bool:
        return self.mode == "learnable"

    def sample(self, height: int, generator: torch.Generator | None = None,
               alphas: torch.Tensor | None = None, u: list | None = None,
               hard: bool = True) -> torch.Tensor:
        """Stack of per-contrast (height, d) masks, shape (C, height, d)."""
        if self.mode == "random":
            m = replicate_mask(self.fixed_cols, height)
            return m.unsqueeze(0).expand(self.n_contrasts, height, self.d)
        if self.shared:
            u0 = u[0] if u is not None else self.masks[0].draw_u(generator)
            a0 = alphas[0] if alphas is not None else None
            m = self.masks[0].sample(u0, height, alpha=a0, hard=hard)
            return m.unsqueeze(0).expand(self.n_contrasts, height, self.d)
        rows = []
        for c, mask in enumerate(self.masks):
            uc = u[c] if u is not None else mask.draw_u(generator)
            ac = alphas[c] if alphas is not None else None
            rows.append(mask.sample(uc, height, alpha=ac, hard=hard))
        return torch.stack(rows, dim=0)

    @torch.no_grad()
    def project_(self, alphas: torch.Tensor | None = None) -> None:
        if self.mode == "random":
            return
        for c, mask in enumerate(self.masks):
            a = None
            if alphas is not None:
                a = float(alphas[0] if self.shared else alphas[c])
            mask.project_(a)

    def prob_columns(self) -> torch.Tensor:
        """Current effective per-column probabilities, shape (C, d), detached."""
        if self.mode == "random":
            return self.fixed_cols.unsqueeze(0).expand(self.n_contrasts, self.d).clone()
        with torch.no_grad():
            if self.shared:
                p = self.masks[0].p.clamp(0, 1)
                return p.unsqueeze(0).expand(self.n_contrasts, self.d).clone()
            return torch.stack([m.p.clamp(0, 1) for m in self.masks], dim=0)

    def mean_sparsities(self) -> list:
        return [float(row.mean()) for row in self.prob_columns()]


def build_training_parts(config: TrainConfig):
    """(model, mask_bank, budget) rebuilt deterministically from a config."""
    torch.manual_seed(config.seed)
    model = build_reconstructor(config.recon_config())
    bank = MaskBank(
        d=config.width, n_contrasts=config.n_contrasts, alpha_total=config.alpha_total,
        mode=config.mask_mode, shared=config.mask_shared, preselect=config.preselect,
        slope=config.slope, seed=config.seed,
    )
    budget = BudgetAllocation(
        C=config.n_contrasts, alpha_total=config.alpha_total,
        mode=("learnable" if config.ratio_mode == "learnable" else "fixed"),
        floor=config.preselect / config.width, cap=1.0,
    )
    return model, bank, budget


# ---------------------------------------------------------------------------
# data plumbing

def _prepare_images(samples, config: TrainConfig) -> torch.Tensor:
    if not samples:
        raise ValidationError("dataset is empty")
    stacks = []
    for i, s in enumerate(samples):
        if s.images.shape != (config.n_contrasts, config.height, config.width):
            raise ValidationError(
                f"sample {i} has shape {tuple(s.images.shape)}, config expects "
                f"({config.n_contrasts}, {config.height}, {config.width})"
            )
        stacks.append(normalize(s.images).to(torch.complex64))
    return torch.stack(stacks, dim=0)


def decay_scale(images: torch.Tensor) -> float:
    """Scalar bringing an image stack into the map fitter's amplitude range.

    The regressor is trained on unit-amplitude decays, so cross-contrast
    signal vectors must arrive with foreground values near one; mean-of-frame
    normalization leaves them several times larger when most of the frame is
    empty. Uses the mean first-contrast magnitude over its own support;
    all-zero stacks scale by 1.
    """
    m = torch.abs(images[0])
    support = m > 0.1 * float(m.max())
    if not bool(support.any()):
        return 1.0
    return float(m[support].mean())


def reconstruct_batch(model, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Forward pass from fully sampled images through masked acquisition.

    ``model=None`` returns the zero-filled images themselves.
    """
    y_full = fft2c(images)
    y_hat = y_full * masks
    x_zf = ifft2c(y_hat)
    if model is None:
        return x_zf
    return model(x_zf, y_hat, masks)


def _batch_ssim(ref: torch.Tensor, test: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over a (B, H, W) batch, kept differentiable."""
    vals = [ssim(ref[b], test[b], data_range=float(ref[b].max()))
            for b in range(ref.shape[0])]
    return torch.stack(vals).mean()


def reconstruction_loss(out: torch.Tensor, target: torch.Tensor,
                        mode: str = "mse", ssim_weight: float = 0.1) -> torch.Tensor:
    C = out.shape[1]
    terms = [torch.mean(torch.abs(out[:, c] - target[:, c]) ** 2) for c in range(C)]
    loss = torch.stack(terms).mean()
    if mode == "mse_ssim":
        ref = torch.abs(target)
        sim = [_batch_ssim(ref[:, c], torch.abs(out[:, c])) for c in range(C)]
        loss = loss + ssim_weight * (1.0 - torch.stack(sim).mean())
    return loss


@dataclass
class TrainResult:
    config: TrainConfig
    model: nn.Module
    mask_bank: MaskBank
    budget: BudgetAllocation
    report: MetricsReport
    history: list = field(default_factory=list)
    checkpoint_path: str | None = None


def _epoch_log_row(epoch, loss_sum, n_batches, psnr_sums, ssim_sums, budget, t0):
    C = len(psnr_sums)
    return {
        "epoch": epoch,
        "loss": round(loss_sum / n_batches, 8),
        "psnr": [round(psnr_sums[c] / n_batches, 4) for c in range(C)],
        "ssim": [round(ssim_sums[c] / n_batches, 6) for c in range(C)],
        "budget": budget.report(),
        "wall_time": round(time.monotonic() - t0, 3),
    }


def _append_jsonl(path, row) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(row) + "\n")


def _batch_metrics(out, target, psnr_sums, ssim_sums) -> None:
    with torch.no_grad():
        ref = torch.abs(target)
        got = torch.abs(out)
        for c in range(out.shape[1]):
            psnr_sums[c] += psnr(ref[:, c], got[:, c])
            ssim_sums[c] += float(_batch_ssim(ref[:, c], got[:, c]))


def train_reconstruction(config: TrainConfig, samples, out_dir=None,
                         eval_samples=None, eval_seed: int = 1234,
                         step_callback=None, config_text=None) -> TrainResult:
    """Optimize network weights and (if learnable) mask probabilities on
    image-domain loss, averaged over contrasts."""
    if config.ratio_mode != "fixed":
        raise ConfigurationError(
            "image-domain training uses fixed budgets; learnable budgets are "
            "driven by the map objective (train_map_driven)"
        )
    data = _prepare_images(samples, config)
    model, bank, budget = build_training_parts(config)
    params = list(model.parameters()) + list(bank.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2))
    ugen = torch.Generator().manual_seed(config.seed + 1)
    sgen = torch.Generator().manual_seed(config.seed + 2)

    history = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.jsonl"
        log_path.write_text("")
    t0 = time.monotonic()
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(data.shape[0], generator=sgen)
        loss_sum, n_batches = 0.0, 0
        psnr_sums = [0.0] * config.n_contrasts
        ssim_sums = [0.0] * config.n_contrasts
        for start in range(0, data.shape[0], config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            masks = bank.sample(config.height, generator=ugen)
            out = reconstruct_batch(model, batch, masks)
            loss = reconstruction_loss(out, batch, config.loss, config.ssim_weight)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            bank.project_()
            loss_sum += float(loss.detach())
            n_batches += 1
            _batch_metrics(out, batch, psnr_sums, ssim_sums)
            step += 1
            if step_callback is not None:
                step_callback(step, bank, budget)
        row = _epoch_log_row(epoch, loss_sum, n_batches, psnr_sums, ssim_sums, budget, t0)
        history.append(row)
        if log_path is not None:
            _append_jsonl(log_path, row)

    report = evaluate(model, bank, budget,
                      eval_samples if eval_samples is not None else samples,
                      config, seed=eval_seed)
    ckpt = None
    if out_dir is not None:
        ckpt = str(out_dir / "checkpoint.npz")
        save_checkpoint(ckpt, config, model, bank, budget, config_text=config_text)
        _atomic_write_text(out_dir / "report.json", report.to_json())
        _atomic_write_text(out_dir / "report.csv", report.to_csv())
    return TrainResult(config, model, bank, budget, report, history, ckpt)


def train_map_driven(config: TrainConfig, samples, fitter: T2StarRegressor,
                     out_dir=None, eval_samples=None, eval_seed: int = 1234,
                     step_callback=None, config_text=None) -> TrainResult:
    """Optimize masks, budgets, and network weights against the downstream
    map loss only, through a frozen per-pixel fitter.

    Target maps come from the fitter applied to the fully sampled images, so
    the objective measures what undersampling destroys rather than any bias
    of the fitter itself.

    The fitter's steep response off its training manifold occasionally
    produces gradient kicks orders of magnitude above a run's typical norm;
    set ``config.grad_clip`` to a small multiple of the typical gradient
    norm (0.05 suits the default architecture) so kicks are neutralized
    while ordinary steps pass untouched.
    """
    if not isinstance(fitter, T2StarRegressor):
        raise ConfigurationError("map-driven training needs a T2StarRegressor fitter")
    if not bool(fitter.trained):
        raise StateError("fitter must be trained before map-driven training")
    if not fitter.is_frozen:
        raise StateError("fitter must be frozen before map-driven training")
    if fitter.C != config.n_contrasts:
        raise ValidationError(
            f"fitter expects {fitter.C} contrasts, config has {config.n_contrasts}"
        )
    if config.mask_mode != "learnable":
        raise ConfigurationError("map-driven training needs learnable masks")

    data = _prepare_images(samples, config)
    scales = [decay_scale(data[i]) for i in range(data.shape[0])]
    with torch.no_grad():
        targets = torch.stack([
            synthesize_map(data[i] / scales[i], fitter)
            for i in range(data.shape[0])
        ]) / T2_MAX_MS
    model, bank, budget = build_training_parts(config)
    params = (list(model.parameters()) + list(bank.parameters())
              + list(budget.parameters()))
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2))
    ugen = torch.Generator().manual_seed(config.seed + 1)
    sgen = torch.Generator().manual_seed(config.seed + 2)

    history = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "log.jsonl"
        log_path.write_text("")
    t0 = time.monotonic()
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(data.shape[0], generator=sgen)
        loss_sum, n_batches = 0.0, 0
        psnr_sums = [0.0] * config.n_contrasts
        ssim_sums = [0.0] * config.n_contrasts
        for start in range(0, data.shape[0], config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = data[idx]
            alphas = budget.alphas()
            masks = bank.sample(config.height, generator=ugen, alphas=alphas)
            out = reconstruct_batch(model, batch, masks)
            maps = torch.stack([
                synthesize_map(out[b] / scales[int(idx[b])], fitter,
                               differentiable=True)
                for b in range(out.shape[0])
            ]) / T2_MAX_MS
            loss = torch.mean((maps - targets[idx]) ** 2)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            # budgets moved with the step; re-project masks onto the new ones
            bank.project_(budget.alphas().detach())
            loss_sum += float(loss.detach())
            n_batches += 1
            _batch_metrics(out, batch, psnr_sums, ssim_sums)
            step += 1
            if step_callback is not None:
                step_callback(step, bank, budget)
        row = _epoch_log_row(epoch, loss_sum, n_batches, psnr_sums, ssim_sums, budget, t0)
        history.append(row)
        if log_path is not None:
            _append_jsonl(log_path, row)

    report = evaluate(model, bank, budget,
                      eval_samples if eval_samples is not None else samples,
                      config, seed=eval_seed, fitter=fitter)
    ckpt = None
    if out_dir is not None:
        ckpt = str(out_dir / "checkpoint.npz")
        save_checkpoint(ckpt, config, model, bank, budget, config_text=config_text)
        _atomic_write_text(out_dir / "report.json", report.to_json())
        _atomic_write_text(out_dir / "report.csv", report.to_csv())
    return TrainResult(config, model, bank, budget, report, history, ckpt)


def map_pipeline_loss(model, mask_bank, budget, samples, config: TrainConfig,
                      fitter, seed: int = 1234) -> float:
    """Mean squared map error of a pipeline under a fixed mask realization.

    ``fitter="loglinear"`` measures the analytic-fit arm; a regressor
    measures the learned arm. Targets always come from the fully sampled
    images through the same fitter.
    """
    data = _prepare_images(samples, config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        alphas = budget.alphas().detach() if budget is not None else None
        masks = mask_bank.sample(config.height, generator=gen, alphas=alphas)
        out = reconstruct_batch(model, data, masks)
        total, n = 0.0, 0
        for b in range(data.shape[0]):
            scale = decay_scale(data[b])
            pred = synthesize_map(out[b] / scale, fitter, delta_t=config.delta_t)
            ref = synthesize_map(data[b] / scale, fitter, delta_t=config.delta_t)
            total += float(torch.mean((pred / T2_MAX_MS - ref / T2_MAX_MS) ** 2))
            n += 1
    return total / n


# ---------------------------------------------------------------------------
# evaluation

def evaluate(model, mask_bank: MaskBank, budget: BudgetAllocation, samples,
             config: TrainConfig, seed: int = 1234,
             fitter=None) -> MetricsReport:
    """Metrics over a sample set under one fixed-seed mask realization.

    ``model=None`` evaluates the zero-filled pipeline. Passing a fitter
    (regressor or ``"loglinear"``) adds map metrics with and without the
    background, against maps fitted from the fully sampled images.
    """
    data = _prepare_images(samples, config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        alphas = budget.alphas().detach() if budget is not None else None
        masks = mask_bank.sample(config.height, generator=gen, alphas=alphas)
        out = reconstruct_batch(model, data, masks)

        C = config.n_contrasts
        psnr_sums = [0.0] * C
        ssim_sums = [0.0] * C
        map_stats = {"psnr_bg": 0.0, "ssim_bg": 0.0, "psnr_nbg": 0.0, "ssim_nbg": 0.0}
        for b in range(data.shape[0]):
            ref = torch.abs(data[b])
            got = torch.abs(out[b])
            for c in range(C):
                psnr_sums[c] += psnr(ref[c], got[c])
                ssim_sums[c] += float(ssim(ref[c], got[c], data_range=float(ref[c].max())))
            if fitter is not None:
                scale = decay_scale(data[b])
                pred = synthesize_map(out[b] / scale, fitter, delta_t=config.delta_t)
                mref = synthesize_map(data[b] / scale, fitter, delta_t=config.delta_t)
                fg = foreground_mask(data[b])
                map_stats["psnr_bg"] += psnr(mref, pred, data_range=T2_MAX_MS)
                map_stats["ssim_bg"] += float(ssim(mref, pred, data_range=T2_MAX_MS))
                map_stats["psnr_nbg"] += psnr(mref, pred, data_range=T2_MAX_MS, mask=fg)
                map_stats["ssim_nbg"] += float(ssim(mref, pred, data_range=T2_MAX_MS, mask=fg))

    n = data.shape[0]
    per_psnr = [round(v / n, 4) for v in psnr_sums]
    per_ssim = [round(v / n, 6) for v in ssim_sums]
    alphas_list = [float(a) for a in (alphas if alphas is not None
                                      else torch.full((C,), config.alpha_total))]
    report = MetricsReport(
        per_contrast_psnr=per_psnr,
        per_contrast_ssim=per_ssim,
        mean_psnr=round(sum(per_psnr) / C, 4),
        mean_ssim=round(sum(per_ssim) / C, 6),
        alphas=[round(a, 6) for a in alphas_list],
        ratios=[round(1.0 / a, 4) for a in alphas_list],
        mask_histograms=[mask_histogram(masks[c]).tolist() for c in range(C)],
    )
    if fitter is not None:
        report.map_psnr_bg = round(map_stats["psnr_bg"] / n, 4)
        report.map_ssim_bg = round(map_stats["ssim_bg"] / n, 6)
        report.map_psnr_nbg = round(map_stats["psnr_nbg"] / n, 4)
        report.map_ssim_nbg = round(map_stats["ssim_nbg"] / n, 6)
    return report


def run_ablation_nblocks(config: TrainConfig, samples, n_blocks_list,
                         seeds=(0,), eval_samples=None) -> list:
    """Train one model per cascade length, shared data and seeds; one row
    of mean PSNR/SSIM per entry."""
    if not n_blocks_list:
        raise ValidationError("n_blocks_list is empty")
    rows = []
    for n in n_blocks_list:
        per_seed = []
        for s in seeds:
            cfg = dataclasses.replace(config, n_blocks=int(n), seed=int(s))
            result = train_reconstruction(cfg, samples, eval_samples=eval_samples)
            per_seed.append({"seed": int(s),
                             "mean_psnr": result.report.mean_psnr,
                             "mean_ssim": result.report.mean_ssim})
        rows.append({
            "n_blocks": int(n),
            "mean_psnr": round(sum(r["mean_psnr"] for r in per_seed) / len(per_seed), 4),
            "mean_ssim": round(sum(r["mean_ssim"] for r in per_seed) / len(per_seed), 6),
            "per_seed": per_seed,
        })
    return rows


# ---------------------------------------------------------------------------
# checkpoint and misc IO

def _atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


def _atomic_savez(path, **arrays) -> None:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(path, buf.getvalue())


def _state_arrays(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}.{k}": v.detach().numpy() for k, v in module.state_dict().items()}


def _load_state(module: nn.Module, data, prefix: str) -> None:
    state = {}
    head = prefix + "."
    for key in data.files:
        if key.startswith(head):
            state[key[len(head):]] = torch.from_numpy(data[key])
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint does not match the {prefix} module: {exc}") from exc


def save_checkpoint(path, config: TrainConfig, model, mask_bank, budget,
                    config_text: str | None = None) -> None:
    text = config_text if config_text is not None else config_to_text(config)
    arrays = {"config_text": np.array(text)}
    arrays.update(_state_arrays("model", model))
    arrays.update(_state_arrays("masks", mask_bank))
    arrays.update(_state_arrays("budget", budget))
    _atomic_savez(path, **arrays)


def load_checkpoint(path):
    """(config, model, mask_bank, budget) rebuilt from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    data = np.load(path, allow_pickle=False)
    if "config_text" not in data.files:
        raise ConfigurationError(f"{path} is not a training checkpoint")
    config = config_from_text(str(data["config_text"]))
    model, bank, budget = build_training_parts(config)
    _load_state(model, data, "model")
    _load_state(bank, data, "masks")
    _load_state(budget, data, "budget")
    model.eval()
    return config, model, bank, budget


def evaluate_checkpoint(path, samples, seed: int = 1234, fitter=None) -> MetricsReport:
    config, model, bank, budget = load_checkpoint(path)
    return evaluate(model, bank, budget, samples, config, seed=seed, fitter=fitter)


def save_regressor(path, regressor: T2StarRegressor) -> None:
    if not bool(regressor.trained):
        raise StateError("refusing to save an untrained regressor")
    meta = np.array(json.dumps({"C": regressor.C, "delta_t": regressor.delta_t}))
    arrays = {"meta": meta}
    arrays.update(_state_arrays("regressor", regressor))
    _atomic_savez(path, **arrays)


def load_regressor(path) -> T2StarRegressor:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"regressor file not found: {path}")
    data = np.load(path, allow_pickle=False)
    if "meta" not in data.files:
        raise ConfigurationError(f"{path} is not a regressor file")
    meta = json.loads(str(data["meta"]))
    reg = T2StarRegressor(C=int(meta["C"]), delta_t=float(meta["delta_t"]))
    _load_state(reg, data, "regressor")
    reg.freeze()
    return reg
