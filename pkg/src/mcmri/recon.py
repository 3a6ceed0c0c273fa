"""Reconstruction networks.

Complex images travel through the networks as 2 real channels. Every
variant ends each processing block with a data-consistency projection,
so final outputs always reproduce the acquired k-space samples.

Variants:
  unet      independent per-contrast U-Nets (optionally weight-shared)
  gru_unet  previous contrast's reconstruction re-enters as a hidden image
  ru_net    cascade of blocks exchanging features at the bottleneck only
  hru_net   cascade of blocks exchanging features at every decoder level,
            across blocks within a contrast and across contrasts
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError
from .kspace import data_consistency

VARIANTS = ("unet", "gru_unet", "ru_net", "hru_net")


@dataclass(frozen=True)
class ReconModelConfig:
    depth: int = 4
    channels: tuple = (64, 128, 256, 512)
    n_blocks: int = 3
    variant: str = "hru_net"
    share_across_contrasts: bool = True
    n_contrasts: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if len(self.channels) != self.depth:
            raise ConfigurationError(
                f"need one channel count per level: depth={self.depth}, "
                f"channels={self.channels}"
            )
        if self.n_blocks < 1:
            raise ConfigurationError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if not self.share_across_contrasts and self.n_contrasts is None:
            raise ConfigurationError("per-contrast weights need n_contrasts")


def complex_to_channels(x: torch.Tensor) -> torch.Tensor:
    """(..., H, W) complex -> (..., 2, H, W) real."""
    return torch.stack([x.real, x.imag], dim=-3)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    """(..., 2, H, W) real -> (..., H, W) complex."""
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.LeakyReLU(0.2, inplace=True),
    )


class _Backbone(nn.Module):
    """U-Net trunk with an optional hidden-feature interface.

    hidden_mode 'none': plain U-Net. 'bottleneck': one hidden map joins at
    the coarsest level. 'decoder': one hidden map joins at every decoder
    level. The 3x3 convolution applied to each incoming hidden map keeps
    its channel count.
    """

    def __init__(self, config: ReconModelConfig, in_ch: int = 2, hidden_mode: str = "none"):
        super().__init__()
        if hidden_mode not in ("none", "bottleneck", "decoder"):
            raise ConfigurationError(f"bad hidden_mode {hidden_mode!r}")
        ch = config.channels
        depth = config.depth
        self.depth = depth
        self.channels = ch
        self.hidden_mode = hidden_mode

        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = in_ch
        for i in range(depth):
            self.enc.append(_conv_block(prev, ch[i]))
            nxt = ch[min(i + 1, depth - 1)]
            self.down.append(nn.Sequential(
                nn.Conv2d(ch[i], nxt, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            ))
            prev = nxt

        bott_in = ch[-1] * 2 if hidden_mode == "bottleneck" else ch[-1]
        self.bottleneck = _conv_block(bott_in, ch[-1])
        if hidden_mode == "bottleneck":
            self.hidden_conv = nn.ModuleList([nn.Conv2d(ch[-1], ch[-1], 3, padding=1)])
        elif hidden_mode == "decoder":
            self.hidden_conv = nn.ModuleList(
                [nn.Conv2d(ch[n], ch[n], 3, padding=1) for n in range(depth)]
            )

        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for n in range(depth - 1, -1, -1):
            src = ch[-1] if n == depth - 1 else ch[n + 1]
            self.up.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(src, ch[n], 3, padding=1), nn.LeakyReLU(0.2, inplace=True),
            ))
            cat = 3 * ch[n] if hidden_mode == "decoder" else 2 * ch[n]
            self.dec.append(_conv_block(cat, ch[n]))
        self.out_conv = nn.Conv2d(ch[0], 2, 1)

    def hidden_shapes(self, batch: int, h: int, w: int) -> list[tuple]:
        if self.hidden_mode == "bottleneck":
            s = 2 ** self.depth
            return [(batch, self.channels[-1], h // s, w // s)]
        if self.hidden_mode == "decoder":
            return [
                (batch, self.channels[n], h // 2 ** n, w // 2 ** n)
                for n in range(self.depth)
            ]
        return []

    def _check_hidden(self, hidden, batch, h, w):
        shapes = self.hidden_shapes(batch, h, w)
        if hidden is None:
            return [torch.zeros(s) for s in shapes]
        if len(hidden) != len(shapes):
            raise ValidationError(f"expected {len(shapes)} hidden maps, got {len(hidden)}")
        for got, want in zip(hidden, shapes):
            if tuple(got.shape) != want:
                raise ValidationError(f"hidden shape {tuple(got.shape)} != expected {want}")
        return list(hidden)

    def forward(self, x: torch.Tensor, hidden: list | None = None):
        if x.ndim != 4 or x.shape[1] not in (2, 4):
            raise ValidationError(f"expected (B, 2|4, H, W) input, got {tuple(x.shape)}")
        b, _, h, w = x.shape
        scale = 2 ** self.depth
        if h % scale or w % scale:
            raise ValidationError(f"H, W must be divisible by {scale}, got {h}x{w}")
        hidden = self._check_hidden(hidden, b, h, w)
        hidden = [hm.to(x.dtype) for hm in hidden]

        skips = []
        feat = x
        for i in range(self.depth):
            feat = self.enc[i](feat)
            skips.append(feat)
            feat = self.down[i](feat)

        if self.hidden_mode == "bottleneck":
            feat = self.bottleneck(torch.cat([feat, self.hidden_conv[0](hidden[0])], dim=1))
            new_hidden = [feat]
        else:
            feat = self.bottleneck(feat)
            new_hidden = []

        for k, n in enumerate(range(self.depth - 1, -1, -1)):
            feat = self.up[k](feat)
            parts = [feat, skips[n]]
            if self.hidden_mode == "decoder":
                parts.append(self.hidden_conv[n](hidden[n]))
            feat = self.dec[k](torch.cat(parts, dim=1))
            if self.hidden_mode == "decoder":
                new_hidden.insert(0, feat)
        return self.out_conv(feat), new_hidden


class UNet(nn.Module):
    """Plain residual U-Net on 2-channel images (no data consistency)."""

    def __init__(self, config: ReconModelConfig, in_ch: int = 2):
        super().__init__()
        self.backbone = _Backbone(config, in_ch=in_ch, hidden_mode="none")
        self.in_ch = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.backbone(x)
        return x[:, :2] + out


class HRUNetBlock(nn.Module):
    """One reconstruction block: hidden-aware U-Net, residual, then DC.

    ``hidden_mode`` 'decoder' gives the full per-level exchange;
    'bottleneck' restricts it to the coarsest features.
    """

    def __init__(self, config: ReconModelConfig, hidden_mode: str = "decoder"):
        super().__init__()
        self.backbone = _Backbone(config, in_ch=2, hidden_mode=hidden_mode)

    def forward(self, x: torch.Tensor, hidden: list | None,
                y_hat: torch.Tensor, mask: torch.Tensor):
        out, new_hidden = self.backbone(x, hidden)
        x_res = x + out
        x_dc = data_consistency(mask, channels_to_complex(x_res), y_hat)
        return complex_to_channels(x_dc), new_hidden


class RecurrentCell(nn.Module):
    """Cascade of n_blocks blocks; the hidden bundle threads through them
    and the final block's bundle is handed to the next contrast."""

    def __init__(self, config: ReconModelConfig, hidden_mode: str = "decoder"):
        super().__init__()
        self.blocks = nn.ModuleList(
            [HRUNetBlock(config, hidden_mode) for _ in range(config.n_blocks)]
        )

    def forward(self, x: torch.Tensor, hidden: list | None,
                y_hat: torch.Tensor, mask: torch.Tensor):
        for block in self.blocks:
            x, hidden = block(x, hidden, y_hat, mask)
        return x, hidden


def _check_stack(x_zf, y_hat, masks):
    if x_zf.ndim != 4:
        raise ValidationError(f"expected (B, C, H, W) images, got {tuple(x_zf.shape)}")
    if y_hat.shape != x_zf.shape:
        raise ValidationError("y_hat shape does not match images")
    if masks.ndim not in (3, 4) or masks.shape[-3] != x_zf.shape[1]:
        raise ValidationError(
            f"masks must be (C, H, W) or (B, C, H, W) matching C={x_zf.shape[1]}"
        )


def _mask_for(masks: torch.Tensor, c: int) -> torch.Tensor:
    return masks[c] if masks.ndim == 3 else masks[:, c]


class IndependentReconstructor(nn.Module):
    """Per-contrast U-Net + DC with no cross-contrast state (variant 'unet')."""

    def __init__(self, config: ReconModelConfig):
        super().__init__()
        self.share = config.share_across_contrasts
        n_nets = 1 if self.share else config.n_contrasts
        self.nets = nn.ModuleList([UNet(config) for _ in range(n_nets)])

    def forward(self, x_zf: torch.Tensor, y_hat: torch.Tensor, masks: torch.Tensor):
        _check_stack(x_zf, y_hat, masks)
        outs = []
        for c in range(x_zf.shape[1]):
            net = self.nets[0 if self.share else c]
            x = net(complex_to_channels(x_zf[:, c]))
            outs.append(data_consistency(_mask_for(masks, c), channels_to_complex(x), y_hat[:, c]))
        return torch.stack(outs, dim=1)


class GRUUNetReconstructor(nn.Module):
    """The previous contrast's reconstruction, passed through a
    convolution, joins the current zero-filled input (variant 'gru_unet')."""

    def __init__(self, config: ReconModelConfig):
        super().__init__()
        self.hidden_conv = nn.Conv2d(2, 2, 3, padding=1)
        self.net = UNet(config, in_ch=4)

    def forward(self, x_zf: torch.Tensor, y_hat: torch.Tensor, masks: torch.Tensor):
        _check_stack(x_zf, y_hat, masks)
        b, C, h, w = x_zf.shape
        real_dtype = torch.view_as_real(x_zf).dtype if x_zf.is_complex() else x_zf.dtype
        hidden = torch.zeros(b, 2, h, w, dtype=real_dtype)
        outs = []
        for c in range(C):
            zf = complex_to_channels(x_zf[:, c])
            x = self.net(torch.cat([zf, self.hidden_conv(hidden.to(zf.dtype))], dim=1))
            x_dc = data_consistency(_mask_for(masks, c), channels_to_complex(x), y_hat[:, c])
            outs.append(x_dc)
            hidden = complex_to_channels(x_dc)
        return torch.stack(outs, dim=1)


class CellReconstructor(nn.Module):
    """Shared recurrent cell over contrasts (variants 'ru_net', 'hru_net')."""

    def __init__(self, config: ReconModelConfig):
        super().__init__()
        hidden_mode = "decoder" if config.variant == "hru_net" else "bottleneck"
        self.cell = RecurrentCell(config, hidden_mode)

    def forward(self, x_zf: torch.Tensor, y_hat: torch.Tensor, masks: torch.Tensor):
        _check_stack(x_zf, y_hat, masks)
        hidden = None
        outs = []
        for c in range(x_zf.shape[1]):
            x, hidden = self.cell(
                complex_to_channels(x_zf[:, c]), hidden, y_hat[:, c], _mask_for(masks, c)
            )
            outs.append(channels_to_complex(x))
        return torch.stack(outs, dim=1)


def build_reconstructor(config: ReconModelConfig) -> nn.Module:
    if config.variant == "unet":
        return IndependentReconstructor(config)
    if config.variant == "gru_unet":
        return GRUUNetReconstructor(config)
    return CellReconstructor(config)
