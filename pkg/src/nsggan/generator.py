"""Noisy-semantic guided generator.

Encoder -> semantic-guided resblocks (latent map injection) -> decoder with
noise -> feature refinement (channel mixer + spatial attention fusion).
A projection branch turns the noisy semantic layout plus the target age maps
into one soft latent map ``m`` shared by every injection site; a constraint
branch disentangles features of the decoded face to supervise ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datapipe import (DEFAULT_DROP_CLASSES, N_CLASSES, N_GROUPS, AgeCondition,
                       SemanticLayout, check_image, keep_mask)

CONSTRAINT_MODES = ("disentangle_age", "disentangle_identity", "simple_mapping")
NEG_SLOPE = 0.2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    n_resblocks: int = 6
    injection_channels: int = 128
    drop_classes: tuple = DEFAULT_DROP_CLASSES
    projection_enabled: bool = True
    # False routes the age maps into the encoder input instead of the projection branch
    projection_condition: bool = True
    projection_noise_enabled: bool = True
    decoder_noise_enabled: bool = True
    constraint_enabled: bool = True
    constraint_mode: str = "disentangle_age"
    frm_enabled: bool = True

    def __post_init__(self):
        if self.n_resblocks < 1:
            raise ConfigError("n_resblocks must be >= 1")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigError("base_channels must be a positive multiple of 4")
        if self.injection_channels < 2 or self.injection_channels % 2:
            raise ConfigError("injection_channels must be an even number >= 2")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ConfigError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        if any(not 0 <= c < N_CLASSES for c in self.drop_classes):
            raise ConfigError("drop_classes must be class ids in 0..11")
        if self.constraint_enabled and not self.projection_enabled:
            raise ConfigError("the constraint branch needs the projection branch")
        object.__setattr__(self, "drop_classes", tuple(sorted(set(int(c) for c in self.drop_classes))))

    @property
    def condition_in_encoder(self) -> bool:
        return not (self.projection_enabled and self.projection_condition)

    @classmethod
    def from_mapping(cls, values: dict) -> "GeneratorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


def condition_maps(groups: torch.Tensor, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """[B] group ids -> [B, 4, H, W] spatially constant one-hot maps."""
    onehot = F.one_hot(groups.long(), N_GROUPS).to(dtype)
    return onehot[:, :, None, None].expand(-1, -1, h, w)


def _act():
    return nn.LeakyReLU(NEG_SLOPE)


class ProjectionNet(nn.Module):
    """Four conv stages mapping conditional noisy semantics to ``m`` at 1/4 resolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        mid = out_channels // 2
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, 1, 1), _act(),
            nn.Conv2d(mid, out_channels, 4, 2, 1), _act(),
            nn.Conv2d(out_channels, out_channels, 4, 2, 1), _act(),
        )
        self.final = nn.Conv2d(out_channels, out_channels, 3, 1, 1)

    def forward(self, conditional_semantic: torch.Tensor) -> torch.Tensor:
        return self.final(self.body(conditional_semantic))


class LatentInjection(nn.Module):
    """r_out = r_in * scale(m) + shift(m), each branch two cascaded convs.

    Both final convs start at zero weight, with scale bias 1 and shift bias 0,
    so a freshly built layer is an exact identity on ``r_in``.
    """

    def __init__(self, channels: int, latent_channels: int):
        super().__init__()
        self.scale = nn.Sequential(nn.Conv2d(latent_channels, latent_channels, 3, 1, 1), _act(),
                                   nn.Conv2d(latent_channels, channels, 3, 1, 1))
        self.shift = nn.Sequential(nn.Conv2d(latent_channels, latent_channels, 3, 1, 1), _act(),
                                   nn.Conv2d(latent_channels, channels, 3, 1, 1))
        self.reset_identity()

    def reset_identity(self):
        for branch, bias in ((self.scale, 1.0), (self.shift, 0.0)):
            nn.init.zeros_(branch[-1].weight)
            nn.init.constant_(branch[-1].bias, bias)

    def forward(self, r_in: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        if r_in.shape[-2:] != m.shape[-2:]:
            raise ValueError(f"latent map {tuple(m.shape[-2:])} does not match features {tuple(r_in.shape[-2:])}")
        return r_in * self.scale(m) + self.shift(m)


class SemanticResBlock(nn.Module):
    def __init__(self, channels: int, latent_channels: int):
        super().__init__()
        self.norm1 = nn.InstanceNorm2d(channels)
        self.inject1 = LatentInjection(channels, latent_channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect")
        self.norm2 = nn.InstanceNorm2d(channels)
        self.inject2 = LatentInjection(channels, latent_channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect")
        self.act = _act()

    def forward(self, r: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.inject1(self.norm1(r), m)))
        h = self.conv2(self.act(self.inject2(self.norm2(h), m)))
        return r + h


class PlainResBlock(nn.Module):
    """Resblock without injection, used when the projection branch is ablated."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.InstanceNorm2d(channels, affine=True), _act(),
            nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True), _act(),
            nn.Conv2d(channels, channels, 3, 1, 1, padding_mode="reflect"),
        )

    def forward(self, r: torch.Tensor, m=None) -> torch.Tensor:
        return r + self.body(r)


def channel_mixer(features: torch.Tensor) -> torch.Tensor:
    """Channel self-attention with identity skip.

    ``features`` is [B, C, H, W] (a [C, H, W] tensor is also accepted).
    Scores s_ij = F_i . F_j are normalised over i for every column j; the
    output channel j is sum_i a_ij F_i, plus F_j.
    """
    squeeze = features.dim() == 3
    if squeeze:
        features = features[None]
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    scores = flat @ flat.transpose(1, 2)
    attention = torch.softmax(scores, dim=1)  # max-subtracted internally
    out = (attention.transpose(1, 2) @ flat).reshape(b, c, h, w) + features
    return out[0] if squeeze else out


def channel_attention(features: torch.Tensor) -> torch.Tensor:
    """The [B, C, C] attention matrix used by :func:`channel_mixer`."""
    flat = features.reshape(features.shape[0], features.shape[1], -1)
    return torch.softmax(flat @ flat.transpose(1, 2), dim=1)


class SpatialAttentionFusion(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.mask = nn.Sequential(nn.Conv2d(6, hidden, 3, 1, 1), _act(), nn.Conv2d(hidden, 1, 3, 1, 1))

    def forward(self, generated: torch.Tensor, source: torch.Tensor, mask: torch.Tensor | None = None):
        if generated.shape != source.shape:
            raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(source.shape)}")
        if mask is None:
            mask = torch.sigmoid(self.mask(torch.cat([generated, source], dim=1)))
        fused = mask * generated + (1 - mask) * source
        return fused.clamp(-1.0, 1.0), mask


class DisentangledFeatures(NamedTuple):
    F: torch.Tensor
    M: torch.Tensor | None
    F_re: torch.Tensor
    F_un: torch.Tensor


class ConstraintNet(nn.Module):
    def __init__(self, base_channels: int, latent_channels: int, mode: str = "disentangle_age"):
        super().__init__()
        self.mode = mode
        self.trunk = nn.Sequential(
            nn.Conv2d(3, base_channels, 3, 1, 1), _act(),
            nn.Conv2d(base_channels, 2 * base_channels, 4, 2, 1), _act(),
            nn.Conv2d(2 * base_channels, latent_channels, 4, 2, 1), _act(),
        )
        self.features = nn.Conv2d(latent_channels, latent_channels, 3, 1, 1)
        self.attention = None if mode == "simple_mapping" else nn.Conv2d(latent_channels, 1, 3, 1, 1)

    def forward(self, face: torch.Tensor) -> DisentangledFeatures:
        h = self.trunk(face)
        feats = self.features(h)
        if self.attention is None:
            return DisentangledFeatures(feats, None, feats, torch.zeros_like(feats))
        mask = torch.sigmoid(self.attention(h))
        return DisentangledFeatures(feats, mask, feats * mask, feats * (1 - mask))


class AgeRegressor(nn.Module):
    """Conv layer, global average pool, linear -> one scalar per sample."""

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, hidden, 3, 1, 1)
        self.act = _act()
        self.fc = nn.Linear(hidden, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(self.act(self.conv(features)).mean(dim=(2, 3)))[:, 0]


class NoiseInjection(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return x + self.weight * noise


class GeneratorOutput(NamedTuple):
    image: torch.Tensor
    m: torch.Tensor | None
    decoded: torch.Tensor


class GeneratorNoise(NamedTuple):
    semantic: torch.Tensor
    decoder_half: torch.Tensor
    decoder_full: torch.Tensor

    @classmethod
    def sample(cls, batch: int, h: int, w: int, seed: int, dtype=torch.float32) -> "GeneratorNoise":
        # all three maps are always drawn so ablations see the same stream
        gen = torch.Generator().manual_seed(int(seed))
        return cls(torch.randn((batch, 1, h, w), generator=gen, dtype=dtype),
                   torch.randn((batch, 1, h // 2, w // 2), generator=gen, dtype=dtype),
                   torch.randn((batch, 1, h, w), generator=gen, dtype=dtype))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        b, cm = config.base_channels, config.injection_channels
        enc_in = 3 + (N_GROUPS if config.condition_in_encoder else 0)
        self.encoder = nn.Sequential(
            nn.Conv2d(enc_in, b, 7, 1, 3, padding_mode="reflect"), nn.InstanceNorm2d(b, affine=True), _act(),
            nn.Conv2d(b, 2 * b, 3, 2, 1), nn.InstanceNorm2d(2 * b, affine=True), _act(),
            nn.Conv2d(2 * b, 4 * b, 3, 2, 1), nn.InstanceNorm2d(4 * b, affine=True), _act(),
        )
        if config.projection_enabled:
            proj_in = N_CLASSES + (0 if config.condition_in_encoder else N_GROUPS)
            self.projection = ProjectionNet(proj_in, cm)
            self.resblocks = nn.ModuleList(SemanticResBlock(4 * b, cm) for _ in range(config.n_resblocks))
            self.register_buffer("keep", torch.from_numpy(keep_mask(config.drop_classes)).view(1, -1, 1, 1))
        else:
            self.projection = None
            self.resblocks = nn.ModuleList(PlainResBlock(4 * b) for _ in range(config.n_resblocks))
        self.up1 = nn.Sequential(nn.ConvTranspose2d(4 * b, 2 * b, 3, 2, 1, output_padding=1),
                                 nn.InstanceNorm2d(2 * b, affine=True), _act())
        self.noise1 = NoiseInjection(2 * b)
        self.up2 = nn.Sequential(nn.ConvTranspose2d(2 * b, b, 3, 2, 1, output_padding=1),
                                 nn.InstanceNorm2d(b, affine=True), _act())
        self.noise2 = NoiseInjection(b)
        self.to_image = nn.Conv2d(b, 3, 7, 1, 3, padding_mode="reflect")
        self.fusion = SpatialAttentionFusion(b) if config.frm_enabled else None
        if config.constraint_enabled:
            self.constraint = ConstraintNet(b, cm, config.constraint_mode)
            # regressor on disentangled features, trained alongside the generator
            self.feature_age = AgeRegressor(cm, cm)
        else:
            self.constraint = None
            self.feature_age = None

    def conditional_semantic(self, seg: torch.Tensor, cond: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        noisy = seg * self.keep.to(seg.dtype)
        if self.config.projection_noise_enabled:
            noisy = noisy * noise
        if self.config.condition_in_encoder:
            return noisy
        return torch.cat([noisy, cond], dim=1)

    def project(self, seg: torch.Tensor, cond: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        if self.projection is None:
            raise ConfigError("projection branch is disabled in this configuration")
        if seg.shape[-2:] != cond.shape[-2:]:
            raise ValueError("semantic layout and condition maps must share H, W")
        return self.projection(self.conditional_semantic(seg, cond, noise))

    def fuse(self, generated: torch.Tensor, source: torch.Tensor, mask=None):
        if self.fusion is None:
            raise ConfigError("spatial attention fusion requested but frm_enabled is False")
        return self.fusion(generated, source, mask)

    def constrain(self, face: torch.Tensor) -> DisentangledFeatures:
        if self.constraint is None:
            raise ConfigError("constraint branch is disabled in this configuration")
        return self.constraint(face)

    def forward(self, x: torch.Tensor, seg: torch.Tensor, target: torch.Tensor,
                noise: GeneratorNoise | int = 0) -> GeneratorOutput:
        """Translate ``x`` [B,3,H,W] with one-hot layout ``seg`` [B,12,H,W] to group ids ``target`` [B]."""
        bsz, _, h, w = x.shape
        if seg.shape != (bsz, N_CLASSES, h, w):
            raise ValueError(f"layout shape {tuple(seg.shape)} does not match image {tuple(x.shape)}")
        if not isinstance(noise, GeneratorNoise):
            noise = GeneratorNoise.sample(bsz, h, w, noise, x.dtype)
        cond = condition_maps(target, h, w, x.dtype)
        enc_in = torch.cat([x, cond], dim=1) if self.config.condition_in_encoder else x
        r = self.encoder(enc_in)
        m = self.project(seg, cond, noise.semantic) if self.projection is not None else None
        for block in self.resblocks:
            r = block(r, m)
        d = self.up1(r)
        if self.config.decoder_noise_enabled:
            d = self.noise1(d, noise.decoder_half)
        d = self.up2(d)
        if self.config.decoder_noise_enabled:
            d = self.noise2(d, noise.decoder_full)
        if self.fusion is None:
            decoded = torch.tanh(self.to_image(d))
            return GeneratorOutput(decoded, m, decoded)
        decoded = torch.tanh(self.to_image(channel_mixer(d)))
        image, _ = self.fuse(decoded, x)
        return GeneratorOutput(image, m, decoded)


def generate(model: Generator, x: np.ndarray, layout: SemanticLayout, target: AgeCondition | int,
             noise_seed: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
    """Single-image convenience wrapper; returns (face [3,H,W], m [C_m,H/4,W/4])."""
    x = check_image(x)
    if layout.shape != x.shape[1:]:
        raise ValueError(f"layout {layout.shape} does not match image {x.shape[1:]}")
    group = target.group if isinstance(target, AgeCondition) else int(target)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.from_numpy(x)[None].to(dtype), torch.from_numpy(layout.onehot)[None].to(dtype),
                    torch.tensor([group]), noise_seed)
    m = None if out.m is None else out.m[0].numpy()
    return out.image[0].numpy(), m


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def zero_convs(module: nn.Module, keep_identity_injection: bool = True) -> None:
    """Zero every conv / linear weight and bias (test helper for dead-network cases)."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                sub.weight.zero_()
                if sub.bias is not None:
                    sub.bias.zero_()
        if keep_identity_injection:
            for sub in module.modules():
                if isinstance(sub, LatentInjection):
                    sub.reset_identity()

