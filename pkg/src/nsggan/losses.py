"""Objective terms as pure functions of model outputs.

Each direction-summed loss accepts either a single tensor pair or parallel
sequences of tensors (one entry per direction); terms are batch means and
the directions are summed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

COMPONENTS = ("adv", "age_reg", "id", "pix", "cyc", "self", "age_est", "constraint")


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    id: float = 10.0
    pix: float = 1.0
    cyc: float = 1.0
    self: float = 10.0
    age_reg: float = 800.0
    age_est: float = 10.0
    constraint: float = 1.0
    delta: float = 0.5
    # cap on the reversed age term, which is otherwise unbounded below
    age_est_cap: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")


@dataclass
class LossReport:
    adv: float = 0.0
    age_reg: float = 0.0
    id: float = 0.0
    pix: float = 0.0
    cyc: float = 0.0
    self: float = 0.0
    age_est: float = 0.0
    constraint: float = 0.0
    total: float = 0.0

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, sort_keys=True)


def _pairs(a, b):
    if isinstance(a, torch.Tensor):
        return [(a, b)]
    if len(a) != len(b):
        raise ValueError("direction lists must have equal length")
    return list(zip(a, b))


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def adv_loss(d_p_fake: torch.Tensor, d_r_fake: torch.Tensor, d_p_real_old: torch.Tensor | None = None,
             d_r_real_young: torch.Tensor | None = None, role: str = "generator") -> torch.Tensor:
    """Least-squares adversarial loss over both critics.

    D_p judges progressed faces against real old faces, D_r judges regressed
    faces against real young faces.
    """
    if role == "generator":
        return ((d_p_fake - 1) ** 2).mean() + ((d_r_fake - 1) ** 2).mean()
    if role == "discriminator":
        return (((d_p_real_old - 1) ** 2).mean() + (d_p_fake ** 2).mean()
                + ((d_r_real_young - 1) ** 2).mean() + (d_r_fake ** 2).mean())
    raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")


def age_reg_loss(estimates, targets) -> torch.Tensor:
    """Squared error of regressed vs. target normalised ages, summed over terms."""
    return sum(((e - t) ** 2).mean() for e, t in _pairs(estimates, targets))


def id_loss(embed_fake, embed_src) -> torch.Tensor:
    total = 0
    for a, b in _pairs(embed_fake, embed_src):
        _check_shapes(a, b)
        diff = (a - b) ** 2
        diff = diff.reshape(diff.shape[0], -1) if diff.dim() > 1 else diff[None]
        total = total + diff.sum(dim=1).mean()
    return total


def pixel_loss(fake, src) -> torch.Tensor:
    total = 0
    for a, b in _pairs(fake, src):
        _check_shapes(a, b)
        total = total + ((a - b) ** 2).mean()
    return total


def cycle_loss(reconstruction, original) -> torch.Tensor:
    total = 0
    for a, b in _pairs(reconstruction, original):
        _check_shapes(a, b)
        total = total + (a - b).abs().mean()
    return total


def self_loss(self_recon, original) -> torch.Tensor:
    return pixel_loss(self_recon, original)


def age_est_loss(e_related, e_unrelated, target, delta: float = 0.5, cap: float = 1.0) -> torch.Tensor:
    """Age loss on age-related features minus delta times a capped age loss on the rest."""
    total = 0
    e_un = [e_unrelated] if isinstance(e_unrelated, torch.Tensor) else list(e_unrelated)
    for (e_re, t), e_u in zip(_pairs(e_related, target), e_un):
        reversed_term = torch.clamp((e_u - t) ** 2, max=cap).mean()
        total = total + ((e_re - t) ** 2).mean() - delta * reversed_term
    return total


def constraint_loss(f_related, m) -> torch.Tensor:
    """L1 pull of ``m`` toward the (detached) age-related features."""
    total = 0
    for f, lat in _pairs(f_related, m):
        _check_shapes(f, lat)
        total = total + (f.detach() - lat).abs().mean()
    return total


def weighted_total(components: dict, weights: LossWeights):
    total = 0.0
    for name in COMPONENTS:
        total = total + getattr(weights, name) * components.get(name, 0.0)
    return total


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum of the components; missing components count as zero."""
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    values = {k: float(v) for k, v in components.items()}
    return LossReport(**values, total=float(weighted_total(values, weights)))


class PatchStatsEmbedder(nn.Module):
    """Identity embedding: per-patch channel means and stds through a fixed random projection.

    Stands in for a pretrained face-recognition network. The projection is a
    seeded buffer, never trained.
    """

    def __init__(self, grid: int = 8, dim: int = 128, seed: int = 1234):
        super().__init__()
        self.grid = grid
        gen = torch.Generator().manual_seed(seed)
        n_stats = 2 * 3 * grid * grid
        self.register_buffer("projection", torch.randn((n_stats, dim), generator=gen) / n_stats ** 0.5)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        mean = F.adaptive_avg_pool2d(images, self.grid)
        var = F.adaptive_avg_pool2d(images ** 2, self.grid) - mean ** 2
        stats = torch.cat([mean, torch.sqrt(var.clamp_min(0) + 1e-6)], dim=1).flatten(1)
        return stats @ self.projection.to(stats.dtype)
