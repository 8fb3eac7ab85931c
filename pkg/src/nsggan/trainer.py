"""Joint condition-driven / self-driven training of the two generators and critics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import safetensors.torch
import torch
import torch.nn as nn
from safetensors import safe_open

from . import losses as L
from .config import RunPaths, TrainConfig, save_config
from .datapipe import GROUP_MIDPOINTS, N_GROUPS, DataError, FacePairBatch, FaceSample, make_pair_batches, normalized_age
from .discriminator import Discriminator
from .generator import ConfigError, Generator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nsggan-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, step: int):
        super().__init__(f"loss component {component!r} is not finite at step {step}")
        self.component = component
        self.step = step


class Models(nn.Module):
    """G_p (progressor), G_r (regressor), D_p, D_r and the fixed identity embedder."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        gen_cfg = config.generator_config()
        self.g_p = Generator(gen_cfg)
        self.g_r = Generator(gen_cfg)
        groups = N_GROUPS if config.critic_projection else 0
        self.d_p = Discriminator(config.disc_channels, config.critic_spectral_norm, groups)
        self.d_r = Discriminator(config.disc_channels, config.critic_spectral_norm, groups)
        self.embedder = L.PatchStatsEmbedder(seed=config.embedder_seed)

    def generator_parameters(self):
        return list(self.g_p.parameters()) + list(self.g_r.parameters())

    def critic_parameters(self):
        return list(self.d_p.parameters()) + list(self.d_r.parameters())


def init_models(config: TrainConfig) -> Models:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return Models(config)


def make_optimizers(models: Models, config: TrainConfig):
    betas = (config.beta1, config.beta2)
    return (torch.optim.Adam(models.generator_parameters(), lr=config.learning_rate, betas=betas),
            torch.optim.Adam(models.critic_parameters(), lr=config.learning_rate * config.critic_lr_ratio,
                             betas=betas))


@dataclass
class TrainState:
    config: TrainConfig
    models: Models
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    history: list = field(default_factory=list)


def new_state(config: TrainConfig) -> TrainState:
    models = init_models(config)
    opt_g, opt_d = make_optimizers(models, config)
    return TrainState(config, models, opt_g, opt_d)


def noise_seed(seed: int, step: int, call: int) -> int:
    return int(np.random.SeedSequence([seed, step, call]).generate_state(1)[0])


_MIDPOINT_AGES = torch.tensor([normalized_age(a) for a in GROUP_MIDPOINTS], dtype=torch.float32)


def target_ages(groups: torch.Tensor) -> torch.Tensor:
    return _MIDPOINT_AGES[groups]


def _requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _clip(params, max_norm: float):
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _check_finite(values: dict, step: int):
    for name, value in values.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteLossError(name, step)


def _constraint_terms(gen: Generator, out, source: torch.Tensor, target_age: torch.Tensor, weights):
    """(age_est, constraint) contributions of one generator pass."""
    feats = gen.constrain(out.decoded)
    constraint = L.constraint_loss(feats.F_re, out.m)
    mode = gen.config.constraint_mode
    if mode == "simple_mapping":
        return torch.zeros(()), constraint
    e_re = gen.feature_age(feats.F_re)
    if mode == "disentangle_age":
        e_un = gen.feature_age(feats.F_un)
        return L.age_est_loss(e_re, e_un, target_age, weights.delta, weights.age_est_cap), constraint
    # disentangle_identity: age-irrelevant features must match those of the source face
    src_un = gen.constrain(source).F_un.detach()
    return ((e_re - target_age) ** 2).mean() + ((feats.F_un - src_un) ** 2).mean(), constraint


class Passes(NamedTuple):
    """Generator outputs of one step; ``None`` where the strategy skips a path."""

    fake_p: object
    fake_r: object
    rec_y: object
    rec_o: object
    self_y: object
    self_o: object
    tgt_p: torch.Tensor
    tgt_r: torch.Tensor
    grp_p: torch.Tensor  # group ids the fakes were asked for
    grp_r: torch.Tensor


def generator_passes(models: Models, cfg: TrainConfig, t: dict, step: int) -> Passes:
    """Condition-driven cycles and/or self-driven reconstructions for one batch."""
    condition = cfg.strategy in ("condition_only", "joint")
    self_driven = cfg.strategy in ("self_only", "joint")
    seed = lambda k: noise_seed(cfg.seed, step, k)  # noqa: E731
    g_p, g_r = models.g_p, models.g_r
    fake_p = fake_r = rec_y = rec_o = self_y = self_o = None
    if condition:
        fake_p = g_p(t["x_y"], t["seg_y"], t["g_o"], seed(0))
        rec_y = g_r(fake_p.image, t["seg_y"], t["g_y"], seed(1))
        fake_r = g_r(t["x_o"], t["seg_o"], t["g_y"], seed(2))
        rec_o = g_p(fake_r.image, t["seg_o"], t["g_o"], seed(3))
        grp_p, grp_r = t["g_o"], t["g_y"]
    if self_driven:
        self_y = g_p(t["x_y"], t["seg_y"], t["g_y"], seed(4))
        self_o = g_r(t["x_o"], t["seg_o"], t["g_o"], seed(5))
    if not condition:
        # self-driven only: the reconstructions are the only generated faces
        fake_p, fake_r = self_y, self_o
        grp_p, grp_r = t["g_y"], t["g_o"]
    dtype = t["x_y"].dtype
    return Passes(fake_p, fake_r, rec_y, rec_o, self_y, self_o, target_ages(grp_p).to(dtype),
                  target_ages(grp_r).to(dtype), grp_p, grp_r)


def critic_objective(models: Models, t: dict, passes: Passes, weights: L.LossWeights, both_groups: bool = False):
    """(total, components) of the critic loss; fakes are detached.

    With ``both_groups`` each age head also regresses the real faces of the
    other side of the pair, so both heads see the full age range.
    """
    dp_fake = models.d_p(passes.fake_p.image.detach(), passes.grp_p)
    dr_fake = models.d_r(passes.fake_r.image.detach(), passes.grp_r)
    dp_old, dp_young = models.d_p(t["x_o"], t["g_o"]), models.d_p(t["x_y"], t["g_y"])
    dr_young, dr_old = models.d_r(t["x_y"], t["g_y"]), models.d_r(t["x_o"], t["g_o"])
    d_adv = L.adv_loss(dp_fake.realism_map, dr_fake.realism_map, dp_old.realism_map,
                       dr_young.realism_map, role="discriminator")
    estimates, targets = [dp_young.age_estimate, dr_old.age_estimate], [t["age_y"], t["age_o"]]
    if both_groups:
        estimates += [dp_old.age_estimate, dr_young.age_estimate]
        targets += [t["age_o"], t["age_y"]]
    d_age = L.age_reg_loss(estimates, targets)
    return weights.adv * d_adv + weights.age_reg * d_age, {"d_adv": d_adv, "d_age_reg": d_age}


def generator_objective(models: Models, cfg: TrainConfig, t: dict, passes: Passes,
                        weights: L.LossWeights) -> dict:
    """Unweighted generator loss components for one step's passes."""
    x_y, x_o = t["x_y"], t["x_o"]
    fake_p, fake_r = passes.fake_p, passes.fake_r
    dp, dr = models.d_p(fake_p.image, passes.grp_p), models.d_r(fake_r.image, passes.grp_r)
    emb = models.embedder
    zero = torch.zeros((), dtype=x_y.dtype)
    comp = {
        "adv": L.adv_loss(dp.realism_map, dr.realism_map, role="generator"),
        "age_reg": L.age_reg_loss([dp.age_estimate, dr.age_estimate], [passes.tgt_p, passes.tgt_r]),
        "id": L.id_loss([emb(fake_p.image), emb(fake_r.image)], [emb(x_y), emb(x_o)]),
        "pix": L.pixel_loss([fake_p.image, fake_r.image], [x_y, x_o]),
        "cyc": zero if passes.rec_y is None else L.cycle_loss([passes.rec_y.image, passes.rec_o.image], [x_y, x_o]),
        "self": zero if passes.self_y is None else L.self_loss([passes.self_y.image, passes.self_o.image], [x_y, x_o]),
        "age_est": zero,
        "constraint": zero,
    }
    if cfg.constraint_enabled:
        est_p, con_p = _constraint_terms(models.g_p, fake_p, x_y, passes.tgt_p, weights)
        est_r, con_r = _constraint_terms(models.g_r, fake_r, x_o, passes.tgt_r, weights)
        comp["age_est"], comp["constraint"] = est_p + est_r, con_p + con_r
    return comp


def train_step(state: TrainState, batch: FacePairBatch) -> tuple[L.LossReport, dict]:
    """One critic update followed by one generator update on ``batch``."""
    cfg, models, step = state.config, state.models, state.step
    weights = cfg.loss_weights()
    t = batch.tensors()
    models.train()

    _requires_grad(models.d_p, False)
    _requires_grad(models.d_r, False)
    passes = generator_passes(models, cfg, t, step)

    _requires_grad(models.d_p, True)
    _requires_grad(models.d_r, True)
    d_total, critic = critic_objective(models, t, passes, weights, cfg.critic_age_both_groups)
    _check_finite(critic, step)
    state.opt_d.zero_grad(set_to_none=True)
    d_total.backward()
    _clip(models.critic_parameters(), cfg.grad_clip)
    state.opt_d.step()

    # generator update against the refreshed critics
    _requires_grad(models.d_p, False)
    _requires_grad(models.d_r, False)
    comp = generator_objective(models, cfg, t, passes, weights)
    _check_finite(comp, step)
    g_total = L.weighted_total(comp, weights)
    state.opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    _clip(models.generator_parameters(), cfg.grad_clip)
    state.opt_g.step()
    _requires_grad(models.d_p, True)
    _requires_grad(models.d_r, True)

    report = L.total_loss({k: v.detach() for k, v in comp.items()}, weights)
    critic = {k: float(v.detach()) for k, v in critic.items()}
    critic["d_total"] = float(d_total.detach())
    return report, critic


# ---------------------------------------------------------------- checkpoints

def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer, out: dict) -> list:
    sd = opt.state_dict()
    for idx, slot in sd["state"].items():
        for key, value in slot.items():
            out[f"{prefix}.{idx}.{key}"] = value.detach().clone().contiguous()
    return sd["param_groups"]


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write the full training state as one safetensors archive.

    Tensor keys: ``model.<module path>`` for every parameter and buffer,
    ``opt_g.<param index>.<slot>`` / ``opt_d...`` for Adam moments and step
    counts, ``rng.torch`` for the global torch RNG. A single metadata entry
    ``header`` holds sorted JSON with format, version, config, config_hash,
    step, epoch, batch_index and the optimizer param groups.
    """
    path = Path(path)
    tensors = {f"model.{k}": v.detach().clone().contiguous() for k, v in state.models.state_dict().items()}
    groups_g = _optimizer_tensors("opt_g", state.opt_g, tensors)
    groups_d = _optimizer_tensors("opt_d", state.opt_d, tensors)
    tensors["rng.torch"] = torch.get_rng_state()
    header = dict(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION, config=state.config.to_dict(),
                  config_hash=state.config.digest(), step=state.step, epoch=state.epoch,
                  batch_index=state.batch_index, opt_g_groups=groups_g, opt_d_groups=groups_d)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        safetensors.torch.save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True)})
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(path: str | Path) -> dict:
    with safe_open(str(path), "pt") as fh:
        meta = fh.metadata() or {}
    if "header" not in meta:
        raise ConfigError(f"{path} is not an nsggan checkpoint")
    header = json.loads(meta["header"])
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format')} v{header.get('version')}")
    return header


def _load_optimizer(opt, prefix: str, groups: list, tensors: dict):
    state: dict = {}
    for key, value in tensors.items():
        if key.startswith(prefix + "."):
            _, idx, slot = key.split(".", 2)
            state.setdefault(int(idx), {})[slot] = value
    opt.load_state_dict({"state": state, "param_groups": groups})


def load_checkpoint(path: str | Path, restore_rng: bool = True) -> TrainState:
    header = read_header(path)
    config = TrainConfig.from_dict(header["config"])
    tensors = safetensors.torch.load_file(str(path))
    state = new_state(config)
    model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    state.models.load_state_dict(model_sd, strict=True)
    _load_optimizer(state.opt_g, "opt_g", header["opt_g_groups"], tensors)
    _load_optimizer(state.opt_d, "opt_d", header["opt_d_groups"], tensors)
    if restore_rng:
        torch.set_rng_state(tensors["rng.torch"])
    state.step, state.epoch, state.batch_index = header["step"], header["epoch"], header["batch_index"]
    return state


# ---------------------------------------------------------------- loop

def _record(state: TrainState, report: L.LossReport, critic: dict, started: float) -> dict:
    rec = {"step": state.step, "epoch": state.epoch, **report.__dict__, **critic}
    if state.config.log_wall_time:
        rec["wall_time"] = time.time() - started
    return rec


def check_dataset(dataset: Sequence[FaceSample], config: TrainConfig):
    if not dataset:
        raise DataError("dataset is empty")
    size = dataset[0].image.shape[1:]
    if size != (config.image_size, config.image_size):
        raise ConfigError(f"dataset images are {size}, config image_size is {config.image_size}")


def train(dataset: Sequence[FaceSample], config: TrainConfig | None = None, out_dir: str | Path | None = None,
          resume: TrainState | str | Path | None = None, progress_every: int = 0) -> TrainState:
    """Run epochs x pair batches of :func:`train_step`.

    With ``out_dir`` the loss log (JSON lines), the resolved config and the
    checkpoints are written there. ``resume`` continues an earlier state at
    the exact batch where it stopped; its config wins over ``config``.
    """
    if resume is not None:
        state = resume if isinstance(resume, TrainState) else load_checkpoint(resume)
    else:
        state = new_state(config or TrainConfig())
    config = state.config
    check_dataset(dataset, config)
    paths = RunPaths(out_dir) if out_dir is not None else None
    if paths is not None:
        paths.root.mkdir(parents=True, exist_ok=True)
        save_config(config, paths.resolved_config)
    log_fh = open(paths.log, "a" if resume is not None else "w") if paths else None
    started = time.time()
    try:
        _run_epochs(state, dataset, paths, log_fh, started, progress_every)
    finally:
        if log_fh:
            log_fh.close()
    if paths:
        save_checkpoint(state, paths.checkpoint())
    return state


def _run_epochs(state, dataset, paths, log_fh, started, progress_every):
    config = state.config
    while state.epoch < config.epochs:
        batches = list(make_pair_batches(dataset, config.batch_size, config.seed, state.epoch))
        for batch in batches[state.batch_index:]:
            if config.max_steps and state.step >= config.max_steps:
                return
            report, critic = train_step(state, batch)
            state.step += 1
            state.batch_index += 1
            rec = _record(state, report, critic, started)
            state.history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if progress_every and state.step % progress_every == 0:
                log.info("step %d self %.4f cyc %.4f age_reg %.4f total %.3f", state.step, report.self,
                         report.cyc, report.age_reg, report.total)
            if paths and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                save_checkpoint(state, paths.checkpoint(state.step))
        state.epoch += 1
        state.batch_index = 0

def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([values.mean()]) if len(values) else values
    return np.convolve(values, np.ones(window) / window, mode="valid")
