"""Adversarial optimization loop with lazy R1 and attribute regularization.

Determinism contract: every random draw (batch indices, style noise,
per-pixel noise) comes from a counter-based stream keyed by (seed, step),
never from ambient RNG state. Resuming from a saved state therefore
reproduces the loss sequence exactly in single-threaded mode, and the
100-step training prefix is bit-reproducible from a fixed seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ConfigError,
    ExperimentConfig,
    NumericError,
    CapabilityError,
)
from .networks import (
    Discriminator,
    EmaShadow,
    Generator,
    save_checkpoint,
)
from .regularizers import IngredientClassifier, ViewRegressor
from .synthdata import SceneDataset


@dataclass
class LossBreakdown:
    """Per-step loss components; d_total includes R1 only on lazy steps."""

    g_adv: float = math.nan
    l_ingr: float = math.nan
    l_view: float = math.nan
    g_total: float = math.nan
    d_adv: float = math.nan
    r1: float = math.nan
    d_total: float = math.nan

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("g_adv", "l_ingr", "l_view", "g_total", "d_adv", "r1", "d_total")}

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_dict().values() if not math.isnan(v))


# ---------------------------------------------------------------------------
# Loss kernels
# ---------------------------------------------------------------------------

def ingredient_loss(classifier: Callable[[torch.Tensor], torch.Tensor],
                    fake_images: torch.Tensor,
                    targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between classifier(fake) and the intended
    ingredient indicators; the classifier stays frozen."""
    logits = classifier(fake_images)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite classifier logits on generated images")
    return F.binary_cross_entropy_with_logits(logits, targets)


def view_loss(regressor: Callable[[torch.Tensor], torch.Tensor],
              fake_images: torch.Tensor,
              targets_normalized: torch.Tensor) -> torch.Tensor:
    """Mean squared error in normalized view space (mean over batch and
    the 4 attributes)."""
    pred = regressor(fake_images)
    if not torch.isfinite(pred).all():
        raise NumericError("non-finite view predictions on generated images")
    return F.mse_loss(pred, targets_normalized)


def r1_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor],
               real_images: torch.Tensor,
               lambda_r1: float = 10.0,
               interval: int = 16,
               mode: str = "autograd",
               fd_directions: int = 4,
               fd_eps: float = 1e-3) -> torch.Tensor:
    """Lazy R1: (lambda_r1 / 2) * E[||dD/dx||^2] * interval.

    The interval factor makes the time-averaged penalty match the
    every-step formulation. ``finite_diff`` mode estimates the squared
    gradient norm from central differences along random directions
    (unbiased via E[(g.v)^2] = ||g||^2 for standard normal v) and needs no
    double backward.
    """
    if mode == "autograd":
        images = real_images.detach().requires_grad_(True)
        scores = discriminator(images)
        try:
            grads, = torch.autograd.grad(scores.sum(), images, create_graph=True)
        except RuntimeError as exc:
            raise CapabilityError(
                "backend cannot differentiate through discriminator gradients; "
                "use r1_mode=finite_diff"
            ) from exc
        grad_sq = grads.flatten(1).pow(2).sum(dim=1).mean()
    elif mode == "finite_diff":
        images = real_images.detach()
        est = images.new_zeros(())
        for _ in range(fd_directions):
            v = torch.randn_like(images)
            plus = discriminator(images + fd_eps * v)
            minus = discriminator(images - fd_eps * v)
            est = est + (((plus - minus) / (2.0 * fd_eps)) ** 2).mean()
        grad_sq = est / fd_directions
    else:
        raise ConfigError(f"r1 mode {mode!r} not in {{autograd, finite_diff}}")
    return 0.5 * lambda_r1 * interval * grad_sq


def adversarial_g_loss(fake_scores: torch.Tensor, form: str) -> torch.Tensor:
    if form == "logistic":
        return F.softplus(-fake_scores).mean()
    if form == "raw":
        return (-fake_scores).mean()
    raise ConfigError(f"loss_form {form!r} not in {{logistic, raw}}")


def adversarial_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor,
                       form: str) -> torch.Tensor:
    if form == "logistic":
        return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()
    if form == "raw":
        return fake_scores.mean() - real_scores.mean()
    raise ConfigError(f"loss_form {form!r} not in {{logistic, raw}}")


# ---------------------------------------------------------------------------
# Train state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: ExperimentConfig
    generator: Generator
    discriminator: Discriminator
    ema: EmaShadow
    g_opt: torch.optim.Adam
    d_opt: torch.optim.Adam
    step: int = 0
    loss_history: list = field(default_factory=list)

    HISTORY_LIMIT = 512

    def record(self, losses: LossBreakdown) -> None:
        self.loss_history.append({"step": self.step, **losses.to_dict()})
        if len(self.loss_history) > self.HISTORY_LIMIT:
            del self.loss_history[: len(self.loss_history) - self.HISTORY_LIMIT]


def init_train_state(config: ExperimentConfig) -> TrainState:
    torch.manual_seed(config.random_seed)
    generator = Generator(config)
    discriminator = Discriminator(config)
    ema = EmaShadow(generator, config.ema_decay)
    lr = config.learning_rate
    # Lazy-regularization optimizer adjustment keeps the effective per-image
    # learning dynamics unchanged when R1 is applied every `interval` steps.
    c = config.r1_interval / (config.r1_interval + 1)
    g_opt = torch.optim.Adam(generator.parameters(), lr=lr, betas=(0.0, 0.99), eps=1e-8)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=lr * c,
                             betas=(0.0 ** c, 0.99 ** c), eps=1e-8)
    return TrainState(config, generator, discriminator, ema, g_opt, d_opt)


def save_train_state(state: TrainState, path: Path | str) -> None:
    torch.save({
        "format_version": 1,
        "kind": "train-state",
        "config": state.config.to_kv_text(),
        "step": state.step,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "ema": state.ema.state_dict(),
        "g_opt": state.g_opt.state_dict(),
        "d_opt": state.d_opt.state_dict(),
        "loss_history": state.loss_history,
    }, path)


def load_train_state(path: Path | str) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "train-state":
        raise ConfigError(f"{path} is not a training state")
    config = ExperimentConfig.from_kv_text(payload["config"])
    state = init_train_state(config)
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.ema.load_state_dict(payload["ema"])
    state.g_opt.load_state_dict(payload["g_opt"])
    state.d_opt.load_state_dict(payload["d_opt"])
    state.step = payload["step"]
    state.loss_history = payload["loss_history"]
    return state


# ---------------------------------------------------------------------------
# Batching (counter-based, order-free)
# ---------------------------------------------------------------------------

class ConditioningSource:
    """Supplies (images, attribute) batches keyed purely by step index.

    Fake conditioning is drawn from real training samples: real ingredient
    labels paired with pseudo-labeled (or oracle) views, matching how the
    regularizers judge fakes against labels of real data.
    """

    def __init__(self, dataset: SceneDataset, config: ExperimentConfig):
        self.dataset = dataset
        self.config = config
        if config.view_labels == "pseudo":
            if dataset.pseudo_views is None:
                raise ConfigError(
                    "config requests pseudo view labels but the dataset manifest "
                    "has none; run pseudo-labeling or set view_labels=oracle"
                )
            views_norm = dataset.normalized_views(pseudo=True)
        else:
            views_norm = dataset.normalized_views(pseudo=False)
        self.attrs = np.concatenate([dataset.ingredients, views_norm], axis=1)

    def batch(self, seed: int, step: int, stream: int) -> tuple[torch.Tensor, torch.Tensor]:
        rng = np.random.Generator(np.random.Philox(key=[seed, stream], counter=[step, 0, 0, 0]))
        idx = rng.integers(0, len(self.dataset), size=self.config.batch_size)
        images = self.dataset.image_batch(idx)
        images = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0
        attrs = torch.from_numpy(self.attrs[idx].astype(np.float32))
        return images, attrs

    def noise(self, seed: int, step: int, stream: int) -> torch.Tensor:
        rng = np.random.Generator(np.random.Philox(key=[seed, stream], counter=[step, 0, 0, 0]))
        z = rng.standard_normal((self.config.batch_size, self.config.noise_dim))
        return torch.from_numpy(z.astype(np.float32))

    def torch_generator(self, seed: int, step: int, stream: int) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed((seed * 1_000_003 + stream) * 10_000_019 + step)
        return g


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _judged(images: torch.Tensor) -> torch.Tensor:
    """Generator output (value range [-1, 1]) mapped to judge input space."""
    return (images + 1.0) / 2.0


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def generator_step(state: TrainState, source: ConditioningSource,
                   classifier: IngredientClassifier,
                   regressor: ViewRegressor) -> LossBreakdown:
    cfg = state.config
    step = state.step
    _, attrs = source.batch(cfg.random_seed, step, stream=0)
    z = source.noise(cfg.random_seed, step, stream=1)
    noise_gen = source.torch_generator(cfg.random_seed, step, stream=2)

    _set_requires_grad(state.discriminator, False)
    state.generator.train()
    fake = state.generator(attrs, z, noise_mode="random", noise_generator=noise_gen)
    g_adv = adversarial_g_loss(state.discriminator(fake), cfg.loss_form)

    breakdown = LossBreakdown(g_adv=float(g_adv.detach()))
    total = g_adv
    if cfg.lambda_ingr > 0 or cfg.lambda_view > 0:
        judged = _judged(fake)
        l_ingr = ingredient_loss(classifier, judged, attrs[:, :10])
        l_view = view_loss(regressor, judged, attrs[:, 10:])
        total = g_adv + cfg.lambda_ingr * l_ingr + cfg.lambda_view * l_view
        breakdown.l_ingr = float(l_ingr.detach())
        breakdown.l_view = float(l_view.detach())
    else:
        breakdown.l_ingr = 0.0
        breakdown.l_view = 0.0
    breakdown.g_total = float(total.detach())

    if not math.isfinite(breakdown.g_total):
        raise NumericError(f"non-finite generator loss at step {step}")

    state.g_opt.zero_grad(set_to_none=True)
    total.backward()
    state.g_opt.step()
    state.ema.update(state.generator)
    _set_requires_grad(state.discriminator, True)
    return breakdown


def discriminator_step(state: TrainState, source: ConditioningSource) -> LossBreakdown:
    cfg = state.config
    step = state.step
    real, attrs = source.batch(cfg.random_seed, step, stream=3)
    z = source.noise(cfg.random_seed, step, stream=4)
    noise_gen = source.torch_generator(cfg.random_seed, step, stream=5)

    _set_requires_grad(state.generator, False)
    with torch.no_grad():
        fake = state.generator(attrs, z, noise_mode="random", noise_generator=noise_gen)
    d_adv = adversarial_d_loss(state.discriminator(real), state.discriminator(fake),
                               cfg.loss_form)
    breakdown = LossBreakdown(d_adv=float(d_adv.detach()))

    total = d_adv
    if step % cfg.r1_interval == 0 and cfg.lambda_r1 > 0:
        penalty = r1_penalty(state.discriminator, real, cfg.lambda_r1,
                             cfg.r1_interval, mode=cfg.r1_mode)
        total = total + penalty
        breakdown.r1 = float(penalty.detach())
    else:
        breakdown.r1 = 0.0
    breakdown.d_total = float(total.detach())

    if not math.isfinite(breakdown.d_total):
        raise NumericError(f"non-finite discriminator loss at step {step}")

    state.d_opt.zero_grad(set_to_none=True)
    total.backward()
    state.d_opt.step()
    _set_requires_grad(state.generator, True)
    return breakdown


def train(state: TrainState, dataset: SceneDataset,
          classifier: IngredientClassifier, regressor: ViewRegressor,
          steps: int, out_dir: Path | str | None = None,
          checkpoint_every: int = 1000, log_every: int = 25,
          log: Callable[[str], None] | None = None) -> TrainState:
    """Alternating 1:1 D/G optimization for ``steps`` generator steps.

    Writes a line-delimited metrics log and periodic checkpoints (plus a
    resumable full train state) under ``out_dir``.
    """
    cfg = state.config
    if dataset.resolution != cfg.image_resolution:
        raise ConfigError(
            f"dataset resolution {dataset.resolution} != configured "
            f"{cfg.image_resolution}"
        )
    if classifier.resolution != cfg.image_resolution:
        raise ConfigError("classifier was trained at a different resolution")
    if not getattr(classifier, "frozen", False) or not getattr(regressor, "frozen", False):
        raise ConfigError("regularizers must be frozen before GAN training")
    source = ConditioningSource(dataset, cfg)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a")

    try:
        target = state.step + steps
        while state.step < target:
            d_losses = discriminator_step(state, source)
            g_losses = generator_step(state, source, classifier, regressor)
            merged = LossBreakdown(
                g_adv=g_losses.g_adv, l_ingr=g_losses.l_ingr, l_view=g_losses.l_view,
                g_total=g_losses.g_total, d_adv=d_losses.d_adv, r1=d_losses.r1,
                d_total=d_losses.d_total,
            )
            state.record(merged)
            if metrics_fh is not None and state.step % log_every == 0:
                metrics_fh.write(json.dumps({"step": state.step, **merged.to_dict()}) + "\n")
                metrics_fh.flush()
            if log is not None and state.step % (log_every * 10) == 0:
                log(f"step {state.step}: g={merged.g_total:.3f} "
                    f"(adv {merged.g_adv:.3f} ingr {merged.l_ingr:.3f} "
                    f"view {merged.l_view:.3f}) d={merged.d_total:.3f}")
            state.step += 1
            if out is not None and (state.step % checkpoint_every == 0
                                    or state.step == target):
                write_generator_checkpoint(state, out / f"ckpt_{state.step:07d}.pt")
                save_train_state(state, out / "train_state.pt")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return state


def write_generator_checkpoint(state: TrainState, path: Path | str) -> None:
    save_checkpoint(
        path, "generator", state.config, state.generator.state_dict(),
        step=state.step, ema_state=state.ema.state_dict(),
        extra={"discriminator": state.discriminator.state_dict()},
    )
