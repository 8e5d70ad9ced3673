"""Frozen attribute predictors: ingredient classifier and view regressor.

Both share a small 4-block convolutional backbone (desk-scale substitute
for a large pretrained one; the regularizer contract only needs a
differentiable judge). They are trained once on synthetic data, frozen,
and then serve two roles: loss terms regularizing the generator and
judges for evaluation metrics.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    INGREDIENT_COUNT,
    VIEW_COUNT,
    VIEW_NAMES,
    VIEW_RANGES,
    ConfigError,
    ExperimentConfig,
    ShapeError,
    ViewAttributes,
)
from .networks import parameter_checksum, save_checkpoint, load_checkpoint
from .synthdata import SceneDataset


class ConvBackbone(nn.Module):
    """3 stride-2 conv blocks with batch norm; keeps an 8x-downsampled
    spatial feature map so small primitives survive to the heads."""

    def __init__(self, width: int = 48, feature_dim: int = 128, in_channels: int = 3):
        super().__init__()
        self.width = width
        w = width
        chans = [in_channels, w, 2 * w, 4 * w]
        layers = []
        for i in range(3):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            layers.append(nn.BatchNorm2d(chans[i + 1]))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            layers.append(nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1))
            layers.append(nn.BatchNorm2d(chans[i + 1]))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        self.net = nn.Sequential(*layers)
        self.out_channels = chans[-1]
        self.proj = nn.Linear(chans[-1], feature_dim)
        self.feature_dim = feature_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)

    def pooled(self, images: torch.Tensor) -> torch.Tensor:
        x = self.net(images).mean(dim=(2, 3))
        return F.leaky_relu(self.proj(x), 0.2)


class IngredientClassifier(nn.Module):
    """Multi-label classifier: image in [0, 1] -> 10 logits.

    Presence is spatially sparse, so logits come from a per-location 1x1
    head pooled with log-sum-exp (smooth max) over positions rather than
    from averaged features; the head bias starts negative to match the
    sparse-positive prior.
    """

    def __init__(self, resolution: int, width: int = 48):
        super().__init__()
        self.backbone = ConvBackbone(width)
        self.head = nn.Conv2d(self.backbone.out_channels, INGREDIENT_COUNT, 1)
        nn.init.constant_(self.head.bias, -3.0)
        self.resolution = resolution
        self.frozen = False

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        fmap = self.head(self.backbone(_check_images(images, self.resolution)))
        n_positions = fmap.shape[2] * fmap.shape[3]
        return torch.logsumexp(fmap.flatten(2), dim=2) - math.log(n_positions)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Penultimate pooled features; the default FID extractor."""
        return self.backbone.pooled(_check_images(images, self.resolution))


class ViewRegressor(nn.Module):
    """Image in [0, 1] -> 4 view attributes in normalized [-1, 1] space.

    View geometry is positional, so the input carries two coordinate
    channels and the head sees a coarse 4x4 spatial pooling of the feature
    map rather than a fully position-blind average.
    """

    def __init__(self, resolution: int, width: int = 48):
        super().__init__()
        self.backbone = ConvBackbone(width, in_channels=5)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.head = nn.Sequential(
            nn.Linear(self.backbone.out_channels * 16, 128),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(128, VIEW_COUNT),
        )
        self.resolution = resolution
        self.frozen = False

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        images = _check_images(images, self.resolution)
        b, _, h, w = images.shape
        ys = torch.linspace(-1, 1, h, device=images.device)
        xs = torch.linspace(-1, 1, w, device=images.device)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([gx, gy]).expand(b, -1, -1, -1)
        fmap = self.backbone(torch.cat([images, coords], dim=1))
        return self.head(self.pool(fmap).flatten(1))


def _check_images(images: torch.Tensor, resolution: int) -> torch.Tensor:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    if images.shape[2] != resolution or images.shape[3] != resolution:
        images = F.interpolate(images, size=(resolution, resolution),
                               mode="bilinear", align_corners=False)
    return images


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model.frozen = True
    return model


def _to_torch_images(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) floats in [0, 1] -> (B, 3, H, W) tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _train_val_split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(key=seed))
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def train_ingredient_classifier(
    dataset: SceneDataset,
    epochs: int = 6,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    val_fraction: float = 0.2,
    log=None,
) -> tuple[IngredientClassifier, float]:
    """Binary cross-entropy training on an 80/20 split; returns val mAP."""
    from .evaluation import mean_ap

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    model = IngredientClassifier(dataset.resolution)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    train_idx, val_idx = _train_val_split(len(dataset), val_fraction, seed)
    labels = torch.from_numpy(dataset.ingredients)

    rng = np.random.Generator(np.random.Philox(key=seed + 1))
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            imgs = _to_torch_images(dataset.image_batch(idx))
            logits = model(imgs)
            loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if log:
            log(f"classifier epoch {epoch}: train BCE {np.mean(losses):.4f}")

    val_scores = predict_ingredients(freeze(model), dataset.image_batch(val_idx))
    _, val_map = mean_ap(val_scores, dataset.ingredients[val_idx])
    if log:
        log(f"classifier val mAP {val_map:.4f}")
    return model, float(val_map)


def train_view_regressor(
    dataset: SceneDataset,
    steps: int = 3000,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    val_fraction: float = 0.2,
    log=None,
) -> tuple[ViewRegressor, dict[str, float]]:
    """MSE training in normalized view space; returns per-attribute RMSE
    in native units on the validation split."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed + 7)
    model = ViewRegressor(dataset.resolution)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps,
                                                          eta_min=lr / 20)
    train_idx, val_idx = _train_val_split(len(dataset), val_fraction, seed)
    targets = torch.from_numpy(dataset.normalized_views())

    rng = np.random.Generator(np.random.Philox(key=seed + 8))
    model.train()
    for step in range(steps):
        idx = rng.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False)
        imgs = _to_torch_images(dataset.image_batch(idx))
        pred = model(imgs)
        loss = F.mse_loss(pred, targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        schedule.step()
        if log and (step + 1) % max(1, steps // 10) == 0:
            log(f"regressor step {step + 1}/{steps}: train MSE {float(loss.detach()):.5f}")

    freeze(model)
    rmse = view_rmse_on(model, dataset, val_idx)
    if log:
        log("regressor val RMSE " + ", ".join(f"{k}={v:.3f}" for k, v in rmse.items()))
    return model, rmse


def view_rmse_on(model: ViewRegressor, dataset: SceneDataset,
                 indices: Sequence[int]) -> dict[str, float]:
    preds = predict_view_batch(model, dataset.image_batch(indices))
    truth = dataset.views[np.asarray(indices)]
    out = {}
    for j, name in enumerate(VIEW_NAMES):
        out[name] = float(np.sqrt(np.mean((preds[:, j] - truth[:, j]) ** 2)))
    return out


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _batched(model: nn.Module, images: np.ndarray, batch: int = 256) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch):
            imgs = _to_torch_images(images[start:start + batch])
            outs.append(model(imgs).cpu().numpy())
    return np.concatenate(outs, axis=0)


def predict_ingredients(model: IngredientClassifier, images: np.ndarray) -> np.ndarray:
    """Per-category presence probabilities, shape (B, 10)."""
    model.eval()
    logits = _batched(model, images)
    return 1.0 / (1.0 + np.exp(-logits))


def predict_view_batch(model: ViewRegressor, images: np.ndarray) -> np.ndarray:
    """Denormalized view predictions clipped to ranges, shape (B, 4)."""
    model.eval()
    norm = _batched(model, images)
    out = np.empty_like(norm)
    for j, name in enumerate(VIEW_NAMES):
        lo, hi = VIEW_RANGES[name]
        out[:, j] = np.clip(lo + (norm[:, j] + 1.0) * (hi - lo) / 2.0, lo, hi)
    return out


def predict_view(model: ViewRegressor, images: np.ndarray) -> list[ViewAttributes]:
    return [ViewAttributes(*row) for row in predict_view_batch(model, images)]


def pseudo_label_views(model: ViewRegressor, dataset: SceneDataset) -> np.ndarray:
    """Imputed view labels for every sample, in native units (clipped)."""
    if not getattr(model, "frozen", False):
        raise ConfigError("pseudo-labeling requires a frozen view regressor")
    if len(dataset) == 0:
        return np.zeros((0, VIEW_COUNT), dtype=np.float32)
    return predict_view_batch(model, dataset.images.astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------

def save_classifier(path: Path | str, model: IngredientClassifier,
                    config: ExperimentConfig, val_map: float) -> None:
    save_checkpoint(path, "classifier", config, model.state_dict(),
                    extra={"val_map": val_map, "resolution": model.resolution,
                           "width": model.backbone.width,
                           "checksum": parameter_checksum(model)})


def save_regressor(path: Path | str, model: ViewRegressor,
                   config: ExperimentConfig, rmse: dict[str, float]) -> None:
    save_checkpoint(path, "regressor", config, model.state_dict(),
                    extra={"val_rmse": rmse, "resolution": model.resolution,
                           "width": model.backbone.width,
                           "checksum": parameter_checksum(model)})


def load_classifier(path: Path | str) -> tuple[IngredientClassifier, dict]:
    payload = load_checkpoint(path, expected_kind="classifier")
    model = IngredientClassifier(payload["extra"]["resolution"],
                                 width=payload["extra"].get("width", 48))
    model.load_state_dict(payload["state"])
    freeze(model)
    return model, payload["extra"]


def load_regressor(path: Path | str) -> tuple[ViewRegressor, dict]:
    payload = load_checkpoint(path, expected_kind="regressor")
    model = ViewRegressor(payload["extra"]["resolution"],
                          width=payload["extra"].get("width", 48))
    model.load_state_dict(payload["state"])
    freeze(model)
    return model, payload["extra"]
