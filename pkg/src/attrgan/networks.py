"""Conditional generator, discriminator, latent factorization, checkpoints.

The generator is a style-based synthesis network conditioned two ways at
every scale: a per-scale attribute embedding (one small encoder per scale)
concatenated with the mapped style noise. Weight-demodulated convolutions,
equalized learning rate, and skip-to-RGB follow standard style-GAN
practice; channel widths are desk-scale (``config.channels``).

Parameter names inside checkpoints follow the module tree exactly
(``msmae.encoders.3.weight``, ``synthesis.blocks.2.conv1.to_style.bias``,
...) and are stable across versions.
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
    ConfigError,
    ExperimentConfig,
    ShapeError,
)

CHECKPOINT_FORMAT_VERSION = 1


class EqualizedLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0,
                 lr_mul: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, padding: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class MSMAE(nn.Module):
    """Multi-scale attribute encoder: one affine+ReLU encoder per scale.

    Sub-encoders share no parameters; each maps the flat attribute vector to
    an embedding of ``embedding_dim``, so coarse and fine synthesis scales
    can attend to different aspects of the conditioning.
    """

    def __init__(self, attribute_dim: int, embedding_dim: int, scales: Sequence[int]):
        super().__init__()
        self.scales = tuple(scales)
        self.encoders = nn.ModuleList(
            [EqualizedLinear(attribute_dim, embedding_dim) for _ in self.scales]
        )

    def forward(self, attrs: torch.Tensor) -> list[torch.Tensor]:
        return [F.relu(enc(attrs)) for enc in self.encoders]


class SharedEncoder(nn.Module):
    """Ablation: one encoder whose embedding is reused at every scale."""

    def __init__(self, attribute_dim: int, embedding_dim: int, scales: Sequence[int]):
        super().__init__()
        self.scales = tuple(scales)
        self.encoder = EqualizedLinear(attribute_dim, embedding_dim)

    def forward(self, attrs: torch.Tensor) -> list[torch.Tensor]:
        e = F.relu(self.encoder(attrs))
        return [e for _ in self.scales]


class MappingNetwork(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, layers: int):
        super().__init__()
        dims = [in_dim] + [out_dim] * layers
        self.layers = nn.ModuleList(
            [EqualizedLinear(dims[i], dims[i + 1]) for i in range(layers)]
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z / torch.sqrt(torch.mean(z ** 2, dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


class ModulatedConv2d(nn.Module):
    """3x3 (or 1x1) convolution with per-sample style modulation.

    The style vector scales input channels of the kernel; demodulation then
    renormalizes each output filter to unit overall gain, which keeps the
    activation scale independent of the style magnitude.
    """

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, kernel: int,
                 demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.to_style = EqualizedLinear(style_dim, in_ch, bias_init=1.0)
        self.demodulate = demodulate
        self.padding = kernel // 2
        self.out_ch = out_ch

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, in_ch, h, w = x.shape
        s = self.to_style(style)
        weight = self.weight * self.scale
        weight = weight[None, :, :, :, :] * s[:, None, :, None, None]
        if self.demodulate:
            sigma = torch.rsqrt((weight ** 2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
            weight = weight * sigma
        weight = weight.reshape(b * self.out_ch, in_ch, *weight.shape[3:])
        x = x.reshape(1, b * in_ch, h, w)
        x = F.conv2d(x, weight, padding=self.padding, groups=b)
        return x.reshape(b, self.out_ch, h, w)


class StyleLayer(nn.Module):
    """Modulated conv + optional per-pixel noise + bias + activation."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, style_dim, kernel=3)
        self.noise_gain = nn.Parameter(torch.zeros(1))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: torch.Tensor, style: torch.Tensor,
                noise: torch.Tensor | None) -> torch.Tensor:
        x = self.conv(x, style)
        if noise is not None:
            x = x + self.noise_gain * noise
        return F.leaky_relu(x + self.bias[None, :, None, None], 0.2)


class ToRGB(nn.Module):
    def __init__(self, in_ch: int, style_dim: int):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, 3, style_dim, kernel=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.conv(x, style) + self.bias[None, :, None, None]


class SynthesisBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, style_dim: int, initial: bool):
        super().__init__()
        self.initial = initial
        if not initial:
            self.conv0 = StyleLayer(in_ch, out_ch, style_dim)
        self.conv1 = StyleLayer(out_ch if not initial else in_ch, out_ch, style_dim)
        self.to_rgb = ToRGB(out_ch if not initial else in_ch, style_dim)


class SynthesisNetwork(nn.Module):
    """Skip-architecture synthesis: learned 4x4 constant up to full size."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.scales = config.scale_list
        self.style_dim = config.style_dim
        ch = [config.channels(s) for s in self.scales]
        blocks = []
        for i, s in enumerate(self.scales):
            in_ch = ch[0] if i == 0 else ch[i - 1]
            blocks.append(SynthesisBlock(in_ch, ch[i], self.style_dim, initial=(i == 0)))
        self.blocks = nn.ModuleList(blocks)
        self.const = nn.Parameter(torch.randn(1, ch[0], 4, 4))

    def num_style_layers(self) -> int:
        return sum(1 if b.initial else 2 for b in self.blocks)

    def forward(self, styles: list[torch.Tensor],
                noise: list[torch.Tensor | None] | None = None) -> torch.Tensor:
        """``styles`` holds one tensor (B, style_dim) per scale; ``noise``
        one tensor (or None) per style layer, coarse to fine."""
        if len(styles) != len(self.blocks):
            raise ShapeError(f"expected {len(self.blocks)} styles, got {len(styles)}")
        batch = styles[0].shape[0]
        x = self.const.expand(batch, -1, -1, -1)
        rgb = None
        n_idx = 0

        def take_noise():
            nonlocal n_idx
            if noise is None:
                return None
            value = noise[n_idx]
            n_idx += 1
            return value

        for i, block in enumerate(self.blocks):
            style = styles[i]
            if block.initial:
                x = block.conv1(x, style, take_noise())
                rgb = block.to_rgb(x, style)
            else:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
                x = block.conv0(x, style, take_noise())
                x = block.conv1(x, style, take_noise())
                rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
                rgb = rgb + block.to_rgb(x, style)
        return rgb


class Generator(nn.Module):
    """Attribute-conditioned generator: encoder bank + mapping + synthesis.

    ``conditioning`` selects how attributes reach the synthesis network:

    * ``multi_scale`` -- per-scale encoders, embedding concatenated with w;
    * ``shared`` -- one encoder reused at every scale (ablation);
    * ``premap`` -- one embedding concatenated with z in front of the
      mapping network, whose wider output is used alone as the style
      (ablation); the per-scale style width stays the same in all modes.
    """

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        scales = config.scale_list
        attr_dim = config.attribute_dim
        emb = config.embedding_dim
        if config.conditioning == "multi_scale":
            self.msmae = MSMAE(attr_dim, emb, scales)
            map_in, map_out = config.noise_dim, config.noise_dim
        elif config.conditioning == "shared":
            self.msmae = SharedEncoder(attr_dim, emb, scales)
            map_in, map_out = config.noise_dim, config.noise_dim
        else:  # premap
            self.msmae = SharedEncoder(attr_dim, emb, scales)
            map_in, map_out = emb + config.noise_dim, config.style_dim
        self.mapping = MappingNetwork(map_in, map_out, config.mapping_layers)
        self.synthesis = SynthesisNetwork(config)
        self._frozen_noise: list[torch.Tensor] | None = None

    # -- noise plumbing ----------------------------------------------------

    def noise_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        for i, scale in enumerate(self.synthesis.scales):
            layers = 1 if i == 0 else 2
            shapes.extend([(1, scale, scale)] * layers)
        return shapes

    def make_noise(self, batch: int, generator: torch.Generator | None = None,
                   device=None) -> list[torch.Tensor]:
        return [
            torch.randn((batch, *shape), generator=generator, device=device)
            for shape in self.noise_shapes()
        ]

    def frozen_noise(self, seed: int = 0) -> list[torch.Tensor]:
        if self._frozen_noise is None:
            g = torch.Generator().manual_seed(seed)
            self._frozen_noise = [
                torch.randn((1, *shape), generator=g) for shape in self.noise_shapes()
            ]
        return self._frozen_noise

    # -- forward -----------------------------------------------------------

    def styles(self, attrs: torch.Tensor, z: torch.Tensor) -> list[torch.Tensor]:
        """Per-scale style vectors of width ``config.style_dim``."""
        if attrs.ndim != 2 or attrs.shape[1] != self.config.attribute_dim:
            raise ShapeError(f"attrs shape {tuple(attrs.shape)}, expected (B, "
                             f"{self.config.attribute_dim})")
        if z.ndim != 2 or z.shape[1] != self.config.noise_dim:
            raise ShapeError(f"z shape {tuple(z.shape)}, expected (B, {self.config.noise_dim})")
        if self.config.conditioning == "premap":
            e = self.msmae(attrs)[0]
            w = self.mapping(torch.cat([e, z], dim=1))
            return [w for _ in self.synthesis.scales]
        embeddings = self.msmae(attrs)
        w = self.mapping(z)
        return [torch.cat([e, w], dim=1) for e in embeddings]

    def forward(self, attrs: torch.Tensor, z: torch.Tensor,
                noise_mode: str = "random",
                noise_generator: torch.Generator | None = None,
                style_offset: torch.Tensor | None = None) -> torch.Tensor:
        """Generate images in [-1, 1] value range (unclamped).

        ``noise_mode``: ``random`` draws fresh per-pixel noise (optionally
        from ``noise_generator``), ``frozen`` reuses a stored seed so equal
        inputs give bit-equal outputs, ``none`` disables noise.
        ``style_offset`` (style_dim,) is added to every per-scale style,
        which is how factorized latent directions are applied.
        """
        styles = self.styles(attrs, z)
        if style_offset is not None:
            styles = [s + style_offset[None, :] for s in styles]
        batch = attrs.shape[0]
        if noise_mode == "random":
            noise = self.make_noise(batch, noise_generator, device=attrs.device)
        elif noise_mode == "frozen":
            noise = [n.expand(batch, -1, -1, -1) for n in self.frozen_noise()]
        elif noise_mode == "none":
            noise = None
        else:
            raise ConfigError(f"noise_mode {noise_mode!r} not in {{random, frozen, none}}")
        return self.synthesis(styles, noise)


def generate_images(generator: Generator, attrs: np.ndarray, z: np.ndarray,
                    deterministic: bool = True) -> np.ndarray:
    """Inference helper: float images in [0, 1], shape (B, H, W, 3)."""
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        t_attrs = torch.as_tensor(np.asarray(attrs), dtype=torch.float32)
        t_z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
        raw = generator(t_attrs, t_z, noise_mode="frozen" if deterministic else "random")
    if was_training:
        generator.train()
    imgs = ((raw + 1.0) / 2.0).clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()
    return imgs


class Discriminator(nn.Module):
    """Residual convolutional tower from image resolution down to 4x4."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        scales = list(reversed(config.scale_list))  # resolution .. 4
        ch = [config.channels(s) for s in scales]
        self.from_rgb = EqualizedConv2d(3, ch[0], 1)
        blocks = []
        for i in range(len(scales) - 1):
            blocks.append(_DiscBlock(ch[i], ch[i + 1]))
        self.blocks = nn.ModuleList(blocks)
        final_ch = ch[-1]
        self.final_conv = EqualizedConv2d(final_ch, final_ch, 3, padding=1)
        self.fc = EqualizedLinear(final_ch * 4 * 4, final_ch)
        self.out = EqualizedLinear(final_ch, 1)
        self.resolution = config.image_resolution

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != self.resolution:
            raise ShapeError(
                f"discriminator expects (B, 3, {self.resolution}, {self.resolution}), "
                f"got {tuple(images.shape)}"
            )
        x = F.leaky_relu(self.from_rgb(images), 0.2)
        for block in self.blocks:
            x = block(x)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x).squeeze(1)


class _DiscBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv0 = EqualizedConv2d(in_ch, in_ch, 3, padding=1)
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = self.skip(F.avg_pool2d(x, 2))
        x = F.leaky_relu(self.conv0(x), 0.2)
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = F.avg_pool2d(x, 2)
        return (x + skip) / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# EMA shadow
# ---------------------------------------------------------------------------

class EmaShadow:
    """Exponential moving average of a module's parameters and buffers.

    shadow = decay * shadow + (1 - decay) * live, so decay 0 tracks the live
    weights exactly and decay 1 keeps the initial ones.
    """

    def __init__(self, module: nn.Module, decay: float):
        self.decay = float(decay)
        self.state = {
            k: v.detach().clone().double() for k, v in module.state_dict().items()
        }

    def update(self, module: nn.Module) -> None:
        d = self.decay
        with torch.no_grad():
            for k, v in module.state_dict().items():
                self.state[k].mul_(d).add_(v.detach().double(), alpha=1.0 - d)

    def state_dict(self) -> dict:
        return {k: v.clone() for k, v in self.state.items()}

    def load_state_dict(self, state: dict) -> None:
        self.state = {k: torch.as_tensor(v).double().clone() for k, v in state.items()}

    def copy_to(self, module: nn.Module) -> None:
        target = module.state_dict()
        module.load_state_dict(
            {k: self.state[k].to(target[k].dtype) for k in target}
        )


def ema_generator(generator: Generator, ema: EmaShadow) -> Generator:
    """Fresh generator carrying the EMA weights (for evaluation)."""
    shadow = Generator(generator.config)
    ema.copy_to(shadow)
    shadow.eval()
    return shadow


# ---------------------------------------------------------------------------
# Closed-form latent directions
# ---------------------------------------------------------------------------

LAYER_RANGES = ("all", "bottom", "middle", "top")


def sefa_directions(generator: Generator, layer_range: str = "all",
                    k: int = 8) -> list[tuple[float, np.ndarray]]:
    """Dominant directions in the per-scale style space.

    Stacks the style-modulation affine weight matrices A of the selected
    scales and eigen-decomposes A^T A; eigenvalues descend and directions
    are unit-norm rows applicable as style-space offsets.
    """
    style_dim = generator.config.style_dim
    if not 1 <= k <= style_dim:
        raise ValueError(f"k={k} out of range [1, {style_dim}]")
    if layer_range not in LAYER_RANGES:
        raise ValueError(f"layer_range {layer_range!r} not in {LAYER_RANGES}")

    blocks = generator.synthesis.blocks
    n = len(blocks)
    third = max(1, round(n / 3))
    if layer_range == "all":
        selected = list(range(n))
    elif layer_range == "bottom":
        selected = list(range(0, third))
    elif layer_range == "top":
        selected = list(range(n - third, n))
    else:
        selected = list(range(third, n - third)) or [n // 2]

    mats = []
    for i in selected:
        block = blocks[i]
        layers = [block.conv1] if block.initial else [block.conv0, block.conv1]
        for layer in layers:
            lin = layer.conv.to_style
            mats.append((lin.weight * lin.scale).detach().cpu().numpy())
    a = np.concatenate(mats, axis=0)
    return factorize_stacked_weights(a, k)


def factorize_stacked_weights(a: np.ndarray, k: int) -> list[tuple[float, np.ndarray]]:
    """Eigenpairs of A^T A, eigenvalues descending, unit-norm directions."""
    ata = a.T @ a
    eigvals, eigvecs = np.linalg.eigh(ata.astype(np.float64))
    order = np.argsort(eigvals)[::-1]
    out = []
    for idx in order[:k]:
        vec = eigvecs[:, idx]
        out.append((float(eigvals[idx]), vec / np.linalg.norm(vec)))
    return out


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path | str, kind: str, config: ExperimentConfig,
                    state: dict, step: int = 0, ema_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Versioned checkpoint: config echo, named parameter arrays, EMA, step."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": config.to_kv_text(),
        "step": int(step),
        "state": state,
        "ema_state": ema_state,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: Path | str, expected_kind: str | None = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError(f"{path} is not a checkpoint container")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint format {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    if expected_kind is not None and payload["kind"] != expected_kind:
        raise ConfigError(
            f"checkpoint kind {payload['kind']!r}, expected {expected_kind!r}"
        )
    payload["config"] = ExperimentConfig.from_kv_text(payload["config"])
    return payload


def load_generator(path: Path | str, use_ema: bool = True) -> tuple[Generator, ExperimentConfig, int]:
    payload = load_checkpoint(path, expected_kind="generator")
    config = payload["config"]
    gen = Generator(config)
    if use_ema and payload.get("ema_state"):
        target = gen.state_dict()
        gen.load_state_dict(
            {k: payload["ema_state"][k].to(target[k].dtype) for k in target}
        )
    else:
        gen.load_state_dict(payload["state"])
    gen.eval()
    return gen, config, payload["step"]


def parameter_checksum(module: nn.Module) -> str:
    """Stable digest of all parameters; guards frozen models."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
