"""Single-stage generator with SSA-CN or style fusion blocks, and a projection
discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import EMBED_DIM

Z_DIM = 64
W_DIM = 128


@dataclass(frozen=True)
class GeneratorConfig:
    block_type: str = "ssacn"
    channels: tuple[int, ...] = (128, 64, 32)
    z_dim: int = Z_DIM

    def __post_init__(self):
        if self.block_type not in ("ssacn", "style"):
            raise ValueError(f"block_type must be 'ssacn' or 'style', got {self.block_type!r}")


class MappingNetwork(nn.Module):
    """Eight fully connected layers from (z, sentence) to the latent W."""

    def __init__(self, z_dim: int = Z_DIM, text_dim: int = EMBED_DIM, width: int = W_DIM, depth: int = 8):
        super().__init__()
        layers: list[nn.Module] = []
        dim = z_dim + text_dim
        for _ in range(depth):
            layers += [nn.Linear(dim, width), nn.LeakyReLU(0.2)]
            dim = width
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, sentence: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([z, sentence], dim=-1))


def map_latent(mapping: MappingNetwork, z: torch.Tensor, sentence: torch.Tensor) -> torch.Tensor:
    return mapping(z, sentence)


def modulate_weights(weight: torch.Tensor, scales: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-sample modulated and demodulated conv weights.

    weight: O x I x k x k, scales: B x I -> B x O x I x k x k with unit norm
    over (I, k, k) for every output channel (up to eps).
    """
    w = weight.unsqueeze(0) * scales[:, None, :, None, None]
    demod = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + eps)
    return w * demod


class StyleBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, w_dim: int = W_DIM, kernel: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.affine = nn.Linear(w_dim, in_ch)
        nn.init.ones_(self.affine.bias)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.noise_strength = nn.Parameter(torch.full((out_ch,), 0.05))
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, w: torch.Tensor, noise: torch.Tensor | None = None,
                scale_mult: float = 1.0) -> torch.Tensor:
        b, c, h, wd = x.shape
        s = self.affine(w) * scale_mult
        weights = modulate_weights(self.weight, s)
        out = F.conv2d(x.reshape(1, b * c, h, wd), weights.reshape(-1, c, *self.weight.shape[2:]),
                       padding=self.padding, groups=b)
        out = out.reshape(b, -1, h, wd)
        if noise is not None:
            out = out + self.noise_strength[None, :, None, None] * noise
        return out + self.bias[None, :, None, None]


class SSCBN(nn.Module):
    """Batch norm whose text-conditioned affine is gated by a spatial mask."""

    def __init__(self, channels: int, text_dim: int = EMBED_DIM, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False, eps=eps, momentum=momentum)
        self.gamma = nn.Linear(text_dim, channels)
        self.beta = nn.Linear(text_dim, channels)
        for lin in (self.gamma, self.beta):
            nn.init.normal_(lin.weight, 0.0, 0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor, sentence: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            raise ValueError("SSCBN in training mode needs a batch of at least 2")
        normed = self.bn(x)
        g = self.gamma(sentence)[:, :, None, None]
        bt = self.beta(sentence)[:, :, None, None]
        return normed * (1 + mask * g) + mask * bt


def sscbn(module: SSCBN, x: torch.Tensor, sentence: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return module(x, sentence, mask)


class MaskPredictor(nn.Module):
    def __init__(self, channels: int, hidden: int = 8):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, 1, 1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv2(F.leaky_relu(self.conv1(x), 0.2)))


def mask_predict(module: MaskPredictor, x: torch.Tensor) -> torch.Tensor:
    return module(x)


class UpResConv(nn.Module):
    """Nearest x2 upsample, then one 3x3 conv on a residual path.

    The 1x1 skip commutes with nearest upsampling, so it runs at the input
    resolution.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.interpolate(self.skip(x), scale_factor=2, mode="nearest") + self.conv(F.leaky_relu(up, 0.2))


class GenStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, block_type: str):
        super().__init__()
        self.block_type = block_type
        self.res = UpResConv(in_ch, out_ch)
        if block_type == "ssacn":
            self.mask = MaskPredictor(out_ch)
            self.fuse = SSCBN(out_ch)
        else:
            self.fuse = StyleBlock(out_ch, out_ch)

    def forward(self, x, sentence, w, noise_gen: torch.Generator | None = None):
        x = self.res(x)
        if self.block_type == "ssacn":
            m = self.mask(x)
            return F.leaky_relu(self.fuse(x, sentence, m), 0.2), m
        noise = torch.randn(x.shape[0], 1, *x.shape[2:], generator=noise_gen, dtype=x.dtype)
        return F.leaky_relu(self.fuse(x, w, noise), 0.2), None


class Generator(nn.Module):
    """Learned 4x4 constant -> three (upsample, residual, fusion) stages -> tanh RGB."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.const = nn.Parameter(torch.randn(1, ch[0], 4, 4))
        if cfg.block_type == "ssacn":
            self.z_proj = nn.Linear(cfg.z_dim, ch[0] * 16)
            self.mapping = None
        else:
            self.z_proj = None
            self.mapping = MappingNetwork(cfg.z_dim)
        ins = (ch[0],) + tuple(ch[:-1])
        self.stages = nn.ModuleList(GenStage(i, o, cfg.block_type) for i, o in zip(ins, ch))
        self.to_rgb = nn.Conv2d(ch[-1], 3, 3, 1, 1)

    def forward(self, z: torch.Tensor, sentence: torch.Tensor, noise_gen: torch.Generator | None = None,
                return_masks: bool = False):
        b = z.shape[0]
        x = self.const.expand(b, -1, -1, -1)
        w = None
        if self.z_proj is not None:
            x = x + self.z_proj(z).view(b, -1, 4, 4)
        else:
            w = self.mapping(z, sentence)
        masks = []
        for stage in self.stages:
            x, m = stage(x, sentence, w, noise_gen)
            masks.append(m)
        img = torch.tanh(self.to_rgb(x))
        return (img, masks) if return_masks else img


def generate(gen: Generator, z: torch.Tensor, sentence: torch.Tensor, noise_seed: int | None = None) -> torch.Tensor:
    noise_gen = torch.Generator().manual_seed(noise_seed) if noise_seed is not None else None
    return gen(z, sentence, noise_gen)


class DiscBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 4, 2, 1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2))
        return self.skip(F.avg_pool2d(x, 2)) + h


class Discriminator(nn.Module):
    """Residual downsampling to 4x4, then unconditional head + projection onto
    an embedding of the sentence vector."""

    def __init__(self, channels: tuple[int, ...] = (32, 64, 128), text_dim: int = EMBED_DIM):
        super().__init__()
        self.from_rgb = nn.Conv2d(3, channels[0], 3, 1, 1)
        ins = (channels[0],) + tuple(channels[:-1])
        self.blocks = nn.Sequential(*(DiscBlock(i, o) for i, o in zip(ins, channels)))
        self.head = nn.Linear(channels[-1], 1)
        self.embed = nn.Linear(text_dim, channels[-1])

    def features(self, images: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.from_rgb(images))
        return F.leaky_relu(h, 0.2).sum(dim=(2, 3))

    def score(self, features: torch.Tensor, sentence: torch.Tensor) -> torch.Tensor:
        return self.head(features).squeeze(-1) + (features * self.embed(sentence)).sum(-1)

    def forward(self, images: torch.Tensor, sentence: torch.Tensor) -> torch.Tensor:
        return self.score(self.features(images), sentence)


def discriminate(disc: Discriminator, image: torch.Tensor, sentence: torch.Tensor) -> torch.Tensor:
    return disc(image, sentence)
