"""ShapesCap: a procedural captioned-image dataset.

Each scene is one flat-colored shape on a flat background, rendered at 32x32
and described by five caption templates that differ in word order and in
which attributes they mention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import tensorio

IMAGE_SIZE = 32
NUM_CAPTIONS = 5
MAX_LEN = 12
NUM_CLASSES = 24

MASK64 = (1 << 64) - 1


class SplitMix64:
    """64-bit splitmix generator; identical streams on every platform."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, k: int) -> int:
        """Uniform integer in [0, k) by multiply-shift."""
        return (self.next_u64() * k) >> 64


class Shape(enum.IntEnum):
    CIRCLE = 0
    SQUARE = 1
    TRIANGLE = 2


class Size(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2


FG_COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"]
BG_COLORS = ["white", "black", "gray", "brown"]
RGB = {
    "red": (220, 30, 30),
    "green": (30, 180, 40),
    "blue": (40, 60, 220),
    "yellow": (240, 220, 40),
    "cyan": (40, 210, 220),
    "magenta": (210, 40, 200),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "gray": (128, 128, 128),
    "brown": (120, 72, 30),
}
RADII = {Size.SMALL: 5, Size.MEDIUM: 8, Size.LARGE: 11}
# centres of the 3x3 placement grid, chosen so a large shape still fits the frame
CELL_CENTERS = (11.0, 16.0, 21.0)

VOCAB = [
    "<pad>", "<s>", "</s>", "<unk>",
    "a", "on", "background", "there", "is", "of", "size", "in", "front", "with",
    "colored", "this", "picture", "shows", "over", "the", "and", "image", "shape", "object",
    "small", "medium", "large",
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black", "gray", "brown",
    "circle", "square", "triangle",
]
assert len(VOCAB) == 40
TOKEN = {w: i for i, w in enumerate(VOCAB)}
PAD, START = TOKEN["<pad>"], TOKEN["<s>"]

# {size} {fg} {bg} {shape} slots; templates 2 and 4 drop background and size
TEMPLATES = [
    "a {size} {fg} {shape} on a {bg} background",
    "there is a {fg} {shape} of {size} size in front of {bg}",
    "a {size} {fg} {shape}",
    "{bg} background with a {size} {fg} colored {shape}",
    "this picture shows a {fg} {shape} over {bg}",
]


@dataclass(frozen=True)
class SceneSpec:
    shape: Shape
    fg_color: str
    bg_color: str
    size: Size
    cell: tuple[int, int]

    def __post_init__(self):
        if self.fg_color not in FG_COLORS or self.bg_color not in BG_COLORS:
            raise ValueError(f"unknown color in {self}")
        if self.fg_color == self.bg_color:
            raise ValueError("foreground and background colors must differ")

    @property
    def class_label(self) -> int:
        return int(self.shape) * len(FG_COLORS) + FG_COLORS.index(self.fg_color)

    def attrs(self) -> list[int]:
        return [
            int(self.shape), FG_COLORS.index(self.fg_color), BG_COLORS.index(self.bg_color),
            int(self.size), self.cell[0] * 3 + self.cell[1],
        ]

    @classmethod
    def from_attrs(cls, attrs) -> "SceneSpec":
        shape, fg, bg, size, cell = (int(a) for a in attrs)
        return cls(Shape(shape), FG_COLORS[fg], BG_COLORS[bg], Size(size), divmod(cell, 3))


def sample_scene(rng: SplitMix64) -> SceneSpec:
    """Uniform over valid attribute combinations; fg == bg draws are rejected."""
    while True:
        shape = Shape(rng.below(3))
        fg = FG_COLORS[rng.below(len(FG_COLORS))]
        bg = BG_COLORS[rng.below(len(BG_COLORS))]
        size = Size(rng.below(3))
        cell = (rng.below(3), rng.below(3))
        if fg != bg:
            return SceneSpec(shape, fg, bg, size, cell)


def _to_unit(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def shape_mask(scene: SceneSpec) -> np.ndarray:
    """Boolean HxW coverage, sampled at pixel centres with hard edges."""
    r = RADII[scene.size]
    cy, cx = CELL_CENTERS[scene.cell[0]], CELL_CENTERS[scene.cell[1]]
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
    dy, dx = ys - cy, xs - cx
    if scene.shape is Shape.CIRCLE:
        return dx * dx + dy * dy <= r * r
    if scene.shape is Shape.SQUARE:
        half = 0.8 * r
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # upward triangle inscribed in the circle of radius r
    apex_y, base_y = cy - r, cy + 0.5 * r
    half_base = r * np.sqrt(3.0) / 2.0
    t = (dy - (apex_y - cy)) / (base_y - apex_y)
    return (ys >= apex_y) & (ys <= base_y) & (np.abs(dx) <= t * half_base)


def render(scene: SceneSpec) -> torch.Tensor:
    img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    img[:] = _to_unit(RGB[scene.bg_color])[:, None, None]
    mask = shape_mask(scene)
    img[:, mask] = _to_unit(RGB[scene.fg_color])[:, None]
    return torch.from_numpy(img)


def caption_words(scene: SceneSpec, template_id: int) -> list[str]:
    if not 0 <= template_id < len(TEMPLATES):
        raise ValueError(f"template_id must be in [0, {len(TEMPLATES)}), got {template_id}")
    text = TEMPLATES[template_id].format(
        size=scene.size.name.lower(), fg=scene.fg_color, bg=scene.bg_color,
        shape=scene.shape.name.lower(),
    )
    return text.split()


def tokenize(words: list[str]) -> list[int]:
    unknown = [w for w in words if w not in TOKEN]
    if unknown:
        raise KeyError(f"untokenizable word {unknown[0]!r}")
    return [TOKEN[w] for w in words]


def detokenize(tokens) -> list[str]:
    return [VOCAB[int(t)] for t in tokens if int(t) != PAD]


def caption(scene: SceneSpec, template_id: int) -> list[int]:
    return tokenize(caption_words(scene, template_id))


def decode_caption(tokens) -> dict[str, str]:
    """Recover the attributes a caption states, by matching it to its template."""
    words = detokenize(tokens)
    for template in TEMPLATES:
        slots = template.split()
        if len(slots) != len(words):
            continue
        found: dict[str, str] = {}
        for slot, word in zip(slots, words):
            if slot.startswith("{"):
                found[slot[1:-1]] = word
            elif slot != word:
                break
        else:
            return found
    raise ValueError(f"caption matches no template: {' '.join(words)}")


def pad(tokens: list[int]) -> list[int]:
    if len(tokens) > MAX_LEN:
        raise ValueError(f"caption longer than {MAX_LEN} tokens")
    return tokens + [PAD] * (MAX_LEN - len(tokens))


@dataclass
class CaptionedExample:
    scene: SceneSpec
    image: torch.Tensor
    captions: torch.Tensor  # K x MAX_LEN token ids
    lengths: torch.Tensor  # K
    class_label: int


def make_example(scene: SceneSpec) -> CaptionedExample:
    caps = [caption(scene, t) for t in range(NUM_CAPTIONS)]
    return CaptionedExample(
        scene=scene,
        image=render(scene),
        captions=torch.tensor([pad(c) for c in caps], dtype=torch.long),
        lengths=torch.tensor([len(c) for c in caps], dtype=torch.long),
        class_label=scene.class_label,
    )


def split_sizes(n: int) -> tuple[int, int]:
    n_train = (9 * n) // 10
    return n_train, n - n_train


def build_dataset(n: int, seed: int, path) -> Path:
    if n < 1:
        raise ValueError("dataset needs at least one example")
    rng = SplitMix64(seed)
    examples = [make_example(sample_scene(rng)) for _ in range(n)]
    n_train, n_eval = split_sizes(n)
    tensors = {
        "images": torch.stack([e.image for e in examples]),
        "captions": torch.stack([e.captions for e in examples]),
        "lengths": torch.stack([e.lengths for e in examples]),
        "labels": torch.tensor([e.class_label for e in examples]),
        "scene_attrs": torch.tensor([e.scene.attrs() for e in examples]),
    }
    fields = {
        "kind": "shapescap",
        "vocab": " ".join(VOCAB),
        "n": str(n),
        "seed": str(seed),
        "n_train": str(n_train),
        "n_eval": str(n_eval),
    }
    return tensorio.save(path, tensors, fields)


class Dataset:
    """Read-only handle over a loaded ShapesCap file."""

    def __init__(self, tensors: dict[str, torch.Tensor], fields: dict[str, str], source: str = ""):
        missing = {"images", "captions", "lengths", "labels", "scene_attrs"} - set(tensors)
        if missing:
            raise tensorio.ContainerError(f"{source}: not a dataset file, missing {sorted(missing)}")
        if fields.get("vocab", "").split() != VOCAB:
            raise tensorio.ContainerError(f"{source}: vocabulary does not match this build")
        self.images = tensors["images"]
        self.captions = tensors["captions"].long()
        self.lengths = tensors["lengths"].long()
        self.labels = tensors["labels"].long()
        self.scene_attrs = tensors["scene_attrs"].long()
        self.fields = fields
        self.n_train = int(fields["n_train"])
        self.n_eval = int(fields["n_eval"])
        self.source = source

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def train_indices(self) -> torch.Tensor:
        return torch.arange(self.n_train)

    @property
    def eval_indices(self) -> torch.Tensor:
        return torch.arange(self.n_train, self.n_train + self.n_eval)

    def scene(self, i: int) -> SceneSpec:
        return SceneSpec.from_attrs(self.scene_attrs[i].tolist())

    def batch(self, indices) -> dict[str, torch.Tensor]:
        idx = torch.as_tensor(indices, dtype=torch.long)
        return {
            "images": self.images[idx],
            "captions": self.captions[idx],
            "lengths": self.lengths[idx],
            "labels": self.labels[idx],
            "index": idx,
        }


def load_dataset(path) -> Dataset:
    tensors, fields = tensorio.load(path)
    return Dataset(tensors, fields, str(path))
