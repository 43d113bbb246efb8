"""Qualitative sample grids written as binary PPM."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..encoders import load_encoders
from ..synthdata import MAX_LEN, TOKEN, pad
from .evaluation import generate_from_sentences

SAMPLES_PER_ROW = 8
TILE = 32
SEP = 2


class CaptionFileError(ValueError):
    pass


def read_captions(path) -> tuple[list[list[int]], list[str]]:
    tokens, lines = [], []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        words = raw.lower().split()
        if not words:
            continue
        for w in words:
            if w not in TOKEN:
                raise CaptionFileError(f"{path}:{lineno}: untokenizable word {w!r}")
        if len(words) > MAX_LEN:
            raise CaptionFileError(f"{path}:{lineno}: caption longer than {MAX_LEN} tokens")
        tokens.append([TOKEN[w] for w in words])
        lines.append(raw.strip())
    if not tokens:
        raise CaptionFileError(f"{path}: no captions")
    return tokens, lines


def grid_size(rows: int) -> tuple[int, int]:
    width = SAMPLES_PER_ROW * TILE + (SAMPLES_PER_ROW - 1) * SEP
    height = rows * TILE + (rows - 1) * SEP
    return width, height


def tile_images(images: torch.Tensor, rows: int) -> np.ndarray:
    """rows*8 images in [-1, 1] -> H x W x 3 uint8 canvas with white separators."""
    width, height = grid_size(rows)
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    pixels = ((images.detach().double().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    pixels = pixels.permute(0, 2, 3, 1).numpy()
    for k, tile in enumerate(pixels):
        r, c = divmod(k, SAMPLES_PER_ROW)
        y, x = r * (TILE + SEP), c * (TILE + SEP)
        canvas[y : y + TILE, x : x + TILE] = tile
    return canvas


def write_ppm(path, canvas: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = canvas.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + canvas.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = data.split(b"\n", 3)
    if header[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(h, w, 3)


def generate_grid(checkpoint_path, captions_path, out_path, seed: int = 0) -> Path:
    from .training import load_gan

    tokens, _ = read_captions(captions_path)
    gen, _, fields = load_gan(checkpoint_path)
    enc = load_encoders(fields["encoders"])
    caps = torch.tensor([pad(t) for t in tokens], dtype=torch.long)
    lens = torch.tensor([len(t) for t in tokens], dtype=torch.long)
    with torch.no_grad():
        sentences = enc.text(caps, lens).sentence
    # row r reuses the same 8 latents so rows differ only by caption
    per_row = []
    for r in range(len(tokens)):
        per_row.append(generate_from_sentences(gen, sentences[r : r + 1].expand(SAMPLES_PER_ROW, -1), seed))
    return write_ppm(out_path, tile_images(torch.cat(per_row), len(tokens)))
