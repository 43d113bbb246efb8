"""Text and image encoders into a shared 64-d space, DAMSM matching loss and the
re-captioning model, with their pretraining loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import checkpoint
from .losses import interleave, nt_xent, recaption_loss
from .numerics import NonFiniteError, check_finite, log_softmax
from .synthdata import MAX_LEN, NUM_CAPTIONS, START, VOCAB, Dataset

log = logging.getLogger(__name__)

EMBED_DIM = 64
NUM_REGIONS = 64
VOCAB_SIZE = len(VOCAB)


@dataclass
class TextEncoding:
    words: torch.Tensor  # B x D x T, zero at padded steps
    sentence: torch.Tensor  # B x D
    mask: torch.Tensor  # B x T, True for real tokens


@dataclass
class ImageEncoding:
    regions: torch.Tensor  # B x D x R
    globals: torch.Tensor  # B x D


@dataclass(frozen=True)
class DamsmGammas:
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ValueError("DAMSM gammas must be positive")


class TextEncoder(nn.Module):
    """Bi-LSTM over token embeddings; 32 hidden units per direction."""

    def __init__(self, vocab_size: int = VOCAB_SIZE, emb_dim: int = 48, hidden: int = EMBED_DIM // 2):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, emb_dim, padding_idx=0)
        self.rnn = nn.LSTM(emb_dim, hidden, batch_first=True, bidirectional=True)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor) -> TextEncoding:
        if tokens.dim() == 1:
            tokens, lengths = tokens.unsqueeze(0), torch.as_tensor(lengths).reshape(1)
        lengths = torch.as_tensor(lengths, dtype=torch.long).cpu()
        if bool((lengths <= 0).any()):
            raise ValueError("cannot encode an empty caption")
        steps = tokens.shape[1]
        if bool((lengths > steps).any()):
            raise ValueError(f"caption length exceeds the {steps} token steps")
        packed = pack_padded_sequence(self.embed(tokens), lengths, batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=steps)
        sentence = torch.cat([h_n[0], h_n[1]], dim=-1)
        mask = torch.arange(steps)[None, :] < lengths[:, None]
        return TextEncoding(words=out.transpose(1, 2), sentence=sentence, mask=mask)


def _conv_trunk() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, 32, 3, 1, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(32, 64, 4, 2, 1), nn.LeakyReLU(0.2),  # 16x16
        nn.Conv2d(64, 64, 3, 1, 1), nn.LeakyReLU(0.2),
        nn.Conv2d(64, 64, 4, 2, 1), nn.LeakyReLU(0.2),  # 8x8
        nn.Conv2d(64, EMBED_DIM, 3, 1, 1),
    )


class ImageEncoder(nn.Module):
    """Conv stack 32 -> 16 -> 8; the 8x8 map gives 64 regions, its pooled
    activation a global vector through one linear layer."""

    def __init__(self):
        super().__init__()
        self.trunk = _conv_trunk()
        self.to_global = nn.Linear(EMBED_DIM, EMBED_DIM)

    def forward(self, images: torch.Tensor) -> ImageEncoding:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if tuple(images.shape[1:]) != (3, 32, 32):
            raise ValueError(f"expected B x 3 x 32 x 32 images, got {tuple(images.shape)}")
        local = self.trunk(images)
        regions = local.flatten(2)
        pooled = F.leaky_relu(local, 0.2).mean(dim=(2, 3))
        return ImageEncoding(regions=regions, globals=self.to_global(pooled))


def word_region_attention(
    words: torch.Tensor, regions: torch.Tensor, gamma1: float, mask: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Region context for every word.

    ``words`` is (..., D, T), ``regions`` (..., D, R). Similarities are first
    normalised over words for each region, then sharpened by gamma1 and
    normalised over regions for each word. Returns context (..., D, T) and
    attention (..., T, R).
    """
    sim = words.transpose(-1, -2) @ regions  # ... x T x R
    if mask is not None:
        sim = sim.masked_fill(~mask.unsqueeze(-1), -math.inf)
    over_words = torch.softmax(sim, dim=-2)
    if mask is not None:
        over_words = over_words.masked_fill(~mask.unsqueeze(-1), 0.0)
    attn = torch.softmax(gamma1 * over_words, dim=-1)
    context = regions @ attn.transpose(-1, -2)
    return context, attn


def _safe_cos(a: torch.Tensor, b: torch.Tensor, dim: int) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=dim)
    nb = torch.linalg.vector_norm(b, dim=dim)
    return (a * b).sum(dim) / (na * nb).clamp_min(1e-8)


def word_match_scores(text: TextEncoding, image: ImageEncoding, gamma1: float, gamma2: float) -> torch.Tensor:
    """B_img x B_cap matrix of (1/gamma2) log sum_t exp(gamma2 cos(c_t, e_t))."""
    words = text.words.unsqueeze(0)  # 1 x Bc x D x T
    regions = image.regions.unsqueeze(1)  # Bi x 1 x D x R
    mask = text.mask.unsqueeze(0)
    context, _ = word_region_attention(words, regions, gamma1, mask)
    cos = _safe_cos(context, words, dim=-2)  # Bi x Bc x T
    cos = cos.masked_fill(~mask, -math.inf)
    return torch.logsumexp(gamma2 * cos, dim=-1) / gamma2


def damsm_loss(
    text: TextEncoding, image: ImageEncoding, gammas: DamsmGammas = DamsmGammas(), class_ids: torch.Tensor | None = None
) -> torch.Tensor:
    """Word- and sentence-level matching loss; item i of each batch is a pair.

    Each of the four terms (word/sentence x caption-given-image /
    image-given-caption) is a batch-softmax negative log likelihood. With
    ``class_ids``, other items of the same class are dropped from the
    negatives, since their captions may describe the image equally well.
    """
    n = image.globals.shape[0]
    if n == 0:
        raise ValueError("DAMSM needs a non-empty batch")
    if text.sentence.shape[0] != n:
        raise ValueError(f"{n} images vs {text.sentence.shape[0]} captions")
    word = word_match_scores(text, image, gammas.gamma1, gammas.gamma2) * gammas.gamma3
    sent = _safe_cos(image.globals.unsqueeze(1), text.sentence.unsqueeze(0), dim=-1) * gammas.gamma3
    diag = torch.arange(n)
    if class_ids is not None:
        same = class_ids[:, None] == class_ids[None, :]
        same[diag, diag] = False
        word = word.masked_fill(same, _MASKED)
        sent = sent.masked_fill(same, _MASKED)
    loss = 0.0
    for scores in (word, sent):
        loss = loss - log_softmax(scores, dim=1)[diag, diag].mean()
        loss = loss - log_softmax(scores, dim=0)[diag, diag].mean()
    return check_finite(loss, "damsm_loss")


_MASKED = -1e9


class Captioner(nn.Module):
    """Image-conditioned LSTM decoder over the caption vocabulary."""

    def __init__(self, emb_dim: int = 32, hidden: int = 128):
        super().__init__()
        self.image = ImageEncoder()
        self.init_h = nn.Linear(EMBED_DIM, hidden)
        self.init_c = nn.Linear(EMBED_DIM, hidden)
        self.embed = nn.Embedding(VOCAB_SIZE, emb_dim)
        self.rnn = nn.LSTM(emb_dim + EMBED_DIM, hidden, batch_first=True)
        self.head = nn.Linear(hidden, VOCAB_SIZE)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, images: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0)
        if prefix.shape[-1] == 0:
            raise ValueError("caption prefix is empty; it must start with the <s> token")
        g = self.image(images).globals
        h0 = torch.tanh(self.init_h(g)).unsqueeze(0)
        c0 = torch.tanh(self.init_c(g)).unsqueeze(0)
        steps = prefix.shape[1]
        inputs = torch.cat([self.embed(prefix), g.unsqueeze(1).expand(-1, steps, -1)], dim=-1)
        out, _ = self.rnn(inputs, (h0, c0))
        return self.head(out)


def teacher_prefix(captions: torch.Tensor) -> torch.Tensor:
    """<s> followed by all but the last caption step."""
    start = torch.full_like(captions[..., :1], START)
    return torch.cat([start, captions[..., :-1]], dim=-1)


def recaption_logits(captioner: Captioner, image: torch.Tensor, caption_prefix: torch.Tensor) -> torch.Tensor:
    """Per-step vocabulary logits under teacher forcing; L x 40 for one image."""
    single = image.dim() == 3
    logits = captioner(image, caption_prefix)
    return logits[0] if single else logits


@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    tau: float = 0.5
    gammas: DamsmGammas = DamsmGammas()


class Encoders(nn.Module):
    def __init__(self):
        super().__init__()
        self.text = TextEncoder()
        self.image = ImageEncoder()

    def tensors(self) -> dict[str, torch.Tensor]:
        return {**checkpoint.module_tensors(self.text, "txt."), **checkpoint.module_tensors(self.image, "img.")}

    def load_tensors(self, tensors) -> None:
        checkpoint.load_module(self.text, tensors, "txt.")
        checkpoint.load_module(self.image, tensors, "img.")


def load_encoders(path) -> Encoders:
    tensors, fields = checkpoint.load(path)
    if fields.get("kind") != "encoders":
        raise ValueError(f"{path} is not an encoder checkpoint")
    enc = Encoders()
    enc.load_tensors(tensors)
    return enc.eval()


def load_captioner(path) -> Captioner:
    tensors, fields = checkpoint.load(path)
    if fields.get("kind") != "captioner":
        raise ValueError(f"{path} is not a captioner checkpoint")
    cap = Captioner()
    checkpoint.load_module(cap, tensors, "cap.")
    return cap.eval()


def _epoch_batches(indices: torch.Tensor, batch_size: int, gen: torch.Generator):
    order = indices[torch.randperm(len(indices), generator=gen)]
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def pretrain_encoders(dataset: Dataset, config: PretrainConfig, out_path, csv_path=None) -> Encoders:
    """Jointly fit the text and image encoders on DAMSM + NT-Xent over
    (image global, sentence vector) pairs; writes a checkpoint and per-epoch CSV."""
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    enc = Encoders()
    opt = torch.optim.Adam(enc.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    rows = []
    for epoch in range(1, config.epochs + 1):
        sums = [0.0, 0.0]
        count = 0
        for idx in _epoch_batches(dataset.train_indices, config.batch_size, gen):
            b = dataset.batch(idx)
            pick = torch.randint(0, NUM_CAPTIONS, (len(idx),), generator=gen)
            caps = b["captions"][torch.arange(len(idx)), pick]
            lens = b["lengths"][torch.arange(len(idx)), pick]
            text = enc.text(caps, lens)
            image = enc.image(b["images"])
            l_damsm = damsm_loss(text, image, config.gammas, b["labels"])
            l_nce = nt_xent(interleave(image.globals, text.sentence), config.tau)
            loss = l_damsm + l_nce
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"encoder pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums[0] += l_damsm.item()
            sums[1] += l_nce.item()
            count += 1
        sched.step()
        rows.append([epoch, sums[0] / count, sums[1] / count])
        log.info("encoders epoch %d: damsm %.4f nt_xent %.4f", epoch, rows[-1][1], rows[-1][2])
    enc.eval()
    checkpoint.save(out_path, enc.tensors(), {"kind": "encoders", "epochs": str(config.epochs), "seed": str(config.seed)})
    if csv_path is not None:
        _write_csv(Path(csv_path), ["epoch", "damsm", "nt_xent"], rows)
    return enc


def pretrain_captioner(
    dataset: Dataset, out_path, epochs: int = 10, lr: float = 2e-3, batch_size: int = 32, seed: int = 0, csv_path=None
) -> Captioner:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    cap = Captioner()
    opt = torch.optim.Adam(cap.parameters(), lr=lr)
    rows = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in _epoch_batches(dataset.train_indices, batch_size, gen):
            b = dataset.batch(idx)
            # every caption of the scene, so the decoder sees all templates
            images = b["images"].repeat_interleave(NUM_CAPTIONS, dim=0)
            caps = b["captions"].reshape(-1, MAX_LEN)
            lens = b["lengths"].reshape(-1)
            loss = recaption_loss(cap(images, teacher_prefix(caps)), caps, lens)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"captioner pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        rows.append([epoch, total / count])
        log.info("captioner epoch %d: cross-entropy %.4f", epoch, rows[-1][1])
    cap.eval()
    checkpoint.save(out_path, checkpoint.module_tensors(cap, "cap."), {"kind": "captioner", "epochs": str(epochs), "seed": str(seed)})
    if csv_path is not None:
        _write_csv(Path(csv_path), ["epoch", "cross_entropy"], rows)
    return cap


@torch.no_grad()
def encode_captions(enc: Encoders, captions: torch.Tensor, lengths: torch.Tensor, chunk: int = 512) -> TextEncoding:
    """Encode an M x T caption table in chunks."""
    parts = [enc.text(captions[s : s + chunk], lengths[s : s + chunk]) for s in range(0, len(captions), chunk)]
    return TextEncoding(
        words=torch.cat([p.words for p in parts]),
        sentence=torch.cat([p.sentence for p in parts]),
        mask=torch.cat([p.mask for p in parts]),
    )


def retrieval_sanity(enc: Encoders, dataset: Dataset, seed: int = 0) -> float:
    """Fraction of eval scenes whose matched cos(image, caption) beats a
    caption from another scene."""
    gen = torch.Generator().manual_seed(seed)
    idx = dataset.eval_indices
    b = dataset.batch(idx)
    with torch.no_grad():
        g = enc.image(b["images"]).globals
        pick = torch.randint(0, NUM_CAPTIONS, (len(idx),), generator=gen)
        rows = torch.arange(len(idx))
        s = enc.text(b["captions"][rows, pick], b["lengths"][rows, pick]).sentence
        shift = torch.randint(1, len(idx), (len(idx),), generator=gen)
        other = (rows + shift) % len(idx)
        matched = _safe_cos(g, s, -1)
        mismatched = _safe_cos(g, s[other], -1)
    return float((matched > mismatched).float().mean())
