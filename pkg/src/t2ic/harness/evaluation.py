"""Metric evaluation of a generator on the held-out split."""

from __future__ import annotations

import logging
import warnings

import torch

from .. import tensorio
from ..encoders import Encoders, _safe_cos, encode_captions, load_encoders
from ..gan import Generator
from ..metrics import Classifier, MetricReport, fid, inception_score, load_classifier, r_precision
from ..synthdata import MAX_LEN, NUM_CAPTIONS, Dataset, load_dataset

log = logging.getLogger(__name__)

MAX_EVAL_SAMPLES = 2000
GEN_CHUNK = 100


def index_noise(seed: int, index: int, dim: int) -> torch.Tensor:
    """Latent for evaluation sample ``index``; independent of batching order."""
    g = torch.Generator().manual_seed(seed * 1_000_003 + index)
    return torch.randn(dim, generator=g)


class EvalContext:
    """Frozen per-dataset quantities reused across evaluations."""

    def __init__(self, dataset: Dataset, enc: Encoders, classifier: Classifier):
        self.dataset, self.enc, self.classifier = dataset, enc, classifier
        idx = dataset.eval_indices
        self.scene_of = idx.repeat_interleave(NUM_CAPTIONS)
        self.captions = dataset.captions[idx].reshape(-1, MAX_LEN)
        self.lengths = dataset.lengths[idx].reshape(-1)
        self.sentences = encode_captions(enc, self.captions, self.lengths).sentence
        with torch.no_grad():
            self.real_globals = enc.image(dataset.images[idx]).globals

    def __len__(self) -> int:
        return len(self.scene_of)


@torch.no_grad()
def generate_from_sentences(gen: Generator, sentences: torch.Tensor, seed: int, offset: int = 0) -> torch.Tensor:
    gen.eval()
    z = torch.stack([index_noise(seed, offset + i, gen.cfg.z_dim) for i in range(len(sentences))])
    parts = []
    for s in range(0, len(sentences), GEN_CHUNK):
        noise_gen = torch.Generator().manual_seed(seed * 7919 + offset + s)
        parts.append(gen(z[s : s + GEN_CHUNK], sentences[s : s + GEN_CHUNK], noise_gen))
    return torch.cat(parts).contiguous()


@torch.no_grad()
def evaluate_generator(gen: Generator, ctx: EvalContext, n: int, seed: int, dump_path=None) -> MetricReport:
    n = min(n, len(ctx), MAX_EVAL_SAMPLES)
    order = torch.randperm(len(ctx), generator=torch.Generator().manual_seed(seed))[:n]
    fakes = generate_from_sentences(gen, ctx.sentences[order], seed)
    fake_globals = torch.cat([ctx.enc.image(fakes[s : s + 256]).globals for s in range(0, n, 256)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        toy_fid = fid(ctx.real_globals, fake_globals)
    probs = ctx.classifier.probs(fakes)
    is_mean, is_std = inception_score(probs)
    rp = r_precision(
        fake_globals, ctx.sentences[order], ctx.sentences,
        ctx.scene_of[order], ctx.scene_of, seed=seed,
        query_tokens=ctx.captions[order], pool_tokens=ctx.captions,
    )
    if dump_path is not None:
        tensorio.save(dump_path, {"feats.real": ctx.real_globals, "feats.fake": fake_globals, "probs.fake": probs},
                      {"kind": "features", "n_samples": str(n), "seed": str(seed)})
    return MetricReport(fid=toy_fid, is_mean=is_mean, is_std=is_std, r_precision=rp, n_samples=n, seed=seed)


def evaluate(checkpoint_path, data_path=None, n: int = 1000, seed: int = 0, dump_path=None) -> MetricReport:
    from .training import load_gan

    gen, _, fields = load_gan(checkpoint_path)
    dataset = load_dataset(data_path or fields["data"])
    enc = load_encoders(fields["encoders"])
    classifier = load_classifier(fields["classifier"])
    return evaluate_generator(gen, EvalContext(dataset, enc, classifier), n, seed, dump_path)


@torch.no_grad()
def paraphrase_consistency(gen: Generator, ctx: EvalContext, seed: int) -> tuple[float, float]:
    """Mean cos(image global) between fakes from two captions of the same scene
    with shared z, and the same statistic for captions of different scenes."""
    gen.eval()
    gen_pick = torch.Generator().manual_seed(seed)
    n_scenes = len(ctx) // NUM_CAPTIONS
    pair = torch.rand(n_scenes, NUM_CAPTIONS, generator=gen_pick).argsort(dim=1)[:, :2]
    base = torch.arange(n_scenes) * NUM_CAPTIONS
    other = (torch.arange(n_scenes) + 1) % n_scenes * NUM_CAPTIONS + pair[:, 1]
    z = torch.stack([index_noise(seed, i, gen.cfg.z_dim) for i in range(n_scenes)])

    def encode(flat_idx):
        noise = torch.Generator().manual_seed(seed)
        img = gen(z, ctx.sentences[flat_idx], noise)
        return ctx.enc.image(img).globals

    g_a = encode(base + pair[:, 0])
    g_b = encode(base + pair[:, 1])
    g_o = encode(other)
    return float(_safe_cos(g_a, g_b, -1).mean()), float(_safe_cos(g_a, g_o, -1).mean())
