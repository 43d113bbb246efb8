"""GAN training loop with the full contrastive loss stack."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .. import checkpoint
from ..encoders import (DamsmGammas, Encoders, ImageEncoding, TextEncoding, damsm_loss, encode_captions,
                        load_captioner, load_encoders, teacher_prefix)
from ..gan import Discriminator, Generator, GeneratorConfig
from ..losses import (adversarial_d_loss, adversarial_g_loss, f2f_loss, f2r_loss,
                      recaption_loss, total_loss)
from ..metrics import MetricReport, load_classifier
from ..numerics import NonFiniteError
from ..synthdata import MAX_LEN, NUM_CAPTIONS, load_dataset
from .config import RunConfig
from .evaluation import EvalContext, evaluate_generator

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ["step", "epoch", "L_G", "L_D", "L_DAMSM", "L_CR", "L_CF", "L_CP", "L"]
METRIC_COLUMNS = ["step", "toy_fid", "is_mean", "is_std", "r_precision", "n_samples", "seed"]


class TrainingAborted(RuntimeError):
    pass


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


class CsvLog:
    """Append-only CSV; rows are buffered and flushed on demand."""

    def __init__(self, path: Path, columns: list[str]):
        self.path, self.columns = path, columns
        self.rows: list[list] = []
        self._pending: list[list] = []
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(columns)

    def append(self, row: list) -> None:
        self.rows.append(row)
        self._pending.append(row)

    def flush(self) -> None:
        if not self._pending:
            return
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for row in self._pending:
                w.writerow([_fmt(v) for v in row])
        self._pending.clear()


@dataclass
class TrainResult:
    checkpoint: Path
    ledger: list[list]
    reports: list[tuple[int, MetricReport]] = field(default_factory=list)


def named_params(module: torch.nn.Module) -> dict[int, str]:
    return {id(p): n for n, p in module.named_parameters()}


def gan_tensors(gen: Generator, disc: Discriminator, opt_g, opt_d) -> dict[str, torch.Tensor]:
    gen_state = checkpoint.module_tensors(gen, "")
    out = {f"gen.{k}": v for k, v in gen_state.items() if not k.startswith("mapping.")}
    out.update({f"map.{k[len('mapping.'):]}": v for k, v in gen_state.items() if k.startswith("mapping.")})
    out.update(checkpoint.module_tensors(disc, "disc."))
    if opt_g is not None:
        out.update(checkpoint.optimizer_tensors(opt_g, named_params(gen), "opt_g."))
        out.update(checkpoint.optimizer_tensors(opt_d, named_params(disc), "opt_d."))
    return out


def load_gan(path) -> tuple[Generator, Discriminator, dict[str, str]]:
    tensors, fields = checkpoint.load(path)
    if fields.get("kind") != "gan":
        raise ValueError(f"{path} is not a GAN checkpoint")
    gen = Generator(GeneratorConfig(block_type=fields["block_type"]))
    remapped = {("gen.mapping." + k[4:] if k.startswith("map.") else k): v for k, v in tensors.items()}
    checkpoint.load_module(gen, remapped, "gen.")
    disc = Discriminator()
    checkpoint.load_module(disc, tensors, "disc.")
    return gen.eval(), disc.eval(), fields


def _freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _subset(text: TextEncoding, idx: torch.Tensor) -> TextEncoding:
    return TextEncoding(words=text.words[idx], sentence=text.sentence[idx], mask=text.mask[idx])


def train(cfg: RunConfig) -> TrainResult:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    torch.manual_seed(cfg.seed)
    data_gen = torch.Generator().manual_seed(cfg.seed + 1)
    dataset = load_dataset(cfg.data)
    enc = _freeze(load_encoders(cfg.encoders))
    captioner = _freeze(load_captioner(cfg.captioner))
    classifier = load_classifier(cfg.classifier)
    gammas = DamsmGammas()
    weights = cfg.weights

    train_idx = dataset.train_indices
    n_train = len(train_idx)
    if n_train < cfg.batch_size:
        raise ValueError(f"{n_train} training scenes is fewer than one batch of {cfg.batch_size}")
    captions = dataset.captions[train_idx]  # n x K x T
    lengths = dataset.lengths[train_idx]
    labels = dataset.labels[train_idx]
    text_all = encode_captions(enc, captions.reshape(-1, MAX_LEN), lengths.reshape(-1))
    with torch.no_grad():
        real_images = dataset.images[train_idx]
        real_globals = torch.cat([enc.image(real_images[s : s + 256]).globals for s in range(0, n_train, 256)])

    gen = Generator(GeneratorConfig(block_type=cfg.block_type)).to(memory_format=torch.channels_last)
    disc = Discriminator().to(memory_format=torch.channels_last)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2))

    eval_ctx = EvalContext(dataset, enc, classifier)
    ledger = CsvLog(out / "ledger.csv", LEDGER_COLUMNS)
    metrics = CsvLog(out / "metrics.csv", METRIC_COLUMNS)
    timing = CsvLog(out / "timing.csv", ["step", "epoch", "wall_seconds"])
    result = TrainResult(checkpoint=out / "final.t2ic", ledger=ledger.rows)
    started = time.perf_counter()

    def fields(step: int, epoch: int) -> dict[str, str]:
        return {"kind": "gan", "block_type": cfg.block_type, "step": str(step), "epoch": str(epoch),
                "seed": str(cfg.seed), "data": cfg.data, "encoders": cfg.encoders,
                "captioner": cfg.captioner, "classifier": cfg.classifier}

    def save(path: Path, step: int, epoch: int) -> None:
        tensors = gan_tensors(gen, disc, opt_g, opt_d)
        tensors["rng.torch"] = checkpoint.rng_tensor(torch.get_rng_state())
        tensors["rng.data"] = checkpoint.rng_tensor(data_gen.get_state())
        checkpoint.save(path, tensors, fields(step, epoch))

    def run_eval(step: int) -> None:
        report = evaluate_generator(gen, eval_ctx, n=cfg.eval_n, seed=cfg.seed)
        gen.train()
        result.reports.append((step, report))
        metrics.append([step, report.fid, report.is_mean, report.is_std, report.r_precision,
                        report.n_samples, report.seed])
        metrics.flush()
        ledger.flush()
        timing.append([step, epoch, round(time.perf_counter() - started, 3)])
        timing.flush()
        log.info("step %d: toy-FID %.3f IS %.3f R-prec %.3f", step, report.fid, report.is_mean, report.r_precision)

    def abort(message: str):
        ledger.flush()
        metrics.flush()
        raise TrainingAborted(message)

    step, epoch = 0, 0
    run_eval(0)
    steps_per_epoch = n_train // cfg.batch_size
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(n_train, generator=data_gen)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            pair = torch.rand(cfg.batch_size, NUM_CAPTIONS, generator=data_gen).argsort(dim=1)[:, :2]
            z = torch.randn(cfg.batch_size, gen.cfg.z_dim, generator=data_gen)
            flat_a = idx * NUM_CAPTIONS + pair[:, 0]
            flat_b = idx * NUM_CAPTIONS + pair[:, 1]
            text_a = _subset(text_all, flat_a)
            sent_b = text_all.sentence[flat_b]
            real = real_images[idx].contiguous(memory_format=torch.channels_last)

            fakes = gen(torch.cat([z, z]), torch.cat([text_a.sentence, sent_b]))
            fake_a, fake_b = fakes[: cfg.batch_size], fakes[cfg.batch_size :]

            h_real = disc.features(real)
            s_real = disc.score(h_real, text_a.sentence)
            s_mis = disc.score(h_real, text_a.sentence.roll(1, dims=0))
            s_fake = disc(fake_a.detach(), text_a.sentence)
            l_d = adversarial_d_loss(s_real, s_fake, s_mis)
            if not math.isfinite(l_d.item()):
                abort(f"step {step + 1}: discriminator loss L_D is not finite")
            opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            opt_d.step()

            l_g = adversarial_g_loss(disc(fake_a, text_a.sentence))
            image = enc.image(fakes)
            glob_a, glob_b = image.globals[: cfg.batch_size], image.globals[cfg.batch_size :]
            l_damsm = damsm_loss(text_a, ImageEncoding(image.regions[: cfg.batch_size], glob_a), gammas, labels[idx])
            if cfg.damsm_both:
                text_b = _subset(text_all, flat_b)
                l_damsm = 0.5 * (l_damsm + damsm_loss(text_b, ImageEncoding(image.regions[cfg.batch_size :], glob_b), gammas,
                                                    labels[idx]))
            l_cr = f2r_loss(glob_a, real_globals[idx], weights.tau)
            l_cf = f2f_loss(glob_a, glob_b, weights.tau)
            cap_a = captions[idx, pair[:, 0]]
            l_cp = recaption_loss(captioner(fake_a, teacher_prefix(cap_a)), cap_a, lengths[idx, pair[:, 0]])
            try:
                loss = total_loss(l_g, l_damsm, l_cr, l_cf, l_cp, weights)
            except NonFiniteError as exc:
                abort(f"step {step + 1}: {exc}")
            opt_g.zero_grad(set_to_none=True)
            loss.backward()
            opt_g.step()

            step += 1
            parts = [v.item() for v in (l_g, l_damsm, l_cr, l_cf, l_cp)]
            ledger.append([step, epoch, parts[0], l_d.item(), *parts[1:], total_loss(*parts, weights)])
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if done or epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            run_eval(step)
            save(out / f"ckpt_epoch{epoch:03d}.t2ic", step, epoch)
        if done:
            break
    save(result.checkpoint, step, epoch)
    ledger.flush()
    return result

