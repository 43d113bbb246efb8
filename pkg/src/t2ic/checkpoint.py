"""Named-parameter snapshots of modules and Adam optimizers in the T2IC container."""

from __future__ import annotations

from typing import Mapping

import torch
from torch import nn

from . import tensorio


def module_tensors(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}{name}": t.detach() for name, t in module.state_dict().items()}


def load_module(module: nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str) -> None:
    own = module.state_dict()
    state = {}
    for name, ref in own.items():
        key = prefix + name
        if key not in tensors:
            raise KeyError(f"checkpoint is missing tensor {key!r}")
        value = tensors[key]
        if tuple(value.shape) != tuple(ref.shape):
            raise ValueError(f"{key}: shape {tuple(value.shape)} != expected {tuple(ref.shape)}")
        state[name] = value.to(ref.dtype)
    module.load_state_dict(state)


def optimizer_tensors(opt: torch.optim.Optimizer, names: Mapping[int, str], prefix: str) -> dict[str, torch.Tensor]:
    """Adam moments keyed by parameter name; ``names`` maps id(param) -> name."""
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            out[f"{prefix}{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
            out[f"{prefix}{name}.exp_avg"] = st["exp_avg"].detach()
            out[f"{prefix}{name}.exp_avg_sq"] = st["exp_avg_sq"].detach()
    return out


def load_optimizer(opt: torch.optim.Optimizer, names: Mapping[int, str], tensors, prefix: str) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            key = f"{prefix}{names[id(p)]}"
            if f"{key}.step" not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}.step"][0])),
                "exp_avg": tensors[f"{key}.exp_avg"].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].to(p.dtype).clone(),
            }


def rng_tensor(state: torch.Tensor) -> torch.Tensor:
    """Byte-valued RNG state as a float tensor (exact for 0..255)."""
    return state.to(torch.float32)


def rng_state(t: torch.Tensor) -> torch.Tensor:
    return t.to(torch.uint8)


def save(path, tensors: Mapping[str, torch.Tensor], fields: Mapping[str, str] | None = None):
    return tensorio.save(path, tensors, fields)


def load(path):
    return tensorio.load(path)
