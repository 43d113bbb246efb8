from pathlib import Path

import pytest
import torch

from t2ic import checkpoint
from t2ic.encoders import PretrainConfig, pretrain_captioner, pretrain_encoders
from t2ic.metrics import Classifier
from t2ic.synthdata import build_dataset, load_dataset


@pytest.fixture(scope="session")
def tiny(tmp_path_factory) -> dict[str, Path]:
    """Small but complete artifact set for plumbing tests (not for quality checks)."""
    root = tmp_path_factory.mktemp("tiny")
    data = build_dataset(300, 0, root / "data.t2ic")
    ds = load_dataset(data)
    pretrain_encoders(ds, PretrainConfig(epochs=1, batch_size=16), root / "enc.t2ic")
    pretrain_captioner(ds, root / "cap.t2ic", epochs=1)
    # an untrained classifier flagged as certified: lets the metric plumbing run
    # without the minutes of training a genuinely certified one needs
    torch.manual_seed(0)
    clf = Classifier()
    checkpoint.save(root / "cls.t2ic", checkpoint.module_tensors(clf, "cls."),
                    {"kind": "classifier", "eval_accuracy": "nan", "certified": "true", "seed": "0"})
    return {"root": root, "data": data, "encoders": root / "enc.t2ic", "captioner": root / "cap.t2ic",
            "classifier": root / "cls.t2ic"}


def write_config(path: Path, tiny: dict, **overrides) -> Path:
    values = {
        "data": tiny["data"], "out": path.parent / "run", "encoders": tiny["encoders"],
        "captioner": tiny["captioner"], "classifier": tiny["classifier"], "seed": 0,
        "epochs": 1, "batch_size": 4, "max_steps": 2, "eval_n": 20,
    }
    values.update(overrides)
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return path
