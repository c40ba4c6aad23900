"""Single-file checkpoint archive.

Layout inside the zip:

    config.json           every ModelConfig field
    meta.json             epoch, val_loss and free-form run metadata
    params/<path>.npy     one blob per state-dict entry, e.g.
                          params/encoder.stages.0.block1.conv1.weight.npy
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError
from .model import ChangeNet, ModelConfig

FORMAT_VERSION = 1
# fixed timestamp so identical states give identical archives
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, torch.Tensor]
    epoch: int
    val_loss: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: ChangeNet, epoch: int, val_loss: float, **meta) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.cfg, state, int(epoch), float(val_loss), dict(meta))

    def build_model(self) -> ChangeNet:
        model = ChangeNet(self.config)
        model.load_state_dict(self.state)
        model.eval()
        return model


def _write(zf: zipfile.ZipFile, name: str, data: bytes):
    zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "epoch": ckpt.epoch, "val_loss": ckpt.val_loss}
    meta.update(ckpt.meta)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _write(zf, "config.json", json.dumps(ckpt.config.to_dict(), indent=2, sort_keys=True).encode())
        _write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, tensor in ckpt.state.items():
            buf = io.BytesIO()
            np.save(buf, tensor.cpu().numpy(), allow_pickle=False)
            _write(zf, f"params/{name}.npy", buf.getvalue())
    return path


def read_config(path) -> ModelConfig:
    with zipfile.ZipFile(path) as zf:
        raw = json.loads(zf.read("config.json"))
    known = set(ModelConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"{path}: unknown config fields {sorted(unknown)}")
    return ModelConfig(**raw)


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    """Load an archive; with ``expect`` given, the stored config must match it
    (ignoring the seed) before any parameter blob is read."""
    path = Path(path)
    cfg = read_config(path).validate()
    if expect is not None:
        a, b = cfg.to_dict(), expect.to_dict()
        a.pop("seed"), b.pop("seed")
        diff = sorted(k for k in a if a[k] != b[k])
        if diff:
            raise ConfigurationError(f"{path}: checkpoint config differs in {diff}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported format {meta.get('format_version')}")
        state = {}
        for info in zf.infolist():
            if info.filename.startswith("params/"):
                name = info.filename[len("params/") : -len(".npy")]
                state[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(info)), allow_pickle=False))
    expected = set(ChangeNet(cfg).state_dict())
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise ConfigurationError(f"{path}: parameter mismatch, missing {missing[:5]}, extra {extra[:5]}")
    epoch, val_loss = meta.pop("epoch"), meta.pop("val_loss")
    meta.pop("format_version")
    return Checkpoint(cfg, state, epoch, val_loss, meta)
