"""Checkpoint archive: a zip of little-endian ``.npy`` arrays plus a JSON metadata record.

Layout::

    meta.json              {"format_version", "kind", "config", "iteration", ...}
    param/<name>.npy       model (or attention-only) parameters
    optim/<name>/<k>.npy   Adam state per parameter, when saved for resuming

Zip entries carry a fixed timestamp, so identical content gives identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError
from .network import DeblurNet, NetworkConfig

FORMAT_VERSION = 1
BYTE_ORDER = "little"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    optim: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.meta["kind"]

    @property
    def network_config(self) -> NetworkConfig:
        return NetworkConfig(**self.meta["config"])


def _to_le(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(
    path: str | Path,
    module: nn.Module,
    config: NetworkConfig,
    *,
    kind: str = "model",
    iteration: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``module``'s parameters (and optionally Adam state) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "byte_order": BYTE_ORDER,
        "config": config.to_dict(),
        "iteration": int(iteration),
    }
    meta.update(extra or {})
    named = dict(module.named_parameters())
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(named):
            _write_entry(zf, f"param/{name}.npy", _npy_bytes(_to_le(named[name])))
        if optimizer is not None:
            for name in sorted(named):
                state = optimizer.state.get(named[name], {})
                for key in sorted(state):
                    value = state[key]
                    if not torch.is_tensor(value):
                        value = torch.tensor(value)
                    _write_entry(zf, f"optim/{name}/{key}.npy", _npy_bytes(_to_le(value)))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            params: dict[str, np.ndarray] = {}
            optim: dict[str, dict[str, np.ndarray]] = {}
            for entry in zf.namelist():
                if not entry.endswith(".npy"):
                    continue
                arr = np.lib.format.read_array(io.BytesIO(zf.read(entry)), allow_pickle=False)
                stem = entry[: -len(".npy")]
                if stem.startswith("param/"):
                    params[stem[len("param/"):]] = arr
                elif stem.startswith("optim/"):
                    name, key = stem[len("optim/"):].rsplit("/", 1)
                    optim.setdefault(name, {})[key] = arr
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {meta.get('format_version')!r}")
    if meta.get("byte_order") != BYTE_ORDER:
        raise CheckpointError(f"{path}: unsupported byte order {meta.get('byte_order')!r}")
    return Checkpoint(meta, params, optim)


def apply_parameters(module: nn.Module, params: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy arrays into ``module``'s parameters, checking names and shapes."""
    named = dict(module.named_parameters())
    missing = sorted(set(named) - set(params))
    unexpected = sorted(set(params) - set(named))
    if strict and (missing or unexpected):
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    with torch.no_grad():
        for name, p in named.items():
            if name not in params:
                continue
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))))


def apply_optimizer_state(optimizer: torch.optim.Optimizer, module: nn.Module,
                          optim: dict[str, dict[str, np.ndarray]]) -> None:
    for name, p in module.named_parameters():
        if name in optim:
            optimizer.state[p] = {
                k: torch.from_numpy(v.astype(v.dtype.newbyteorder("="))).clone()
                for k, v in optim[name].items()
            }


def load_model(path: str | Path, expected: NetworkConfig | None = None) -> tuple[DeblurNet, Checkpoint]:
    """Rebuild the model stored in ``path``.

    If ``expected`` is given it must equal the stored configuration.
    """
    ckpt = load_checkpoint(path)
    if ckpt.kind != "model":
        raise CheckpointError(f"{path} holds a {ckpt.kind!r} checkpoint, not a full model")
    try:
        config = ckpt.network_config
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid stored config: {exc}") from exc
    if expected is not None and expected.to_dict() != config.to_dict():
        diff = {k: (v, config.to_dict().get(k)) for k, v in expected.to_dict().items()
                if config.to_dict().get(k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, stored): {diff}")
    model = DeblurNet(config)
    apply_parameters(model, ckpt.params)
    return model, ckpt
