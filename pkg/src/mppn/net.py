"""MPPN network: shared per-perspective CNN, concatenation pooling, FC trunk, task heads.

Layers are described by :class:`LayerSpec` lists so the topology can be
stored in a checkpoint and rebuilt exactly.  Autodiff is torch's; everything
runs in float64.

Checkpoint byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MPPNCKPT"
    8       2     format version (uint16)
    10      4     metadata length M (uint32)
    14      M     metadata, UTF-8 JSON with sorted keys: kind, perspectives, n,
                  layer specs, heads, encoder state (vocabularies, scaling),
                  and the ordered list of parameter names and shapes
    14+M    8*K   float64 parameter values, concatenated in metadata order
    end-32  32    SHA-256 over every preceding byte
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .gafenc import CaseEncoder, gaf_stack

torch.set_default_dtype(torch.float64)

MAGIC = b"MPPNCKPT"
FORMAT_VERSION = 1
LAYER_KINDS = ("conv2d", "maxpool2d", "dense", "dropout", "relu", "flatten", "softmax")


class CheckpointError(ValueError):
    pass


def set_threads() -> int:
    """Apply ``MPPN_NUM_THREADS`` (default 1, the deterministic reference path)."""
    n = int(os.environ.get("MPPN_NUM_THREADS", "1"))
    torch.set_num_threads(n)
    return n


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def output_shape(specs: Sequence[LayerSpec], shape: tuple) -> tuple:
    """Propagate a per-sample shape (C, H, W) or (D,) through ``specs``."""
    for s in specs:
        p = s.params
        if s.kind == "conv2d":
            c, h, w = shape
            if c != p["in"]:
                raise ValueError(f"conv2d expects {p['in']} channels, got {c}")
            k, pad = p["kernel"], p.get("padding", 0)
            shape = (p["out"], h + 2 * pad - k + 1, w + 2 * pad - k + 1)
        elif s.kind == "maxpool2d":
            c, h, w = shape
            k = p["kernel"]
            shape = (c, -(-h // k), -(-w // k))  # ceil mode
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "dense":
            if shape != (p["in"],):
                raise ValueError(f"dense expects width {p['in']}, got {shape}")
            shape = (p["out"],)
    return shape


def build_layers(specs: Sequence[LayerSpec]) -> nn.Sequential:
    mods = []
    for s in specs:
        p = s.params
        if s.kind == "conv2d":
            mods.append(nn.Conv2d(p["in"], p["out"], p["kernel"], padding=p.get("padding", 0)))
        elif s.kind == "maxpool2d":
            mods.append(nn.MaxPool2d(p["kernel"], ceil_mode=True))
        elif s.kind == "dense":
            mods.append(nn.Linear(p["in"], p["out"]))
        elif s.kind == "dropout":
            mods.append(nn.Dropout(p["rate"]))
        elif s.kind == "relu":
            mods.append(nn.ReLU())
        elif s.kind == "flatten":
            mods.append(nn.Flatten())
        elif s.kind == "softmax":
            mods.append(nn.Softmax(dim=-1))
    return nn.Sequential(*mods)


def cnn1_specs(n: int, channels: Sequence[int] = (16, 32, 64, 128), feature_dim: int = 128,
               dropout: float = 0.2) -> list[LayerSpec]:
    specs, c_in = [], 1
    for c in channels:
        specs += [LayerSpec("conv2d", {"in": c_in, "out": c, "kernel": 3, "padding": 1}),
                  LayerSpec("relu"), LayerSpec("maxpool2d", {"kernel": 2})]
        c_in = c
    specs.append(LayerSpec("dropout", {"rate": dropout}))
    specs.append(LayerSpec("flatten"))
    flat = output_shape(specs, (1, n, n))[0]
    specs.append(LayerSpec("dense", {"in": flat, "out": feature_dim}))
    return specs


def nn2_specs(in_width: int, hidden: int = 512, fv_dim: int = 256, dropout: float = 0.2) -> list[LayerSpec]:
    return [LayerSpec("dense", {"in": in_width, "out": hidden}), LayerSpec("relu"),
            LayerSpec("dropout", {"rate": dropout}), LayerSpec("dense", {"in": hidden, "out": fv_dim})]


def head_specs(in_width: int, out: int, hidden: int = 128) -> list[LayerSpec]:
    return [LayerSpec("dense", {"in": in_width, "out": hidden}), LayerSpec("relu"),
            LayerSpec("dense", {"in": hidden, "out": out})]


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform weights (He bound), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = (6.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.zero_()


@dataclass
class HeadDef:
    kind: str  # "categorical" or "regression"
    out: int
    task: str = ""
    attribute: str = ""
    hidden: int = 128


def pool_concat(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate per-perspective feature vectors (last axis) in perspective order."""
    if not features:
        raise ValueError("nothing to pool")
    widths = {f.shape[-1] for f in features}
    if len(widths) != 1:
        raise ValueError(f"perspective feature widths differ: {sorted(widths)}")
    return torch.cat(list(features), dim=-1)


class MppnModel(nn.Module):
    def __init__(self, perspectives: Sequence[str], n: int, cnn1: Sequence[LayerSpec],
                 nn2: Sequence[LayerSpec], heads: dict[str, HeadDef] | None = None,
                 encoder: CaseEncoder | None = None, seed: int = 0):
        super().__init__()
        self.perspectives = list(perspectives)
        self.n = n
        self.cnn1_specs = list(cnn1)
        self.nn2_specs = list(nn2)
        self.encoder = encoder
        self.seed = seed
        self.feature_dim = output_shape(self.cnn1_specs, (1, n, n))[0]
        nn2_in = len(self.perspectives) * self.feature_dim
        self.fv_dim = output_shape(self.nn2_specs, (nn2_in,))[0]
        self.generator = torch.Generator().manual_seed(seed)
        self.cnn1 = build_layers(self.cnn1_specs)
        self.nn2 = build_layers(self.nn2_specs)
        init_weights(self.cnn1, self.generator)
        init_weights(self.nn2, self.generator)
        self.heads = nn.ModuleDict()
        self.head_defs: dict[str, HeadDef] = {}
        for name, hd in (heads or {}).items():
            self.add_head(name, hd)

    @classmethod
    def build(cls, perspectives: Sequence[str], n: int = 64, *, channels=(16, 32, 64, 128),
              feature_dim: int = 128, hidden: int = 512, fv_dim: int = 256, dropout: float = 0.2,
              encoder: CaseEncoder | None = None, seed: int = 0) -> "MppnModel":
        c1 = cnn1_specs(n, channels, feature_dim, dropout)
        n2 = nn2_specs(len(perspectives) * feature_dim, hidden, fv_dim, dropout)
        return cls(perspectives, n, c1, n2, encoder=encoder, seed=seed)

    def add_head(self, name: str, hd: HeadDef) -> None:
        if hd.kind not in ("categorical", "regression"):
            raise ValueError(f"unknown head kind {hd.kind!r}")
        layers = build_layers(head_specs(self.fv_dim, hd.out, hd.hidden))
        init_weights(layers, self.generator)
        self.heads[_key(name)] = layers
        self.head_defs[name] = hd

    def add_task_head(self, task: str, attribute: str) -> str:
        """Add head ``<task>:<attribute>`` sized from the encoder; returns its name."""
        if self.encoder is None:
            raise ValueError("model has no fitted encoder")
        name = f"{task}:{attribute}"
        if self.encoder.kinds[attribute] == "categorical":
            hd = HeadDef("categorical", self.encoder.n_classes(attribute), task, attribute)
        else:
            hd = HeadDef("regression", 1, task, attribute)
        self.add_head(name, hd)
        return name

    def drop_heads(self) -> None:
        self.heads = nn.ModuleDict()
        self.head_defs = {}

    def cnn1_features(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, n, n)`` or ``(B, 1, n, n)`` images -> ``(B, feature_dim)``."""
        if images.dim() == 3:
            images = images.unsqueeze(1)
        return self.cnn1(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, P, n, n)`` -> FV ``(B, fv_dim)``."""
        B, P = images.shape[:2]
        if P != len(self.perspectives) or images.shape[2:] != (self.n, self.n):
            raise ValueError(f"expected (B, {len(self.perspectives)}, {self.n}, {self.n}) images, "
                             f"got {tuple(images.shape)}")
        feats = self.cnn1_features(images.reshape(B * P, 1, self.n, self.n)).reshape(B, P, -1)
        pooled = pool_concat(feats.unbind(1))
        return self.nn2(pooled)

    def head(self, fv: torch.Tensor, name: str) -> torch.Tensor:
        """Raw head output: logits for categorical heads, ``(B,)`` scalars for regression."""
        if name not in self.head_defs:
            raise KeyError(f"unknown head {name!r}")
        out = self.heads[_key(name)](fv)
        if self.head_defs[name].kind == "regression":
            out = out.squeeze(-1)
        return out

    def describe(self) -> dict:
        return {
            "perspectives": self.perspectives,
            "n": self.n,
            "seed": self.seed,
            "cnn1": [asdict(s) for s in self.cnn1_specs],
            "nn2": [asdict(s) for s in self.nn2_specs],
            "heads": {k: asdict(v) for k, v in self.head_defs.items()},
            "encoder": self.encoder.to_dict() if self.encoder is not None else None,
        }


def _key(name: str) -> str:
    # ModuleDict keys cannot contain dots
    return name.replace(".", "_")


def _set_mode(model: nn.Module, mode: str) -> None:
    if mode == "train":
        model.train()
    elif mode == "infer":
        model.eval()
    else:
        raise ValueError(f"mode must be 'train' or 'infer', not {mode!r}")


def to_images(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    if isinstance(images, (list, tuple)):
        # a list of GafImage for one case
        images = np.stack([im.matrix for im in images])[None]
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64))


def forward_features(model: MppnModel, images, mode: str = "infer", perspectives: Sequence[str] | None = None):
    """FV for a batch ``(B, P, n, n)`` or for one case given as a list of GafImage."""
    if isinstance(images, (list, tuple)):
        names = [im.attribute for im in images]
        if names != model.perspectives:
            raise ValueError(f"perspective order {names} does not match model order {model.perspectives}")
    if perspectives is not None and list(perspectives) != model.perspectives:
        raise ValueError(f"perspective order {list(perspectives)} does not match model order {model.perspectives}")
    _set_mode(model, mode)
    x = to_images(images)
    if mode == "infer":
        with torch.no_grad():
            return model(x)
    return model(x)


def forward_head(model: MppnModel, fv: torch.Tensor, head: str, mode: str = "infer") -> torch.Tensor:
    """Prediction: class probabilities for categorical heads, scalars for regression heads."""
    _set_mode(model, mode)
    out = model.head(fv, head)
    if model.head_defs[head].kind == "categorical":
        out = torch.softmax(out, dim=-1)
    return out


def backward(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    if loss.grad_fn is None:
        raise RuntimeError("backward without a preceding train-mode forward pass")
    loss.backward()
    return {name: p.grad for name, p in model.named_parameters() if p.grad is not None}


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    # log-sum-exp formulation, finite for large logits
    return F.cross_entropy(logits, targets)


def mean_absolute_error(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(pred - target))


def head_loss(model: MppnModel, fv: torch.Tensor, name: str, target: torch.Tensor) -> torch.Tensor:
    out = model.head(fv, name)
    if model.head_defs[name].kind == "categorical":
        return cross_entropy(out, target)
    return mean_absolute_error(out, target)


def predict(model: MppnModel, sequences: np.ndarray, head: str, batch_size: int = 512) -> np.ndarray:
    """Head outputs (probabilities or scaled scalars) for scaled sequences ``(N, P, n)``."""
    outs = []
    for i in range(0, len(sequences), batch_size):
        fv = forward_features(model, gaf_stack(sequences[i:i + batch_size]))
        with torch.no_grad():
            outs.append(forward_head(model, fv, head).numpy())
    return np.concatenate(outs) if outs else np.zeros((0,))


def features(model: MppnModel, sequences: np.ndarray, batch_size: int = 512) -> np.ndarray:
    outs = [forward_features(model, gaf_stack(sequences[i:i + batch_size])).numpy()
            for i in range(0, len(sequences), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, model.fv_dim))


# checkpoints

def _param_items(model: MppnModel, part: str) -> list[tuple[str, torch.Tensor]]:
    items = list(model.state_dict().items())
    if part == "cnn1":
        items = [(k, v) for k, v in items if k.startswith("cnn1.")]
    return items


def checkpoint_bytes(model: MppnModel, part: str = "full", extra: dict | None = None) -> bytes:
    items = _param_items(model, part)
    meta = model.describe()
    meta["kind"] = part
    meta["params"] = [[k, list(v.shape)] for k, v in items]
    meta["extra"] = extra or {}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<HI", FORMAT_VERSION, len(meta_bytes))
    body += meta_bytes
    for _, v in items:
        body += v.detach().cpu().numpy().astype("<f8").tobytes()
    body += hashlib.sha256(body).digest()
    return bytes(body)


def save_checkpoint(model: MppnModel, path: str | Path, part: str = "full", extra: dict | None = None) -> str:
    """Write a checkpoint; ``part="cnn1"`` stores only the shared CNN1 weights. Returns the SHA-256 hex."""
    data = checkpoint_bytes(model, part, extra)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data[-32:].hex()


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 14 + 32 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an MPPN checkpoint (bad magic or truncated)")
    version, meta_len = struct.unpack_from("<HI", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    if 14 + meta_len + 32 > len(data):
        raise CheckpointError(f"{path}: truncated file")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    meta = json.loads(data[14:14 + meta_len].decode("utf-8"))
    offset = 14 + meta_len
    arrays = {}
    for name, shape in meta["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data) - 32:
            raise CheckpointError(f"{path}: truncated file")
        arrays[name] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(data) - 32:
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return meta, arrays


def _specs(items) -> list[LayerSpec]:
    return [LayerSpec(d["kind"], d["params"]) for d in items]


def model_from_meta(meta: dict) -> MppnModel:
    enc = CaseEncoder.from_dict(meta["encoder"]) if meta.get("encoder") else None
    heads = {k: HeadDef(**v) for k, v in meta["heads"].items()}
    return MppnModel(meta["perspectives"], meta["n"], _specs(meta["cnn1"]), _specs(meta["nn2"]),
                     heads, enc, meta.get("seed", 0))


def load_checkpoint(path: str | Path) -> MppnModel:
    """Rebuild a model; for a CNN1-only checkpoint the trunk and heads are freshly initialized."""
    meta, arrays = read_checkpoint(path)
    model = model_from_meta(meta)
    _assign(model, arrays, strict=meta["kind"] == "full")
    model.checkpoint_meta = meta
    return model


def load_cnn1(model: MppnModel, path: str | Path) -> MppnModel:
    """Copy CNN1 weights from any checkpoint into ``model`` (shared-extractor transfer)."""
    meta, arrays = read_checkpoint(path)
    if _specs(meta["cnn1"]) != model.cnn1_specs or meta["n"] != model.n:
        raise CheckpointError(f"{path}: CNN1 topology does not match the model")
    _assign(model, {k: v for k, v in arrays.items() if k.startswith("cnn1.")}, strict=False)
    return model


def _assign(model: nn.Module, arrays: dict[str, np.ndarray], strict: bool) -> None:
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    with torch.no_grad():
        for k, v in arrays.items():
            if k not in state or tuple(state[k].shape) != v.shape:
                raise CheckpointError(f"parameter {k} does not fit the model")
            state[k].copy_(torch.from_numpy(v))


def weights_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


def clone_state(module: nn.Module) -> dict:
    return copy.deepcopy(module.state_dict())
