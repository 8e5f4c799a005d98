"""Learnable parameter store, initialization, and checkpoint format.

Parameters live in a flat name -> array dict so the optimizer, gradient
checker, and checkpoint writer can treat every tensor uniformly. Names are
hierarchical: ``phi.W``, ``enc.3.attn.Wqkv``, ``psi.1.b`` and so on.

Checkpoint layout (single file):
    byte 0          version (currently 1)
    bytes 1..4      uint32 little-endian manifest length M
    bytes 5..5+M    UTF-8 JSON: {"config": {...}, "arrays": [
                        {"name": n, "shape": [...], "offset": o}, ...]}
    remainder       little-endian float32 array payloads; each ``offset``
                    is relative to the start of this data section
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import rng as _rng
from .config import ModelConfig

__all__ = ["ModelParams", "init_model_params", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = 1

INIT_STD = 0.02


def _block_shapes(dim: int, hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("ln1.g", (dim,)),
        ("ln1.b", (dim,)),
        ("attn.Wqkv", (dim, 3 * dim)),
        ("attn.bqkv", (3 * dim,)),
        ("attn.Wproj", (dim, dim)),
        ("attn.bproj", (dim,)),
        ("ln2.g", (dim,)),
        ("ln2.b", (dim,)),
        ("mlp.W1", (dim, hidden)),
        ("mlp.b1", (hidden,)),
        ("mlp.W2", (hidden, dim)),
        ("mlp.b2", (dim,)),
    ]


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) listing; the fixed iteration order everywhere."""
    c, cd = config.embed_dim, config.dec_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("phi.W", (config.patch_len(0), c)),
        ("phi.b", (c,)),
    ]
    if config.num_scales > 1:
        shapes += [
            ("grid_agg.W", (8 * c, c)),
            ("grid_agg.b", (c,)),
            ("zero_mlp.W1", (c, config.hidden_dim)),
            ("zero_mlp.b1", (config.hidden_dim,)),
            ("zero_mlp.W2", (config.hidden_dim, c)),
            ("zero_mlp.b2", (c,)),
        ]
    for i in range(config.enc_depth):
        shapes += [(f"enc.{i}.{n}", s) for n, s in _block_shapes(c, config.hidden_dim)]
    shapes += [
        ("enc_to_dec.W", (c, cd)),
        ("enc_to_dec.b", (cd,)),
        ("mask_token", (cd,)),
        ("scale_table", (config.num_scales, cd)),
    ]
    for i in range(config.dec_depth):
        shapes += [(f"dec.{i}.{n}", s) for n, s in _block_shapes(cd, config.dec_hidden_dim)]
    for s in range(config.num_scales):
        shapes += [
            (f"psi.{s}.W", (cd, config.patch_len(s))),
            (f"psi.{s}.b", (config.patch_len(s),)),
        ]
    return shapes


@dataclass
class ModelParams:
    """Config plus the flat name -> array parameter dict."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.arrays["phi.W"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def init_model_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Seeded initialization.

    Weights are N(0, 0.02), biases zero, layernorm gains one — except the
    final layer of the residual zero-MLP, which starts at exactly zero so
    coarse embeddings initially reduce to the pooled single path.
    """
    gen = _rng.stream(seed, 0xC0FFEE)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name in ("zero_mlp.W2", "zero_mlp.b2"):
            arr = np.zeros(shape)
        elif leaf in ("b", "b1", "b2", "bqkv", "bproj"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = gen.normal(0.0, INIT_STD, size=shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(config, arrays)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the versioned single-file container (arrays as LE float32)."""
    order = [name for name, _ in parameter_shapes(params.config)]
    payloads = [np.ascontiguousarray(params.arrays[n], dtype="<f4").tobytes() for n in order]

    entries = []
    offset = 0
    for name, payload in zip(order, payloads):
        entries.append({"name": name, "shape": list(params.arrays[name].shape), "offset": offset})
        offset += len(payload)
    manifest = json.dumps({"config": params.config.to_dict(), "arrays": entries}).encode()

    blob = bytearray()
    blob.append(CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(manifest))
    blob += manifest
    for payload in payloads:
        blob += payload
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw or raw[0] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    (manifest_len,) = struct.unpack_from("<I", raw, 1)
    manifest = json.loads(raw[5:5 + manifest_len].decode())
    config = ModelConfig.from_dict(manifest["config"])
    data_start = 5 + manifest_len
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(raw, dtype="<f4", count=count, offset=data_start + entry["offset"])
        arrays[entry["name"]] = flat.reshape(shape).astype(dtype)
    return ModelParams(config, arrays)
