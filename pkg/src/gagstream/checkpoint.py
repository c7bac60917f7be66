"""Binary model checkpoints.

Layout (all little-endian)::

    b"GAG1"
    config block   struct "<IIdIq?dddQQQ"
                   embed_dim, num_layers, learning_rate, batch_size, rng_seed,
                   edge_out_uses_receiver, beta1, beta2, eps,
                   num_items, num_users, adam_step
    tensors        float64, C order, in declaration order: every parameter
                   tensor, then every Adam first moment, then every second moment

A JSON sidecar (``<path>.json``) records tensor names, shapes and the seed.
Shapes are fully determined by the config block, so the sidecar is
informational; loading cross-checks it when present.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParams, tensor_shapes

MAGIC = b"GAG1"
_CONFIG = struct.Struct("<IIdIq?dddQQQ")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    path = Path(path)
    header = _CONFIG.pack(
        config.embed_dim,
        config.num_layers,
        config.learning_rate,
        config.batch_size,
        config.rng_seed,
        config.edge_out_uses_receiver,
        config.beta1,
        config.beta2,
        config.eps,
        params.num_items,
        params.num_users,
        params.step,
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        for group in (params.tensors, params.moment1, params.moment2):
            for t in group.values():
                fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    meta = {
        "format": "GAG1",
        "rng_seed": params.seed,
        "adam_step": params.step,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a GAG1 checkpoint")
    fields = _CONFIG.unpack_from(raw, 4)
    (d, layers, lr, bs, seed, recv, b1, b2, eps, m, n, step) = fields
    config = ModelConfig(
        embed_dim=d,
        num_layers=layers,
        learning_rate=lr,
        batch_size=bs,
        rng_seed=seed,
        edge_out_uses_receiver=recv,
        beta1=b1,
        beta2=b2,
        eps=eps,
    )
    shapes = tensor_shapes(d, m, n, layers)
    offset = 4 + _CONFIG.size
    groups = []
    for _ in range(3):
        group = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(raw):
                raise DataError(f"{path}: truncated at tensor {name}")
            group[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset = end
        groups.append(group)
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")

    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        listed = {t["name"]: tuple(t["shape"]) for t in meta.get("tensors", [])}
        if listed and listed != {k: tuple(v) for k, v in shapes.items()}:
            raise DataError(f"{side}: tensor shapes disagree with checkpoint header")

    params = ModelParams(tensors=groups[0], moment1=groups[1], moment2=groups[2], step=step, seed=seed)
    return params, config
