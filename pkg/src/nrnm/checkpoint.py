"""Parameter checkpoints: named arrays plus a JSON metadata blob in one .npz.

Arrays round-trip bit-exactly at their stored precision (raw float bytes in
the zip container). Metadata carries whatever dict the caller supplies,
typically the resolved model configuration, so a checkpoint is
self-describing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

_META_KEY = "__meta_json__"


def save_params(path, named: dict[str, Tensor], meta: dict | None = None) -> None:
    arrays = {}
    for name, p in named.items():
        if name == _META_KEY:
            raise ConfigError(f"parameter name {name!r} is reserved")
        arrays[name] = p.data if isinstance(p, Tensor) else np.asarray(p)
    payload = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    arrays[_META_KEY] = np.frombuffer(payload, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as bundle:
        meta = json.loads(bundle[_META_KEY].tobytes().decode("utf-8"))
        arrays = {k: bundle[k].copy() for k in bundle.files if k != _META_KEY}
    return arrays, meta


def restore_into(named: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into existing parameter tensors, name by name."""
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise ConfigError(
            f"checkpoint/model mismatch: missing={missing} unexpected={extra}"
        )
    for name, p in named.items():
        stored = arrays[name]
        if stored.shape != p.data.shape:
            raise ConfigError(
                f"checkpoint shape {stored.shape} != model shape "
                f"{p.data.shape} for {name!r}"
            )
        p.data = stored.astype(p.data.dtype, copy=True)
