"""Walk parameter dataclasses and name every learnable tensor.

Traversal order is deterministic: dataclass field order, then list
index, then dict insertion order.  Names join path segments with dots
("main.blocks.0.fwd.w_delta"), which is also the naming scheme inside
checkpoints.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .errors import IntegrityError


def iter_params(obj, prefix: str = ""):
    """Yield (name, Tensor) pairs for every tensor reachable from obj."""
    if isinstance(obj, ad.Tensor):
        yield prefix or "param", obj
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_params(getattr(obj, f.name), name)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from iter_params(item, name)
        return
    if isinstance(obj, dict):
        for key, item in obj.items():
            name = f"{prefix}.{key}" if prefix else str(key)
            yield from iter_params(item, name)
        return
    # Plain configuration values (ints, strings, flags, arrays) are
    # not parameters.


def named_parameters(obj) -> dict:
    out = {}
    for name, t in iter_params(obj):
        if name in out:
            raise IntegrityError(f"duplicate parameter name '{name}'")
        out[name] = t
    return out


def cast_params(obj, dtype) -> None:
    """In-place dtype cast of every tensor in a parameter tree."""
    for _, t in iter_params(obj):
        t.data = t.data.astype(dtype)
        t.grad = None


def load_into(obj, named_arrays, strict: bool = True) -> None:
    """Copy checkpoint arrays into an existing parameter tree."""
    params = named_parameters(obj)
    missing = set(params) - set(named_arrays)
    extra = set(named_arrays) - set(params)
    if strict and (missing or extra):
        raise IntegrityError(
            f"parameter names do not match checkpoint: missing={sorted(missing)[:4]} "
            f"extra={sorted(extra)[:4]}"
        )
    for name, t in params.items():
        if name not in named_arrays:
            continue
        arr = np.asarray(named_arrays[name])
        if arr.shape != t.data.shape:
            raise IntegrityError(
                f"'{name}': checkpoint shape {arr.shape} does not match "
                f"model shape {t.data.shape}"
            )
        t.data = arr.astype(t.data.dtype, copy=True)
        t.grad = None


def export_arrays(obj) -> dict:
    """Snapshot a parameter tree as name -> numpy array."""
    return {name: t.data.copy() for name, t in named_parameters(obj).items()}
