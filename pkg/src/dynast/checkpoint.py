"""Checkpoint format: config text + parameter manifest + tensor payloads."""

from __future__ import annotations

import numpy as np

from .config import Config, ValidationError, parse_config, serialize_config
from .numerics import dump_tensor, load_tensor

_MAGIC = "DYNAST-CKPT v1"
_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _manifest_line(name: str, arr: np.ndarray) -> str:
    dims = " ".join(str(d) for d in arr.shape)
    tag = _DTYPE_TAGS[np.dtype(arr.dtype)]
    return f"{name} {arr.ndim} {dims} {tag}".rstrip() + "\n"


def save_checkpoint(path, config: Config, params: dict[str, np.ndarray],
                    state: dict[str, np.ndarray] | None = None, step: int = 0):
    state = state or {}
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC}\n".encode("ascii"))
        fh.write(f"step {int(step)}\n".encode("ascii"))
        fh.write(b"[config]\n")
        fh.write(serialize_config(config).encode("ascii"))
        fh.write(f"[params] {len(params)}\n".encode("ascii"))
        for name, arr in params.items():
            fh.write(_manifest_line(name, arr).encode("ascii"))
        fh.write(f"[state] {len(state)}\n".encode("ascii"))
        for name, arr in state.items():
            fh.write(_manifest_line(name, arr).encode("ascii"))
        fh.write(b"[payload]\n")
        for arr in params.values():
            dump_tensor(fh, np.asarray(arr))
        for arr in state.values():
            dump_tensor(fh, np.asarray(arr))


def load_checkpoint(path):
    """Returns (Config, params dict, state dict, step); rejects malformed files."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ValidationError(f"cannot open checkpoint {path}: {exc}") from None
    with fh:
        def line() -> str:
            return fh.readline().decode("ascii").rstrip("\n")

        if line() != _MAGIC:
            raise ValidationError(f"{path} is not a model checkpoint")
        step_line = line().split()
        if step_line[:1] != ["step"]:
            raise ValidationError("checkpoint missing step record")
        step = int(step_line[1])
        if line() != "[config]":
            raise ValidationError("checkpoint missing config section")
        config_lines = []
        current = line()
        while not current.startswith("[params]"):
            config_lines.append(current)
            current = line()
        config = parse_config("\n".join(config_lines))
        n_params = int(current.split()[1])
        param_manifest = [_parse_manifest(line()) for _ in range(n_params)]
        current = line()
        if not current.startswith("[state]"):
            raise ValidationError("checkpoint missing state section")
        n_state = int(current.split()[1])
        state_manifest = [_parse_manifest(line()) for _ in range(n_state)]
        if line() != "[payload]":
            raise ValidationError("checkpoint missing payload section")
        params = _read_section(fh, param_manifest, path)
        state = _read_section(fh, state_manifest, path)
    return config, params, state, step


def _parse_manifest(text: str):
    parts = text.split()
    name = parts[0]
    ndim = int(parts[1])
    dims = tuple(int(d) for d in parts[2:2 + ndim])
    tag = parts[2 + ndim]
    return name, dims, tag


def _read_section(fh, manifest, path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, dims, tag in manifest:
        arr = load_tensor(fh)
        if arr.shape != dims:
            raise ValidationError(
                f"{path}: payload shape {arr.shape} != manifest {dims} for {name}"
            )
        if _DTYPE_TAGS[np.dtype(arr.dtype)] != tag:
            raise ValidationError(f"{path}: payload dtype mismatch for {name}")
        out[name] = arr
    return out
