"""Binary containers for model, SAE and adapter weights and for activation dumps.

Weight containers share one layout::

    magic (4 bytes) | version u32 | header length u64 | JSON header | tensor data

The JSON header holds ``config`` and a ``tensors`` table of name, shape and
byte offset (relative to the start of the data block).  Tensor data are
little-endian float32, written in table order.

Activation dumps (``CRAD``) are headerless apart from fixed-width fields::

    magic | version u32 | n_layers u32 | layers u32[n_layers] | d_model u32 | n_tokens u64
    then for every token, for every layer, one d_model row of float32
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from crisp.lm import LmConfig, LoraAdapter, TinyLM
from crisp.sae import SaeParams

VERSION = 1
MAGIC_LM = b"CRLM"
MAGIC_SAE = b"CRSA"
MAGIC_ADAPTER = b"CRLA"
MAGIC_ACTS = b"CRAD"
_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, magic: bytes, config: dict, tensors: Mapping[str, torch.Tensor]) -> None:
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_F32)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<IQ", VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(config, tensors)``; tensors are float32."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != magic:
        raise ContainerError(f"{path}: not a {magic.decode()} file")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[16:16 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: corrupt header") from e
    data = memoryview(raw)[16 + n:]
    tensors = {}
    for entry in header["tensors"]:
        shape, off = tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if off + size > len(data):
            raise ContainerError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(data[off:off + size], dtype=_F32).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header["config"], tensors


# --------------------------------------------------------------------------
# typed wrappers
# --------------------------------------------------------------------------


def save_lm(lm: TinyLM, path: str | Path, meta: dict | None = None) -> None:
    config = {"lm": lm.cfg.to_dict(), "meta": meta or {}}
    write_container(path, MAGIC_LM, config, dict(sorted(lm.state_dict().items())))


def load_lm(path: str | Path) -> TinyLM:
    config, tensors = read_container(path, MAGIC_LM)
    lm = TinyLM(LmConfig.from_dict(config["lm"]))
    missing = set(lm.state_dict()) ^ set(tensors)
    if missing:
        raise ContainerError(f"{path}: tensor set mismatch {sorted(missing)}")
    lm.load_state_dict(tensors)
    return lm


def save_sae(sae: SaeParams, path: str | Path, meta: dict | None = None) -> None:
    config = {"sae": sae.meta(), "meta": meta or {}}
    write_container(path, MAGIC_SAE, config, {k: getattr(sae, k) for k in ("W_enc", "b_enc", "W_dec", "b_dec")})


def load_sae(path: str | Path) -> SaeParams:
    config, t = read_container(path, MAGIC_SAE)
    m = config["sae"]
    sae = SaeParams(m["d_model"], m["d_sae"], m["activation"], m["k_act"], m["l1_coeff"], m["layer"])
    with torch.no_grad():
        for k in ("W_enc", "b_enc", "W_dec", "b_dec"):
            getattr(sae, k).copy_(t[k])
    return sae


def save_adapter(adapter: LoraAdapter, lm_cfg: LmConfig, path: str | Path, meta: dict | None = None) -> None:
    config = {"lm": lm_cfg.to_dict(), "layers": list(adapter.layers), "rank": adapter.rank,
              "alpha": adapter.scale * adapter.rank, "targets": list(adapter.targets), "meta": meta or {}}
    tensors = {}
    for key in adapter.down:
        tensors[f"down.{key}"] = adapter.down[key]
        tensors[f"up.{key}"] = adapter.up[key]
    write_container(path, MAGIC_ADAPTER, config, tensors)


def load_adapter(path: str | Path) -> LoraAdapter:
    config, t = read_container(path, MAGIC_ADAPTER)
    adapter = LoraAdapter(LmConfig.from_dict(config["lm"]), config["layers"], config["rank"],
                          config["alpha"], config["targets"])
    with torch.no_grad():
        for key in adapter.down:
            adapter.down[key].copy_(t[f"down.{key}"])
            adapter.up[key].copy_(t[f"up.{key}"])
    return adapter


def read_meta(path: str | Path, magic: bytes) -> dict:
    return read_container(path, magic)[0].get("meta", {})


# --------------------------------------------------------------------------
# activation dumps
# --------------------------------------------------------------------------


def acts_header_size(n_layers: int) -> int:
    return 4 + 4 + 4 + 4 * n_layers + 4 + 8


def write_acts(path: str | Path, acts: Mapping[int, torch.Tensor], d_model: int | None = None) -> None:
    """Write ``{layer: [n_tokens, d_model]}`` residual rows, token-major."""
    layers = sorted(acts)
    mats = [np.asarray(acts[l].detach().cpu().numpy(), dtype=_F32) for l in layers]
    if d_model is None:
        if not mats:
            raise ValueError("d_model is required for an empty layer list")
        d_model = mats[0].shape[1]
    n_tokens = len(mats[0]) if mats else 0
    if any(m.shape != (n_tokens, d_model) for m in mats):
        raise ValueError("activation matrices must share shape [n_tokens, d_model]")
    with open(path, "wb") as fh:
        fh.write(MAGIC_ACTS + struct.pack("<II", VERSION, len(layers)))
        fh.write(struct.pack(f"<{len(layers)}I", *layers))
        fh.write(struct.pack("<IQ", d_model, n_tokens))
        if n_tokens:
            # [n_tokens, n_layers, d_model]: per token, per layer, one row
            fh.write(np.ascontiguousarray(np.stack(mats, axis=1)).tobytes())


def read_acts(path: str | Path) -> tuple[dict[int, torch.Tensor], int]:
    """Return ``({layer: [n_tokens, d_model]}, d_model)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_ACTS:
        raise ContainerError(f"{path}: not a CRAD file")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    layers = list(struct.unpack_from(f"<{n_layers}I", raw, 12))
    d_model, n_tokens = struct.unpack_from("<IQ", raw, 12 + 4 * n_layers)
    start = acts_header_size(n_layers)
    if len(raw) != start + n_tokens * n_layers * d_model * 4:
        raise ContainerError(f"{path}: size does not match header")
    data = np.frombuffer(raw, dtype=_F32, offset=start).reshape(n_tokens, n_layers, d_model)
    return {l: torch.from_numpy(data[:, i].copy()) for i, l in enumerate(layers)}, d_model
