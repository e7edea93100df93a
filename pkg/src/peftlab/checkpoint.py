"""Flat binary tensor archive with a JSON manifest.

``<stem>.bin`` holds every array as little-endian float64, concatenated in
manifest order. ``<stem>.json`` lists ``{name, shape, offset}`` per tensor
(offset in bytes) plus any caller metadata under ``"meta"``.
"""

import json
import os

import numpy as np

from .errors import ParseError

FORMAT = "peftlab-tensors/1"


def save_tensors(path_stem, arrays, meta=None):
    entries, offset = [], 0
    with open(path_stem + ".bin", "wb") as fh:
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
            fh.write(a.tobytes(order="C"))
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    manifest = {"format": FORMAT, "tensors": entries, "meta": meta or {}}
    with open(path_stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_tensors(path_stem):
    """Returns ``(arrays, meta)``."""
    try:
        with open(path_stem + ".json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(path_stem + ".bin", "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise ParseError(f"checkpoint file missing: {exc.filename}") from exc
    if manifest.get("format") != FORMAT:
        raise ParseError(f"{path_stem}.json: unknown format {manifest.get('format')!r}")
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * count
        if end > len(blob):
            raise ParseError(f"{path_stem}.bin is truncated at tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(blob[e["offset"] : end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})


def save_model(path_stem, module, optimizer=None, meta=None):
    arrays = {f"model/{k}": v for k, v in module.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
        meta["optimizer"] = optimizer.meta()
    return save_tensors(path_stem, arrays, meta)


def load_model(path_stem, module, optimizer=None):
    arrays, meta = load_tensors(path_stem)
    module.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    if optimizer is not None and "optimizer" in meta:
        optimizer.load({k[6:]: v for k, v in arrays.items() if k.startswith("optim/")}, meta["optimizer"])
    return meta


def save_adapters(path_stem, adapters, meta=None):
    """Only the LoRA factors, keyed by adapter path, plus rank/alpha per adapter."""
    arrays, info = {}, {}
    for path, a in adapters.items():
        arrays[f"{path}.lora_a"] = a.lora_a.data
        arrays[f"{path}.lora_b"] = a.lora_b.data
        info[path] = {"rank": a.rank, "alpha": a.alpha, "shape": [a.out_features, a.in_features]}
    return save_tensors(path_stem, arrays, {**(meta or {}), "adapters": info})


def load_adapters(path_stem, adapters):
    arrays, meta = load_tensors(path_stem)
    for path, a in adapters.items():
        rec = meta["adapters"].get(path)
        if rec is None or rec["rank"] != a.rank:
            raise ParseError(f"adapter {path} missing or rank mismatch in {path_stem}")
        a.lora_a.data = arrays[f"{path}.lora_a"].copy()
        a.lora_b.data = arrays[f"{path}.lora_b"].copy()
    return meta


def exists(path_stem):
    return os.path.exists(path_stem + ".json") and os.path.exists(path_stem + ".bin")
