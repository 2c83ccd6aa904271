"""Checkpoint container: JSON manifest + named little-endian float64 records.

Layout: ``b"FLCK"``, u32 manifest length, UTF-8 JSON manifest, then each record's
raw bytes in manifest order. The manifest lists ``name``, ``shape`` and
``offset`` (relative to the end of the manifest) for every record.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError, UsageError
from .lora import Strategy
from .model import Encoder, EncoderConfig, SegModel, apply_strategy

MAGIC = b"FLCK"
FORMAT_VERSION = 1


def save_records(path, manifest: dict, records: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in records.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = dict(manifest)
    head["format_version"] = FORMAT_VERSION
    head["records"] = entries
    text = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(text)))
            f.write(text)
            for b in blobs:
                f.write(b)
    except OSError as exc:
        raise DataFormatError(f"cannot write checkpoint {path}: {exc}") from exc


def load_records(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC or len(raw) < 8:
        raise DataFormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    if 8 + n > len(raw):
        raise DataFormatError(f"{path}: manifest runs past end of file")
    try:
        manifest = json.loads(raw[8 : 8 + n])
        entries = [(e["name"], list(e["shape"]), int(e["offset"])) for e in manifest.get("records", [])]
    except (json.JSONDecodeError, UnicodeDecodeError, AttributeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: corrupt manifest: {exc}") from exc
    base = 8 + n
    records = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        start = base + offset
        if start + 8 * count > len(raw):
            raise DataFormatError(f"{path}: record {name!r} runs past end of file")
        records[name] = np.frombuffer(raw, "<f8", count, start).reshape(shape).astype(np.float64)
    return manifest, records


def save_model(model: SegModel, path, extra: dict | None = None) -> None:
    manifest = {
        "kind": "segmodel",
        "config": model.config.to_dict(),
        "strategy": model.strategy.to_dict(),
        "merged": any(layer.merged for _, layer in model.attention_layers()),
    }
    if extra:
        manifest.update(extra)
    save_records(path, manifest, model.state_dict())


def load_model(path) -> tuple[SegModel, dict]:
    manifest, records = load_records(path)
    if manifest.get("kind") != "segmodel":
        raise DataFormatError(f"{path}: expected a segmentation-model checkpoint, found {manifest.get('kind')!r}")
    cfg = EncoderConfig.from_dict(manifest["config"])
    strategy = Strategy.from_dict(manifest["strategy"])
    rng = np.random.default_rng(0)  # overwritten by the stored weights
    model = SegModel(cfg, rng, strategy)
    try:
        model.load_state_dict(records)
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: checkpoint does not match its config: {exc}") from exc
    if manifest.get("merged"):
        for _, layer in model.attention_layers():
            layer._merged = True
    return model, manifest


def save_encoder(encoder: Encoder, path, extra: dict | None = None) -> None:
    manifest = {"kind": "encoder", "config": encoder.config.to_dict()}
    if extra:
        manifest.update(extra)
    save_records(path, manifest, encoder.state_dict())


def load_encoder(path) -> tuple[Encoder, dict]:
    manifest, records = load_records(path)
    if manifest.get("kind") != "encoder":
        raise DataFormatError(f"{path}: expected an encoder checkpoint, found {manifest.get('kind')!r}")
    cfg = EncoderConfig.from_dict(manifest["config"])
    enc = Encoder(cfg, np.random.default_rng(0))
    try:
        enc.load_state_dict(records)
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: encoder checkpoint does not match its config: {exc}") from exc
    return enc, manifest


def merged_copy(model: SegModel) -> SegModel:
    """A plain (adapter-free) model whose weights fold in the adapters."""
    if model.strategy.kind != "lora":
        raise UsageError("only lora-strategy models can be merged")
    rng = np.random.default_rng(0)
    plain = SegModel(model.config, rng, Strategy("frozen"))
    state = {}
    for name, p in model.named_parameters():
        if ".adapter." in name:
            continue
        state[name] = p.data.copy()
    for lname, layer in model.attention_layers():
        if not layer.merged:
            state[f"{lname}.weight"] = layer.weight.data + layer.adapter.delta()
    plain.load_state_dict(state)
    return apply_strategy(plain, Strategy("frozen"))
