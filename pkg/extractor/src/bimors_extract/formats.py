"""Container writers/readers implemented independently of the consumer.

Dataset blob ("BMRS", version 1, little-endian): u32 record count, then per
record: id length + UTF-8 id, class id, token-grid dims + f32 data, global
embedding length + f32 data, caption length + UTF-8 caption, caption
embedding dims + f32 data. The manifest and split files are key=value
UTF-8 text with the blob's SHA-256. Weight containers ("BMTW", version 1):
per tensor, name length + name, rank, dims, f32 data.

Keeping this writer separate from the training-side reader makes every
emitted file a real conformance check of the shared format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"BMRS"
WEIGHTS_MAGIC = b"BMTW"
VERSION = 1
BLOB_NAME = "features.bmrs"
MANIFEST_NAME = "manifest.txt"


@dataclass
class RecordOut:
    image_id: str
    class_id: int
    visual_tokens: np.ndarray
    global_embed: np.ndarray
    caption_text: str
    caption_token_embeds: np.ndarray


@dataclass
class ManifestOut:
    dataset_name: str
    class_names: list[str]
    d_vis: int
    d_clip: int
    d_cap: int
    context_length: int
    class_token_ids: list[list[int]]
    template_token_ids: list[int]
    shared_class_names: list[str] = field(default_factory=list)


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dataset_blob(records: list[RecordOut]) -> bytes:
    out = bytearray()
    out += DATASET_MAGIC + _u32(VERSION) + _u32(len(records))
    for rec in records:
        rid = rec.image_id.encode("utf-8")
        cap = rec.caption_text.encode("utf-8")
        vt = np.asarray(rec.visual_tokens, dtype=np.float32)
        ge = np.asarray(rec.global_embed, dtype=np.float32).reshape(-1)
        ce = np.asarray(rec.caption_token_embeds, dtype=np.float32)
        out += _u32(len(rid)) + rid
        out += _u32(int(rec.class_id))
        out += _u32(vt.shape[0]) + _u32(vt.shape[1]) + _f32(vt)
        out += _u32(ge.shape[0]) + _f32(ge)
        out += _u32(len(cap)) + cap
        out += _u32(ce.shape[0]) + _u32(ce.shape[1]) + _f32(ce)
    return bytes(out)


def manifest_text(manifest: ManifestOut, record_count: int, blob_sha256: str) -> str:
    lines = [
        "format=bimors-dataset",
        f"version={VERSION}",
        f"dataset_name={manifest.dataset_name}",
        f"d_vis={manifest.d_vis}",
        f"d_clip={manifest.d_clip}",
        f"d_cap={manifest.d_cap}",
        f"context_length={manifest.context_length}",
        f"record_count={record_count}",
        f"blob_sha256={blob_sha256}",
        f"class_count={len(manifest.class_names)}",
    ]
    for i, name in enumerate(manifest.class_names):
        lines.append(f"class.{i}.name={name}")
        ids = manifest.class_token_ids[i]
        lines.append(f"class.{i}.token_ids={' '.join(str(t) for t in ids)}")
    lines.append(
        f"template_token_ids={' '.join(str(t) for t in manifest.template_token_ids)}"
    )
    if manifest.shared_class_names:
        lines.append(f"shared_classes={'|'.join(manifest.shared_class_names)}")
    return "\n".join(lines) + "\n"


def write_dataset(manifest: ManifestOut, records: list[RecordOut], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = dataset_blob(records)
    (out_dir / BLOB_NAME).write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    text = manifest_text(manifest, len(records), digest)
    (out_dir / MANIFEST_NAME).write_text(text, encoding="utf-8")
    return out_dir


def write_weights(path, tensors: dict[str, np.ndarray]) -> Path:
    out = bytearray()
    out += WEIGHTS_MAGIC + struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        out += _u32(len(encoded)) + encoded
        out += _u32(arr.ndim)
        for dim in arr.shape:
            out += _u32(dim)
        out += arr.tobytes()
    path = Path(path)
    path.write_bytes(bytes(out))
    return path


def read_weights(path) -> dict[str, np.ndarray]:
    """Round-trip reader used to verify exports bit-exactly before shipping."""
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    at = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, at)
        at += 4
        name = blob[at : at + name_len].decode("utf-8")
        at += name_len
        (rank,) = struct.unpack_from("<I", blob, at)
        at += 4
        dims = struct.unpack_from(f"<{rank}I", blob, at) if rank else ()
        at += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        tensors[name] = (
            np.frombuffer(blob, dtype="<f4", count=size, offset=at).reshape(dims).copy()
        )
        at += 4 * size
    return tensors


def encoder_config_text(vocab_size, context_length, width, heads, layers, embed_out_dim) -> str:
    return (
        f"vocab_size={vocab_size}\ncontext_length={context_length}\nwidth={width}\n"
        f"heads={heads}\nlayers={layers}\nembed_out_dim={embed_out_dim}\n"
    )
