"""On-disk container for precomputed frozen-backbone features.

A dataset is a directory holding two files:

  features.bmrs   binary blob:
      magic "BMRS" | u32 version=1 | u32 record_count
      per record:
          u32 id_len | id utf8
          u32 class_id
          u32 N_p | u32 d_vis | f32[N_p * d_vis] visual tokens
          u32 d_clip | f32[d_clip] global image embedding (unnormalized)
          u32 caption_len | caption utf8
          u32 T | u32 d_cap | f32[T * d_cap] caption token embeddings
      all integers little-endian u32, floats f32-LE

  manifest.txt    UTF-8 key=value document declaring dataset_name,
      dimensions, record_count, class names with their prompt token ids,
      the template token ids, optional shared-class subset, and the blob's
      SHA-256.

Split specs use the same key=value text format. Base/new partitioning and
shot sampling are pure functions of (manifest, seed, shots) so every rerun
and every consumer sees identical splits.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    SplitError,
    TruncationError,
    ValidationError,
)
from .rng import Rng

MAGIC = b"BMRS"
VERSION = 1
BLOB_NAME = "features.bmrs"
MANIFEST_NAME = "manifest.txt"


@dataclass
class FeatureRecord:
    """One image's frozen-backbone outputs."""

    image_id: str
    class_id: int
    visual_tokens: np.ndarray  # [N_p, d_vis]
    global_embed: np.ndarray  # [d_clip], stored unnormalized
    caption_text: str
    caption_token_embeds: np.ndarray  # [T, d_cap]


@dataclass
class DatasetManifest:
    dataset_name: str
    class_names: list[str]
    d_vis: int
    d_clip: int
    d_cap: int
    context_length: int
    record_count: int
    blob_sha256: str = ""
    class_token_ids: list[list[int]] = field(default_factory=list)
    template_token_ids: list[int] = field(default_factory=list)
    shared_class_names: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not self.class_names:
            raise ValidationError("manifest declares no classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("class names must be unique")
        if self.class_token_ids and len(self.class_token_ids) != len(self.class_names):
            raise ValidationError("class_token_ids count differs from class count")
        for name in self.shared_class_names:
            if name not in self.class_names:
                raise ValidationError(f"shared class {name!r} not in class_names")


@dataclass
class SplitSpec:
    mode: str  # B2N | CD | SSMT
    seed: int
    shots_per_class: int
    base_class_ids: list[int] = field(default_factory=list)
    new_class_ids: list[int] = field(default_factory=list)
    source_dataset: str = ""
    target_dataset: str = ""


def _check_record(rec: FeatureRecord, manifest: DatasetManifest, pos: int) -> None:
    vt = np.asarray(rec.visual_tokens)
    ge = np.asarray(rec.global_embed).reshape(-1)
    ce = np.asarray(rec.caption_token_embeds)
    if vt.ndim != 2 or vt.shape[0] < 1 or vt.shape[1] != manifest.d_vis:
        raise ValidationError(
            f"record {pos} ({rec.image_id}): visual_tokens shape {vt.shape} "
            f"does not match d_vis={manifest.d_vis}"
        )
    if ge.shape[0] != manifest.d_clip:
        raise ValidationError(
            f"record {pos} ({rec.image_id}): global_embed length {ge.shape[0]} "
            f"does not match d_clip={manifest.d_clip}"
        )
    if ce.ndim != 2 or ce.shape[0] < 1 or ce.shape[1] != manifest.d_cap:
        raise ValidationError(
            f"record {pos} ({rec.image_id}): caption_token_embeds shape {ce.shape} "
            f"does not match d_cap={manifest.d_cap}"
        )
    if not 0 <= rec.class_id < len(manifest.class_names):
        raise ValidationError(
            f"record {pos} ({rec.image_id}): class_id {rec.class_id} out of range"
        )


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_dataset(manifest: DatasetManifest, records, path) -> None:
    """Serialize records + manifest into directory ``path``; rereadable bit-exactly."""
    manifest.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = list(records)
    blob = bytearray()
    blob += MAGIC
    blob += _u32(VERSION)
    blob += _u32(len(records))
    for pos, rec in enumerate(records):
        _check_record(rec, manifest, pos)
        rid = rec.image_id.encode("utf-8")
        cap = rec.caption_text.encode("utf-8")
        vt = np.asarray(rec.visual_tokens, dtype=np.float32)
        ge = np.asarray(rec.global_embed, dtype=np.float32).reshape(-1)
        ce = np.asarray(rec.caption_token_embeds, dtype=np.float32)
        blob += _u32(len(rid)) + rid
        blob += _u32(int(rec.class_id))
        blob += _u32(vt.shape[0]) + _u32(vt.shape[1]) + _f32_bytes(vt)
        blob += _u32(ge.shape[0]) + _f32_bytes(ge)
        blob += _u32(len(cap)) + cap
        blob += _u32(ce.shape[0]) + _u32(ce.shape[1]) + _f32_bytes(ce)
    blob_bytes = bytes(blob)
    (path / BLOB_NAME).write_bytes(blob_bytes)
    manifest.record_count = len(records)
    manifest.blob_sha256 = hashlib.sha256(blob_bytes).hexdigest()
    (path / MANIFEST_NAME).write_text(manifest_to_text(manifest), encoding="utf-8")


def manifest_to_text(m: DatasetManifest) -> str:
    lines = [
        "format=bimors-dataset",
        f"version={VERSION}",
        f"dataset_name={m.dataset_name}",
        f"d_vis={m.d_vis}",
        f"d_clip={m.d_clip}",
        f"d_cap={m.d_cap}",
        f"context_length={m.context_length}",
        f"record_count={m.record_count}",
        f"blob_sha256={m.blob_sha256}",
        f"class_count={len(m.class_names)}",
    ]
    for i, name in enumerate(m.class_names):
        lines.append(f"class.{i}.name={name}")
        ids = m.class_token_ids[i] if m.class_token_ids else []
        lines.append(f"class.{i}.token_ids={' '.join(str(t) for t in ids)}")
    lines.append(f"template_token_ids={' '.join(str(t) for t in m.template_token_ids)}")
    if m.shared_class_names:
        lines.append(f"shared_classes={'|'.join(m.shared_class_names)}")
    return "\n".join(lines) + "\n"


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"malformed key=value line: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split()] if text else []


def manifest_from_text(text: str) -> DatasetManifest:
    kv = parse_kv_text(text)
    if kv.get("format") != "bimors-dataset":
        raise FormatError(f"not a dataset manifest: format={kv.get('format')!r}")
    if int(kv.get("version", "0")) != VERSION:
        raise FormatError(f"unsupported manifest version {kv.get('version')!r}")
    count = int(kv["class_count"])
    names, token_ids = [], []
    for i in range(count):
        names.append(kv[f"class.{i}.name"])
        token_ids.append(_int_list(kv.get(f"class.{i}.token_ids", "")))
    shared = kv.get("shared_classes", "")
    m = DatasetManifest(
        dataset_name=kv["dataset_name"],
        class_names=names,
        d_vis=int(kv["d_vis"]),
        d_clip=int(kv["d_clip"]),
        d_cap=int(kv["d_cap"]),
        context_length=int(kv["context_length"]),
        record_count=int(kv["record_count"]),
        blob_sha256=kv.get("blob_sha256", ""),
        class_token_ids=token_ids,
        template_token_ids=_int_list(kv.get("template_token_ids", "")),
        shared_class_names=shared.split("|") if shared else [],
    )
    m.validate()
    return m


class DatasetReader:
    """Random access over a validated blob; safe to share across threads."""

    def __init__(self, blob: bytes, manifest: DatasetManifest):
        self._blob = blob
        self.manifest = manifest
        self._offsets: list[int] = []
        self.class_ids: list[int] = []
        self._scan()

    def _scan(self) -> None:
        blob = self._blob
        if len(blob) < 12:
            raise TruncationError("blob shorter than its header")
        if blob[:4] != MAGIC:
            raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"unsupported blob version {version}")
        if count != self.manifest.record_count:
            raise ValidationError(
                f"blob holds {count} records, manifest declares {self.manifest.record_count}"
            )
        at = 12
        m = self.manifest
        for pos in range(count):
            self._offsets.append(at)
            at, id_len = self._read_u32(at, pos, "id length")
            at += id_len
            at, class_id = self._read_u32(at, pos, "class_id")
            self.class_ids.append(class_id)
            if class_id >= len(m.class_names):
                raise ValidationError(f"record {pos}: class_id {class_id} out of range")
            at, n_p = self._read_u32(at, pos, "N_p")
            at, d_vis = self._read_u32(at, pos, "d_vis")
            if d_vis != m.d_vis or n_p < 1:
                raise ValidationError(
                    f"record {pos}: visual tokens {n_p}x{d_vis} vs manifest d_vis={m.d_vis}"
                )
            at += 4 * n_p * d_vis
            at, d_clip = self._read_u32(at, pos, "d_clip")
            if d_clip != m.d_clip:
                raise ValidationError(
                    f"record {pos}: global embed dim {d_clip} vs manifest d_clip={m.d_clip}"
                )
            at += 4 * d_clip
            at, cap_len = self._read_u32(at, pos, "caption length")
            at += cap_len
            at, t_len = self._read_u32(at, pos, "T")
            at, d_cap = self._read_u32(at, pos, "d_cap")
            if d_cap != m.d_cap or t_len < 1:
                raise ValidationError(
                    f"record {pos}: caption embeds {t_len}x{d_cap} vs manifest d_cap={m.d_cap}"
                )
            at += 4 * t_len * d_cap
            if at > len(blob):
                raise TruncationError(f"blob truncated inside record {pos}")

    def _read_u32(self, at: int, pos: int, what: str) -> tuple[int, int]:
        if at + 4 > len(self._blob):
            raise TruncationError(f"blob truncated at record {pos} ({what})")
        return at + 4, struct.unpack_from("<I", self._blob, at)[0]

    def __len__(self) -> int:
        return self.manifest.record_count

    def record(self, index: int) -> FeatureRecord:
        if not 0 <= index < len(self):
            raise IndexError(f"record index {index} out of range")
        blob = self._blob
        at = self._offsets[index]
        id_len = struct.unpack_from("<I", blob, at)[0]
        at += 4
        image_id = blob[at : at + id_len].decode("utf-8")
        at += id_len
        class_id = struct.unpack_from("<I", blob, at)[0]
        at += 4
        n_p, d_vis = struct.unpack_from("<II", blob, at)
        at += 8
        vt = np.frombuffer(blob, dtype="<f4", count=n_p * d_vis, offset=at).reshape(n_p, d_vis)
        at += 4 * n_p * d_vis
        d_clip = struct.unpack_from("<I", blob, at)[0]
        at += 4
        ge = np.frombuffer(blob, dtype="<f4", count=d_clip, offset=at)
        at += 4 * d_clip
        cap_len = struct.unpack_from("<I", blob, at)[0]
        at += 4
        caption = blob[at : at + cap_len].decode("utf-8")
        at += cap_len
        t_len, d_cap = struct.unpack_from("<II", blob, at)
        at += 8
        ce = np.frombuffer(blob, dtype="<f4", count=t_len * d_cap, offset=at).reshape(t_len, d_cap)
        return FeatureRecord(image_id, class_id, vt.copy(), ge.copy(), caption, ce.copy())

    def __getitem__(self, index: int) -> FeatureRecord:
        return self.record(index)

    def indices_for_class(self, class_id: int) -> list[int]:
        return [i for i, c in enumerate(self.class_ids) if c == class_id]


def read_dataset(path) -> tuple[DatasetManifest, DatasetReader]:
    """Open a dataset directory; validates magic, version, and checksum."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    blob_path = path / BLOB_NAME
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest at {manifest_path}")
    if not blob_path.is_file():
        raise FormatError(f"missing blob at {blob_path}")
    manifest = manifest_from_text(manifest_path.read_text(encoding="utf-8"))
    blob = blob_path.read_bytes()
    # structure first (magic/version/truncation are more specific than a hash mismatch)
    reader = DatasetReader(blob, manifest)
    digest = hashlib.sha256(blob).hexdigest()
    if manifest.blob_sha256 and digest != manifest.blob_sha256:
        raise ChecksumError(
            f"blob sha256 {digest[:12]}... does not match manifest {manifest.blob_sha256[:12]}..."
        )
    return manifest, reader


# ---------------------------------------------------------------------------
# splits


def make_b2n_split(manifest: DatasetManifest, seed: int, shots: int = 16) -> SplitSpec:
    """Deterministic base/new partition: first half of the alphabetically
    ordered class names (ceil(C/2)) is base, the rest new."""
    c = len(manifest.class_names)
    if c < 2:
        raise SplitError(f"base-to-new split needs >= 2 classes, got {c}")
    if shots < 1:
        raise SplitError(f"shots_per_class must be >= 1, got {shots}")
    order = sorted(range(c), key=lambda i: manifest.class_names[i])
    half = math.ceil(c / 2)
    return SplitSpec(
        mode="B2N",
        seed=seed,
        shots_per_class=shots,
        base_class_ids=sorted(order[:half]),
        new_class_ids=sorted(order[half:]),
        source_dataset=manifest.dataset_name,
    )


def make_transfer_split(
    manifest: DatasetManifest, seed: int, shots: int, mode: str, target_dataset: str = ""
) -> SplitSpec:
    """CD/SSMT source split: all source classes train, shots sampled per class."""
    if mode not in ("CD", "SSMT"):
        raise SplitError(f"transfer split mode must be CD or SSMT, got {mode!r}")
    if shots < 1:
        raise SplitError(f"shots_per_class must be >= 1, got {shots}")
    return SplitSpec(
        mode=mode,
        seed=seed,
        shots_per_class=shots,
        base_class_ids=list(range(len(manifest.class_names))),
        new_class_ids=[],
        source_dataset=manifest.dataset_name,
        target_dataset=target_dataset,
    )


def sample_shots(class_ids: list[int], split: SplitSpec) -> list[int]:
    """Pick min(shots, available) record indices per training class.

    Pure function of (record class ids, split.seed, split.shots_per_class):
    each class uses its own PRNG stream so the draw is independent of the
    other classes' record counts.
    """
    chosen: list[int] = []
    for class_id in sorted(split.base_class_ids):
        pool = [i for i, c in enumerate(class_ids) if c == class_id]
        if not pool:
            continue
        rng = Rng(split.seed, stream=class_id)
        chosen.extend(rng.sample(pool, split.shots_per_class))
    return sorted(chosen)


def split_to_text(s: SplitSpec) -> str:
    lines = [
        "format=bimors-split",
        f"version={VERSION}",
        f"mode={s.mode}",
        f"seed={s.seed}",
        f"shots_per_class={s.shots_per_class}",
        f"base_class_ids={' '.join(str(i) for i in s.base_class_ids)}",
        f"new_class_ids={' '.join(str(i) for i in s.new_class_ids)}",
        f"source_dataset={s.source_dataset}",
        f"target_dataset={s.target_dataset}",
    ]
    return "\n".join(lines) + "\n"


def split_from_text(text: str) -> SplitSpec:
    kv = parse_kv_text(text)
    if kv.get("format") != "bimors-split":
        raise FormatError(f"not a split spec: format={kv.get('format')!r}")
    spec = SplitSpec(
        mode=kv["mode"],
        seed=int(kv["seed"]),
        shots_per_class=int(kv["shots_per_class"]),
        base_class_ids=_int_list(kv.get("base_class_ids", "")),
        new_class_ids=_int_list(kv.get("new_class_ids", "")),
        source_dataset=kv.get("source_dataset", ""),
        target_dataset=kv.get("target_dataset", ""),
    )
    if spec.mode == "B2N" and set(spec.base_class_ids) & set(spec.new_class_ids):
        raise FormatError("base and new class id sets overlap")
    return spec


def write_split(split: SplitSpec, path) -> None:
    Path(path).write_text(split_to_text(split), encoding="utf-8")


def read_split(path) -> SplitSpec:
    return split_from_text(Path(path).read_text(encoding="utf-8"))
