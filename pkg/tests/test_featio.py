import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimors import featio
from bimors.errors import (
    ChecksumError,
    FormatError,
    SplitError,
    TruncationError,
    ValidationError,
)


def make_manifest(n_classes=3, d_vis=4, d_clip=3, d_cap=4, names=None):
    names = names or [f"class{i}" for i in range(n_classes)]
    return featio.DatasetManifest(
        dataset_name="toy",
        class_names=names,
        d_vis=d_vis,
        d_clip=d_clip,
        d_cap=d_cap,
        context_length=16,
        record_count=0,
        class_token_ids=[[10 + i] for i in range(len(names))],
        template_token_ids=[3, 4, 5, 3],
    )


def make_record(i, class_id, manifest, rng, n_p=2, t=3):
    return featio.FeatureRecord(
        image_id=f"img{i:04d}",
        class_id=class_id,
        visual_tokens=rng.normal(size=(n_p, manifest.d_vis)).astype(np.float32),
        global_embed=rng.normal(size=(manifest.d_clip,)).astype(np.float32),
        caption_text=f"a scene number {i}",
        caption_token_embeds=rng.normal(size=(t, manifest.d_cap)).astype(np.float32),
    )


def write_toy(tmp_path, n_per_class=4, n_classes=3, seed=0, names=None):
    manifest = make_manifest(n_classes=n_classes, names=names)
    rng = np.random.default_rng(seed)
    records = []
    for c in range(n_classes):
        for j in range(n_per_class):
            records.append(make_record(c * n_per_class + j, c, manifest, rng))
    featio.write_dataset(manifest, records, tmp_path / "ds")
    return tmp_path / "ds", records


class TestRoundTrip:
    def test_two_records_bit_exact(self, tmp_path):
        manifest = make_manifest()
        rng = np.random.default_rng(1)
        records = [make_record(0, 0, manifest, rng), make_record(1, 2, manifest, rng)]
        featio.write_dataset(manifest, records, tmp_path / "ds")
        m2, reader = featio.read_dataset(tmp_path / "ds")
        assert m2.record_count == 2
        assert m2.class_names == manifest.class_names
        for i, rec in enumerate(records):
            back = reader.record(i)
            assert back.image_id == rec.image_id
            assert back.class_id == rec.class_id
            assert back.caption_text == rec.caption_text
            assert np.array_equal(back.visual_tokens, rec.visual_tokens)
            assert np.array_equal(back.global_embed, rec.global_embed)
            assert np.array_equal(back.caption_token_embeds, rec.caption_token_embeds)

    def test_wrong_caption_width_rejected(self, tmp_path):
        manifest = make_manifest(d_cap=4)
        rng = np.random.default_rng(2)
        bad = make_record(0, 0, manifest, rng)
        bad.caption_token_embeds = rng.normal(size=(3, 5)).astype(np.float32)
        with pytest.raises(ValidationError, match="caption_token_embeds"):
            featio.write_dataset(manifest, [bad], tmp_path / "ds")

    def test_thousand_records_checksum_stable(self, tmp_path):
        # hash oracle: rewriting the reread records reproduces identical bytes
        manifest = make_manifest(n_classes=5)
        rng = np.random.default_rng(3)
        records = [make_record(i, i % 5, manifest, rng) for i in range(1000)]
        featio.write_dataset(manifest, records, tmp_path / "a")
        blob_a = (tmp_path / "a" / featio.BLOB_NAME).read_bytes()
        m2, reader = featio.read_dataset(tmp_path / "a")
        assert m2.blob_sha256 == hashlib.sha256(blob_a).hexdigest()
        reread = [reader.record(i) for i in range(len(reader))]
        featio.write_dataset(make_manifest(n_classes=5), reread, tmp_path / "b")
        blob_b = (tmp_path / "b" / featio.BLOB_NAME).read_bytes()
        assert hashlib.sha256(blob_a).hexdigest() == hashlib.sha256(blob_b).hexdigest()

    @given(
        n_p=st.integers(min_value=1, max_value=4),
        t=st.integers(min_value=1, max_value=4),
        caption=st.text(max_size=20),
    )
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, tmp_path_factory, n_p, t, caption):
        tmp = tmp_path_factory.mktemp("prop")
        manifest = make_manifest()
        rng = np.random.default_rng(4)
        rec = make_record(0, 1, manifest, rng, n_p=n_p, t=t)
        rec.caption_text = caption
        featio.write_dataset(manifest, [rec], tmp / "ds")
        _, reader = featio.read_dataset(tmp / "ds")
        back = reader.record(0)
        assert back.caption_text == caption
        assert np.array_equal(back.visual_tokens, rec.visual_tokens)


class TestReadErrors:
    def test_wrong_magic(self, tmp_path):
        path, _ = write_toy(tmp_path)
        blob = (path / featio.BLOB_NAME).read_bytes()
        (path / featio.BLOB_NAME).write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(FormatError, match="magic"):
            featio.read_dataset(path)

    def test_wrong_version(self, tmp_path):
        path, _ = write_toy(tmp_path)
        blob = bytearray((path / featio.BLOB_NAME).read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        (path / featio.BLOB_NAME).write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            featio.read_dataset(path)

    def test_truncated_blob(self, tmp_path):
        path, _ = write_toy(tmp_path)
        blob = (path / featio.BLOB_NAME).read_bytes()
        (path / featio.BLOB_NAME).write_bytes(blob[: len(blob) // 2])
        with pytest.raises(TruncationError):
            featio.read_dataset(path)

    def test_checksum_mismatch(self, tmp_path):
        path, _ = write_toy(tmp_path)
        blob = bytearray((path / featio.BLOB_NAME).read_bytes())
        blob[-1] ^= 0xFF
        (path / featio.BLOB_NAME).write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            featio.read_dataset(path)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FormatError):
            featio.read_dataset(tmp_path / "nope")


class TestManifest:
    def test_text_roundtrip(self):
        m = make_manifest(names=["harbor", "beach", "forest"])
        m.record_count = 7
        m.blob_sha256 = "ab" * 32
        m.shared_class_names = ["beach", "forest"]
        back = featio.manifest_from_text(featio.manifest_to_text(m))
        assert back == m

    def test_duplicate_class_names_rejected(self):
        m = make_manifest(names=["a", "a", "b"])
        with pytest.raises(ValidationError):
            m.validate()

    def test_unknown_shared_class_rejected(self):
        m = make_manifest()
        m.shared_class_names = ["nope"]
        with pytest.raises(ValidationError):
            m.validate()


class TestSplits:
    def test_alphabetical_halving(self):
        m = make_manifest(names=["d", "b", "a", "c"])
        split = featio.make_b2n_split(m, seed=0, shots=2)
        base_names = sorted(m.class_names[i] for i in split.base_class_ids)
        new_names = sorted(m.class_names[i] for i in split.new_class_ids)
        assert base_names == ["a", "b"]
        assert new_names == ["c", "d"]

    def test_same_seed_same_shots(self, tmp_path):
        path, _ = write_toy(tmp_path, n_per_class=6)
        manifest, reader = featio.read_dataset(path)
        split = featio.make_b2n_split(manifest, seed=7, shots=3)
        first = featio.sample_shots(reader.class_ids, split)
        second = featio.sample_shots(reader.class_ids, split)
        assert first == second
        assert len(first) == 3 * len(split.base_class_ids)

    def test_different_seeds_differ(self, tmp_path):
        path, _ = write_toy(tmp_path, n_per_class=8)
        manifest, reader = featio.read_dataset(path)
        a = featio.sample_shots(reader.class_ids, featio.make_b2n_split(manifest, 1, 3))
        b = featio.sample_shots(reader.class_ids, featio.make_b2n_split(manifest, 2, 3))
        assert a != b

    def test_38_classes_counting_oracle(self):
        m = make_manifest(names=[f"c{i:02d}" for i in range(38)])
        m.class_token_ids = [[i] for i in range(38)]
        split = featio.make_b2n_split(m, seed=0)
        # counting oracle: ceil(38/2) = 19 each
        assert len(split.base_class_ids) == 19
        assert len(split.new_class_ids) == 19
        assert set(split.base_class_ids) | set(split.new_class_ids) == set(range(38))
        assert not set(split.base_class_ids) & set(split.new_class_ids)

    def test_fewer_than_two_classes(self):
        m = make_manifest(names=["only"])
        m.class_token_ids = [[1]]
        with pytest.raises(SplitError):
            featio.make_b2n_split(m, seed=0)

    def test_shot_cap_at_available(self, tmp_path):
        path, _ = write_toy(tmp_path, n_per_class=2)
        manifest, reader = featio.read_dataset(path)
        split = featio.make_b2n_split(manifest, seed=0, shots=16)
        shots = featio.sample_shots(reader.class_ids, split)
        # exactly min(shots, available) per base class
        assert len(shots) == 2 * len(split.base_class_ids)

    def test_split_text_roundtrip(self, tmp_path):
        m = make_manifest(names=[f"c{i}" for i in range(5)])
        m.class_token_ids = [[i] for i in range(5)]
        split = featio.make_b2n_split(m, seed=3, shots=4)
        featio.write_split(split, tmp_path / "split.txt")
        back = featio.read_split(tmp_path / "split.txt")
        assert back == split

    def test_transfer_split_covers_all_classes(self):
        m = make_manifest(n_classes=4)
        split = featio.make_transfer_split(m, seed=0, shots=16, mode="CD", target_dataset="other")
        assert split.base_class_ids == [0, 1, 2, 3]
        assert split.target_dataset == "other"

    @given(seed=st.integers(min_value=0, max_value=2**32), shots=st.integers(min_value=1, max_value=5))
    @settings(max_examples=30, deadline=None)
    def test_split_purity(self, seed, shots):
        # pure function of (manifest, seed, shots)
        m = make_manifest(names=["x", "y", "z", "w"])
        m.class_token_ids = [[i] for i in range(4)]
        class_ids = [0, 0, 0, 1, 1, 2, 2, 3, 3, 3]
        s1 = featio.make_b2n_split(m, seed, shots)
        s2 = featio.make_b2n_split(m, seed, shots)
        assert s1 == s2
        assert featio.sample_shots(class_ids, s1) == featio.sample_shots(class_ids, s2)
