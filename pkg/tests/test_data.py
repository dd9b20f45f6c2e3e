import collections
import io
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import oracles
from cutprobe.data import (
    SYNTHETIC_CLASSES,
    apply_split,
    bilinear_resize,
    decode_image,
    generate_synthetic,
    iter_samples,
    load_manifest,
    load_split_file,
    preprocess_image,
    split_by_subject,
    split_records,
)
from cutprobe.errors import DataError


def write_manifest(tmp_path, rows, header="path,subject_id,class"):
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join([header] + rows) + "\n")
    return path


class TestManifest:
    def test_parses_and_collects_classes_in_first_appearance_order(self, tmp_path):
        path = write_manifest(
            tmp_path,
            ["a.png,s1,zebra", "b.png,s1,apple", "c.png,s2,zebra"],
        )
        m = load_manifest(path)
        assert m.class_names == ["zebra", "apple"]
        assert [r.subject_id for r in m.records] == ["s1", "s1", "s2"]
        assert m.records[0].path == (tmp_path / "a.png").resolve()
        assert m.records[0].image_id == "a.png"
        assert m.subjects() == ["s1", "s2"]

    def test_declared_class_names_reject_unknown(self, tmp_path):
        path = write_manifest(tmp_path, ["a.png,s1,dog"])
        with pytest.raises(DataError, match="row 2"):
            load_manifest(path, class_names=["cat", "bird"])

    def test_bad_header(self, tmp_path):
        path = write_manifest(tmp_path, ["a.png,s1,c"], header="file,subject,label")
        with pytest.raises(DataError, match="header"):
            load_manifest(path)

    def test_wrong_field_count_names_row(self, tmp_path):
        path = write_manifest(tmp_path, ["a.png,s1,c", "b.png,s1"])
        with pytest.raises(DataError, match="row 3"):
            load_manifest(path)

    def test_empty_field_names_row(self, tmp_path):
        path = write_manifest(tmp_path, ["a.png,,c"])
        with pytest.raises(DataError, match="row 2"):
            load_manifest(path)

    def test_duplicate_path_rejected(self, tmp_path):
        path = write_manifest(tmp_path, ["a.png,s1,c", "a.png,s2,c"])
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(path)


@st.composite
def manifests(draw):
    """Synthetic manifest shells: subject ids with image counts."""
    n_subjects = draw(st.integers(3, 50))
    counts = draw(
        st.lists(st.integers(1, 40), min_size=n_subjects, max_size=n_subjects)
    )
    return {f"s{i:02d}": c for i, c in enumerate(counts)}


def shell_manifest(counts):
    """In-memory manifest with the given per-subject image counts."""
    from cutprobe.data import DatasetManifest, ManifestRecord

    records = [
        ManifestRecord(
            path=Path(f"/nowhere/{subject}_{i}.png"),
            image_id=f"{subject}_{i}.png",
            subject_id=subject,
            class_label=f"c{i % 3}",
        )
        for subject, count in counts.items()
        for i in range(count)
    ]
    return DatasetManifest(records=records, class_names=["c0", "c1", "c2"], root=Path("/nowhere"))


class TestSplit:
    @settings(max_examples=60, deadline=None)
    @given(manifests(), st.integers(0, 2**31 - 1))
    def test_partition_invariants(self, counts, seed):
        manifest = shell_manifest(counts)
        assignment = split_by_subject(manifest, seed=seed)
        split_of = assignment.by_subject
        assert set(split_of) == set(counts)
        assert set(split_of.values()) <= {"train", "eval", "test"}
        totals = collections.Counter()
        for subject, split in split_of.items():
            totals[split] += counts[subject]
        assert sum(totals.values()) == sum(counts.values())
        for split, frac in assignment.achieved_fractions.items():
            assert frac == pytest.approx(totals[split] / sum(counts.values()))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(11, 40), st.integers(0, 2**31 - 1))
    def test_balanced_manifests_land_near_targets(self, n_subjects, seed):
        counts = {f"s{i:02d}": 20 for i in range(n_subjects)}
        manifest = shell_manifest(counts)
        assignment = split_by_subject(manifest, seed=seed)
        for split, target in zip(("train", "eval", "test"), (0.83, 0.07, 0.10)):
            assert abs(assignment.achieved_fractions[split] - target) <= 0.05, (
                split,
                assignment.achieved_fractions,
            )

    def test_deterministic_per_seed(self):
        counts = {f"s{i}": 10 + i for i in range(8)}
        manifest = shell_manifest(counts)
        a = split_by_subject(manifest, seed=4)
        b = split_by_subject(manifest, seed=4)
        assert a.by_subject == b.by_subject

    def test_three_equal_subjects_spread_one_per_split(self):
        counts = {"sa": 10, "sb": 10, "sc": 10}
        manifest = shell_manifest(counts)
        assignment = split_by_subject(manifest, fractions=(0.5, 0.25, 0.25), seed=0)
        assert sorted(assignment.by_subject.values()) == ["eval", "test", "train"]

    def test_too_few_subjects(self):
        manifest = shell_manifest({"sa": 5, "sb": 5})
        with pytest.raises(DataError, match="3"):
            split_by_subject(manifest)

    def test_bad_fractions(self):
        manifest = shell_manifest({"sa": 5, "sb": 5, "sc": 5})
        with pytest.raises(DataError):
            split_by_subject(manifest, fractions=(0.5, 0.5))
        with pytest.raises(DataError):
            split_by_subject(manifest, fractions=(1.0, 0.0, 0.0))

    def test_split_file_round_trip_and_coverage(self, tmp_path):
        manifest = shell_manifest({"sa": 4, "sb": 4, "sc": 4})
        split_path = tmp_path / "split.csv"
        split_path.write_text(
            "subject_id,split\nsa,train\nsb,eval\nsc,test\n"
        )
        assignment = apply_split(manifest, load_split_file(split_path))
        per_split = split_records(manifest, assignment)
        assert {r.subject_id for r in per_split["train"]} == {"sa"}
        assert {r.subject_id for r in per_split["eval"]} == {"sb"}
        assert {r.subject_id for r in per_split["test"]} == {"sc"}

    def test_split_file_missing_subject_rejected(self, tmp_path):
        manifest = shell_manifest({"sa": 4, "sb": 4, "sc": 4})
        split_path = tmp_path / "split.csv"
        split_path.write_text("subject_id,split\nsa,train\nsb,eval\n")
        with pytest.raises(DataError, match="sc"):
            apply_split(manifest, load_split_file(split_path))

    def test_split_file_bad_split_name(self, tmp_path):
        split_path = tmp_path / "split.csv"
        split_path.write_text("subject_id,split\nsa,validation\n")
        with pytest.raises(DataError, match="validation"):
            load_split_file(split_path)


class TestResize:
    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(0, 2**32 - 1),
        st.integers(2, 9),
        st.integers(2, 9),
        st.integers(1, 12),
        st.integers(1, 12),
    )
    def test_matches_scalar_oracle(self, seed, h, w, oh, ow):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0, 1, (h, w)).astype(np.float32)
        out = bilinear_resize(img, oh, ow)
        expect = oracles.bilinear_naive(img, oh, ow)
        assert out.shape == (oh, ow)
        assert np.max(np.abs(out.astype(np.float64) - expect)) < 1e-5

    def test_identity_at_same_size_is_exact(self, rng):
        img = rng.uniform(0, 1, (17, 23, 3)).astype(np.float32)
        assert np.array_equal(bilinear_resize(img, 17, 23), img)

    def test_channels_resize_independently(self, rng):
        img = rng.uniform(0, 1, (10, 10, 3)).astype(np.float32)
        out = bilinear_resize(img, 6, 7)
        for c in range(3):
            assert np.array_equal(out[:, :, c], bilinear_resize(img[:, :, c], 6, 7))


def png_bytes(arr, mode=None):
    buf = io.BytesIO()
    img = Image.fromarray(arr)
    if mode is not None and img.mode != mode:
        img = img.convert(mode)
    img.save(buf, format="PNG")
    return buf.getvalue()


class TestDecode:
    def test_grayscale_scaled_to_unit(self):
        arr = np.arange(0, 256, dtype=np.uint8).reshape(16, 16)
        img = decode_image(png_bytes(arr, "L"))
        assert img.shape == (16, 16)
        assert img.dtype == np.float32
        assert img.max() == pytest.approx(1.0)
        assert img.min() == 0.0

    def test_rgb_shape(self):
        arr = np.zeros((8, 8, 3), dtype=np.uint8)
        arr[..., 1] = 255
        img = decode_image(png_bytes(arr, "RGB"))
        assert img.shape == (8, 8, 3)
        assert np.all(img[..., 1] == 1.0)

    def test_sixteen_bit_rejected(self):
        arr = np.zeros((4, 4), dtype=np.uint16)
        with pytest.raises(DataError, match="bit depth"):
            decode_image(png_bytes(arr, "I;16"))

    def test_garbage_rejected(self):
        with pytest.raises(DataError):
            decode_image(b"not an image at all")


class TestPreprocess:
    def test_grayscale_replicates_to_three_channels(self):
        arr = (np.arange(64, dtype=np.uint8).reshape(8, 8) * 4).astype(np.uint8)
        out = preprocess_image(png_bytes(arr, "L"), (3, 8, 8), mean=(0, 0, 0), std=(1, 1, 1))
        assert out.shape == (3, 8, 8)
        assert np.array_equal(out[0], out[1])
        assert np.array_equal(out[1], out[2])

    def test_normalization_applied_per_channel(self):
        arr = np.full((4, 4, 3), 255, dtype=np.uint8)
        out = preprocess_image(
            png_bytes(arr, "RGB"), (3, 4, 4), mean=(1.0, 0.5, 0.0), std=(1.0, 2.0, 4.0)
        )
        assert np.allclose(out[0], 0.0)
        assert np.allclose(out[1], 0.25)
        assert np.allclose(out[2], 0.25)

    def test_rejects_non_rgb_target(self):
        arr = np.zeros((4, 4), dtype=np.uint8)
        with pytest.raises(DataError):
            preprocess_image(png_bytes(arr, "L"), (1, 4, 4))


class TestSynthetic:
    def test_structure_and_even_spread(self, tmp_path):
        manifest_path = generate_synthetic(
            tmp_path, subjects=11, total_images=5597, size=8, seed=0
        )
        m = load_manifest(manifest_path)
        assert len(m.records) == 5597
        counts = collections.Counter(r.subject_id for r in m.records)
        assert len(counts) == 11
        assert max(counts.values()) - min(counts.values()) <= 1
        assert sorted(set(r.class_label for r in m.records)) == sorted(SYNTHETIC_CLASSES)

    def test_deterministic_to_the_byte(self, tmp_path):
        p1 = generate_synthetic(tmp_path / "a", subjects=3, images_per_subject=4, size=16, seed=9)
        p2 = generate_synthetic(tmp_path / "b", subjects=3, images_per_subject=4, size=16, seed=9)
        m1, m2 = load_manifest(p1), load_manifest(p2)
        assert [r.image_id for r in m1.records] == [r.image_id for r in m2.records]
        for r1, r2 in zip(m1.records, m2.records):
            assert r1.path.read_bytes() == r2.path.read_bytes()

    def test_seed_changes_pixels(self, tmp_path):
        p1 = generate_synthetic(tmp_path / "a", subjects=3, images_per_subject=2, size=16, seed=1)
        p2 = generate_synthetic(tmp_path / "b", subjects=3, images_per_subject=2, size=16, seed=2)
        m1, m2 = load_manifest(p1), load_manifest(p2)
        differing = sum(
            r1.path.read_bytes() != r2.path.read_bytes()
            for r1, r2 in zip(m1.records, m2.records)
        )
        assert differing > 0

    def test_classes_separable_by_pixel_mean(self, synth_manifest):
        # the acceptance sweep leans on this margin; check it directly at
        # the pixel level with a nearest-centroid oracle
        m = synth_manifest
        means, labels = [], []
        for r in m.records:
            img = decode_image(r.path.read_bytes())
            means.append(float(img.mean()))
            labels.append(m.label_index(r.class_label))
        preds = oracles.pixel_mean_classifier(means, labels, means)
        acc = sum(p == l for p, l in zip(preds, labels)) / len(labels)
        assert acc > 0.9

    def test_iter_samples_yields_preprocessed(self, synth_manifest):
        m = synth_manifest
        sample = next(iter_samples(m, (3, 32, 32)))
        assert sample.pixels.shape == (3, 32, 32)
        assert sample.pixels.dtype == np.float32
        assert sample.subject_id == m.records[0].subject_id
        assert sample.label == m.label_index(m.records[0].class_label)
