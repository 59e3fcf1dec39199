import csv

import pytest
import torch

from latentaug.data import (
    CLASS_NAMES,
    TOY_GENERATOR_ID,
    ImageDataset,
    IngestError,
    ShapeGenParams,
    ToyDataSpec,
    generate_shapes,
    ingest_dataset,
    make_toy_datasets,
    pretrain_params,
    save_dataset,
    target_params,
)


def small_spec(**overrides) -> ToyDataSpec:
    base = dict(n_pretrain=30, n_target=24, n_test=12, resolution=16, shift=0.5, seed=0)
    base.update(overrides)
    return ToyDataSpec(**base)


class TestImageDataset:
    def test_valid_construction(self):
        images = torch.rand(6, 3, 16, 16)
        ds = ImageDataset(images=images, labels=torch.tensor([0, 1, 2, 0, 1, 2]),
                          ids=tuple(f"i{k}" for k in range(6)))
        assert len(ds) == 6 and ds.resolution == 16 and ds.num_classes() == 3

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            ImageDataset(images=torch.rand(2, 3, 8, 8), labels=torch.tensor([0, 1]),
                         ids=("a", "a"))

    def test_out_of_range_pixels_rejected(self):
        images = torch.rand(2, 3, 8, 8) + 1.0
        with pytest.raises(ValueError):
            ImageDataset(images=images, labels=torch.tensor([0, 1]), ids=("a", "b"))

    def test_subset_preserves_alignment(self):
        ds = generate_shapes(12, target_params(16), seed=3, split="t")
        sub = ds.subset([1, 5, 7])
        assert sub.ids == (ds.ids[1], ds.ids[5], ds.ids[7])
        assert torch.equal(sub.images[2], ds.images[7])
        assert sub.labels.tolist() == [ds.labels[i].item() for i in (1, 5, 7)]

    def test_checksum_changes_with_content(self):
        a = generate_shapes(6, target_params(16), seed=0, split="s")
        b = generate_shapes(6, target_params(16), seed=1, split="s")
        assert a.checksum() != b.checksum()

    def test_class_histogram_balanced_roundrobin(self):
        ds = generate_shapes(9, target_params(16), seed=0, split="s")
        assert ds.class_histogram() == {0: 3, 1: 3, 2: 3}


class TestGenerateShapes:
    def test_deterministic_across_invocations(self):
        a = generate_shapes(10, target_params(16), seed=5, split="x")
        b = generate_shapes(10, target_params(16), seed=5, split="x")
        assert a.checksum() == b.checksum()
        assert torch.equal(a.images, b.images)

    def test_per_image_streams_prefix_stable(self):
        # growing the dataset never changes earlier images
        small = generate_shapes(5, target_params(16), seed=5, split="x")
        large = generate_shapes(10, target_params(16), seed=5, split="x")
        assert torch.equal(large.images[:5], small.images)

    def test_resolution_and_range(self):
        ds = generate_shapes(4, target_params(32), seed=0, split="r")
        assert ds.images.shape == (4, 3, 32, 32)
        assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0

    def test_three_shapes_are_distinct(self):
        params = ShapeGenParams(pixel_noise=0.0, outline_prob=0.0, flip_prob=0.0)
        ds = generate_shapes(3, params, seed=0, split="d")
        for i in range(3):
            for j in range(i + 1, 3):
                assert not torch.allclose(ds.images[i], ds.images[j])


class TestToyDatasets:
    def test_counts_and_balance(self):
        spec = ToyDataSpec(n_pretrain=600, n_target=600, n_test=300, seed=0)
        pre, tgt, tst = make_toy_datasets(spec)
        assert (len(pre), len(tgt), len(tst)) == (600, 600, 300)
        assert tgt.class_histogram() == {0: 200, 1: 200, 2: 200}

    def test_zero_shift_parameters_identical(self):
        assert pretrain_params(0.0, 16) == target_params(16)

    def test_shift_changes_pretrain_only(self):
        a = make_toy_datasets(small_spec(shift=0.0))
        b = make_toy_datasets(small_spec(shift=1.0))
        assert a[0].checksum() != b[0].checksum()  # pretrain differs
        assert a[1].checksum() == b[1].checksum()  # target identical
        assert a[2].checksum() == b[2].checksum()  # test identical

    def test_splits_disjoint_ids(self):
        pre, tgt, tst = make_toy_datasets(small_spec())
        assert not (set(pre.ids) & set(tgt.ids)) and not (set(tgt.ids) & set(tst.ids))

    def test_degenerate_spec_rejected(self):
        with pytest.raises(ValueError):
            ToyDataSpec(num_classes=0)

    def test_flip_prob_capped_so_both_polarities_appear(self):
        # even at maximum shift, pretraining must keep unflipped examples,
        # otherwise the autoencoder never sees the target's contrast polarity
        params = pretrain_params(1.0, 16)
        assert params.flip_prob <= 0.5


class TestIngest:
    def test_toy_generator_id(self):
        ds = ingest_dataset(TOY_GENERATOR_ID, format="toy", n=9, seed=1, resolution=16)
        assert len(ds) == 9
        again = ingest_dataset(TOY_GENERATOR_ID, format="toy", n=9, seed=1, resolution=16)
        assert ds.checksum() == again.checksum()

    def test_png_roundtrip(self, tmp_path):
        ds = generate_shapes(10, target_params(16), seed=2, split="save")
        out = save_dataset(ds, tmp_path / "d")
        loaded = ingest_dataset(out)
        assert loaded.checksum() == ds.checksum()
        assert loaded.ids == ds.ids

    def test_empty_directory_error_names_path(self, tmp_path):
        missing = tmp_path / "nothing"
        missing.mkdir()
        with pytest.raises(IngestError, match="nothing"):
            ingest_dataset(missing)

    def test_unknown_generator_id(self):
        with pytest.raises(IngestError, match="unknown"):
            ingest_dataset("not-a-generator", format="toy")

    def test_bad_rows_reported_with_filenames(self, tmp_path):
        ds = generate_shapes(4, target_params(16), seed=0, split="bad")
        out = save_dataset(ds, tmp_path / "d")
        # corrupt one image file and point one row at a missing file
        files = sorted(out.glob("*.png"))
        files[0].write_bytes(b"not a png")
        with open(out / "labels.csv") as fh:
            rows = list(csv.reader(fh))
        rows.append(["ghost.png", "1"])
        with open(out / "labels.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        with pytest.raises(IngestError) as err:
            ingest_dataset(out)
        assert files[0].name in str(err.value) and "ghost.png" in str(err.value)

    def test_class_names_cover_generator(self):
        assert len(CLASS_NAMES) == 3
