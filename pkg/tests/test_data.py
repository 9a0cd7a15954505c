import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from ictseg.data import (
    MalformedManifestError,
    MissingSliceError,
    PayloadShapeError,
    Raster,
    SlicePool,
    SplitError,
    UnsupportedVersionError,
    Volume,
    generate_synthetic_dataset,
    make_split,
    read_dataset,
    sample_batch,
    volume_from_arrays,
    write_dataset,
)


def _count_components(mask):
    # 4-connected flood fill, independent of scipy
    mask = mask.copy()
    h, w = mask.shape
    n = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                n += 1
                stack = [(r, c)]
                mask[r, c] = False
                while stack:
                    y, x = stack.pop()
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx]:
                            mask[yy, xx] = False
                            stack.append((yy, xx))
    return n


class TestGenerator:
    def test_single_ellipse_component(self):
        (vol,) = generate_synthetic_dataset(1, 1, 32, 32, 2, 0.0, seed=7)
        label = vol.labels[0].values[:, :, 0]
        fg = label == 1
        assert _count_components(fg) == 1
        assert fg.sum() >= 9
        assert set(np.unique(label)) == {0, 1}

    def test_zero_noise_image_is_function_of_label(self):
        for seed in range(5):
            (vol,) = generate_synthetic_dataset(1, 1, 32, 32, 3, 0.0, seed=seed)
            img = vol.images[0].values[:, :, 0]
            lab = vol.labels[0].values[:, :, 0]
            levels = {}
            for k in np.unique(lab):
                vals = np.unique(img[lab == k])
                assert len(vals) == 1
                levels[k] = vals[0]
            assert len(set(levels.values())) == len(levels)
            # foreground bands sit above the background band
            assert all(levels[k] > levels[0] for k in levels if k)

    def test_mean_foreground_fraction(self):
        vols = generate_synthetic_dataset(200, 1, 64, 64, 2, 0.3, seed=1)
        fg = 0
        total = 0
        for v in vols:
            lab = v.labels[0].values
            for value in lab.ravel():
                fg += int(value != 0)
                total += 1
        assert 0.05 <= fg / total <= 0.45

    def test_deterministic(self):
        a = generate_synthetic_dataset(3, 2, 32, 32, 3, 0.2, seed=11)
        b = generate_synthetic_dataset(3, 2, 32, 32, 3, 0.2, seed=11)
        assert a == b
        for va, vb in zip(a, b):
            for ra, rb in zip(va.images, vb.images):
                assert ra.values.tobytes() == rb.values.tobytes()

    def test_seed_changes_data(self):
        a = generate_synthetic_dataset(1, 1, 32, 32, 2, 0.2, seed=1)
        b = generate_synthetic_dataset(1, 1, 32, 32, 2, 0.2, seed=2)
        assert a != b

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n_volumes=0),
            dict(slices_per_volume=0),
            dict(height=4),
            dict(n_classes=1),
            dict(noise_sigma=-0.1),
        ],
    )
    def test_invalid_arguments(self, kwargs):
        args = dict(n_volumes=1, slices_per_volume=1, height=32, width=32, n_classes=2, noise_sigma=0.0, seed=0)
        args.update(kwargs)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(**args)

    @settings(max_examples=15, deadline=None)
    @given(
        n_classes=st.integers(2, 5),
        size=st.sampled_from([16, 24, 32]),
        noise=st.floats(0.0, 1.0),
        seed=st.integers(0, 10_000),
    )
    def test_label_and_image_invariants(self, n_classes, size, noise, seed):
        (vol,) = generate_synthetic_dataset(1, 1, size, size, n_classes, noise, seed)
        lab = vol.labels[0].values
        img = vol.images[0].values
        assert lab.max() < n_classes
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0
        for k in range(1, n_classes):
            mask = lab[:, :, 0] == k
            assert mask.sum() >= 9
            assert ndimage.label(mask)[1] == 1


class TestRaster:
    def test_probability_must_normalize(self):
        with pytest.raises(ValueError):
            Raster(np.full((2, 2, 2), 0.4), kind="probability")
        Raster(np.full((2, 2, 2), 0.5), kind="probability")

    def test_label_must_be_integer(self):
        with pytest.raises(ValueError):
            Raster(np.zeros((2, 2)), kind="label")

    def test_spacing_positive(self):
        with pytest.raises(ValueError):
            Raster(np.zeros((2, 2)), spacing=(1.0, 0.0))

    def test_volume_homogeneous(self):
        with pytest.raises(ValueError):
            Volume("v", [Raster(np.zeros((2, 2))), Raster(np.zeros((3, 2)))])

    def test_converter_hook_normalizes(self):
        imgs = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4) * 7.0
        labs = (imgs > 40).astype(np.uint8)
        vol = volume_from_arrays("x", imgs, labs, spacing=(1.5, 1.5))
        for r in vol.images:
            assert r.values.min() == 0.0 and r.values.max() == 1.0
        assert vol.spacing == (1.5, 1.5)


def _vols(n):
    return [Volume(f"v{i:03d}", [Raster(np.zeros((4, 4), np.float32))], [Raster(np.zeros((4, 4), np.uint8), kind="label")]) for i in range(n)]


class TestSplit:
    def test_acdc_protocol_shape(self):
        split = make_split(_vols(100), 0.10, 2, 20, seed=0)
        assert len(split.labelled) == 8
        assert len(split.unlabelled) == 70
        assert len(split.validation) == 2
        assert len(split.test) == 20

    def test_disjoint(self):
        split = make_split(_vols(50), 0.25, 3, 7, seed=5)
        parts = [set(split.labelled), set(split.unlabelled), set(split.validation), set(split.test)]
        assert sum(len(p) for p in parts) == 50
        assert len(set.union(*parts)) == 50

    def test_fully_supervised(self):
        split = make_split(_vols(10), 1.0, 0, 0, seed=1)
        assert len(split.labelled) == 10
        assert split.unlabelled == []

    def test_deterministic_and_seed_dependent(self):
        vols = _vols(40)
        assert make_split(vols, 0.2, 2, 5, seed=3) == make_split(vols, 0.2, 2, 5, seed=3)
        assert make_split(vols, 0.2, 2, 5, seed=3) != make_split(vols, 0.2, 2, 5, seed=4)

    def test_at_least_one_labelled(self):
        split = make_split(_vols(10), 0.01, 0, 0, seed=0)
        assert len(split.labelled) == 1

    def test_infeasible_names_shortfall(self):
        with pytest.raises(SplitError, match="short by 3"):
            make_split(_vols(5), 0.5, 3, 4, seed=0)

    @pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
    def test_bad_fraction(self, fraction):
        with pytest.raises(SplitError, match="label_fraction"):
            make_split(_vols(5), fraction, 0, 0, seed=0)


class TestSampling:
    def _pool(self, n=6, fraction=0.5):
        vols = generate_synthetic_dataset(n, 2, 16, 16, 2, 0.1, seed=0)
        split = make_split(vols, fraction, 0, 0, seed=0)
        return SlicePool.from_split(split, vols)

    def test_degenerate_pair(self):
        img = Raster(np.ones((4, 4), np.float32))
        pool = SlicePool(unlabelled=[img])
        batch = sample_batch(pool, "unlabelled", 1, np.random.default_rng(0))
        assert batch.first[0] is img and batch.second[0] is img

    def test_labelled_kinds(self):
        batch = sample_batch(self._pool(), "labelled", 3, np.random.default_rng(0))
        assert len(batch) == 3
        assert all(r.kind == "image" for r in batch.first)
        assert all(r.kind == "label" for r in batch.second)

    def test_unlabelled_pool_includes_labelled_images(self):
        pool = self._pool(n=6, fraction=0.5)
        assert len(pool.labelled) == 6
        assert len(pool.unlabelled) == 12

    def test_replay(self):
        pool = self._pool()

        def draws(seed):
            rng = np.random.default_rng(seed)
            out = []
            for i in range(100):
                mode = "labelled" if i % 2 else "unlabelled"
                b = sample_batch(pool, mode, 2, rng)
                out.append([id(r) for r in b.first + b.second])
            return out

        assert draws(42) == draws(42)
        assert draws(42) != draws(43)

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            sample_batch(SlicePool(), "labelled", 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_batch(SlicePool(), "unlabelled", 1, np.random.default_rng(0))


class TestDiskFormat:
    def test_round_trip(self, tmp_path):
        vols = generate_synthetic_dataset(2, 3, 16, 24, 3, 0.3, seed=4, spacing=(1.25, 0.8))
        write_dataset(vols, tmp_path)
        back = read_dataset(tmp_path)
        assert back == vols
        for a, b in zip(vols, back):
            assert a.spacing == b.spacing
            for ra, rb in zip(a.images, b.images):
                assert ra.values.tobytes() == rb.values.tobytes()

    def test_payload_bytes(self, tmp_path):
        values = np.random.default_rng(0).random((16, 16)).astype(np.float32)
        vol = Volume("a", [Raster(values)])
        write_dataset([vol], tmp_path)
        raw = (tmp_path / "a" / "0000_image.raw").read_bytes()
        assert len(raw) == 1024
        assert raw == values.astype("<f4").tobytes()
        assert read_dataset(tmp_path)[0].images[0].values[:, :, 0].tobytes() == values.tobytes()

    def test_unlabelled_volume_round_trip(self, tmp_path):
        vol = Volume("u", [Raster(np.zeros((4, 4), np.float32))])
        write_dataset([vol], tmp_path)
        assert read_dataset(tmp_path)[0].labels is None

    def test_missing_slice(self, tmp_path):
        write_dataset(generate_synthetic_dataset(1, 2, 8, 8, 2, 0.0, 0), tmp_path)
        victim = tmp_path / "vol000" / "0001_image.raw"
        victim.unlink()
        with pytest.raises(MissingSliceError) as info:
            read_dataset(tmp_path)
        assert info.value.path == victim

    def test_shape_mismatch(self, tmp_path):
        write_dataset(generate_synthetic_dataset(1, 1, 8, 8, 2, 0.0, 0), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["volumes"][0]["shape"] = [8, 9, 1]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(PayloadShapeError):
            read_dataset(tmp_path)

    def test_unknown_version(self, tmp_path):
        write_dataset(generate_synthetic_dataset(1, 1, 8, 8, 2, 0.0, 0), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(UnsupportedVersionError):
            read_dataset(tmp_path)

    def test_malformed_header(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(MalformedManifestError):
            read_dataset(tmp_path)
        (tmp_path / "manifest.json").write_text(json.dumps({"format": "ictseg-dataset", "version": 1}))
        with pytest.raises(MalformedManifestError):
            read_dataset(tmp_path)
