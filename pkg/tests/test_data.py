import json

import numpy as np
import pytest

from floodlora.data import (
    CHANNEL_NAMES,
    FSEG_MAGIC,
    SPLITS,
    Dataset,
    DatasetManifest,
    FloodSample,
    SynthConfig,
    batch_indices,
    generate_synthetic,
    load_dataset,
    read_fseg,
    split_iter,
    synth_scene,
    write_fseg,
)
from floodlora.errors import ConfigurationError, DataFormatError, UsageError
from floodlora.lora import Strategy
from floodlora.model import DESK_PRESET, SegModel
from floodlora.training import TrainConfig, evaluate, split_arrays, train

SMALL = dict(image_size=32, n_train=6, n_val=3, n_test=3, n_ood=3)
OOD_MARGIN_DB = 1.0


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestFseg:
    def test_raster_round_trip_is_bitwise(self, rng, tmp_path):
        a = rng.normal(size=(4, 5, 7)).astype(np.float32)
        write_fseg(tmp_path / "r.fseg", a)
        back = read_fseg(tmp_path / "r.fseg")
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, a)

    def test_mask_round_trip(self, rng, tmp_path):
        m = (rng.random((6, 3)) > 0.5).astype(np.uint8)
        write_fseg(tmp_path / "m.fseg", m)
        np.testing.assert_array_equal(read_fseg(tmp_path / "m.fseg", mask=True), m)

    def test_header_layout(self, tmp_path):
        write_fseg(tmp_path / "r.fseg", np.zeros((2, 3, 5), dtype=np.float32))
        raw = (tmp_path / "r.fseg").read_bytes()
        assert raw[:4] == FSEG_MAGIC
        assert int.from_bytes(raw[4:6], "little") == 1
        assert int.from_bytes(raw[6:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 3 and int.from_bytes(raw[12:16], "little") == 5
        assert len(raw) == 16 + 2 * 3 * 5 * 4

    @pytest.mark.parametrize("damage", ["truncate", "magic", "version", "short"])
    def test_corruption(self, damage, tmp_path):
        path = tmp_path / "r.fseg"
        write_fseg(path, np.ones((1, 2, 2), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        if damage == "truncate":
            raw = raw[:-3]
        elif damage == "magic":
            raw[:4] = b"XXXX"
        elif damage == "version":
            raw[4] = 9
        else:
            raw = raw[:10]
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError):
            read_fseg(path, label="sample-7")

    def test_error_names_sample(self, tmp_path):
        with pytest.raises(DataFormatError, match="sample-7"):
            read_fseg(tmp_path / "missing.fseg", label="sample-7")

    def test_bad_rank(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_fseg(tmp_path / "x.fseg", np.zeros(3))


class TestGenerator:
    def test_regeneration_is_byte_identical(self, tmp_path):
        generate_synthetic(SynthConfig(seed=4, **SMALL), tmp_path / "a")
        generate_synthetic(SynthConfig(seed=4, **SMALL), tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_seed_changes_data(self, tmp_path):
        generate_synthetic(SynthConfig(seed=4, **SMALL), tmp_path / "a")
        generate_synthetic(SynthConfig(seed=5, **SMALL), tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")

    def test_water_is_darker_than_land(self, desk_dataset):
        for split in SPLITS:
            for s in desk_dataset.samples(split, normalize=False):
                water = s.mask.astype(bool)
                assert s.post[:, water].mean() < s.post[:, ~water].mean(), s.id

    def test_water_fraction_in_range(self):
        cfg = SynthConfig(image_size=64)
        rng = np.random.default_rng(0)
        ok = 0
        for _ in range(100):
            _, _, mask, frac = synth_scene(rng, cfg)
            lo, hi = cfg.water_fraction
            ok += lo - 0.05 <= frac <= hi + 0.05
            assert mask.mean() == frac
        assert ok >= 95

    def test_label_modes(self, tmp_path):
        all_water = generate_synthetic(SynthConfig(seed=2, **SMALL), tmp_path / "a")
        flood = generate_synthetic(SynthConfig(seed=2, label_mode="flood_only", **SMALL), tmp_path / "b")
        for sid in all_water.ids("train"):
            a, f = all_water.sample(sid).mask, flood.sample(sid).mask
            assert np.all(f <= a) and f.sum() < a.sum()

    def test_ood_regime_is_shifted(self, desk_dataset):
        """Water brightens and land darkens, so compare class-conditional channel means."""

        def class_means(split):
            items = list(desk_dataset.samples(split, normalize=False))
            water = np.mean([s.post[:, s.mask > 0].mean(axis=1) for s in items], axis=0)
            land = np.mean([s.post[:, s.mask == 0].mean(axis=1) for s in items], axis=0)
            return water, land

        (tw, tl), (ow, ol) = class_means("test"), class_means("ood")
        assert np.all(np.abs(ow - tw) > OOD_MARGIN_DB) and np.all(np.abs(ol - tl) > OOD_MARGIN_DB)

    def test_split_streams_are_independent(self, tmp_path):
        a = generate_synthetic(SynthConfig(seed=3, **SMALL), tmp_path / "a")
        b = generate_synthetic(SynthConfig(seed=3, **{**SMALL, "n_train": 2}), tmp_path / "b")
        for sid in a.ids("test"):
            np.testing.assert_array_equal(a.sample(sid, normalize=False).post, b.sample(sid, normalize=False).post)

    @pytest.mark.parametrize("kw", [dict(water_fraction=(0.0, 0.3)), dict(water_fraction=(0.5, 0.4)),
                                    dict(speckle=1.5), dict(label_mode="rivers"), dict(n_val=-1)])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigurationError):
            SynthConfig(**kw)

    def test_speckle_is_a_monotone_difficulty_knob(self, tmp_path):
        f1 = {}
        for speckle in (0.1, 0.6):
            ds = generate_synthetic(SynthConfig(n_train=16, n_val=8, n_test=8, n_ood=1, speckle=speckle, seed=6),
                                    tmp_path / f"s{speckle}")
            model = SegModel(DESK_PRESET, np.random.default_rng(0), Strategy("frozen"))
            train(model, split_arrays(ds, "train"), split_arrays(ds, "val"), TrainConfig(lr=1e-3, max_epochs=15))
            f1[speckle] = evaluate(model, split_arrays(ds, "test")).report.f1
        assert f1[0.1] > f1[0.6]


class TestDataset:
    def test_manifest_contents(self, tiny_dataset):
        m = tiny_dataset.manifest
        assert m.channel_names == list(CHANNEL_NAMES) and len(CHANNEL_NAMES) == 8
        assert len(m.norm_mean) == len(m.norm_std) == 8
        assert [len(tiny_dataset.ids(s)) for s in SPLITS] == [8, 4, 4, 4]

    def test_normalization_uses_train_split(self, tiny_dataset):
        pre = np.stack([s.pre for s in tiny_dataset.samples("train")])
        post = np.stack([s.post for s in tiny_dataset.samples("train")])
        both = np.concatenate([pre, post], axis=1)
        np.testing.assert_allclose(both.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(both.std(axis=(0, 2, 3)), 1.0, atol=1e-5)

    def test_loaded_values_equal_written(self, tiny_dataset):
        sid = tiny_dataset.ids("val")[0]
        raw = tiny_dataset.sample(sid, normalize=False)
        rec = tiny_dataset.manifest.samples[[s["id"] for s in tiny_dataset.manifest.samples].index(sid)]
        np.testing.assert_array_equal(raw.pre, read_fseg(tiny_dataset.root / rec["pre"]))
        normed = tiny_dataset.sample(sid)
        np.testing.assert_allclose(normed.pre * np.array(tiny_dataset.manifest.norm_std[:4])[:, None, None]
                                   + np.array(tiny_dataset.manifest.norm_mean[:4])[:, None, None], raw.pre,
                                   rtol=1e-12, atol=1e-9)

    def test_split_filtering(self, tiny_dataset):
        for split in SPLITS:
            assert all(s.split == split for s in tiny_dataset.samples(split))

    def test_unknown_split_and_id(self, tiny_dataset):
        with pytest.raises(UsageError):
            tiny_dataset.ids("holdout")
        with pytest.raises(UsageError):
            tiny_dataset.sample("nope")

    def test_truncated_raster_names_sample(self, tmp_path):
        ds = generate_synthetic(SynthConfig(seed=1, **SMALL), tmp_path)
        sid = ds.ids("test")[1]
        path = tmp_path / "samples" / f"{sid}.post.fseg"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataFormatError, match=sid):
            load_dataset(tmp_path).sample(sid)

    def test_missing_file_and_corrupt_manifest(self, tmp_path):
        ds = generate_synthetic(SynthConfig(seed=1, **SMALL), tmp_path)
        sid = ds.ids("train")[0]
        (tmp_path / "samples" / f"{sid}.mask.fseg").unlink()
        with pytest.raises(DataFormatError, match=sid):
            ds.sample(sid)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path)
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "absent")

    def test_shape_mismatch_against_manifest(self, tmp_path):
        ds = generate_synthetic(SynthConfig(seed=1, **SMALL), tmp_path)
        sid = ds.ids("train")[0]
        write_fseg(tmp_path / "samples" / f"{sid}.pre.fseg", np.zeros((4, 16, 16), dtype=np.float32))
        with pytest.raises(DataFormatError, match=sid):
            ds.sample(sid)

    def test_manifest_invariants(self, tiny_dataset):
        d = json.loads(tiny_dataset.manifest.to_json())
        d["samples"].append(dict(d["samples"][0]))
        with pytest.raises(DataFormatError):
            DatasetManifest.from_json(json.dumps(d))
        d["samples"].pop()
        d["normalization"]["mean"] = d["normalization"]["mean"][:7]
        with pytest.raises(DataFormatError):
            DatasetManifest.from_json(json.dumps(d))

    def test_sample_shape_invariant(self):
        with pytest.raises(DataFormatError):
            FloodSample("x", "train", np.zeros((4, 2, 2)), np.zeros((4, 2, 2)), np.zeros((3, 3)))


class TestBatching:
    def test_partial_final_batch(self):
        assert [len(b) for b in batch_indices(10, 4)] == [4, 4, 2]

    def test_seeded_order(self):
        a = [b.tolist() for b in batch_indices(10, 4, 7)]
        assert a == [b.tolist() for b in batch_indices(10, 4, 7)]
        assert sorted(sum(a, [])) == list(range(10))
        assert a != [b.tolist() for b in batch_indices(10, 4, 8)]

    def test_val_order_ignores_seed(self, tiny_dataset):
        ids = [b[3] for b in split_iter(tiny_dataset, "val", 3, shuffle_seed=1)]
        assert ids == [b[3] for b in split_iter(tiny_dataset, "val", 3, shuffle_seed=99)]
        assert sum(ids, []) == tiny_dataset.ids("val")

    def test_train_shuffles(self, tiny_dataset):
        runs = [sum((b[3] for b in split_iter(tiny_dataset, "train", 3, shuffle_seed=s)), []) for s in (1, 2)]
        assert sorted(runs[0]) == sorted(runs[1]) and runs[0] != runs[1]

    def test_empty_split(self, tmp_path):
        ds = generate_synthetic(SynthConfig(seed=1, **{**SMALL, "n_ood": 0}), tmp_path)
        with pytest.raises(UsageError):
            list(split_iter(ds, "ood", 2))
        assert isinstance(ds, Dataset)

    def test_bad_batch_size(self):
        with pytest.raises(ConfigurationError):
            batch_indices(3, 0)
