import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camoguide.checkpoint import (CheckpointError, load_checkpoint,
                                  save_checkpoint)
from camoguide.dataset import (DatasetError, GenConfig, SHAPE_FAMILIES,
                               dataset_sha256, generate_dataset, load_dataset,
                               load_sample, rasterize_shape, resize_bilinear)
from camoguide.pnm import PnmError, read_pgm, read_ppm, write_pgm, write_ppm


SMALL = GenConfig(categories=4, train_queries=12, test_queries=8,
                  refs_per_cat=3, size=64, unseen_categories=1)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    records = generate_dataset(str(root), SMALL, seed=7)
    return str(root), records


class TestPnm:
    def test_ppm_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 9, 7)).astype(np.float32)
        p1 = str(tmp_path / "a.ppm")
        p2 = str(tmp_path / "b.ppm")
        write_ppm(p1, img)
        back = read_ppm(p1)
        write_ppm(p2, back)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        assert back.shape == (3, 9, 7)

    def test_pgm_binary_values(self, tmp_path):
        mask = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        path = str(tmp_path / "m.pgm")
        write_pgm(path, mask)
        raw = open(path, "rb").read()
        assert raw.endswith(bytes([0, 255, 255, 0]))
        assert np.array_equal(read_pgm(path), mask)

    def test_ascii_variants_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
        with pytest.raises(PnmError, match="ASCII"):
            read_pgm(str(path))
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(PnmError, match="ASCII"):
            read_ppm(str(path))

    def test_wrong_maxval_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(PnmError, match="maxval"):
            read_pgm(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P7\n1 1\n255\n\x00")
        with pytest.raises(PnmError, match="magic"):
            read_pgm(str(path))

    def test_magic_mismatch_between_formats(self, tmp_path):
        path = str(tmp_path / "gray.pgm")
        write_pgm(path, np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(PnmError, match="expected P6"):
            read_ppm(path)

    @given(h=st.integers(1, 12), w=st.integers(1, 12),
           seed=st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, tmp_path_factory, h, w, seed):
        rng = np.random.default_rng(seed)
        gray = rng.random((h, w)).astype(np.float32)
        path = str(tmp_path_factory.mktemp("pnm") / "x.pgm")
        write_pgm(path, gray)
        back = read_pgm(path)
        write_pgm(path + "2", back)
        assert open(path, "rb").read() == open(path + "2", "rb").read()


class TestShapes:
    def test_all_families_rasterize(self):
        for fam in SHAPE_FAMILIES:
            mask = rasterize_shape(fam, 48, 24.0, 24.0, 12.0, 0.8, 0.3)
            assert mask.dtype == bool
            assert 0 < mask.sum() < 48 * 48

    def test_unknown_family(self):
        with pytest.raises(DatasetError, match="unknown shape"):
            rasterize_shape("blob", 32, 16, 16, 8, 1.0, 0.0)


class TestResize:
    def test_identity(self):
        rng = np.random.default_rng(1)
        x = rng.random((5, 6)).astype(np.float32)
        assert np.abs(resize_bilinear(x, 5, 6) - x).max() < 1e-6

    def test_constant(self):
        x = np.full((4, 4), 0.6)
        out = resize_bilinear(x, 7, 9)
        assert np.abs(out - 0.6).max() < 1e-6


class TestGenerator:
    def test_deterministic_tree(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_dataset(str(a), SMALL, seed=3)
        generate_dataset(str(b), SMALL, seed=3)
        assert dataset_sha256(str(a)) == dataset_sha256(str(b))
        c = tmp_path / "c"
        generate_dataset(str(c), SMALL, seed=4)
        assert dataset_sha256(str(a)) != dataset_sha256(str(c))

    def test_mask_fractions_in_range(self, small_dataset):
        root, records = small_dataset
        for rec in records:
            _img, mask = load_sample(root, rec)
            frac = mask.mean()
            assert 0.05 <= frac <= 0.5, rec.id

    def test_reference_contrast_dominates(self, small_dataset):
        root, records = small_dataset

        def gap(rec):
            img, mask = load_sample(root, rec)
            lum = img.mean(axis=0)
            m = mask[0] >= 0.5
            return abs(lum[m].mean() - lum[~m].mean())

        q_gaps = [gap(r) for r in records if r.role == "query"]
        r_gaps = [gap(r) for r in records if r.role == "reference"]
        assert min(r_gaps) >= 3.0 * np.mean(q_gaps)
        assert np.mean(r_gaps) >= 3.0 * max(q_gaps)

    def test_unseen_categories_absent_from_train(self, small_dataset):
        _root, records = small_dataset
        train_cats = {r.category for r in records if r.split == "train" and r.role == "query"}
        test_cats = {r.category for r in records if r.split == "test"}
        assert train_cats == {0, 1, 2}
        assert 3 in test_cats

    def test_too_many_categories(self, tmp_path):
        cfg = GenConfig(categories=len(SHAPE_FAMILIES) + 1)
        with pytest.raises(DatasetError, match="shape families"):
            generate_dataset(str(tmp_path / "x"), cfg, seed=0)


class TestLoader:
    def test_counts_match_config(self, small_dataset):
        root, _ = small_dataset
        records = load_dataset(root)
        train_q = [r for r in records if r.split == "train" and r.role == "query"]
        test_q = [r for r in records if r.split == "test"]
        refs = [r for r in records if r.role == "reference"]
        assert len(train_q) == SMALL.train_queries
        assert len(test_q) == SMALL.test_queries
        assert len(refs) == SMALL.categories * SMALL.refs_per_cat

    def test_every_query_category_has_references(self, small_dataset):
        root, _ = small_dataset
        records = load_dataset(root)
        ref_cats = {r.category for r in records if r.role == "reference"}
        for r in records:
            if r.role == "query":
                assert r.category in ref_cats

    def test_missing_mask_errors(self, tmp_path):
        root = tmp_path / "ds"
        records = generate_dataset(str(root), SMALL, seed=9)
        victim = next(r for r in records if r.role == "query")
        os.remove(os.path.join(str(root), victim.mask_path))
        with pytest.raises(DatasetError, match=victim.id):
            load_dataset(str(root))

    def test_unknown_split_errors(self, tmp_path):
        root = tmp_path / "ds"
        generate_dataset(str(root), SMALL, seed=9)
        manifest = os.path.join(str(root), "manifest.tsv")
        text = open(manifest).read().replace("\ttest\t", "\tvalid\t", 1)
        open(manifest, "w").write(text)
        with pytest.raises(DatasetError, match="split"):
            load_dataset(str(root))

    def test_nonbinary_mask_errors(self, tmp_path):
        root = tmp_path / "ds"
        records = generate_dataset(str(root), SMALL, seed=9)
        victim = next(r for r in records if r.role == "query")
        gray = np.full((SMALL.size, SMALL.size), 0.5, dtype=np.float32)
        write_pgm(os.path.join(str(root), victim.mask_path), gray)
        with pytest.raises(DatasetError, match="binary"):
            load_dataset(str(root))


class TestCheckpoint:
    def entries(self):
        rng = np.random.default_rng(11)
        return {
            "param.w": rng.standard_normal((3, 4)).astype(np.float32),
            "flags": np.array([1, 0, 1], dtype=np.uint8),
            "mu": np.array([0.99], dtype=np.float64),
        }

    def test_save_load_save_identical(self, tmp_path):
        p1 = str(tmp_path / "a.rfo")
        p2 = str(tmp_path / "b.rfo")
        entries = self.entries()
        save_checkpoint(p1, entries)
        back = load_checkpoint(p1)
        save_checkpoint(p2, back)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        for k, v in entries.items():
            assert np.array_equal(back[k], v)
            assert back[k].dtype == v.dtype

    def test_flipped_byte_fails_crc(self, tmp_path):
        path = str(tmp_path / "a.rfo")
        save_checkpoint(path, self.entries())
        raw = bytearray(open(path, "rb").read())
        raw[len(raw) // 2] ^= 0x01
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(path)

    def test_truncation_reports_offset(self, tmp_path):
        path = str(tmp_path / "a.rfo")
        save_checkpoint(path, self.entries())
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "a.rfo")
        save_checkpoint(path, self.entries())
        raw = bytearray(open(path, "rb").read())
        raw[0] = ord("X")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_model_roundtrip_preserves_outputs(self, tmp_path):
        from camoguide.model import CamoModel, ModelConfig
        from camoguide.persist import load_model, save_model
        from camoguide.tensor import Tensor

        cfg = ModelConfig(channels=8, categories=3, input_size=64)
        model = CamoModel(cfg, rng=np.random.default_rng(2))
        model.memory.ema_update(np.ones(8, dtype=np.float32), 0)
        rng = np.random.default_rng(3)
        img = rng.random((3, 64, 64)).astype(np.float32)
        before, _ = model.forward_infer(Tensor(img))
        path = str(tmp_path / "m.rfo")
        save_model(path, model)
        clone = load_model(path)
        after, _ = clone.forward_infer(Tensor(img))
        assert np.array_equal(before.data, after.data)

    def test_config_echo_mismatch(self, tmp_path):
        from camoguide.model import CamoModel, ModelConfig
        from camoguide.persist import load_model, save_model

        model = CamoModel(ModelConfig(channels=8, categories=3, input_size=64),
                          rng=np.random.default_rng(2))
        model.memory.ema_update(np.ones(8, dtype=np.float32), 0)
        path = str(tmp_path / "m.rfo")
        save_model(path, model)
        with pytest.raises(CheckpointError, match="config echo mismatch"):
            load_model(path, expect=ModelConfig(channels=8, categories=5, input_size=64))
