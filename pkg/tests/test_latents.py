import csv

import numpy as np
import pytest
import torch

from mrdd.services.consistency import ConsistentModel
from mrdd.services.disentangle import SpecificModel
from mrdd.services.latents import LatentSet, export_embeddings, extract_latents


@pytest.fixture
def model(toy_dataset, tiny_config):
    torch.manual_seed(0)
    consistent = ConsistentModel.from_dataset(toy_dataset, tiny_config).freeze()
    return SpecificModel.from_config(consistent, tiny_config)


class TestExtraction:
    def test_shapes_and_rows(self, model, toy_dataset):
        latents = extract_latents(model, toy_dataset, batch_size=40)
        assert len(latents) == 96
        assert (latents.d_c, latents.d_s, latents.n_views) == (4, 3, 2)
        np.testing.assert_array_equal(latents.sample_ids, np.arange(96))
        np.testing.assert_array_equal(latents.labels, toy_dataset.labels)
        np.testing.assert_array_equal(np.sort(latents.sample_ids[latents.test_rows]),
                                      toy_dataset.manifest.test_indices)
        assert latents.meta["encoder_hash"] == model.consistent.encoder_hash()

    def test_repeatable_and_batch_size_free(self, model, toy_dataset):
        a = extract_latents(model, toy_dataset, batch_size=96)
        b = extract_latents(model, toy_dataset, batch_size=96)
        np.testing.assert_array_equal(a.c, b.c)
        np.testing.assert_array_equal(a.s, b.s)
        c = extract_latents(model, toy_dataset, batch_size=17)
        np.testing.assert_allclose(a.c, c.c, atol=1e-5)

    def test_restores_training_mode(self, model, toy_dataset):
        model.train()
        extract_latents(model, toy_dataset, split="test")
        assert model.training

    def test_test_split_only(self, model, toy_dataset):
        latents = extract_latents(model, toy_dataset, split="test")
        assert len(latents) == len(toy_dataset.manifest.test_indices)
        assert len(latents.train_rows) == 0
        np.testing.assert_array_equal(latents.test_rows, np.arange(len(latents)))


class TestLatentFiles:
    def test_save_and_load(self, tmp_path, rng):
        latents = LatentSet(c=rng.normal(size=(6, 2)).astype(np.float32),
                            s=rng.normal(size=(6, 2, 3)).astype(np.float32),
                            sample_ids=np.arange(10, 16), labels=np.array([0, 1, 0, 1, 0, 1]),
                            train_rows=np.arange(4), test_rows=np.array([4, 5]), meta={"dataset": "toy"})
        latents.save(tmp_path / "latents")
        loaded = LatentSet.load(tmp_path / "latents")
        np.testing.assert_array_equal(loaded.c, latents.c)
        np.testing.assert_array_equal(loaded.s, latents.s)
        np.testing.assert_array_equal(loaded.test_rows, [4, 5])
        assert loaded.meta == {"dataset": "toy"}
        assert [b.sample_id for b in loaded.bundles()] == list(range(10, 16))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            LatentSet(c=np.array([[np.inf]]), s=np.zeros((1, 1, 1)), sample_ids=np.arange(1))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            LatentSet(c=np.zeros((3, 2)), s=np.zeros((2, 1, 1)), sample_ids=np.arange(3))

    def test_missing_header(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            LatentSet.load(tmp_path)

    def test_export_embeddings(self, tmp_path, rng):
        latents = LatentSet(c=rng.normal(size=(4, 2)), s=rng.normal(size=(4, 2, 3)), sample_ids=np.arange(4),
                            labels=np.array([1, 0, 1, 0]))
        path = export_embeddings(latents, "cs2", tmp_path / "emb.csv")
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["sample_id", "label", "f0", "f1", "f2", "f3", "f4"]
        assert len(rows) == 5
        assert rows[1][:2] == ["0", "1"]
