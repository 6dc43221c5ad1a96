"""
Tests para el conjunto sintético
"""

import numpy as np
import pytest

from src.backbone import build_schedule, sequence_to_maps
from src.config import REFERENCE_SIDES, DatasetConfig
from src.dataset import dataset_meta, gen_dataset, load_dataset, refine, sample_sequence
from src.errors import StateError


class TestSampling:
    """Tests del muestreo por escalas"""

    def test_reference_length(self):
        """Test secuencia de 680 tokens en el calendario de 10 pasos"""
        sequence = sample_sequence(build_schedule(REFERENCE_SIDES), 3, 64, 0.1, np.random.default_rng(0))
        assert sequence.shape == (680,)
        assert sequence.min() >= 0 and sequence.max() < 64

    def test_noise_free_refinement(self, tiny_config):
        """Test sin ruido: cada escala es el refinamiento exacto de la anterior"""
        schedule = tiny_config.schedule
        for label in range(tiny_config.classes):
            sequence = sample_sequence(schedule, label, tiny_config.vocab, 0.0, np.random.default_rng(label))
            maps = sequence_to_maps(sequence, schedule)
            for prev, current in zip(maps, maps[1:]):
                expected = refine(prev.tokens, current.side, label, tiny_config.vocab)
                np.testing.assert_array_equal(current.tokens, expected)

    def test_classes_differ(self, tiny_config):
        """Test refinamientos distintos para clases distintas"""
        grid = np.zeros((2, 2), dtype=np.int64)
        assert not np.array_equal(refine(grid, 3, 0, 16), refine(grid, 3, 1, 16))


class TestGeneration:
    """Tests de generación y carga"""

    def test_split_and_meta(self, temp_dir, tiny_config):
        """Test reparto 90/10 y metadatos"""
        config = DatasetConfig(classes=4, samples=40, seed=1)
        paths = gen_dataset(config, tiny_config.schedule, tiny_config.vocab, temp_dir)
        train, val = load_dataset(temp_dir)
        assert (len(train), len(val)) == (36, 4)
        assert train.tokens.shape == (36, 30)
        assert set(np.concatenate([train.labels, val.labels]).tolist()) == {0, 1, 2, 3}
        meta = dataset_meta(temp_dir)
        assert meta['total_length'] == 30
        assert meta['train'] == 36
        assert all(p.exists() for p in paths.values())

    def test_deterministic(self, temp_dir, tiny_config):
        """Test misma semilla, mismo conjunto; otra semilla, otro conjunto"""
        def generate(seed, name):
            gen_dataset(DatasetConfig(classes=4, samples=20, seed=seed), tiny_config.schedule,
                        tiny_config.vocab, temp_dir / name)
            return load_dataset(temp_dir / name)[0].tokens

        np.testing.assert_array_equal(generate(7, "a"), generate(7, "b"))
        assert not np.array_equal(generate(7, "a"), generate(8, "c"))

    def test_missing_dataset(self, temp_dir):
        """Test carga sin conjunto generado"""
        with pytest.raises(StateError):
            load_dataset(temp_dir / "nothing")
