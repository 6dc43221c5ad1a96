"""
Tests para la exportación de mapas de activación
"""

import csv

import numpy as np
import pytest

from src.distill import apply_activation_policy
from src.errors import ArgumentError, DimensionError, StateError
from src.export import (
    collect_activation_maps, export_activation_maps, jaccard, jaccard_matrix, read_pgm, write_pgm,
)


@pytest.fixture
def sample(tiny_config):
    rng = np.random.default_rng(11)
    return rng.integers(0, tiny_config.vocab, size=tiny_config.schedule.total_length), 1


class TestPGM:
    """Tests del formato PGM"""

    def test_exact_bytes(self, temp_dir):
        """Test cabecera P5 y un byte por píxel"""
        path = write_pgm(temp_dir / "a.pgm", np.array([[0, 255, 7], [300, 1, 2]]))
        assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes([0, 255, 7, 255, 1, 2])

    def test_read_back(self, temp_dir):
        """Test lectura de un PGM escrito"""
        image = np.arange(12).reshape(3, 4) * 20
        path = write_pgm(temp_dir / "b.pgm", image)
        np.testing.assert_array_equal(read_pgm(path), image)

    def test_errors(self, temp_dir):
        """Test imagen no 2-D y archivo no PGM"""
        with pytest.raises(DimensionError):
            write_pgm(temp_dir / "c.pgm", np.zeros(4))
        bad = temp_dir / "bad.pgm"
        bad.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ArgumentError):
            read_pgm(bad)


class TestJaccard:
    """Tests del índice de Jaccard"""

    def test_values(self):
        """Test idénticos, disjuntos, parciales y vacíos"""
        a = np.array([1, 1, 0, 0], dtype=bool)
        assert jaccard(a, a) == 1.0
        assert jaccard(a, ~a) == 0.0
        assert jaccard(a, np.array([1, 0, 1, 0], dtype=bool)) == pytest.approx(1 / 3)
        assert jaccard(np.zeros(3), np.zeros(3)) == 1.0


class TestCollect:
    """Tests de la recogida de mapas"""

    def test_full_activation_is_white(self, tiny_teacher, full_activation, sample):
        """Test activación completa: todas las posiciones procesadas"""
        student = apply_activation_policy(tiny_teacher, full_activation)
        maps = collect_activation_maps(student, sample[0], sample[1], 3)
        assert sorted(maps.blocks) == [0, 1]
        assert all(mask.all() for mask in maps.blocks.values())
        np.testing.assert_array_equal(jaccard_matrix(maps), np.ones((2, 2)))

    def test_popcounts_and_union(self, tiny_teacher, tiny_activation, sample):
        """Test K_t posiciones por bloque y unión que las contiene"""
        student = apply_activation_policy(tiny_teacher, tiny_activation)
        maps = collect_activation_maps(student, sample[0], sample[1], 2)
        assert maps.popcounts() == {0: 7, 1: 7}
        for mask in maps.blocks.values():
            assert np.all(maps.union >= mask)
        assert maps.top_experts[0].shape == (3, 3, 3)

    def test_inactive_scale(self, tiny_teacher, tiny_activation, sample):
        """Test escala sin activación"""
        student = apply_activation_policy(tiny_teacher, tiny_activation)
        with pytest.raises(StateError):
            collect_activation_maps(student, sample[0], sample[1], 0)


class TestExport:
    """Tests de los archivos exportados"""

    def test_files(self, tiny_teacher, tiny_activation, sample, temp_dir):
        """Test PGM por bloque, unión y CSV con bits por posición"""
        student = apply_activation_policy(tiny_teacher, tiny_activation)
        maps = collect_activation_maps(student, sample[0], sample[1], 3)
        paths = export_activation_maps(maps, temp_dir)
        names = sorted(p.name for p in paths)
        assert names == sorted([
            "block_00_step_4.pgm", "block_01_step_4.pgm", "experts_00_step_4.pgm", "experts_01_step_4.pgm",
            "union_step_4.pgm", "activation_step_4.csv", "experts_step_4.csv",
        ])
        image = read_pgm(temp_dir / "block_00_step_4.pgm")
        assert image.shape == (4, 4)
        assert int((image == 255).sum()) == 12

        with open(temp_dir / "activation_step_4.csv", newline='') as f:
            rows = list(csv.DictReader(f))
        assert [r['block_id'] for r in rows] == ['0', '1']
        assert all(len(r['bits']) == 16 and r['bits'].count('1') == 12 for r in rows)

    def test_block_subset(self, tiny_teacher, tiny_activation, sample, temp_dir):
        """Test subconjunto de bloques y bloque inexistente"""
        student = apply_activation_policy(tiny_teacher, tiny_activation)
        maps = collect_activation_maps(student, sample[0], sample[1], 3)
        paths = export_activation_maps(maps, temp_dir, blocks=[1])
        assert not (temp_dir / "block_00_step_4.pgm").exists()
        assert (temp_dir / "block_01_step_4.pgm") in paths
        with pytest.raises(StateError):
            export_activation_maps(maps, temp_dir, blocks=[5])
