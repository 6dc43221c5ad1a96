"""
Tests para checkpoints AVT1
"""

import numpy as np
import pytest

from src.checkpoint import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from src.errors import ArgumentError
from src.tensor import parameter


pytestmark = pytest.mark.unit


class TestCheckpoint:
    """Tests de guardado y carga bit-exacta"""

    def test_bit_exact_and_ordered(self, temp_dir, rng):
        """Test que nombres, orden, formas y bytes se conservan"""
        params = {
            'b.scalar': parameter(np.array(3.25)),
            'a.matrix': parameter(rng.normal(size=(3, 5))),
            'c.vector': rng.normal(size=7),
        }
        path = save_checkpoint(temp_dir / "m.avt", params)
        loaded = load_checkpoint(path)
        assert list(loaded) == ['b.scalar', 'a.matrix', 'c.vector']
        assert loaded['b.scalar'].shape == ()
        assert loaded['a.matrix'].tobytes() == params['a.matrix'].data.tobytes()
        assert loaded['c.vector'].tobytes() == params['c.vector'].tobytes()

    @pytest.mark.parametrize("value", [np.array(-0.0), np.array(1e-300), np.float64(7.5)])
    def test_scalar_keeps_rank_zero(self, temp_dir, value):
        """Test escalar 0-d: rango 0 en disco y forma () al cargar"""
        path = save_checkpoint(temp_dir / "s.avt", {'s': value})
        raw = path.read_bytes()
        # magia, longitud del nombre, nombre, rango
        assert raw[4 + 4 + 1:4 + 4 + 1 + 4] == b"\x00\x00\x00\x00"
        assert len(raw) == 4 + 4 + 1 + 4 + 8
        loaded = load_checkpoint(path)['s']
        assert loaded.shape == ()
        assert loaded.tobytes() == np.asarray(value, dtype=np.float64).tobytes()

    def test_non_contiguous_input(self, temp_dir, rng):
        """Test array traspuesto: se escribe en orden C"""
        matrix = rng.normal(size=(3, 4)).T
        loaded = load_checkpoint(save_checkpoint(temp_dir / "t.avt", {'m': matrix}))['m']
        np.testing.assert_array_equal(loaded, matrix)

    def test_header(self, temp_dir):
        """Test cabecera mágica"""
        path = save_checkpoint(temp_dir / "m.avt", {'x': np.zeros(2)})
        assert path.read_bytes()[:4] == CHECKPOINT_MAGIC

    def test_bad_magic(self, temp_dir):
        """Test archivo sin cabecera AVT1"""
        path = temp_dir / "bad.avt"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(ArgumentError):
            load_checkpoint(path)

    def test_truncated(self, temp_dir):
        """Test archivo truncado"""
        path = save_checkpoint(temp_dir / "m.avt", {'x': np.arange(10.0)})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ArgumentError):
            load_checkpoint(path)

    def test_truncated_name(self, temp_dir):
        """Test longitud de nombre mayor que el archivo"""
        path = temp_dir / "short.avt"
        path.write_bytes(CHECKPOINT_MAGIC + (50).to_bytes(4, 'little') + b"abc")
        with pytest.raises(ArgumentError):
            load_checkpoint(path)

    def test_invalid_name_encoding(self, temp_dir):
        """Test nombre que no es UTF-8"""
        path = temp_dir / "latin.avt"
        path.write_bytes(CHECKPOINT_MAGIC + (2).to_bytes(4, 'little') + b"\xff\xfe" + (0).to_bytes(4, 'little')
                         + np.float64(1.0).tobytes())
        with pytest.raises(ArgumentError):
            load_checkpoint(path)
