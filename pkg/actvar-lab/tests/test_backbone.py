"""
Tests para el transformer por escalas
"""

import numpy as np
import pytest

from src.backbone import (
    BlockParams, BlockState, KVCache, TokenMap, VarModel, attend, block_forward, build_schedule,
    forward_teacher_forcing, interpolation_matrix, maps_to_sequence, run_block, sequence_to_maps, upsample_prev,
)
from src.config import REFERENCE_SIDES
from src.errors import ArgumentError, DimensionError, StateError
from src.tensor import Tensor


def random_tokens(model, batch, seed=0):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, model.config.vocab, size=(batch, model.schedule.total_length))
    labels = rng.integers(0, model.config.classes, size=batch)
    return tokens, labels


def make_block(hidden, heads=1, projection=None):
    """Bloque con proyecciones de atención dadas (nulas por defecto), sesgos nulos y FFN nula"""
    weight = np.zeros((hidden, hidden)) if projection is None else projection

    def zeros():
        return Tensor(np.zeros(hidden))

    return BlockParams(
        ln1_g=Tensor(np.ones(hidden)), ln1_b=zeros(),
        wq=Tensor(weight), bq=zeros(), wk=Tensor(weight), bk=zeros(),
        wv=Tensor(weight), bv=zeros(), wo=Tensor(weight), bo=zeros(),
        ln2_g=Tensor(np.ones(hidden)), ln2_b=zeros(),
        ffn=lambda x: x * 0.0, heads=heads,
    )


class TestSchedule:
    """Tests del calendario de escalas"""

    def test_reference_schedule(self):
        """Test calendario de 10 pasos: 680 tokens, prefijos acumulados"""
        schedule = build_schedule(REFERENCE_SIDES)
        assert schedule.steps == 10
        assert schedule.total_length == 680
        assert schedule.token_counts[-1] == 256
        assert schedule.begin_end(8) == (255, 424)
        assert schedule.prefix_length(8) == 424
        assert schedule.prefix_length(9) == 680

    @pytest.mark.parametrize("sides", [(), (0, 1), (1, 3, 3), (2, 1)])
    def test_invalid_sides(self, sides):
        """Test lados vacíos, nulos o no crecientes"""
        with pytest.raises(ArgumentError):
            build_schedule(sides)


class TestTokenMaps:
    """Tests de mapas de tokens"""

    def test_sequence_layout(self, tiny_config):
        """Test aplanado fila a fila y vuelta"""
        schedule = tiny_config.schedule
        sequence = np.arange(schedule.total_length) % tiny_config.vocab
        maps = sequence_to_maps(sequence, schedule)
        assert [m.side for m in maps] == [1, 2, 3, 4]
        assert maps[2].tokens[1, 0] == sequence[5 + 3]
        np.testing.assert_array_equal(maps_to_sequence(maps, schedule, tiny_config.vocab), sequence)

    def test_wrong_shape(self, tiny_config):
        """Test mapa con lado incorrecto"""
        bad = TokenMap(scale_index=1, side=3, tokens=np.zeros((3, 3)))
        with pytest.raises(DimensionError):
            bad.validate(tiny_config.schedule, tiny_config.vocab)

    def test_out_of_vocab(self, tiny_config):
        """Test índice fuera del vocabulario"""
        bad = TokenMap(scale_index=0, side=1, tokens=np.array([[tiny_config.vocab]]))
        with pytest.raises(ArgumentError):
            bad.validate(tiny_config.schedule, tiny_config.vocab)


class TestInterpolation:
    """Tests de la interpolación bilineal"""

    def test_rows_are_convex(self):
        """Test filas no negativas que suman 1"""
        matrix = interpolation_matrix(3, 5)
        assert matrix.shape == (25, 9)
        assert np.all(matrix >= 0)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)

    def test_constant_map_preserved(self):
        """Test que un mapa constante sigue constante"""
        prev = Tensor(np.full((4, 6), 2.5))
        out = upsample_prev(prev, 4)
        assert out.shape == (16, 6)
        np.testing.assert_allclose(out.data, 2.5)

    def test_two_to_four_known_values(self):
        """Test rejilla 2×2 → 4×4 con centros de píxel y bordes replicados"""
        prev = Tensor(np.array([[0.0], [1.0], [2.0], [3.0]]))
        expected = np.array([
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ])
        out = upsample_prev(prev, 4)
        np.testing.assert_allclose(out.data.reshape(4, 4), expected, atol=1e-15)

    def test_single_cell_broadcast(self):
        """Test escala 1×1 replicada en todas las posiciones"""
        prev = Tensor(np.arange(3.0).reshape(1, 3))
        out = upsample_prev(prev, 3)
        np.testing.assert_allclose(out.data, np.tile(np.arange(3.0), (9, 1)))

    def test_errors(self):
        """Test destino no mayor y rejilla no cuadrada"""
        with pytest.raises(ArgumentError):
            upsample_prev(Tensor(np.zeros((4, 2))), 2)
        with pytest.raises(DimensionError):
            upsample_prev(Tensor(np.zeros((3, 2))), 4)


class TestBlocks:
    """Tests de bloques y caché KV"""

    def test_cache_must_hold_previous_scales(self, tiny_teacher):
        """Test caché sin la escala previa"""
        x = Tensor(np.zeros((1, 4, tiny_teacher.config.hidden)))
        with pytest.raises(StateError):
            run_block(x, tiny_teacher.block(0), KVCache(), scale_index=1)

    def test_zero_weights_are_identity(self, rng):
        """Test bloque con pesos nulos: conexión residual pura en dos escalas"""
        block = make_block(8, heads=2)
        cache = KVCache()
        first = Tensor(rng.normal(size=(2, 4, 8)))
        out = block_forward(BlockState(q=first, cache=cache, scale_index=0), block)
        np.testing.assert_array_equal(out.data, first.data)
        second = Tensor(rng.normal(size=(2, 9, 8)))
        out = block_forward(BlockState(q=second, cache=cache, scale_index=1), block)
        np.testing.assert_array_equal(out.data, second.data)
        assert cache.scales == 2

    def test_attention_over_cached_token(self):
        """Test atención calculada a mano: un token actual y uno en caché"""
        block = make_block(2, projection=np.eye(2))
        cache = KVCache()
        cached = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
        cache.append(Tensor(cached), Tensor(cached))
        out, k, v = attend(block, Tensor(np.array([[[0.0, 1.0]]])), cache)
        # puntuaciones [0, 1/√2] sobre [clave en caché, clave propia]
        current = 1.0 / (1.0 + np.exp(-1.0 / np.sqrt(2.0)))
        np.testing.assert_allclose(out.data, [[[1.0 - current, current]]], atol=1e-14)
        np.testing.assert_array_equal(k.data, [[[[0.0, 1.0]]]])
        np.testing.assert_array_equal(v.data, [[[[0.0, 1.0]]]])

    def test_run_block_does_not_mutate_cache(self, tiny_teacher):
        """Test que run_block no añade claves a la caché"""
        cache = KVCache()
        run_block(Tensor(np.ones((1, 1, tiny_teacher.config.hidden))), tiny_teacher.block(0), cache, 0)
        assert cache.scales == 0


class TestForward:
    """Tests de la pasada con forzado del maestro"""

    def test_shapes(self, tiny_teacher):
        """Test logits [B, 30, V] y salidas por bloque"""
        tokens, labels = random_tokens(tiny_teacher, 2)
        out = tiny_teacher.forward(tokens, labels, keep_blocks=True)
        assert out.logits.shape == (2, 30, 16)
        assert len(out.blocks) == 2
        assert out.blocks[0].shape == (2, 30, 16)

    def test_bad_length(self, tiny_teacher):
        """Test secuencias con longitud distinta del calendario"""
        with pytest.raises(DimensionError):
            tiny_teacher.forward(np.zeros((1, 29), dtype=int), np.array([0]))

    def test_scale_causality(self, tiny_teacher):
        """Test que la escala i solo depende de tokens de escalas anteriores"""
        tokens, labels = random_tokens(tiny_teacher, 1)
        base = tiny_teacher.forward(tokens, labels).logits.data
        changed = tokens.copy()
        changed[0, 1:5] = (changed[0, 1:5] + 1) % tiny_teacher.config.vocab
        other = tiny_teacher.forward(changed, labels).logits.data
        np.testing.assert_array_equal(base[:, :5], other[:, :5])
        assert not np.allclose(base[:, 5:], other[:, 5:])

    def test_last_scale_tokens_unused(self, tiny_teacher):
        """Test que los tokens de la última escala no alimentan ninguna entrada"""
        tokens, labels = random_tokens(tiny_teacher, 1)
        changed = tokens.copy()
        changed[0, 14:] = (changed[0, 14:] + 3) % tiny_teacher.config.vocab
        np.testing.assert_array_equal(tiny_teacher.forward(tokens, labels).logits.data,
                                      tiny_teacher.forward(changed, labels).logits.data)

    def test_initial_loss_near_uniform(self, tiny_teacher):
        """Test L_cls inicial cercana a log V"""
        tokens, labels = random_tokens(tiny_teacher, 2)
        assert tiny_teacher.loss(tokens, labels).item() == pytest.approx(np.log(16), abs=0.1)


class TestGeneration:
    """Tests de generación escala a escala"""

    def test_deterministic_with_seed(self, tiny_teacher):
        """Test misma semilla, mismos mapas"""
        a = tiny_teacher.generate(1, seed=3)
        b = tiny_teacher.generate(1, seed=3)
        assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a, b))
        assert [m.tokens.shape for m in a] == [(1, 1), (2, 2), (3, 3), (4, 4)]

    def test_argmax_matches_teacher_forcing(self, tiny_teacher):
        """Test que temperatura 0 coincide con el argmax de la pasada forzada"""
        maps = tiny_teacher.generate(2, temperature=0.0)
        logits = forward_teacher_forcing(tiny_teacher, maps, 2).data
        sequence = maps_to_sequence(maps, tiny_teacher.schedule, tiny_teacher.config.vocab)
        np.testing.assert_array_equal(np.argmax(logits, axis=-1), sequence)

    def test_forcing_map_count(self, tiny_teacher):
        """Test número de mapas incorrecto"""
        maps = tiny_teacher.generate(0, temperature=0.0)
        with pytest.raises(ArgumentError):
            forward_teacher_forcing(tiny_teacher, maps[:-1], 0)


class TestPersistence:
    """Tests de copia y checkpoint del modelo"""

    def test_save_load_same_logits(self, tiny_teacher, tiny_config, temp_dir):
        """Test recarga bit-exacta"""
        tokens, labels = random_tokens(tiny_teacher, 1)
        path = tiny_teacher.save(temp_dir / "teacher.avt")
        loaded = VarModel.load(path, tiny_config)
        np.testing.assert_array_equal(tiny_teacher.forward(tokens, labels).logits.data,
                                      loaded.forward(tokens, labels).logits.data)

    def test_copy_is_independent(self, tiny_teacher):
        """Test que modificar la copia no altera el original"""
        clone = tiny_teacher.copy()
        clone.params['head.b'].data += 1.0
        assert np.all(tiny_teacher.params['head.b'].data == 0.0)
