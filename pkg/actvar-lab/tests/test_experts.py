"""
Tests para la descomposición en expertos y el enrutado
"""

import numpy as np
import pytest

from src.backbone import DenseFFN
from src.errors import ArgumentError, DimensionError
from src.experts import (
    GateParams, RoutingDecision, load_balance_loss, load_balance_stats, masked_softmax, moe_forward, route,
    router_distill_loss, split_ffn, usage_entropy, weight_pseudo_labels,
)
from src.tensor import Tensor, gradcheck, parameter, tsum

HIDDEN, FFN_HIDDEN, EXPERTS = 6, 12, 4


def random_ffn(rng, b1_scale=0.1):
    return DenseFFN(
        parameter(rng.normal(size=(HIDDEN, FFN_HIDDEN))),
        parameter(rng.normal(size=FFN_HIDDEN) * b1_scale),
        parameter(rng.normal(size=(FFN_HIDDEN, HIDDEN))),
        parameter(rng.normal(size=HIDDEN)),
    )


DIVISORS = [n for n in range(1, FFN_HIDDEN + 1) if FFN_HIDDEN % n == 0]


@pytest.fixture
def dense(rng):
    return random_ffn(rng)


@pytest.fixture
def bank(dense):
    return split_ffn(dense.w1, dense.b1, dense.w2, dense.b2, EXPERTS, requires_grad=True)


@pytest.fixture
def router(rng):
    return GateParams(parameter(rng.normal(size=(HIDDEN, EXPERTS))), parameter(np.zeros(EXPERTS)))


class TestSplit:
    """Tests de la división de la FFN"""

    def test_reassemble_is_exact(self, dense, bank):
        """Test que concatenar los trozos recupera la FFN bit a bit"""
        w1, b1, w2 = bank.reassemble()
        assert bank.d_e == FFN_HIDDEN // EXPERTS
        np.testing.assert_array_equal(w1, dense.w1.data)
        np.testing.assert_array_equal(b1, dense.b1.data)
        np.testing.assert_array_equal(w2, dense.w2.data)

    def test_not_divisible(self, dense):
        """Test d_h no divisible entre N"""
        with pytest.raises(ArgumentError):
            split_ffn(dense.w1, dense.b1, dense.w2, dense.b2, 5)

    def test_named_parameters(self, bank):
        """Test nombres por experto y b2 único"""
        names = list(bank.named_parameters('blocks.0.ffn.'))
        assert names[:3] == ['blocks.0.ffn.exp0.w1', 'blocks.0.ffn.exp0.b1', 'blocks.0.ffn.exp0.w2']
        assert names[-1] == 'blocks.0.ffn.b2'
        assert len(names) == 3 * EXPERTS + 1


class TestMoE:
    """Tests de la pasada con expertos seleccionados"""

    def test_all_experts_equal_dense(self, dense, bank, router, rng):
        """Test K_w = N reproduce la FFN densa"""
        x = Tensor(rng.normal(size=(5, HIDDEN)))
        decision = route(router, x, EXPERTS)
        np.testing.assert_allclose(moe_forward(bank, decision, x).data, dense(x).data, atol=1e-10)

    @pytest.mark.parametrize("n_experts", DIVISORS)
    @pytest.mark.parametrize("seed", range(50))
    def test_all_experts_equal_dense_random(self, seed, n_experts):
        """Test K_w = N reproduce la FFN densa para cualquier N que divida d_h"""
        rng = np.random.default_rng(seed)
        ffn = random_ffn(rng, b1_scale=1.0)
        bank = split_ffn(ffn.w1, ffn.b1, ffn.w2, ffn.b2, n_experts)
        router = GateParams(Tensor(rng.normal(size=(HIDDEN, n_experts))), Tensor(rng.normal(size=n_experts)))
        x = Tensor(rng.normal(size=(int(rng.integers(1, 8)), HIDDEN)))
        decision = route(router, x, n_experts)
        np.testing.assert_allclose(moe_forward(bank, decision, x).data, ffn(x).data, atol=1e-10)

    def test_zero_input_returns_output_bias(self, dense, router):
        """Test entrada nula con b1 = 0: la salida es b2 para cualquier K_w"""
        bank = split_ffn(dense.w1, np.zeros(FFN_HIDDEN), dense.w2, dense.b2, EXPERTS)
        x = Tensor(np.zeros((3, HIDDEN)))
        for k in (1, 2, EXPERTS):
            out = moe_forward(bank, route(router, x, k), x).data
            np.testing.assert_array_equal(out, np.tile(dense.b2.data, (3, 1)))

    def test_zero_router_is_uniform(self, rng):
        """Test router nulo: p_w uniforme y empates hacia los índices menores"""
        router = GateParams(Tensor(np.zeros((HIDDEN, EXPERTS))), Tensor(np.zeros(EXPERTS)))
        decision = route(router, Tensor(rng.normal(size=(5, HIDDEN))), 2)
        np.testing.assert_allclose(decision.p_w.data, 1.0 / EXPERTS)
        assert all(selected.tolist() == [0, 1] for selected in decision.selected)

    def test_per_expert_bias(self, dense, bank, router, rng):
        """Test b2 sumado una vez por experto seleccionado"""
        x = Tensor(rng.normal(size=(3, HIDDEN)))
        decision = route(router, x, EXPERTS)
        out = moe_forward(bank, decision, x, bias_mode='per_expert')
        expected = dense(x).data + (EXPERTS - 1) * dense.b2.data
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_sum_of_selected_experts(self, bank, router, rng):
        """Test suma sin ponderar de los expertos elegidos"""
        x = rng.normal(size=(4, HIDDEN))
        decision = route(router, Tensor(x), 2)
        per_expert = bank.expert_outputs(x) - bank.b2.data
        expected = np.einsum('tn,tnd->td', decision.indicator.astype(float), per_expert) + bank.b2.data
        np.testing.assert_allclose(moe_forward(bank, decision, Tensor(x)).data, expected, atol=1e-10)

    def test_routing_shape(self, router, rng):
        """Test exactamente K_w expertos por token y p_w normalizada"""
        decision = route(router, Tensor(rng.normal(size=(2, 3, HIDDEN))), 2)
        assert decision.indicator.shape == (6, EXPERTS)
        assert np.all(decision.indicator.sum(axis=1) == 2)
        np.testing.assert_allclose(decision.p_w.data.sum(axis=1), 1.0)
        assert decision.usage().sum() == 12

    def test_route_k_out_of_range(self, router, rng):
        """Test K_w fuera de [1, N]"""
        with pytest.raises(ArgumentError):
            route(router, Tensor(rng.normal(size=(2, HIDDEN))), EXPERTS + 1)

    def test_decision_mismatch(self, bank, router, rng):
        """Test decisiones para otro número de tokens"""
        decision = route(router, Tensor(rng.normal(size=(2, HIDDEN))), 1)
        with pytest.raises(DimensionError):
            moe_forward(bank, decision, Tensor(rng.normal(size=(3, HIDDEN))))

    def test_expert_gradients(self, bank, router, rng):
        """Test gradiente de los expertos con la decisión fija"""
        x = Tensor(rng.normal(size=(3, HIDDEN)))
        indicator = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0]], dtype=np.int8)
        decision = RoutingDecision(p_w=Tensor(np.full((3, EXPERTS), 0.25)), indicator=indicator, k=2)
        inputs = [bank.w1[0], bank.b1[1], bank.w2[2], bank.b2]
        assert gradcheck(lambda *_: tsum(moe_forward(bank, decision, x) ** 2.0), inputs) < 1e-4


class TestPseudoLabels:
    """Tests de pseudo-etiquetas de enrutado"""

    def test_matches_brute_force(self, dense, bank, rng):
        """Test expertos de menor MSE respecto a la FFN densa"""
        x = rng.normal(size=(5, HIDDEN))
        k = 2
        labels = weight_pseudo_labels(bank, dense, x, k)
        reference = dense(Tensor(x)).data
        for t in range(5):
            distances = [np.mean((bank.expert_outputs(x[t:t + 1])[0, j] - reference[t]) ** 2)
                         for j in range(EXPERTS)]
            best = sorted(range(EXPERTS), key=lambda j: (distances[j], j))[:k]
            assert sorted(np.flatnonzero(labels[t])) == sorted(best)
            weights = np.exp(-np.array([distances[j] for j in best]))
            np.testing.assert_allclose(labels[t, best], weights / weights.sum())

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_brute_force_random(self, seed):
        """Test frente a la búsqueda exhaustiva en FFN, entradas y K_w aleatorios"""
        rng = np.random.default_rng(seed)
        ffn = random_ffn(rng)
        bank = split_ffn(ffn.w1, ffn.b1, ffn.w2, ffn.b2, EXPERTS)
        x = rng.normal(size=(3, HIDDEN))
        k = int(rng.integers(1, EXPERTS + 1))
        labels = weight_pseudo_labels(bank, ffn, x, k)
        reference = ffn(Tensor(x)).data
        outputs = bank.expert_outputs(x)
        for t in range(3):
            distances = [float(np.mean((outputs[t, j] - reference[t]) ** 2)) for j in range(EXPERTS)]
            best = sorted(range(EXPERTS), key=lambda j: (distances[j], j))[:k]
            assert np.flatnonzero(labels[t]).tolist() == sorted(best)
            chosen = np.array([distances[j] for j in sorted(best)])
            weights = np.exp(chosen.min() - chosen)
            np.testing.assert_allclose(labels[t, sorted(best)], weights / weights.sum(), rtol=1e-12)

    def test_rows_sum_to_one(self, dense, bank, rng):
        """Test filas normalizadas con K_w entradas no nulas"""
        labels = weight_pseudo_labels(bank, dense, rng.normal(size=(7, HIDDEN)), 3)
        np.testing.assert_allclose(labels.sum(axis=1), 1.0)
        assert np.all((labels > 0).sum(axis=1) == 3)


class TestRoutingLosses:
    """Tests de las pérdidas de enrutado"""

    def test_distill_zero_at_target(self):
        """Test KL nula cuando p_w coincide con el objetivo"""
        labels = np.array([[0.0, 0.7, 0.3, 0.0]])
        target = masked_softmax(labels, labels > 0)
        assert router_distill_loss(Tensor(target), labels).item() == pytest.approx(0.0, abs=1e-12)

    def test_distill_shape_mismatch(self):
        """Test formas distintas"""
        with pytest.raises(DimensionError):
            router_distill_loss(Tensor(np.ones((2, 4)) / 4), np.ones((2, 3)))

    def test_load_balance_value(self):
        """Test (K_w/N)·Σ 𝕀·p_w con p_w uniforme"""
        indicator = np.array([[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]], dtype=np.int8)
        decision = RoutingDecision(p_w=Tensor(np.full((3, 4), 0.25)), indicator=indicator, k=2)
        assert load_balance_loss(decision).item() == pytest.approx(0.75)

    def test_masked_softmax_zero_outside(self):
        """Test ceros exactos fuera de la máscara y filas vacías"""
        out = masked_softmax(np.array([[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]]),
                             np.array([[True, False, True], [False, False, False]]))
        assert out[0, 1] == 0.0
        assert out[0].sum() == pytest.approx(1.0)
        np.testing.assert_array_equal(out[1], 0.0)


class TestUsageStats:
    """Tests de entropía y equilibrio de uso"""

    def test_entropy(self):
        """Test entropía uniforme, concentrada y vacía"""
        assert usage_entropy([5, 5, 5, 5]) == pytest.approx(np.log(4))
        assert usage_entropy([10, 0, 0, 0]) == 0.0
        assert usage_entropy([0, 0]) == 0.0

    def test_balance_stats(self):
        """Test coeficiente de variación y desequilibrio"""
        assert load_balance_stats([3, 3, 3]) == {'cv': 0.0, 'load_imbalance': 1.0,
                                                 'entropy': pytest.approx(np.log(3))}
        assert load_balance_stats([4, 0])['load_imbalance'] == pytest.approx(2.0)
