"""
Descomposición de la FFN en expertos
Router por token, pasada con expertos seleccionados, pseudo-etiquetas y pérdidas de enrutado
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .backbone import DenseFFN
from .errors import ArgumentError, DimensionError
from .tensor import (
    Tensor, as_tensor, concat, gelu, index_add, kl_div, linear, no_grad, reshape,
    softmax, topk, tsum,
)

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[Tensor, np.ndarray]


@dataclass
class GateParams:
    """Proyección lineal ligera (router d_p→N o selector H→1)"""
    w: Tensor
    b: Tensor


def masked_softmax(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax por filas donde las entradas fuera de `mask` valen exactamente 0"""
    mask = np.asarray(mask, dtype=bool)
    logits = np.where(mask, values, -np.inf)
    peak = np.max(np.where(mask, values, -np.inf), axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(mask, np.exp(logits - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


# ----------------------------------------------------------------------
# Banco de expertos
# ----------------------------------------------------------------------
@dataclass
class ExpertBank:
    """N sub-redes de igual anchura obtenidas al trocear la capa oculta de una FFN"""
    w1: List[Tensor]
    b1: List[Tensor]
    w2: List[Tensor]
    b2: Tensor

    @property
    def n_experts(self) -> int:
        return len(self.w1)

    @property
    def d_e(self) -> int:
        return self.w1[0].shape[1]

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for j in range(self.n_experts):
            params[f"{prefix}exp{j}.w1"] = self.w1[j]
            params[f"{prefix}exp{j}.b1"] = self.b1[j]
            params[f"{prefix}exp{j}.w2"] = self.w2[j]
        params[f"{prefix}b2"] = self.b2
        return params

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], prefix: str, n_experts: int) -> "ExpertBank":
        return cls(
            w1=[params[f"{prefix}exp{j}.w1"] for j in range(n_experts)],
            b1=[params[f"{prefix}exp{j}.b1"] for j in range(n_experts)],
            w2=[params[f"{prefix}exp{j}.w2"] for j in range(n_experts)],
            b2=params[f"{prefix}b2"],
        )

    def reassemble(self):
        """W1, b1, W2 reconstruidos concatenando los trozos (arrays numpy)"""
        return (np.concatenate([w.data for w in self.w1], axis=1),
                np.concatenate([b.data for b in self.b1]),
                np.concatenate([w.data for w in self.w2], axis=0))

    def dense(self) -> DenseFFN:
        """Vista densa diferenciable de todos los expertos"""
        return DenseFFN(concat(self.w1, axis=1), concat(self.b1, axis=0),
                        concat(self.w2, axis=0), self.b2)

    def __call__(self, x: Tensor) -> Tensor:
        return self.dense()(x)

    def expert_outputs(self, x: np.ndarray) -> np.ndarray:
        """Salida de cada experto con b2, sin cinta: [T, N, d_p]"""
        with no_grad():
            outs = [
                (linear(gelu(linear(Tensor(x), self.w1[j], self.b1[j])), self.w2[j]) + self.b2).data
                for j in range(self.n_experts)
            ]
        return np.stack(outs, axis=1)


def split_ffn(w1: ArrayOrTensor, b1: ArrayOrTensor, w2: ArrayOrTensor, b2: ArrayOrTensor,
              n_experts: int, requires_grad: bool = False) -> ExpertBank:
    """
    Dividir una FFN densa en N expertos contiguos de igual tamaño

    El experto j posee las unidades ocultas [j·d_e, (j+1)·d_e); b2 se guarda una vez.

    Args:
        w1, b1, w2, b2: Parámetros densos [d_p×d_h], [d_h], [d_h×d_p], [d_p]
        n_experts: Número de expertos N
        requires_grad: Marcar los trozos como entrenables

    Returns:
        ExpertBank: Banco con copias independientes de los trozos

    Raises:
        ArgumentError: Si d_h no es divisible entre N
    """
    w1, b1, w2, b2 = (as_tensor(t).data for t in (w1, b1, w2, b2))
    d_h = w1.shape[1]
    if n_experts < 1 or d_h % n_experts != 0:
        raise ArgumentError(f"d_h={d_h} no es divisible entre N={n_experts}")
    d_e = d_h // n_experts

    def leaf(a):
        return Tensor(a, requires_grad=requires_grad)

    bank = ExpertBank(
        w1=[leaf(w1[:, j * d_e:(j + 1) * d_e]) for j in range(n_experts)],
        b1=[leaf(b1[j * d_e:(j + 1) * d_e]) for j in range(n_experts)],
        w2=[leaf(w2[j * d_e:(j + 1) * d_e, :]) for j in range(n_experts)],
        b2=leaf(b2),
    )
    logger.debug(f"FFN dividida en {n_experts} expertos de anchura {d_e}")
    return bank


# ----------------------------------------------------------------------
# Enrutado
# ----------------------------------------------------------------------
@dataclass
class RoutingDecision:
    """Probabilidades por token, indicador top-k y K_w"""
    p_w: Tensor
    indicator: np.ndarray
    k: int

    @property
    def n_experts(self) -> int:
        return self.indicator.shape[-1]

    @property
    def tokens(self) -> int:
        return self.indicator.shape[0]

    @property
    def selected(self) -> List[np.ndarray]:
        """Conjunto de expertos de cada token, en orden ascendente"""
        return [np.flatnonzero(row) for row in self.indicator]

    def usage(self) -> np.ndarray:
        return self.indicator.sum(axis=0).astype(np.int64)


def _flatten_tokens(x: Tensor) -> Tensor:
    return x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))


def route(router: GateParams, x: Tensor, k: int) -> RoutingDecision:
    """
    Asignar cada token a K_w expertos

    Args:
        router: Capa lineal d_p→N
        x: Tokens [L, d_p] (o con dimensiones previas, se aplanan)
        k: Expertos por token

    Returns:
        RoutingDecision: p_w = softmax(x·W_r + b_r) e indicador top-k desconectado

    Raises:
        ArgumentError: Si K_w está fuera de [1, N]
    """
    n_experts = router.w.shape[-1]
    if not 1 <= k <= n_experts:
        raise ArgumentError(f"K_w={k} fuera de rango [1, {n_experts}]")
    flat = _flatten_tokens(as_tensor(x))
    p_w = softmax(linear(flat, router.w, router.b), axis=-1)
    if flat.shape[0] == 0:
        return RoutingDecision(p_w, np.zeros((0, n_experts), dtype=np.int8), k)
    _, indicator = topk(p_w, k)
    return RoutingDecision(p_w, indicator.data.astype(np.int8), k)


def moe_forward(bank: ExpertBank, decision: RoutingDecision, x: Tensor,
                bias_mode: str = "shared") -> Tensor:
    """
    Suma sin ponderar de los expertos seleccionados por token

    Los expertos se evalúan en orden ascendente de índice. b2 se suma una vez por
    token ('shared') o una vez por experto seleccionado ('per_expert').

    Raises:
        ArgumentError: Si el N de la decisión no coincide con el del banco
        DimensionError: Si el número de tokens no coincide
    """
    if decision.n_experts != bank.n_experts:
        raise ArgumentError(f"Decisión con N={decision.n_experts} para un banco de {bank.n_experts}")
    x = as_tensor(x)
    flat = _flatten_tokens(x)
    if flat.shape[0] != decision.tokens:
        raise DimensionError(f"{flat.shape[0]} tokens frente a {decision.tokens} decisiones")

    out = Tensor(np.zeros(flat.shape))
    for j in range(bank.n_experts):
        rows = np.flatnonzero(decision.indicator[:, j])
        if rows.size == 0:
            continue
        hidden = gelu(linear(flat[rows], bank.w1[j], bank.b1[j]))
        out = index_add(out, rows, linear(hidden, bank.w2[j]))

    if bias_mode == "shared":
        out = out + bank.b2
    elif bias_mode == "per_expert":
        counts = decision.indicator.sum(axis=1, keepdims=True).astype(np.float64)
        out = out + Tensor(counts) * bank.b2
    else:
        raise ArgumentError(f"bias_mode desconocido: {bias_mode}")
    return out if x.ndim == 2 else reshape(out, x.shape)


# ----------------------------------------------------------------------
# Pseudo-etiquetas y pérdidas
# ----------------------------------------------------------------------
def weight_pseudo_labels(bank: ExpertBank, teacher_ffn, x: ArrayOrTensor, k: int) -> np.ndarray:
    """
    Pseudo-etiquetas de enrutado a partir de la FFN densa del maestro

    Para cada token, d_j = MSE(e_j(x), F(x)); se retienen los K_w expertos de menor
    distancia y se aplica softmax sobre sus distancias negadas.

    Args:
        bank: Banco de expertos
        teacher_ffn: FFN densa del maestro (invocable sobre Tensor)
        x: Entradas de la FFN [T, d_p]
        k: K_w

    Returns:
        np.ndarray: 𝒜_w [T, N] con exactamente K_w entradas no nulas por fila
    """
    x = as_tensor(x).data
    x = x.reshape(-1, x.shape[-1])
    with no_grad():
        reference = teacher_ffn(Tensor(x)).data
    outputs = bank.expert_outputs(x)
    distances = ((outputs - reference[:, None, :]) ** 2).mean(axis=-1)
    if x.shape[0] == 0:
        return np.zeros((0, bank.n_experts))
    _, indicator = topk(-distances, k)
    return masked_softmax(-distances, indicator.data > 0)


def router_distill_loss(p_w: Tensor, labels: np.ndarray) -> Tensor:
    """
    Media por token de KL(p_w ∥ σ(𝒜_w)), con −∞ fuera del soporte de 𝒜_w

    Raises:
        DimensionError: Si las formas no coinciden
    """
    labels = np.asarray(labels, dtype=np.float64)
    if p_w.shape != labels.shape:
        raise DimensionError(f"p_w {p_w.shape} frente a pseudo-etiquetas {labels.shape}")
    rows = labels.reshape(-1, labels.shape[-1]).shape[0]
    if rows == 0:
        return Tensor(0.0)
    target = masked_softmax(labels, labels > 0)
    return kl_div(p_w, Tensor(target)) * (1.0 / rows)


def load_balance_loss(decision: RoutingDecision) -> Tensor:
    """(K_w/N)·Σ_i Σ_j 𝕀_j(x_i)·p_w[i, j] sobre todos los tokens"""
    if decision.tokens == 0:
        return Tensor(0.0)
    scale = decision.k / decision.n_experts
    return tsum(decision.p_w * Tensor(decision.indicator.astype(np.float64))) * scale


def usage_entropy(counts: Sequence[float]) -> float:
    """Entropía (nats) del histograma de uso de expertos"""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def load_balance_stats(counts: Sequence[float]) -> Dict[str, float]:
    """Coeficiente de variación y desequilibrio máximo/medio del uso de expertos"""
    counts = np.asarray(counts, dtype=np.float64)
    mean = counts.mean() if counts.size else 0.0
    return {
        "cv": float(counts.std(ddof=1) / mean) if mean > 0 and counts.size > 1 else 0.0,
        "load_imbalance": float(counts.max() / mean) if mean > 0 else 0.0,
        "entropy": usage_entropy(counts),
    }
