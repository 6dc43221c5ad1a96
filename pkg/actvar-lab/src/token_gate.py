"""
Activación adaptativa de tokens por bloque
Selector ligero, extracción compacta, pasada reducida y reconstrucción de la secuencia
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import BlockParams, KVCache, run_block
from .errors import ArgumentError, DimensionError
from .experts import GateParams, masked_softmax
from .tensor import Tensor, as_tensor, index_put, kl_div, linear, no_grad, reshape, softmax, topk, tsum

logger = logging.getLogger(__name__)


@dataclass
class SelectionDecision:
    """
    Selección de tokens de una secuencia (con dimensión de lote)

    `gather` mapea cada índice compacto a su posición original, estrictamente creciente.
    """
    p_t: Optional[Tensor]
    indicator: np.ndarray
    k: int
    gather: np.ndarray

    @property
    def length(self) -> int:
        return self.indicator.shape[-1]

    @property
    def batch(self) -> int:
        return self.indicator.shape[0]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SelectionDecision":
        """Decisión sin probabilidades a partir de una máscara binaria [L] o [B, L]"""
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        counts = mask.sum(axis=1)
        if np.any(counts != counts[0]):
            raise ArgumentError(f"Todas las filas deben seleccionar el mismo número de tokens: {counts}")
        k = int(counts[0])
        gather = np.stack([np.flatnonzero(row) for row in mask]) if k else np.zeros((mask.shape[0], 0), np.int64)
        return cls(p_t=None, indicator=mask.astype(np.int8), k=k, gather=gather)


def _batch_key(decision: SelectionDecision):
    return (np.arange(decision.batch)[:, None], decision.gather)


def select(selector: GateParams, q_prev: Tensor, k: int) -> SelectionDecision:
    """
    Puntuar los tokens y quedarse con los K_t más probables

    El sesgo escalar del selector desplaza todas las puntuaciones por igual, así que
    p_t no depende de él y su gradiente es siempre nulo.

    Args:
        selector: Capa lineal H→1
        q_prev: Secuencia [L, H] o [B, L, H]
        k: K_t

    Returns:
        SelectionDecision: p_t = softmax sobre las L posiciones e indicador top-k

    Raises:
        ArgumentError: Si K_t está fuera de [1, L]
    """
    q_prev = as_tensor(q_prev)
    q3 = q_prev if q_prev.ndim == 3 else reshape(q_prev, (1,) + q_prev.shape)
    batch, length, _ = q3.shape
    if not 1 <= k <= length:
        raise ArgumentError(f"K_t={k} fuera de rango [1, {length}]")
    p_t = softmax(reshape(linear(q3, selector.w, selector.b), (batch, length)), axis=-1)
    indices, indicator = topk(p_t, k)
    return SelectionDecision(p_t=p_t, indicator=indicator.data.astype(np.int8), k=k,
                             gather=np.sort(indices, axis=-1))


def extract(q_prev: Tensor, decision: SelectionDecision) -> Tensor:
    """Secuencia compacta [K_t, H] (o [B, K_t, H]) en el orden original"""
    q_prev = as_tensor(q_prev)
    if q_prev.ndim == 2:
        return q_prev[decision.gather[0]]
    return q_prev[_batch_key(decision)]


def compact_block_forward(q_hat: Tensor, block: BlockParams, cache: KVCache, scale_index: int) -> Tensor:
    """
    Bloque sobre la secuencia compacta; solo los tokens seleccionados aportan claves/valores

    Raises:
        StateError: Si la caché no contiene las escalas previas
    """
    out, keys, values = run_block(q_hat, block, cache, scale_index)
    cache.append(keys, values)
    return out


def reconstruct(q_prev: Tensor, q_hat: Tensor, decision: SelectionDecision) -> Tensor:
    """
    Reinsertar los tokens actualizados; los no seleccionados reutilizan la entrada

    Raises:
        DimensionError: Si q_hat no tiene K_t filas
    """
    q_prev, q_hat = as_tensor(q_prev), as_tensor(q_hat)
    if q_hat.ndim < 2 or q_hat.shape[-2] != decision.k:
        raise DimensionError(f"Se esperaban {decision.k} filas compactas, forma {q_hat.shape}")
    if q_prev.ndim == 2:
        return index_put(q_prev, decision.gather[0], q_hat)
    return index_put(q_prev, _batch_key(decision), q_hat)


def token_pseudo_labels(block: BlockParams, q_prev: Tensor, k: int, cache: Optional[KVCache] = None,
                        scale_index: int = 0) -> np.ndarray:
    """
    Pseudo-etiquetas de selección a partir de la pasada completa del bloque

    d_i = ‖q*_m[i] − q_{m-1}[i]‖₂; se retienen las K_t mayores distancias y se
    aplica softmax sobre ellas.

    Returns:
        np.ndarray: 𝒜_t con la misma forma que q_prev sin la última dimensión
    """
    q_prev = as_tensor(q_prev)
    cache = cache if cache is not None else KVCache()
    with no_grad():
        updated, _, _ = run_block(Tensor(q_prev.data), block, cache, scale_index)
    distances = np.linalg.norm(updated.data - q_prev.data, axis=-1)
    _, indicator = topk(distances, k)
    return masked_softmax(distances, indicator.data > 0)


def selector_distill_loss(p_t: Tensor, labels: np.ndarray) -> Tensor:
    """
    KL(p_t ∥ σ(𝒜_t)) con −∞ fuera del soporte, promediada sobre el lote

    Raises:
        DimensionError: Si las formas no coinciden
    """
    labels = np.asarray(labels, dtype=np.float64)
    if p_t.shape != labels.shape:
        raise DimensionError(f"p_t {p_t.shape} frente a pseudo-etiquetas {labels.shape}")
    rows = 1 if labels.ndim == 1 else labels.shape[0]
    target = masked_softmax(labels, labels > 0)
    return kl_div(p_t, Tensor(target)) * (1.0 / rows)


def token_balance_loss(decision: SelectionDecision) -> Tensor:
    """(K_t/L)·Σ_i ℐ[i]·p_t[i], promediada sobre el lote"""
    scale = decision.k / decision.length
    total = tsum(decision.p_t * Tensor(decision.indicator.astype(np.float64)))
    return total * (scale / decision.batch)
