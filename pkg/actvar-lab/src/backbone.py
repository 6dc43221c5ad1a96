"""
Transformer autoregresivo por escalas
Maestro denso: bloques pre-norm con atención sobre escalas previas en caché
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import BackboneConfig
from .errors import ArgumentError, DimensionError, StateError
from .tensor import (
    Tensor, concat, cross_entropy, gelu, layernorm, linear, matmul, no_grad,
    parameter, reshape, softmax, transpose,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


# ----------------------------------------------------------------------
# Calendario de escalas y mapas de tokens
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ScaleSchedule:
    """Lados por escala, número de tokens y longitud total de la secuencia"""
    sides: Tuple[int, ...]
    token_counts: Tuple[int, ...]
    total_length: int

    @property
    def steps(self) -> int:
        return len(self.sides)

    @property
    def offsets(self) -> Tuple[int, ...]:
        """Inicio de cada escala en la secuencia completa (más el final)"""
        return (0,) + tuple(np.cumsum(self.token_counts).tolist())

    def begin_end(self, scale_index: int) -> Tuple[int, int]:
        offsets = self.offsets
        return offsets[scale_index], offsets[scale_index + 1]

    def prefix_length(self, scale_index: int) -> int:
        """Tokens visibles por la atención en la escala dada (previos más actuales)"""
        return self.offsets[scale_index + 1]


def build_schedule(sides: Sequence[int]) -> ScaleSchedule:
    """
    Construir el calendario de escalas

    Args:
        sides: Lados estrictamente crecientes, >= 1

    Returns:
        ScaleSchedule: Calendario con recuentos y longitud total

    Raises:
        ArgumentError: Si los lados no son estrictamente crecientes o son < 1
    """
    sides = tuple(int(s) for s in sides)
    if not sides or sides[0] < 1:
        raise ArgumentError(f"Calendario vacío o con lado < 1: {sides}")
    if any(b <= a for a, b in zip(sides, sides[1:])):
        raise ArgumentError(f"Los lados deben ser estrictamente crecientes: {sides}")
    counts = tuple(s * s for s in sides)
    return ScaleSchedule(sides=sides, token_counts=counts, total_length=sum(counts))


@dataclass
class TokenMap:
    """Rejilla cuadrada de índices del vocabulario para una escala"""
    scale_index: int
    side: int
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)

    def validate(self, schedule: ScaleSchedule, vocab: int) -> None:
        expected = schedule.sides[self.scale_index]
        if self.side != expected or self.tokens.shape != (expected, expected):
            raise DimensionError(f"Mapa de escala {self.scale_index} con forma {self.tokens.shape}, "
                                 f"se esperaba {expected}x{expected}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab):
            raise ArgumentError(f"Índices fuera del vocabulario [0, {vocab}) en escala {self.scale_index}")


def maps_to_sequence(maps: Sequence[TokenMap], schedule: ScaleSchedule, vocab: int) -> np.ndarray:
    """Aplanar los mapas (fila a fila) en la secuencia completa"""
    if len(maps) != schedule.steps:
        raise ArgumentError(f"Se esperaban {schedule.steps} mapas, recibidos {len(maps)}")
    for token_map in maps:
        token_map.validate(schedule, vocab)
    return np.concatenate([m.tokens.reshape(-1) for m in maps])


def sequence_to_maps(sequence: np.ndarray, schedule: ScaleSchedule) -> List[TokenMap]:
    maps = []
    for i, side in enumerate(schedule.sides):
        begin, end = schedule.begin_end(i)
        maps.append(TokenMap(scale_index=i, side=side, tokens=np.asarray(sequence[begin:end]).reshape(side, side)))
    return maps


# ----------------------------------------------------------------------
# Interpolación bilineal
# ----------------------------------------------------------------------
def _axis_weights(source: int, target: int) -> np.ndarray:
    weights = np.zeros((target, source))
    for r in range(target):
        # convención de centros de píxel (align_corners=False)
        x = min(max((r + 0.5) * source / target - 0.5, 0.0), source - 1.0)
        i0 = int(math.floor(x))
        i1 = min(i0 + 1, source - 1)
        w = x - i0
        weights[r, i0] += 1.0 - w
        weights[r, i1] += w
    return weights


def interpolation_matrix(source: int, target: int) -> np.ndarray:
    """Matriz [t², s²] que interpola una rejilla s×s aplanada a t×t"""
    axis = _axis_weights(source, target)
    return np.kron(axis, axis)


def upsample_prev(prev: Tensor, target_side: int) -> Tensor:
    """
    Interpolación bilineal del mapa embebido previo

    Args:
        prev: Embeddings [..., s², H] en orden de filas
        target_side: Lado destino t > s

    Returns:
        Tensor: Embeddings [..., t², H]

    Raises:
        ArgumentError: Si t <= s
        DimensionError: Si el número de posiciones no es un cuadrado
    """
    positions = prev.shape[-2]
    side = math.isqrt(positions)
    if side * side != positions:
        raise DimensionError(f"{positions} posiciones no forman una rejilla cuadrada")
    if target_side <= side:
        raise ArgumentError(f"El lado destino {target_side} debe superar al origen {side}")
    return matmul(Tensor(interpolation_matrix(side, target_side)), prev)


# ----------------------------------------------------------------------
# Bloques
# ----------------------------------------------------------------------
@dataclass
class KVCache:
    """Claves y valores por escala ya procesada en un bloque, [B, heads, l, dh]"""
    keys: List[Tensor] = field(default_factory=list)
    values: List[Tensor] = field(default_factory=list)

    @property
    def scales(self) -> int:
        return len(self.keys)

    def expect(self, scale_index: int) -> None:
        if self.scales != scale_index:
            raise StateError(f"Caché con {self.scales} escalas, la escala {scale_index} "
                             f"necesita exactamente {scale_index}")

    def append(self, keys: Tensor, values: Tensor) -> None:
        self.keys.append(keys)
        self.values.append(values)


@dataclass
class BlockState:
    """Secuencia de entrada de un bloque en la escala actual y su caché"""
    q: Tensor
    cache: KVCache
    scale_index: int


@dataclass
class DenseFFN:
    """FFN densa: δ(x·W1 + b1)·W2 + b2"""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: Callable[[Tensor], Tensor]
    heads: int


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, hidden = x.shape
    return transpose(reshape(x, (batch, length, heads, hidden // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, dim = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (batch, length, heads * dim))


def attend(block: BlockParams, h: Tensor, cache: KVCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Atención multi-cabeza de h [B, L, H] sobre la caché más la propia secuencia"""
    q = _split_heads(linear(h, block.wq, block.bq), block.heads)
    k = _split_heads(linear(h, block.wk, block.bk), block.heads)
    v = _split_heads(linear(h, block.wv, block.bv), block.heads)
    keys = concat(cache.keys + [k], axis=2)
    values = concat(cache.values + [v], axis=2)
    scores = matmul(q, transpose(keys, (0, 1, 3, 2))) * (1.0 / math.sqrt(q.shape[-1]))
    context = matmul(softmax(scores, axis=-1), values)
    return linear(_merge_heads(context), block.wo, block.bo), k, v


def run_block(x: Tensor, block: BlockParams, cache: KVCache, scale_index: int) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Bloque residual pre-norm sin modificar la caché

    Returns:
        tuple: (salida, claves, valores) de la secuencia actual

    Raises:
        StateError: Si la caché no contiene todas las escalas previas
    """
    cache.expect(scale_index)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    attn, k, v = attend(block, layernorm(x, block.ln1_g, block.ln1_b), cache)
    x = x + attn
    out = x + block.ffn(layernorm(x, block.ln2_g, block.ln2_b))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out, k, v


def block_forward(state: BlockState, block: BlockParams) -> Tensor:
    """
    Paso denso de un bloque en la escala actual; añade sus claves/valores a la caché

    Raises:
        StateError: Si falta la caché de alguna escala previa
    """
    out, k, v = run_block(state.q, block, state.cache, state.scale_index)
    state.cache.append(k, v)
    return out


# ----------------------------------------------------------------------
# Modelo completo
# ----------------------------------------------------------------------
@dataclass
class ForwardContext:
    """Estado auxiliar de una pasada: maestro para pseudo-etiquetas y registros por bloque"""
    teacher: Optional["VarModel"] = None
    records: List = field(default_factory=list)


@dataclass
class ForwardOutput:
    logits: Tensor
    blocks: List[Tensor] = field(default_factory=list)
    records: List = field(default_factory=list)


def init_params(config: BackboneConfig, seed: int = 42) -> Dict[str, Tensor]:
    """Parámetros iniciales del modelo denso con nombres jerárquicos"""
    rng = np.random.default_rng(seed)
    schedule = config.schedule
    H, F, V = config.hidden, config.ffn_hidden, config.vocab

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    arrays: Dict[str, np.ndarray] = {
        'class_emb': normal(config.classes, H),
        'word_emb': normal(V, H),
        'scale_emb': normal(schedule.steps, H),
        'pos_emb': normal(schedule.total_length, H),
    }
    for m in range(config.depth):
        p = f'blocks.{m}'
        arrays.update({
            f'{p}.ln1.g': np.ones(H), f'{p}.ln1.b': np.zeros(H),
            f'{p}.attn.wq': normal(H, H), f'{p}.attn.bq': np.zeros(H),
            f'{p}.attn.wk': normal(H, H), f'{p}.attn.bk': np.zeros(H),
            f'{p}.attn.wv': normal(H, H), f'{p}.attn.bv': np.zeros(H),
            f'{p}.attn.wo': normal(H, H), f'{p}.attn.bo': np.zeros(H),
            f'{p}.ln2.g': np.ones(H), f'{p}.ln2.b': np.zeros(H),
            f'{p}.ffn.w1': normal(H, F), f'{p}.ffn.b1': np.zeros(F),
            f'{p}.ffn.w2': normal(F, H), f'{p}.ffn.b2': np.zeros(H),
        })
    arrays.update({
        'head.ln.g': np.ones(H), 'head.ln.b': np.zeros(H),
        'head.w': normal(H, V), 'head.b': np.zeros(V),
    })
    return {name: parameter(value, name=name) for name, value in arrays.items()}


class VarModel:
    """Transformer de predicción de la siguiente escala (maestro denso)"""

    def __init__(self, config: BackboneConfig, params: Dict[str, Tensor]):
        config.check()
        self.config = config
        self.params = params
        self.schedule = config.schedule

    @classmethod
    def initialize(cls, config: BackboneConfig, seed: int = 42) -> "VarModel":
        return cls(config, init_params(config, seed))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def copy(self) -> "VarModel":
        """Copia profunda de los parámetros (hojas nuevas)"""
        params = {name: parameter(t.data, name=name) for name, t in self.params.items()}
        return VarModel(self.config, params)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    # ------------------------------------------------------------------
    def ffn(self, m: int) -> Callable[[Tensor], Tensor]:
        p = self.params
        return DenseFFN(p[f'blocks.{m}.ffn.w1'], p[f'blocks.{m}.ffn.b1'],
                        p[f'blocks.{m}.ffn.w2'], p[f'blocks.{m}.ffn.b2'])

    def block(self, m: int) -> BlockParams:
        p, prefix = self.params, f'blocks.{m}'
        return BlockParams(
            ln1_g=p[f'{prefix}.ln1.g'], ln1_b=p[f'{prefix}.ln1.b'],
            wq=p[f'{prefix}.attn.wq'], bq=p[f'{prefix}.attn.bq'],
            wk=p[f'{prefix}.attn.wk'], bk=p[f'{prefix}.attn.bk'],
            wv=p[f'{prefix}.attn.wv'], bv=p[f'{prefix}.attn.bv'],
            wo=p[f'{prefix}.attn.wo'], bo=p[f'{prefix}.attn.bo'],
            ln2_g=p[f'{prefix}.ln2.g'], ln2_b=p[f'{prefix}.ln2.b'],
            ffn=self.ffn(m), heads=self.config.heads,
        )

    def scale_input(self, labels: np.ndarray, prev_tokens: Optional[np.ndarray], scale_index: int) -> Tensor:
        """
        Entrada de la escala i: embedding de clase (i = 0) o interpolación de la escala i-1

        Args:
            labels: Clases [B]
            prev_tokens: Tokens de la escala anterior [B, s²] (None en la primera)
            scale_index: Escala 0-based

        Returns:
            Tensor: Entrada [B, L_i, H] con embeddings de escala y posición sumados
        """
        p = self.params
        length = self.schedule.token_counts[scale_index]
        if scale_index == 0:
            x = p['class_emb'][np.repeat(labels[:, None], length, axis=1)]
        else:
            x = upsample_prev(p['word_emb'][prev_tokens], self.schedule.sides[scale_index])
        begin, end = self.schedule.begin_end(scale_index)
        return x + p['scale_emb'][scale_index] + p['pos_emb'][begin:end]

    def head(self, x: Tensor) -> Tensor:
        p = self.params
        return linear(layernorm(x, p['head.ln.g'], p['head.ln.b']), p['head.w'], p['head.b'])

    def _run_block(self, m: int, state: BlockState, context: ForwardContext) -> Tensor:
        return block_forward(state, self.block(m))

    # ------------------------------------------------------------------
    def forward(self, tokens: np.ndarray, labels: np.ndarray, keep_blocks: bool = False,
                context: Optional[ForwardContext] = None) -> ForwardOutput:
        """
        Pasada con forzado del maestro, escala a escala con caché KV

        Args:
            tokens: Secuencias completas [B, total_length]
            labels: Clases [B]
            keep_blocks: Conservar la salida de cada bloque en todas las escalas
            context: Contexto auxiliar (pseudo-etiquetas, registros)

        Returns:
            ForwardOutput: Logits [B, total_length, V] y salidas por bloque
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape != (len(labels), self.schedule.total_length):
            raise DimensionError(f"Tokens {tokens.shape} incompatibles con {len(labels)} clases "
                                 f"y longitud {self.schedule.total_length}")
        context = context or ForwardContext()
        depth = self.config.depth
        caches = [KVCache() for _ in range(depth)]
        per_block: List[List[Tensor]] = [[] for _ in range(depth)]
        logits = []
        prev = None
        for i in range(self.schedule.steps):
            x = self.scale_input(labels, prev, i)
            for m in range(depth):
                x = self._run_block(m, BlockState(q=x, cache=caches[m], scale_index=i), context)
                if keep_blocks:
                    per_block[m].append(x)
            logits.append(self.head(x))
            begin, end = self.schedule.begin_end(i)
            prev = tokens[:, begin:end]
        blocks = [concat(outs, axis=1) for outs in per_block] if keep_blocks else []
        return ForwardOutput(logits=concat(logits, axis=1), blocks=blocks, records=context.records)

    def loss(self, tokens: np.ndarray, labels: np.ndarray) -> Tensor:
        """L_cls: entropía cruzada por token con forzado del maestro"""
        return cross_entropy(self.forward(tokens, labels).logits, tokens)

    def generate(self, class_label: int, seed: int = 0, temperature: float = 1.0) -> List[TokenMap]:
        return generate(self, class_label, seed, temperature)

    # ------------------------------------------------------------------
    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path: Union[str, Path], config: BackboneConfig) -> "VarModel":
        arrays = load_checkpoint(path)
        return cls(config, {name: parameter(a, name=name) for name, a in arrays.items()})


def forward_teacher_forcing(model: VarModel, maps: Sequence[TokenMap], class_label: int) -> Tensor:
    """
    Logits de una muestra a partir de sus mapas de tokens

    Returns:
        Tensor: Logits [total_length, V]

    Raises:
        ArgumentError: Si el número de mapas no coincide con el calendario
    """
    sequence = maps_to_sequence(maps, model.schedule, model.config.vocab)
    logits = model.forward(sequence[None, :], np.array([class_label])).logits
    return reshape(logits, logits.shape[1:])


def _sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    if temperature <= 0.0:
        return np.argmax(logits, axis=-1)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(logits.shape[0])
    return np.minimum((u[:, None] >= cdf).sum(axis=-1), logits.shape[-1] - 1)


def generate(model: VarModel, class_label: int, seed: int = 0, temperature: float = 1.0) -> List[TokenMap]:
    """
    Generación escala a escala: cada mapa se muestrea en paralelo y se interpola a la siguiente

    Args:
        model: Modelo denso o activado
        class_label: Clase condicionante
        seed: Semilla del muestreo
        temperature: 0 equivale a decodificación por argmax

    Returns:
        list: Un TokenMap por escala
    """
    rng = np.random.default_rng(seed)
    schedule = model.schedule
    labels = np.array([class_label], dtype=np.int64)
    caches = [KVCache() for _ in range(model.config.depth)]
    context = ForwardContext()
    maps: List[TokenMap] = []
    prev = None
    with no_grad():
        for i, side in enumerate(schedule.sides):
            x = model.scale_input(labels, prev, i)
            for m in range(model.config.depth):
                x = model._run_block(m, BlockState(q=x, cache=caches[m], scale_index=i), context)
            tokens = _sample(model.head(x).data[0], temperature, rng)
            maps.append(TokenMap(scale_index=i, side=side, tokens=tokens.reshape(side, side)))
            prev = tokens[None, :]
    logger.debug(f"Generados {len(maps)} mapas para la clase {class_label}")
    return maps
