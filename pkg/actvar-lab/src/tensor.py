"""
Motor de tensores con diferenciación automática
Aritmética densa en float64 sobre numpy con cinta de gradientes en modo inverso
"""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, xlogy

from .errors import ArgumentError, DimensionError, GradientStateError, NonFiniteError

logger = logging.getLogger(__name__)

DTYPE = np.float64
KL_EPS = 1e-8
LAYERNORM_EPS = 1e-5

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_sequence = itertools.count()
_grad_enabled = True
_checked = False

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Tensor denso con gradiente opcional"""

    __slots__ = ("data", "requires_grad", "grad", "name",
                 "_parents", "_backward", "_seq", "_op", "_consumed")
    # los operadores de ndarray ceden el turno a los de Tensor
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._seq = next(_sequence)
        self._op = "leaf"
        self._consumed = False

    # ------------------------------------------------------------------
    # Propiedades
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() requiere un tensor de un elemento, forma {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # ------------------------------------------------------------------
    # Operadores
    # ------------------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


# ----------------------------------------------------------------------
# Modos globales
# ----------------------------------------------------------------------
@contextmanager
def no_grad() -> Iterator[None]:
    """Desactiva la grabación en la cinta dentro del bloque"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def set_checked_mode(enabled: bool) -> None:
    """Activa la detección de NaN/Inf tras cada operación"""
    global _checked
    _checked = bool(enabled)
    logger.debug(f"Modo comprobado: {_checked}")


@contextmanager
def checked_mode() -> Iterator[None]:
    global _checked
    previous = _checked
    _checked = True
    try:
        yield
    finally:
        _checked = previous


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Hoja entrenable"""
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out._seq = next(_sequence)
    out._op = op
    out._consumed = False
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward if tracked else None
    if _checked and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"Valor no finito producido por la operación '{op}'")
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ----------------------------------------------------------------------
# Operaciones elementales
# ----------------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),), "pow")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def gelu(x: ArrayLike) -> Tensor:
    """GELU exacta: x·Φ(x) con Φ basada en erf"""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def where(mask: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)), "where")


# ----------------------------------------------------------------------
# Reducciones y forma
# ----------------------------------------------------------------------
def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ----------------------------------------------------------------------
# Indexado
# ----------------------------------------------------------------------
def index(a: ArrayLike, key) -> Tensor:
    """Lectura con indexado numpy (básico o avanzado)"""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), backward, "index")


def index_put(base: ArrayLike, key, values: ArrayLike) -> Tensor:
    """Copia de `base` con las posiciones `key` sustituidas por `values` (sin duplicados)"""
    base, values = as_tensor(base), as_tensor(values)
    out = base.data.copy()
    out[key] = values.data

    def backward(g):
        g_base = g.copy()
        g_base[key] = 0.0
        return g_base, g[key]

    return _make(out, (base, values), backward, "index_put")


def index_add(base: ArrayLike, key, values: ArrayLike) -> Tensor:
    """Copia de `base` con `values` acumulado en las posiciones `key`"""
    base, values = as_tensor(base), as_tensor(values)
    out = base.data.copy()
    np.add.at(out, key, values.data)
    return _make(out, (base, values), lambda g: (g, g[key]), "index_add")


# ----------------------------------------------------------------------
# Álgebra lineal y normalizaciones
# ----------------------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requiere tensores de rango >= 2: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Dimensiones internas incompatibles: {a.shape} @ {b.shape}")

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layernorm(x: ArrayLike, gain: Optional[ArrayLike] = None, bias: Optional[ArrayLike] = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalización sobre el último eje seguida de la transformación afín"""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    out = centered * power(variance + eps, -0.5)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


# ----------------------------------------------------------------------
# Pérdidas
# ----------------------------------------------------------------------
def kl_div(p: ArrayLike, q: ArrayLike, eps: float = KL_EPS) -> Tensor:
    """
    Divergencia KL total Σ p·log(p/q)

    q se acota inferiormente en `eps` antes del logaritmo y 0·log 0 = 0.

    Raises:
        DimensionError: Si las formas no coinciden
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div con formas distintas: {p.shape} vs {q.shape}")
    q_clamped = np.maximum(q.data, eps)
    value = (xlogy(p.data, p.data) - xlogy(p.data, q_clamped)).sum()

    def backward(g):
        positive = p.data > 0
        log_p = np.log(np.where(positive, p.data, 1.0))
        g_p = g * (np.where(positive, log_p + 1.0, 0.0) - np.log(q_clamped))
        g_q = g * np.where(q.data > eps, -p.data / q_clamped, 0.0)
        return g_p, g_q

    return _make(value, (p, q), backward, "kl_div")


def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse con formas distintas: {a.shape} vs {b.shape}")
    diff = a - b
    return mean(diff * diff)


def cross_entropy(logits: ArrayLike, targets: np.ndarray) -> Tensor:
    """Entropía cruzada media por token; `logits` [..., V], `targets` enteros [...]"""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"Objetivos {targets.shape} incompatibles con logits {logits.shape}")
    vocab = logits.shape[-1]
    flat = reshape(log_softmax(logits, axis=-1), (-1, vocab))
    rows = np.arange(flat.shape[0])
    return -mean(flat[(rows, targets.reshape(-1))])


# ----------------------------------------------------------------------
# Selección top-k (desconectada de la cinta)
# ----------------------------------------------------------------------
def topk(x: ArrayLike, k: int) -> Tuple[np.ndarray, Tensor]:
    """
    Selecciona los k mayores valores sobre el último eje

    Los empates se resuelven a favor del índice más bajo.

    Args:
        x: Valores (Tensor o array)
        k: Número de elementos, 1 <= k <= n

    Returns:
        tuple: (índices ordenados por valor descendente, indicador binario)

    Raises:
        ArgumentError: Si k está fuera de rango
    """
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise ArgumentError(f"top-k requiere 1 <= k <= {n}, recibido k={k}")
    order = np.argsort(-values, axis=-1, kind="stable")
    indices = order[..., :k]
    indicator = np.zeros(values.shape, dtype=DTYPE)
    np.put_along_axis(indicator, indices, 1.0, axis=-1)
    return indices, Tensor(indicator)


# ----------------------------------------------------------------------
# Retropropagación
# ----------------------------------------------------------------------
@dataclass
class ComputationTape:
    """Nodos alcanzables desde la pérdida en orden inverso de grabación"""
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, loss: Tensor) -> "ComputationTape":
        seen = set()
        nodes: List[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        return cls(nodes)

    @property
    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> ComputationTape:
    """
    Propaga gradientes desde una pérdida escalar hasta las hojas entrenables

    Raises:
        ArgumentError: Si la pérdida no es escalar
        GradientStateError: Si la pérdida ya se retropropagó, no está en la cinta
            o alguna hoja conserva gradientes sin reiniciar
    """
    if loss.size != 1:
        raise ArgumentError(f"backward requiere una pérdida escalar, forma {loss.shape}")
    if loss._consumed:
        raise GradientStateError("backward ya ejecutado sobre esta pérdida")
    if not loss.requires_grad:
        raise GradientStateError("La pérdida no depende de ningún parámetro entrenable")

    tape = ComputationTape.record(loss)
    stale = [leaf.name or repr(leaf) for leaf in tape.leaves if leaf.grad is not None]
    if stale:
        raise GradientStateError(f"Gradientes sin reiniciar en {len(stale)} hojas: {stale[:3]}")

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in tape.nodes:
        g = grads.pop(id(node), None)
        if node.is_leaf:
            node.grad = np.array(g, dtype=DTYPE) if g is not None else np.zeros(node.shape, DTYPE)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=DTYPE), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    loss._consumed = True
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """
    Compara gradientes de la cinta con diferencias finitas centrales

    Args:
        fn: Función que devuelve un escalar a partir de `inputs`
        inputs: Hojas con requires_grad=True (se perturban en sitio)
        h: Paso de diferencias finitas

    Returns:
        float: Mayor error relativo (norma) entre ambos gradientes
    """
    zero_grad(inputs)
    backward(fn(*inputs))
    analytic = [np.array(t.grad) for t in inputs]
    zero_grad(inputs)

    worst = 0.0
    for tensor, g_analytic in zip(inputs, analytic):
        g_numeric = np.zeros_like(tensor.data)
        for idx in np.ndindex(tensor.shape):
            original = tensor.data[idx]
            with no_grad():
                tensor.data[idx] = original + h
                plus = fn(*inputs).item()
                tensor.data[idx] = original - h
                minus = fn(*inputs).item()
            tensor.data[idx] = original
            g_numeric[idx] = (plus - minus) / (2.0 * h)
        scale = max(np.linalg.norm(g_analytic), np.linalg.norm(g_numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(g_analytic - g_numeric) / scale))
    return worst
