"""
Entrenamiento por destilación en dos fases
Fase 1: routers y selectores contra pseudo-etiquetas; fase 2: ajuste fino con destilación del maestro
"""

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .activation import ActVarModel, BlockRecord
from .backbone import INIT_STD, ForwardContext, ForwardOutput, VarModel
from .config import ActivationConfig, StageConfig
from .dataset import TokenDataset
from .errors import ArgumentError, ConfigError, DimensionError, NonFiniteError, StateError
from .experts import load_balance_loss, router_distill_loss, split_ffn, usage_entropy
from .tensor import (
    Tensor, as_tensor, backward, cross_entropy, kl_div, mse, no_grad, parameter, softmax, zero_grad,
)
from .token_gate import selector_distill_loss, token_balance_loss

logger = logging.getLogger(__name__)

LOSS_KEYS = ('loss', 'cls', 'dis_w', 'dis_t', 'bl_w', 'bl_t', 'block', 'final')


# ----------------------------------------------------------------------
# Política de activación
# ----------------------------------------------------------------------
def apply_activation_policy(model: VarModel, activation: ActivationConfig, seed: int = 0) -> ActVarModel:
    """
    Instalar enrutado de expertos y activación de tokens sobre una copia del modelo

    Las FFN se dividen en N expertos; cada bloque recibe un router H→N y un
    selector H→1. Solo las escalas de `activation.scales` usan la ruta dispersa.

    Args:
        model: Maestro denso (no se modifica)
        activation: Política de activación
        seed: Semilla de inicialización de routers y selectores

    Returns:
        ActVarModel: Estudiante inicializado desde el maestro

    Raises:
        ArgumentError: Si alguna escala no existe en el calendario
    """
    ok, message = activation.validate(steps=model.schedule.steps)
    if not ok:
        raise ConfigError(message)
    rng = np.random.default_rng(seed)
    config = model.config
    hidden, n_experts = config.hidden, activation.experts

    params: Dict[str, Tensor] = {}
    for name, t in model.params.items():
        if '.ffn.' not in name:
            params[name] = parameter(t.data, name=name)
    for m in range(config.depth):
        prefix = f'blocks.{m}.ffn.'
        src = model.params
        bank = split_ffn(src[prefix + 'w1'], src[prefix + 'b1'], src[prefix + 'w2'], src[prefix + 'b2'],
                         n_experts, requires_grad=True)
        for name, t in bank.named_parameters(prefix).items():
            t.name = name
            params[name] = t
        gates = {
            f'blocks.{m}.router.w': rng.normal(0.0, INIT_STD, size=(hidden, n_experts)),
            f'blocks.{m}.router.b': np.zeros(n_experts),
            f'blocks.{m}.selector.w': rng.normal(0.0, INIT_STD, size=(hidden, 1)),
            f'blocks.{m}.selector.b': np.zeros(1),
        }
        params.update({name: parameter(a, name=name) for name, a in gates.items()})

    logger.info(f"Política instalada: pasos {activation.scales}, tokens {activation.token_ratios}, "
                f"pesos {activation.weight_ratio}, N={n_experts}")
    return ActVarModel(config, params, activation)


# ----------------------------------------------------------------------
# Pérdidas por fase
# ----------------------------------------------------------------------
def _total(values: Sequence) -> float:
    return float(sum(as_tensor(v).item() for v in values))


@dataclass
class Stage1Terms:
    """Componentes de la fase 1 (una entrada por bloque y escala activada)"""
    cls: Union[Tensor, float]
    dis_w: List = field(default_factory=list)
    dis_t: List = field(default_factory=list)
    bl_w: List = field(default_factory=list)
    bl_t: List = field(default_factory=list)

    def components(self) -> Dict[str, float]:
        return {
            'cls': as_tensor(self.cls).item(),
            'dis_w': _total(self.dis_w), 'dis_t': _total(self.dis_t),
            'bl_w': _total(self.bl_w), 'bl_t': _total(self.bl_t),
        }


@dataclass
class Stage2Terms:
    """Componentes de la fase 2: L_cls, L_f y un L_b por bloque"""
    cls: Union[Tensor, float]
    final: Union[Tensor, float]
    blocks: List = field(default_factory=list)

    def components(self) -> Dict[str, float]:
        blocks = [as_tensor(b).item() for b in self.blocks]
        return {
            'cls': as_tensor(self.cls).item(),
            'final': as_tensor(self.final).item(),
            'block': float(np.mean(blocks)) if blocks else 0.0,
        }


def stage1_terms(output: ForwardOutput, tokens: np.ndarray) -> Stage1Terms:
    """
    Componentes de la fase 1 a partir de una pasada del estudiante

    Raises:
        StateError: Si falta alguna pseudo-etiqueta
    """
    terms = Stage1Terms(cls=cross_entropy(output.logits, tokens))
    for record in output.records:
        if record.routing is not None:
            if record.weight_labels is None:
                raise StateError(f"Faltan pseudo-etiquetas de pesos en bloque {record.block}, escala {record.scale}")
            terms.dis_w.append(router_distill_loss(record.routing.p_w, record.weight_labels))
            terms.bl_w.append(load_balance_loss(record.routing) * (1.0 / record.batch))
        if record.selection is not None:
            if record.token_labels is None:
                raise StateError(f"Faltan pseudo-etiquetas de tokens en bloque {record.block}, escala {record.scale}")
            terms.dis_t.append(selector_distill_loss(record.selection.p_t, record.token_labels))
            terms.bl_t.append(token_balance_loss(record.selection))
    return terms


def stage1_loss(terms: Stage1Terms, alpha: float = 0.05, beta: float = 0.01) -> Tensor:
    """L_stage1 = L_cls + Σ α·(L_dis^w + L_dis^t) + β·(L_bl^w + L_bl^t)"""
    total = as_tensor(terms.cls)
    for value in list(terms.dis_w) + list(terms.dis_t):
        total = total + as_tensor(value) * alpha
    for value in list(terms.bl_w) + list(terms.bl_t):
        total = total + as_tensor(value) * beta
    return total


def stage2_terms(student: ForwardOutput, teacher: ForwardOutput, tokens: np.ndarray) -> Stage2Terms:
    """
    Componentes de la fase 2: entropía cruzada, KL de salidas y MSE por bloque

    Raises:
        DimensionError: Si las salidas de maestro y estudiante no coinciden en forma
    """
    if student.logits.shape != teacher.logits.shape:
        raise DimensionError(f"Logits del estudiante {student.logits.shape} frente al maestro "
                             f"{teacher.logits.shape}")
    if len(student.blocks) != len(teacher.blocks):
        raise DimensionError(f"{len(student.blocks)} bloques del estudiante frente a {len(teacher.blocks)}")
    rows = int(np.prod(student.logits.shape[:-1]))
    target = softmax(Tensor(teacher.logits.data), axis=-1)
    final = kl_div(softmax(student.logits, axis=-1), target) * (1.0 / rows)
    blocks = [mse(s, Tensor(t.data)) for s, t in zip(student.blocks, teacher.blocks)]
    return Stage2Terms(cls=cross_entropy(student.logits, tokens), final=final, blocks=blocks)


def stage2_loss(terms: Stage2Terms) -> Tensor:
    """L_stage2 = L_cls + L_f + (1/D)·Σ L_b"""
    total = as_tensor(terms.cls) + as_tensor(terms.final)
    if terms.blocks:
        block_sum = as_tensor(terms.blocks[0])
        for value in terms.blocks[1:]:
            block_sum = block_sum + as_tensor(value)
        total = total + block_sum * (1.0 / len(terms.blocks))
    return total


# ----------------------------------------------------------------------
# Optimizador
# ----------------------------------------------------------------------
class AdamW:
    """Adam con decaimiento de pesos desacoplado"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.95,
                 weight_decay: float = 0.05, eps: float = 1e-8, warmup_steps: int = 0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @classmethod
    def from_config(cls, params: Dict[str, Tensor], config: StageConfig) -> "AdamW":
        return cls(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                   weight_decay=config.weight_decay, eps=config.eps, warmup_steps=config.warmup_steps)

    def current_lr(self) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, self.steps / self.warmup_steps)
        return self.lr

    def step(self) -> None:
        self.steps += 1
        lr = self.current_lr()
        bias1 = 1.0 - self.beta1 ** self.steps
        bias2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


# ----------------------------------------------------------------------
# Informes
# ----------------------------------------------------------------------
@dataclass
class EpochStats:
    epoch: int
    steps: int
    loss: float = 0.0
    cls: float = 0.0
    dis_w: float = 0.0
    dis_t: float = 0.0
    bl_w: float = 0.0
    bl_t: float = 0.0
    block: float = 0.0
    final: float = 0.0
    usage_entropy: float = 0.0
    token_coverage: float = 1.0


@dataclass
class TrainReport:
    """Pérdidas por época, histograma de uso de expertos y cobertura de tokens"""
    stage: int
    epochs: List[EpochStats] = field(default_factory=list)
    expert_usage: Dict[int, List[int]] = field(default_factory=dict)
    routed_tokens: int = 0
    selected_tokens: Dict[int, int] = field(default_factory=dict)
    candidate_tokens: Dict[int, int] = field(default_factory=dict)

    @property
    def token_coverage(self) -> Dict[int, float]:
        return {m: self.selected_tokens[m] / self.candidate_tokens[m]
                for m in sorted(self.candidate_tokens) if self.candidate_tokens[m]}

    def observe(self, records: Sequence[BlockRecord]) -> None:
        for record in records:
            if record.routing is not None:
                usage = record.routing.usage()
                current = np.asarray(self.expert_usage.get(record.block, np.zeros_like(usage)))
                self.expert_usage[record.block] = (current + usage).tolist()
                self.routed_tokens += int(usage.sum())
            mask = record.selected_mask()
            self.selected_tokens[record.block] = self.selected_tokens.get(record.block, 0) + int(mask.sum())
            self.candidate_tokens[record.block] = self.candidate_tokens.get(record.block, 0) + int(mask.size)

    def summary(self) -> Dict:
        return {
            'stage': self.stage,
            'epochs': [asdict(e) for e in self.epochs],
            'expert_usage': {str(m): counts for m, counts in sorted(self.expert_usage.items())},
            'usage_entropy': {str(m): usage_entropy(c) for m, c in sorted(self.expert_usage.items())},
            'routed_tokens': self.routed_tokens,
            'token_coverage': {str(m): v for m, v in self.token_coverage.items()},
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
        return path

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = ['epoch', 'steps', *LOSS_KEYS, 'usage_entropy', 'token_coverage']
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for stats in self.epochs:
                writer.writerow({k: getattr(stats, k) for k in columns})
        return path


# ----------------------------------------------------------------------
# Bucle de entrenamiento
# ----------------------------------------------------------------------
LossFn = Callable[[np.ndarray, np.ndarray], Tuple[Tensor, Dict[str, float], List[BlockRecord]]]


def _fit(params: Dict[str, Tensor], loss_fn: LossFn, data: TokenDataset, config: StageConfig) -> TrainReport:
    trainable = {name: p for name, p in params.items() if p.requires_grad}
    optimizer = AdamW.from_config(trainable, config)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(stage=config.stage)
    n = len(data)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums: Dict[str, float] = defaultdict(float)
        epoch_report = TrainReport(stage=config.stage)
        steps = 0
        for start in range(0, n, config.batch_size):
            index = order[start:start + config.batch_size]
            loss, components, records = loss_fn(data.tokens[index], data.labels[index])
            components['loss'] = loss.item()
            if not all(math.isfinite(v) for v in components.values()):
                logger.error(f"Pérdida no finita en fase {config.stage}, época {epoch + 1}, paso {steps + 1}")
                raise NonFiniteError(f"Pérdida no finita en fase {config.stage}, época {epoch + 1}, "
                                     f"paso {steps + 1}: {components}")
            zero_grad(trainable.values())
            if trainable and loss.requires_grad:
                backward(loss)
                optimizer.step()
            for key, value in components.items():
                sums[key] += value
            epoch_report.observe(records)
            steps += 1
            logger.debug(f"Fase {config.stage} época {epoch + 1} paso {steps}: {components}")

        _merge_reports(report, epoch_report)
        stats = EpochStats(epoch=epoch + 1, steps=steps, **{k: sums[k] / max(steps, 1) for k in LOSS_KEYS})
        entropies = [usage_entropy(c) for c in epoch_report.expert_usage.values()]
        stats.usage_entropy = float(np.mean(entropies)) if entropies else 0.0
        selected = sum(epoch_report.selected_tokens.values())
        candidates = sum(epoch_report.candidate_tokens.values())
        stats.token_coverage = selected / candidates if candidates else 1.0
        report.epochs.append(stats)
        logger.info(f"Fase {config.stage} época {epoch + 1}/{config.epochs}: pérdida {stats.loss:.4f}, "
                    f"L_cls {stats.cls:.4f}")

    zero_grad(params.values())
    return report


def _merge_reports(total: TrainReport, part: TrainReport) -> None:
    for block, counts in part.expert_usage.items():
        current = np.asarray(total.expert_usage.get(block, np.zeros(len(counts), dtype=np.int64)))
        total.expert_usage[block] = (current + np.asarray(counts)).tolist()
    total.routed_tokens += part.routed_tokens
    for block, value in part.selected_tokens.items():
        total.selected_tokens[block] = total.selected_tokens.get(block, 0) + value
    for block, value in part.candidate_tokens.items():
        total.candidate_tokens[block] = total.candidate_tokens.get(block, 0) + value


def train_teacher(model: VarModel, data: TokenDataset, config: StageConfig) -> TrainReport:
    """
    Entrenar el maestro denso con L_cls

    Returns:
        TrainReport: Pérdidas por época
    """
    config.check()
    for p in model.params.values():
        p.requires_grad = True

    def loss_fn(tokens, labels):
        loss = model.loss(tokens, labels)
        return loss, {'cls': loss.item()}, []

    logger.info(f"Entrenando maestro: {len(data)} muestras, {config.epochs} épocas")
    return _fit(model.params, loss_fn, data, config)


def run_stage(config: StageConfig, teacher: VarModel, student: ActVarModel, data: TokenDataset) -> TrainReport:
    """
    Ejecutar una fase de destilación

    Args:
        config: Fase (1 o 2) e hiperparámetros
        teacher: Maestro denso (queda congelado)
        student: Estudiante inicializado desde el maestro
        data: Conjunto de entrenamiento

    Returns:
        TrainReport: Componentes por época, uso de expertos y cobertura

    Raises:
        NonFiniteError: Si alguna pérdida deja de ser finita
        StateError: Si un parámetro congelado cambió
    """
    config.check()
    if config.stage not in (1, 2):
        raise ArgumentError(f"run_stage admite las fases 1 y 2, recibida {config.stage}")
    teacher.freeze()
    for name, p in student.params.items():
        p.requires_grad = config.is_trainable(name)
    frozen = {name: p.data.tobytes() for name, p in student.params.items() if not p.requires_grad}

    def stage1_step(tokens, labels):
        output = student.forward(tokens, labels, context=ForwardContext(teacher=teacher))
        terms = stage1_terms(output, tokens)
        return stage1_loss(terms, config.alpha, config.beta), terms.components(), output.records

    def stage2_step(tokens, labels):
        with no_grad():
            reference = teacher.forward(tokens, labels, keep_blocks=True)
        output = student.forward(tokens, labels, keep_blocks=True)
        terms = stage2_terms(output, reference, tokens)
        return stage2_loss(terms), terms.components(), output.records

    logger.info(f"Fase {config.stage}: {len(data)} muestras, {config.epochs} épocas, lr {config.lr}")
    report = _fit(student.params, stage1_step if config.stage == 1 else stage2_step, data, config)

    changed = [name for name, raw in frozen.items() if student.params[name].data.tobytes() != raw]
    if changed:
        raise StateError(f"Parámetros congelados modificados en fase {config.stage}: {changed[:5]}")
    return report


# ----------------------------------------------------------------------
# Evaluación
# ----------------------------------------------------------------------
def evaluate_ce(model: VarModel, data: TokenDataset, batch_size: int = 32) -> float:
    """Entropía cruzada media por token con forzado del maestro"""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            tokens = data.tokens[start:start + batch_size]
            labels = data.labels[start:start + batch_size]
            total += model.loss(tokens, labels).item() * len(labels)
            count += len(labels)
    return total / max(count, 1)


@dataclass
class RoutingStats:
    """Estadísticas de enrutado y selección sobre un conjunto"""
    expert_usage: Dict[int, List[int]] = field(default_factory=dict)
    usage_entropy: Dict[int, float] = field(default_factory=dict)
    coverage: Dict[int, float] = field(default_factory=dict)
    union_coverage: float = 1.0

    def summary(self) -> Dict:
        return {
            'expert_usage': {str(k): v for k, v in sorted(self.expert_usage.items())},
            'usage_entropy': {str(k): v for k, v in sorted(self.usage_entropy.items())},
            'coverage': {str(k): v for k, v in sorted(self.coverage.items())},
            'union_coverage': self.union_coverage,
        }


def routing_statistics(model: ActVarModel, data: TokenDataset, batch_size: int = 32) -> RoutingStats:
    """
    Uso de expertos, entropía y cobertura de tokens por bloque

    La cobertura de unión es la fracción de posiciones de escalas activadas
    procesadas por al menos un bloque.
    """
    report = TrainReport(stage=0)
    union_selected, union_total = 0, 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            tokens = data.tokens[start:start + batch_size]
            labels = data.labels[start:start + batch_size]
            records = model.forward(tokens, labels).records
            report.observe(records)
            by_scale: Dict[int, np.ndarray] = {}
            for record in records:
                mask = record.selected_mask().astype(bool)
                by_scale[record.scale] = by_scale.get(record.scale, np.zeros_like(mask)) | mask
            for mask in by_scale.values():
                union_selected += int(mask.sum())
                union_total += int(mask.size)
    stats = RoutingStats(
        expert_usage=dict(report.expert_usage),
        usage_entropy={m: usage_entropy(c) for m, c in report.expert_usage.items()},
        coverage=report.token_coverage,
        union_coverage=union_selected / union_total if union_total else 1.0,
    )
    logger.info(f"Cobertura de unión {stats.union_coverage:.3f}, entropía de uso {stats.usage_entropy}")
    return stats
