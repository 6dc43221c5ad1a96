"""
Contabilidad analítica de FLOPs
Coste base por bloque, reducción por dispersión dual y sobrecoste de routers y selectores
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .backbone import ScaleSchedule
from .config import REFERENCE_SIDES, ActivationConfig, BackboneConfig
from .errors import ArgumentError, ConfigError

logger = logging.getLogger(__name__)

ATTENTION_CONTEXTS = ('scale', 'prefix')
PERCENTAGE_SCOPES = ('all', 'activated')

# Convenciones con nombre: (contexto de atención, denominador del porcentaje)
CONVENTIONS = {
    'default': ('scale', 'all'),
    'reference': ('prefix', 'activated'),
}

# Anchura = 64·profundidad (supuesto, no dato publicado)
REFERENCE_CONFIGS = {
    'd16': (16, 1024),
    'd20': (20, 1280),
    'd24': (24, 1536),
    'd30': (30, 1920),
}

# Ahorros publicados en porcentaje, para comparación
PUBLISHED_SAVINGS = {
    'd16': 20.2,
    'd20': 21.2,
    'd24': 21.8,
    'd30': 22.3,
}

PUBLISHED_TOLERANCE = 3.0


def describe_convention(attention_context: str, percentage_scope: str) -> str:
    """Texto de la convención de coste para cabeceras de informe"""
    ctx = 'L de la escala' if attention_context == 'scale' else 'prefijo en caché'
    scope = 'todos los pasos' if percentage_scope == 'all' else 'pasos activados'
    return (f"MAC = 2 FLOPs; FFN con expansión 4x; bloque = 4LH² + 2·L·ctx·H + 8LH² "
            f"(ctx = {ctx}); porcentaje sobre {scope}")


def _check_rate(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ArgumentError(f"La tasa {name}={value} debe estar en [0, 1]")


def block_reduction(length: int, hidden: int, eta: float, mu: float) -> float:
    """
    FLOPs ahorrados por un bloque en un paso: 8·η·L·H²·(1+2μ)

    Raises:
        ArgumentError: Si η o μ están fuera de [0, 1]
    """
    _check_rate('eta', eta)
    _check_rate('mu', mu)
    return 8.0 * eta * length * hidden ** 2 * (1.0 + 2.0 * mu)


def block_overhead(length: int, hidden: int, eta: float, n_experts: int) -> float:
    """Coste del selector (2LH) y del router sobre los tokens activos: 2·L·H·(1+(1−η)·N)"""
    _check_rate('eta', eta)
    return 2.0 * length * hidden * (1.0 + (1.0 - eta) * n_experts)


def block_baseline(length: int, hidden: int, context: Optional[int] = None) -> float:
    """
    Coste denso de un bloque: proyecciones 4LH², atención 2·L·ctx·H y FFN 8LH²

    Args:
        length: Tokens de la escala
        hidden: Anchura H
        context: Tokens atendidos (por defecto, los de la propia escala)
    """
    context = length if context is None else context
    return 12.0 * length * hidden ** 2 + 2.0 * length * context * hidden


@dataclass
class CostConfig:
    """
    Configuración de coste

    `token_rates` y `weight_rates` tienen una entrada por paso del calendario
    (η_i, μ_i) y valen 0 fuera de los pasos activados.
    """
    hidden: int
    depth: int
    schedule: ScaleSchedule
    experts: int = 16
    token_rates: Tuple[float, ...] = ()
    weight_rates: Tuple[float, ...] = ()
    activated: Tuple[int, ...] = ()
    attention_context: str = 'scale'
    percentage_scope: str = 'all'

    def __post_init__(self):
        steps = self.schedule.steps
        self.token_rates = tuple(self.token_rates) or (0.0,) * steps
        self.weight_rates = tuple(self.weight_rates) or (0.0,) * steps
        self.activated = tuple(sorted(self.activated))

    def validate(self) -> Tuple[bool, Optional[str]]:
        steps = self.schedule.steps
        if len(self.token_rates) != steps or len(self.weight_rates) != steps:
            return False, f"Se esperaban {steps} tasas por paso"
        if any(not 0 <= i < steps for i in self.activated):
            return False, f"Pasos activados {self.activated} fuera del calendario de {steps}"
        for i in range(steps):
            if i not in self.activated and (self.token_rates[i] or self.weight_rates[i]):
                return False, f"El paso {i + 1} no está activado pero tiene tasas no nulas"
        if self.attention_context not in ATTENTION_CONTEXTS:
            return False, f"attention_context desconocido: {self.attention_context}"
        if self.percentage_scope not in PERCENTAGE_SCOPES:
            return False, f"percentage_scope desconocido: {self.percentage_scope}"
        return True, None

    def context(self, scale_index: int) -> int:
        if self.attention_context == 'prefix':
            return self.schedule.prefix_length(scale_index)
        return self.schedule.token_counts[scale_index]

    def convention(self) -> str:
        return describe_convention(self.attention_context, self.percentage_scope)


@dataclass
class StepCost:
    """Costes por bloque de un paso"""
    step: int
    length: int
    context: int
    activated: bool
    eta: float
    mu: float
    baseline: float
    reduction: float
    overhead: float

    @property
    def net(self) -> float:
        return self.reduction - self.overhead


@dataclass
class CostReport:
    """Resumen de coste: base, reducción, sobrecoste y ahorro neto sobre los D bloques"""
    depth: int
    hidden: int
    experts: int
    convention: str
    steps: List[StepCost] = field(default_factory=list)
    total_baseline: float = 0.0
    reduction: float = 0.0
    overhead: float = 0.0

    @property
    def net_saving(self) -> float:
        return self.reduction - self.overhead

    @property
    def saving_percent(self) -> float:
        return 100.0 * self.net_saving / self.total_baseline if self.total_baseline else 0.0

    def to_dict(self) -> Dict:
        return {
            'depth': self.depth,
            'hidden': self.hidden,
            'experts': self.experts,
            'convention': self.convention,
            'steps': [{**asdict(s), 'net': s.net} for s in self.steps],
            'total_baseline': self.total_baseline,
            'reduction': self.reduction,
            'overhead': self.overhead,
            'net_saving': self.net_saving,
            'saving_percent': self.saving_percent,
        }

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False, sort_keys=True)
        return path

    def to_text(self) -> str:
        """Tabla de columnas alineadas con la convención en la cabecera"""
        lines = [
            f"# {self.convention}",
            f"# D={self.depth} H={self.hidden} N={self.experts}",
            f"{'paso':>4} {'L':>6} {'ctx':>6} {'eta':>6} {'mu':>6} "
            f"{'base/bloque':>16} {'reducción':>16} {'sobrecoste':>14} {'neto':>16}",
        ]
        for s in self.steps:
            lines.append(
                f"{s.step:>4} {s.length:>6} {s.context:>6} {s.eta:>6.3f} {s.mu:>6.3f} "
                f"{s.baseline:>16,.0f} {s.reduction:>16,.0f} {s.overhead:>14,.0f} {s.net:>16,.0f}"
            )
        lines.append(f"total base {self.total_baseline:,.0f}; reducción {self.reduction:,.0f}; "
                     f"sobrecoste {self.overhead:,.0f}; neto {self.net_saving:,.0f} "
                     f"({self.saving_percent:.2f}%)")
        return "\n".join(lines)


def net_saving(config: CostConfig) -> CostReport:
    """
    Ahorro neto sumado sobre los pasos activados y los D bloques

    Returns:
        CostReport: Costes por paso y totales
    """
    ok, message = config.validate()
    if not ok:
        raise ConfigError(message)
    schedule = config.schedule
    report = CostReport(depth=config.depth, hidden=config.hidden, experts=config.experts,
                        convention=config.convention())
    for i, length in enumerate(schedule.token_counts):
        activated = i in config.activated
        eta = config.token_rates[i] if activated else 0.0
        mu = config.weight_rates[i] if activated else 0.0
        step = StepCost(
            step=i + 1, length=length, context=config.context(i), activated=activated, eta=eta, mu=mu,
            baseline=block_baseline(length, config.hidden, config.context(i)),
            reduction=block_reduction(length, config.hidden, eta, mu) if activated else 0.0,
            overhead=block_overhead(length, config.hidden, eta, config.experts) if activated else 0.0,
        )
        if activated and step.net < 0:
            logger.warning(f"Ahorro neto negativo en el paso {step.step}: {step.net:,.0f} FLOPs por bloque")
        report.steps.append(step)
        if config.percentage_scope == 'all' or activated:
            report.total_baseline += config.depth * step.baseline
        report.reduction += config.depth * step.reduction
        report.overhead += config.depth * step.overhead
    return report


def cost_config_from(backbone: BackboneConfig, activation: ActivationConfig,
                     convention: str = 'default') -> CostConfig:
    """
    CostConfig a partir de la arquitectura y la política de activación

    η_i = 1 − proporción de tokens y μ = 1 − proporción de pesos en cada paso activado.

    Raises:
        ArgumentError: Si la convención no existe
    """
    if convention not in CONVENTIONS:
        raise ArgumentError(f"Convención desconocida: {convention}; opciones {sorted(CONVENTIONS)}")
    context, scope = CONVENTIONS[convention]
    schedule = backbone.schedule
    token_rates = [0.0] * schedule.steps
    weight_rates = [0.0] * schedule.steps
    weight_ratio = activation.weight_ratio if activation.route_weights else 1.0
    for i in activation.scale_indices:
        token_rates[i] = 1.0 - activation.token_ratio(i)
        weight_rates[i] = 1.0 - weight_ratio
    return CostConfig(
        hidden=backbone.hidden, depth=backbone.depth, schedule=schedule, experts=activation.experts,
        token_rates=tuple(token_rates), weight_rates=tuple(weight_rates),
        activated=activation.scale_indices, attention_context=context, percentage_scope=scope,
    )


def reference_cost_configs(activation: Optional[ActivationConfig] = None,
                           convention: str = 'reference') -> Dict[str, CostConfig]:
    """Configuraciones d16/d20/d24/d30 sobre el calendario de 680 tokens"""
    activation = activation or ActivationConfig()
    configs = {}
    for name, (depth, hidden) in REFERENCE_CONFIGS.items():
        backbone = BackboneConfig(depth=depth, hidden=hidden, heads=16, ffn_hidden=4 * hidden,
                                  sides=REFERENCE_SIDES)
        configs[name] = cost_config_from(backbone, activation, convention)
    return configs


def reference_comparison(activation: Optional[ActivationConfig] = None) -> List[Dict]:
    """
    Ahorro calculado frente al publicado para cada configuración de referencia

    Returns:
        list: Filas con ambas convenciones y la desviación en puntos porcentuales
    """
    default = reference_cost_configs(activation, 'default')
    reference = reference_cost_configs(activation, 'reference')
    rows = []
    for name in REFERENCE_CONFIGS:
        computed = net_saving(reference[name]).saving_percent
        rows.append({
            'config': name,
            'published': PUBLISHED_SAVINGS[name],
            'reference_convention': computed,
            'default_convention': net_saving(default[name]).saving_percent,
            'deviation': computed - PUBLISHED_SAVINGS[name],
            'within_tolerance': abs(computed - PUBLISHED_SAVINGS[name]) <= PUBLISHED_TOLERANCE,
        })
    return rows


def reference_comparison_text(rows: Sequence[Dict]) -> str:
    lines = [
        f"# reference: {describe_convention(*CONVENTIONS['reference'])}",
        f"# default: {describe_convention(*CONVENTIONS['default'])}",
        f"{'config':<6} {'publicado':>10} {'referencia':>10} {'default':>8} {'desv.':>7}",
    ]
    for row in rows:
        lines.append(f"{row['config']:<6} {row['published']:>9.1f}% {row['reference_convention']:>9.2f}% "
                     f"{row['default_convention']:>7.2f}% {row['deviation']:>+7.2f}")
    return "\n".join(lines)
