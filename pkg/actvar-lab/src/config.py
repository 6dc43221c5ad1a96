"""
Módulo de configuración
Dataclasses de configuración del modelo, la activación, el entrenamiento y los experimentos
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union
import logging

from .errors import ConfigError

# Cargar variables de entorno desde .env
try:
    from dotenv import load_dotenv
    load_dotenv()
    logger = logging.getLogger(__name__)
    logger.debug(".env cargado exitosamente")
except ImportError:
    logger = logging.getLogger(__name__)
    logger.warning("python-dotenv no instalado. Variables de entorno .env no disponibles.")

# Calendario de escalas de referencia (680 tokens) y calendario de pruebas
REFERENCE_SIDES = (1, 2, 3, 4, 5, 6, 8, 10, 13, 16)
TOY_SIDES = (1, 2, 3, 4)

# Hiperparámetros a escala original, conservados como documentación
REFERENCE_STAGE_DEFAULTS = {
    1: {'batch_size': 512, 'lr': 2e-4, 'epochs': 2},
    2: {'batch_size': 512, 'lr': 2e-4, 'epochs': 10},
}

BIAS_MODES = ('shared', 'per_expert')


def round_half_up(value: float) -> int:
    """Redondeo hacia arriba en el punto medio (0.5 -> 1)"""
    return int(math.floor(value + 0.5))


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))


class _JsonConfig:
    """Serialización JSON común de las dataclasses de configuración"""

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        # Filtrar solo campos válidos
        valid = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**valid)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False, sort_keys=True)
        logger.info(f"Configuración guardada: {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]):
        path = Path(path)
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        logger.info(f"Configuración cargada: {path}")
        return cls.from_dict(data)

    def validate(self) -> Tuple[bool, Optional[str]]:
        return True, None

    def check(self) -> None:
        """Validar y lanzar ConfigError con el motivo si no es válida"""
        ok, message = self.validate()
        if not ok:
            raise ConfigError(message)


@dataclass
class BackboneConfig(_JsonConfig):
    """Arquitectura del transformer de predicción por escalas"""
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    vocab: int = 64
    classes: int = 8
    sides: Tuple[int, ...] = TOY_SIDES

    def __post_init__(self):
        self.sides = tuple(int(s) for s in self.sides)

    @property
    def schedule(self):
        from .backbone import build_schedule
        return build_schedule(self.sides)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def validate(self) -> Tuple[bool, Optional[str]]:
        """
        Validar arquitectura

        Returns:
            tuple: (es_válida, mensaje_error)
        """
        for name in ('depth', 'hidden', 'heads', 'ffn_hidden', 'vocab', 'classes'):
            if getattr(self, name) < 1:
                return False, f"'{name}' debe ser positivo"
        if self.hidden % self.heads != 0:
            return False, f"hidden={self.hidden} no es divisible entre heads={self.heads}"
        if not self.sides or self.sides[0] < 1:
            return False, "El calendario de escalas debe empezar en un lado >= 1"
        if any(b <= a for a, b in zip(self.sides, self.sides[1:])):
            return False, f"Los lados deben ser estrictamente crecientes: {self.sides}"
        return True, None


@dataclass
class ActivationConfig(_JsonConfig):
    """
    Política de activación dual

    `scales` son números de paso 1-based (p. ej. 9 y 10 en el calendario de 10 pasos).
    `token_ratios` tiene una proporción por escala activada (o una sola, compartida).
    """
    token_ratios: Tuple[float, ...] = (0.75, 0.75)
    weight_ratio: float = 0.75
    experts: int = 16
    scales: Tuple[int, ...] = (9, 10)
    route_weights: bool = True
    gate_tokens: bool = True
    bias_mode: str = 'shared'

    def __post_init__(self):
        self.token_ratios = tuple(float(r) for r in self.token_ratios)
        self.scales = tuple(sorted(int(s) for s in self.scales))

    @classmethod
    def from_ratios(cls, text: str, **kwargs) -> 'ActivationConfig':
        """
        Construir desde 'A,B,G' (porcentajes o fracciones)

        Args:
            text: Proporciones de tokens para las dos escalas y proporción de pesos
        """
        values = [float(v) for v in text.split(',') if v.strip()]
        if len(values) != 3:
            raise ConfigError(f"Se esperaban tres proporciones 'A,B,G', recibido '{text}'")
        values = [v / 100.0 if v > 1.0 else v for v in values]
        return cls(token_ratios=tuple(values[:2]), weight_ratio=values[2], **kwargs)

    @property
    def scale_indices(self) -> Tuple[int, ...]:
        """Índices 0-based de las escalas activadas"""
        return tuple(s - 1 for s in self.scales)

    def is_activated(self, scale_index: int) -> bool:
        return (scale_index + 1) in self.scales

    def token_ratio(self, scale_index: int) -> float:
        if not self.gate_tokens:
            return 1.0
        position = self.scale_indices.index(scale_index)
        if len(self.token_ratios) == 1:
            return self.token_ratios[0]
        return self.token_ratios[position]

    def k_tokens(self, scale_index: int, length: int) -> int:
        """K_t = round(ratio·L), acotado a [1, L]"""
        return min(length, max(1, round_half_up(self.token_ratio(scale_index) * length)))

    def k_experts(self) -> int:
        """K_w = round(γ·N), acotado a [1, N]"""
        ratio = self.weight_ratio if self.route_weights else 1.0
        return min(self.experts, max(1, round_half_up(ratio * self.experts)))

    def validate(self, steps: Optional[int] = None) -> Tuple[bool, Optional[str]]:
        """
        Validar política

        Args:
            steps: Número de pasos del calendario, si se conoce

        Returns:
            tuple: (es_válida, mensaje_error)
        """
        if self.experts < 1:
            return False, f"El número de expertos debe ser >= 1, recibido {self.experts}"
        ratios = self.token_ratios + (self.weight_ratio,)
        if any(not 0.0 < r <= 1.0 for r in ratios):
            return False, f"Las proporciones de activación deben estar en (0, 1]: {ratios}"
        if len(set(self.scales)) != len(self.scales):
            return False, f"Escalas activadas repetidas: {self.scales}"
        if self.scales and len(self.token_ratios) not in (1, len(self.scales)):
            return False, (f"Se esperaban 1 o {len(self.scales)} proporciones de tokens, "
                           f"recibidas {len(self.token_ratios)}")
        if any(s < 1 for s in self.scales):
            return False, f"Los pasos activados son 1-based: {self.scales}"
        if steps is not None and any(s > steps for s in self.scales):
            return False, f"Escalas activadas {self.scales} fuera del calendario de {steps} pasos"
        if self.bias_mode not in BIAS_MODES:
            return False, f"bias_mode desconocido: {self.bias_mode}"
        return True, None


@dataclass
class StageConfig(_JsonConfig):
    """
    Configuración de una fase de entrenamiento

    stage 0 entrena el maestro denso; stage 1 solo routers y selectores;
    stage 2 todo salvo routers y selectores.
    """
    stage: int = 1
    alpha: float = 0.05
    beta: float = 0.01
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 2
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    warmup_steps: int = 0
    seed: int = 42

    def is_trainable(self, name: str) -> bool:
        """Conjunto de parámetros libres según la fase"""
        gate = '.router.' in name or '.selector.' in name
        if self.stage == 0:
            return True
        return gate if self.stage == 1 else not gate

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.stage not in (0, 1, 2):
            return False, f"Fase desconocida: {self.stage}"
        if self.alpha <= 0 or self.beta <= 0:
            return False, "alpha y beta deben ser positivos"
        if self.lr < 0:
            return False, f"Tasa de aprendizaje negativa: {self.lr}"
        if self.batch_size < 1 or self.epochs < 0:
            return False, "batch_size debe ser >= 1 y epochs >= 0"
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            return False, "beta1 y beta2 deben estar en [0, 1)"
        return True, None


@dataclass
class TeacherConfig(StageConfig):
    """Entrenamiento del maestro denso (fase 0)"""
    stage: int = 0
    epochs: int = 10


@dataclass
class DatasetConfig(_JsonConfig):
    """Parámetros del conjunto sintético"""
    classes: int = 8
    samples: int = 512
    noise: float = 0.1
    seed: int = 42

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.classes < 1 or self.samples < 2:
            return False, "Se requieren >= 1 clase y >= 2 muestras"
        if not 0.0 <= self.noise <= 1.0:
            return False, f"El ruido debe estar en [0, 1], recibido {self.noise}"
        return True, None


@dataclass
class Settings:
    """Ajustes de entorno del proceso"""
    out_dir: str = field(default_factory=lambda: os.getenv("ACTVAR_OUT_DIR", "runs"))
    threads: int = field(default_factory=lambda: _env_int("ACTVAR_THREADS", min(os.cpu_count() or 2, 4)))
    seed: int = field(default_factory=lambda: _env_int("ACTVAR_SEED", 42))
    checked: bool = field(default_factory=lambda: os.getenv("ACTVAR_CHECKED", "false").lower() == "true")
    log_level: str = field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO").upper())


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """
    Obtener ajustes del proceso (singleton)

    Returns:
        Settings: Ajustes leídos del entorno
    """
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


@dataclass
class ExperimentSpec:
    """Experimento completo: arquitectura, activación, fases, datos y salida"""
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(sides=REFERENCE_SIDES))
    activation: ActivationConfig = field(default_factory=ActivationConfig)
    teacher: StageConfig = field(default_factory=TeacherConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(stage=1, epochs=2))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(stage=2, epochs=10))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    out_dir: str = field(default_factory=lambda: get_settings().out_dir)
    seed: int = 42

    _SECTIONS = {
        'activation': ActivationConfig,
        'teacher': TeacherConfig,
        'stage1': StageConfig,
        'stage2': StageConfig,
        'dataset': DatasetConfig,
    }

    def __post_init__(self):
        self.with_seed(self.seed)

    def to_dict(self) -> Dict[str, Any]:
        data = self.backbone.to_dict()
        for name in self._SECTIONS:
            data[name] = getattr(self, name).to_dict()
        data['out_dir'] = self.out_dir
        data['seed'] = self.seed
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentSpec':
        """Claves de arquitectura en el nivel superior, resto por sección"""
        spec = cls(backbone=BackboneConfig.from_dict({**BackboneConfig(sides=REFERENCE_SIDES).to_dict(), **data}))
        for name, section in cls._SECTIONS.items():
            if name in data:
                base = getattr(spec, name).to_dict()
                setattr(spec, name, section.from_dict({**base, **data[name]}))
        if 'out_dir' in data:
            spec.out_dir = data['out_dir']
        if 'seed' in data:
            spec.with_seed(int(data['seed']))
        return spec

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False, sort_keys=True)
        logger.info(f"Experimento guardado: {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ExperimentSpec':
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        logger.info(f"Experimento cargado: {path}")
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> 'ExperimentSpec':
        """Propagar una semilla maestra a todas las secciones"""
        self.seed = seed
        self.dataset.seed = seed
        self.teacher.seed = seed
        self.stage1.seed = seed + 1
        self.stage2.seed = seed + 2
        return self

    def validate(self) -> Tuple[bool, Optional[str]]:
        """
        Validación cruzada de todas las secciones

        Returns:
            tuple: (es_válida, mensaje_error)
        """
        for section in (self.backbone, self.teacher, self.stage1, self.stage2, self.dataset):
            ok, message = section.validate()
            if not ok:
                return ok, message
        ok, message = self.activation.validate(steps=len(self.backbone.sides))
        if not ok:
            return ok, message
        if self.backbone.ffn_hidden % self.activation.experts != 0:
            return False, (f"ffn_hidden={self.backbone.ffn_hidden} no es divisible entre "
                           f"N={self.activation.experts} expertos")
        if self.dataset.classes != self.backbone.classes:
            return False, (f"El conjunto tiene {self.dataset.classes} clases y el modelo "
                           f"{self.backbone.classes}")
        if (self.teacher.stage, self.stage1.stage, self.stage2.stage) != (0, 1, 2):
            return False, "Las fases deben ser teacher=0, stage1=1, stage2=2"
        return True, None

    def check(self) -> None:
        ok, message = self.validate()
        if not ok:
            raise ConfigError(message)


def get_config(path: Optional[Union[str, Path]] = None) -> ExperimentSpec:
    """
    Obtener especificación de experimento

    Args:
        path: JSON de configuración; si falta se usan los valores por defecto

    Returns:
        ExperimentSpec: Especificación validada
    """
    spec = ExperimentSpec.load(path) if path else ExperimentSpec()
    spec.check()
    return spec
