"""
Jerarquía de excepciones
Errores propios del proyecto, compatibles con las excepciones estándar
"""


class ActVarError(Exception):
    """Raíz de todos los errores del proyecto"""


class DimensionError(ActVarError, ValueError):
    """Formas de tensores incompatibles"""


class ArgumentError(ActVarError, ValueError):
    """Argumento fuera de rango o inválido"""


class ConfigError(ArgumentError):
    """Configuración inconsistente (validación cruzada fallida)"""


class StateError(ActVarError, RuntimeError):
    """Estado previo requerido ausente (caché, pseudo-etiquetas, indicadores)"""


class GradientStateError(StateError):
    """Uso incorrecto de la cinta de gradientes"""


class NonFiniteError(ActVarError, FloatingPointError):
    """Valor NaN o infinito detectado"""
