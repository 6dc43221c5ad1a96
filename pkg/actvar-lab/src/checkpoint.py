"""
Checkpoints binarios AVT1
Serialización bit-exacta de parámetros con nombre
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import ArgumentError
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AVT1"
_U32 = struct.Struct("<I")


def save_checkpoint(path: Union[str, Path], params: Mapping[str, Union[Tensor, np.ndarray]]) -> Path:
    """
    Guardar parámetros en formato AVT1

    Cada parámetro: longitud del nombre (u32 LE), nombre UTF-8, rango (u32),
    dimensiones (u32 cada una) y datos float64 little-endian.

    Args:
        path: Ruta destino
        params: Parámetros por nombre, en el orden en que se escriben

    Returns:
        Path: Ruta escrita
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, value in params.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            array = np.asarray(data, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(_U32.pack(len(encoded)))
            f.write(encoded)
            f.write(_U32.pack(array.ndim))
            for dim in array.shape:
                f.write(_U32.pack(dim))
            f.write(array.tobytes())
    logger.info(f"Checkpoint guardado: {path} ({len(params)} parámetros)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Cargar un checkpoint AVT1

    Returns:
        dict: Arrays float64 por nombre, en el orden del archivo

    Raises:
        ArgumentError: Si el archivo no es AVT1 o está truncado
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ArgumentError(f"Archivo sin cabecera AVT1: {path}")

    params: Dict[str, np.ndarray] = {}
    offset = 4

    def read_u32() -> int:
        nonlocal offset
        if offset + 4 > len(raw):
            raise ArgumentError(f"Checkpoint truncado en el byte {offset}: {path}")
        (value,) = _U32.unpack_from(raw, offset)
        offset += 4
        return value

    while offset < len(raw):
        name_len = read_u32()
        if offset + name_len > len(raw):
            raise ArgumentError(f"Nombre truncado en el byte {offset}: {path}")
        try:
            name = raw[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArgumentError(f"Nombre no UTF-8 en el byte {offset}: {path}") from e
        offset += name_len
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ArgumentError(f"Datos truncados para '{name}' en {path}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end

    logger.info(f"Checkpoint cargado: {path} ({len(params)} parámetros)")
    return params
