"""
Exportación de mapas de activación
Mapas PGM por bloque, mapa de unión, expertos principales por posición y resumen CSV
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .activation import ActVarModel, BlockRecord
from .backbone import ForwardContext
from .errors import ArgumentError, DimensionError, StateError
from .tensor import no_grad

logger = logging.getLogger(__name__)

PGM_MAXVAL = 255
TOP_EXPERTS = 3


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """
    Escribir una imagen en escala de grises como PGM binario (P5, maxval 255)

    Raises:
        DimensionError: Si la imagen no es 2-D
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"Se esperaba una imagen 2-D, forma {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = image.shape
    with open(path, 'wb') as f:
        f.write(f"P5\n{width} {height}\n{PGM_MAXVAL}\n".encode('ascii'))
        f.write(np.clip(image, 0, PGM_MAXVAL).astype(np.uint8).tobytes())
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Leer un PGM binario escrito por `write_pgm`"""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ArgumentError(f"{path} no es un PGM binario")
    width, height = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != PGM_MAXVAL or len(parts[3]) != width * height:
        raise ArgumentError(f"PGM truncado o con maxval {maxval}: {path}")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


@dataclass
class ActivationMaps:
    """Indicadores de tokens y expertos principales de una escala, por bloque"""
    scale: int
    side: int
    experts: int
    blocks: Dict[int, np.ndarray] = field(default_factory=dict)
    top_experts: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def union(self) -> np.ndarray:
        """Posiciones activadas por al menos un bloque"""
        if not self.blocks:
            return np.zeros((self.side, self.side), dtype=bool)
        return np.logical_or.reduce(list(self.blocks.values()))

    def popcounts(self) -> Dict[int, int]:
        return {m: int(mask.sum()) for m, mask in self.blocks.items()}


def maps_from_records(records: Sequence[BlockRecord], side: int, scale_index: int,
                      experts: int, sample: int = 0) -> ActivationMaps:
    """
    Reunir los indicadores de una muestra en una escala

    Raises:
        StateError: Si no hay indicadores registrados para la escala
    """
    maps = ActivationMaps(scale=scale_index, side=side, experts=experts)
    for record in records:
        if record.scale != scale_index:
            continue
        if record.length != side * side:
            raise DimensionError(f"Registro con {record.length} posiciones para un lado {side}")
        maps.blocks[record.block] = record.selected_mask()[sample].reshape(side, side).astype(bool)
        maps.top_experts[record.block] = record.top_experts(TOP_EXPERTS)[sample].reshape(side, side, -1)
    if not maps.blocks:
        raise StateError(f"No hay indicadores registrados para la escala {scale_index + 1}")
    return maps


def collect_activation_maps(model: ActVarModel, tokens: np.ndarray, label: int, scale_index: int) -> ActivationMaps:
    """
    Pasada con forzado del maestro sobre una muestra y mapas de la escala pedida

    Args:
        model: Estudiante con política de activación
        tokens: Secuencia completa [total_length]
        label: Clase de la muestra
        scale_index: Escala 0-based

    Raises:
        StateError: Si la escala no está activada (no hay indicadores)
    """
    context = ForwardContext()
    with no_grad():
        model.forward(np.asarray(tokens)[None, :], np.array([label]), context=context)
    side = model.schedule.sides[scale_index]
    return maps_from_records(context.records, side, scale_index, model.activation.experts)


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def jaccard_matrix(maps: ActivationMaps) -> np.ndarray:
    """Índice de Jaccard entre los mapas de cada par de bloques"""
    blocks = sorted(maps.blocks)
    matrix = np.ones((len(blocks), len(blocks)))
    for a, m in enumerate(blocks):
        for b, n in enumerate(blocks):
            if a != b:
                matrix[a, b] = jaccard(maps.blocks[m], maps.blocks[n])
    return matrix


def _expert_image(top: np.ndarray, experts: int) -> np.ndarray:
    first = top[..., 0]
    scale = PGM_MAXVAL // max(experts - 1, 1)
    # posiciones no procesadas en negro
    return np.where(first >= 0, first * scale, 0)


def export_activation_maps(maps: ActivationMaps, out_dir: Union[str, Path],
                           blocks: Optional[Sequence[int]] = None) -> List[Path]:
    """
    Escribir los mapas de una escala

    Un PGM por bloque (blanco = token procesado), el mapa de unión, un PGM con el
    experto principal de cada posición y dos CSV: bits por bloque y expertos top-3.

    Args:
        maps: Mapas de la escala
        out_dir: Directorio destino
        blocks: Subconjunto de bloques (por defecto todos)

    Returns:
        list: Rutas escritas

    Raises:
        StateError: Si falta algún bloque pedido
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen = sorted(maps.blocks) if blocks is None else list(blocks)
    missing = [m for m in chosen if m not in maps.blocks]
    if missing:
        raise StateError(f"Faltan indicadores de los bloques {missing} en la escala {maps.scale + 1}")

    step = maps.scale + 1
    paths = []
    for m in chosen:
        paths.append(write_pgm(out_dir / f"block_{m:02d}_step_{step}.pgm",
                               maps.blocks[m].astype(np.uint8) * PGM_MAXVAL))
        paths.append(write_pgm(out_dir / f"experts_{m:02d}_step_{step}.pgm",
                               _expert_image(maps.top_experts[m], maps.experts)))
    union = np.logical_or.reduce([maps.blocks[m] for m in chosen]) if chosen else maps.union
    paths.append(write_pgm(out_dir / f"union_step_{step}.pgm", union.astype(np.uint8) * PGM_MAXVAL))

    bits_path = out_dir / f"activation_step_{step}.csv"
    with open(bits_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['block_id', 'scale', 'L', 'bits'])
        for m in chosen:
            bits = ''.join('1' if v else '0' for v in maps.blocks[m].reshape(-1))
            writer.writerow([m, step, maps.side * maps.side, bits])
    paths.append(bits_path)

    experts_path = out_dir / f"experts_step_{step}.csv"
    with open(experts_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['block_id', 'scale', 'row', 'col'] + [f'expert_{k + 1}' for k in range(TOP_EXPERTS)])
        for m in chosen:
            top = maps.top_experts[m]
            for r in range(maps.side):
                for c in range(maps.side):
                    writer.writerow([m, step, r, c, *top[r, c].tolist()])
    paths.append(experts_path)

    logger.info(f"Mapas de activación del paso {step} exportados en {out_dir} ({len(chosen)} bloques)")
    return paths
