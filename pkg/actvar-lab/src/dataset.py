"""
Conjunto sintético de refinamiento por escalas
Mapas de tokens condicionados por clase donde cada escala refina la anterior
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .backbone import ScaleSchedule
from .config import DatasetConfig
from .errors import StateError

logger = logging.getLogger(__name__)

# Variantes del token inicial por clase (la primera escala no es determinista)
START_VARIANTS = 4
VAL_FRACTION = 0.1


@dataclass
class TokenDataset:
    """Secuencias completas [S, total_length] con su clase [S]"""
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: np.ndarray) -> "TokenDataset":
        return TokenDataset(self.tokens[index], self.labels[index])

    def save(self, out_dir: Path, split: str) -> None:
        np.save(out_dir / f"{split}_tokens.npy", self.tokens)
        np.save(out_dir / f"{split}_labels.npy", self.labels)

    @classmethod
    def load(cls, out_dir: Path, split: str) -> "TokenDataset":
        return cls(np.load(out_dir / f"{split}_tokens.npy"), np.load(out_dir / f"{split}_labels.npy"))


def _nearest(grid: np.ndarray, target: int) -> np.ndarray:
    source = grid.shape[0]
    idx = np.floor((np.arange(target) + 0.5) * source / target).astype(np.int64)
    return grid[np.ix_(idx, idx)]


def refine(grid: np.ndarray, target_side: int, class_label: int, vocab: int) -> np.ndarray:
    """
    Refinamiento determinista de una escala a la siguiente

    Cada celda hereda su token de la celda padre (vecino más próximo) desplazado
    por un patrón de tablero propio de la clase.
    """
    up = _nearest(grid, target_side)
    rows, cols = np.indices((target_side, target_side))
    checker = (rows + cols) % 2
    return (up + class_label + 1 + checker * (2 * class_label + 1)) % vocab


def start_grid(side: int, class_label: int, variant: int, vocab: int) -> np.ndarray:
    rows, cols = np.indices((side, side))
    return (class_label * 7 + variant * 3 + rows + 2 * cols) % vocab


def sample_sequence(schedule: ScaleSchedule, class_label: int, vocab: int, noise: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Secuencia aplanada de una muestra: escala a escala con ruido acotado"""
    grid = start_grid(schedule.sides[0], class_label, int(rng.integers(START_VARIANTS)), vocab)
    grids = [grid]
    for side in schedule.sides[1:]:
        grid = refine(grid, side, class_label, vocab)
        if noise > 0:
            flips = rng.random(grid.shape) < noise
            grid = np.where(flips, (grid + rng.integers(1, 3, size=grid.shape)) % vocab, grid)
        grids.append(grid)
    return np.concatenate([g.reshape(-1) for g in grids])


def gen_dataset(config: DatasetConfig, schedule: ScaleSchedule, vocab: int,
                out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Generar y escribir el conjunto sintético (reparto 90/10)

    Args:
        config: Clases, número total de muestras, ruido y semilla
        schedule: Calendario de escalas
        vocab: Tamaño del vocabulario
        out_dir: Directorio destino

    Returns:
        dict: Rutas escritas por nombre
    """
    config.check()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)

    labels = np.arange(config.samples, dtype=np.int64) % config.classes
    tokens = np.stack([sample_sequence(schedule, int(c), vocab, config.noise, rng) for c in labels])
    order = rng.permutation(config.samples)
    n_val = max(1, int(round(VAL_FRACTION * config.samples)))
    full = TokenDataset(tokens.astype(np.int64), labels)
    train, val = full.subset(np.sort(order[n_val:])), full.subset(np.sort(order[:n_val]))

    train.save(out_dir, "train")
    val.save(out_dir, "val")
    meta = {
        **config.to_dict(),
        'sides': list(schedule.sides),
        'vocab': vocab,
        'total_length': schedule.total_length,
        'train': len(train),
        'val': len(val),
    }
    meta_path = out_dir / "dataset.json"
    with open(meta_path, 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)

    logger.info(f"Conjunto generado en {out_dir}: {len(train)} entrenamiento, {len(val)} validación, "
                f"{schedule.total_length} tokens por muestra")
    return {
        'train_tokens': out_dir / "train_tokens.npy",
        'train_labels': out_dir / "train_labels.npy",
        'val_tokens': out_dir / "val_tokens.npy",
        'val_labels': out_dir / "val_labels.npy",
        'meta': meta_path,
    }


def load_dataset(out_dir: Union[str, Path]) -> Tuple[TokenDataset, TokenDataset]:
    """
    Cargar los repartos de entrenamiento y validación

    Raises:
        StateError: Si el conjunto no existe
    """
    out_dir = Path(out_dir)
    if not (out_dir / "dataset.json").exists():
        raise StateError(f"No existe un conjunto de datos en {out_dir}; ejecuta gen-data primero")
    return TokenDataset.load(out_dir, "train"), TokenDataset.load(out_dir, "val")


def dataset_meta(out_dir: Union[str, Path]) -> Dict:
    with open(Path(out_dir) / "dataset.json", 'r', encoding='utf-8') as f:
        return json.load(f)
