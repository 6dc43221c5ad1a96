"""
Configuración de pytest
"""

import pytest
from pathlib import Path
import tempfile

import numpy as np


@pytest.fixture
def temp_dir():
    """Crea un directorio temporal para tests"""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def rng():
    """Generador con semilla fija"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Arquitectura mínima: D=2, H=16, 2 cabezas, d_h=32, V=16, 4 clases"""
    from src.config import BackboneConfig

    return BackboneConfig(depth=2, hidden=16, heads=2, ffn_hidden=32, vocab=16, classes=4, sides=(1, 2, 3, 4))


@pytest.fixture
def tiny_teacher(tiny_config):
    """Maestro denso inicializado (sin entrenar)"""
    from src.backbone import VarModel

    return VarModel.initialize(tiny_config, seed=7)


@pytest.fixture
def tiny_activation():
    """Activación en los dos últimos pasos del calendario de 4"""
    from src.config import ActivationConfig

    return ActivationConfig(token_ratios=(0.75, 0.75), weight_ratio=0.75, experts=4, scales=(3, 4))


@pytest.fixture
def full_activation():
    """Activación completa (100%, 100%; 100%) en los dos últimos pasos"""
    from src.config import ActivationConfig

    return ActivationConfig(token_ratios=(1.0, 1.0), weight_ratio=1.0, experts=4, scales=(3, 4))


@pytest.fixture
def toy_dataset(temp_dir, tiny_config):
    """Conjunto sintético pequeño: (train, val)"""
    from src.config import DatasetConfig
    from src.dataset import gen_dataset, load_dataset

    config = DatasetConfig(classes=tiny_config.classes, samples=40, noise=0.1, seed=3)
    gen_dataset(config, tiny_config.schedule, tiny_config.vocab, temp_dir / "data")
    return load_dataset(temp_dir / "data")


@pytest.fixture
def tiny_spec(temp_dir, tiny_config, tiny_activation):
    """Experimento mínimo que se ejecuta en segundos"""
    from src.config import DatasetConfig, ExperimentSpec, StageConfig, TeacherConfig

    return ExperimentSpec(
        backbone=tiny_config,
        activation=tiny_activation,
        teacher=TeacherConfig(epochs=1, batch_size=8, lr=3e-3),
        stage1=StageConfig(stage=1, epochs=1, batch_size=8, lr=3e-3),
        stage2=StageConfig(stage=2, epochs=1, batch_size=8, lr=1e-3),
        dataset=DatasetConfig(classes=tiny_config.classes, samples=24, noise=0.1),
        out_dir=str(temp_dir / "run"),
        seed=5,
    )
