"""
Orquestación de experimentos
Ejecución completa maestro → fase 1 → fase 2, evaluación, informes y barridos de ablación
"""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .activation import ActVarModel
from .backbone import VarModel
from .config import ExperimentSpec, StageConfig, get_settings
from .dataset import TokenDataset, gen_dataset, load_dataset
from .distill import apply_activation_policy, evaluate_ce, routing_statistics, run_stage, train_teacher
from .errors import ArgumentError
from .export import collect_activation_maps, export_activation_maps, jaccard_matrix
from .flops import cost_config_from, net_saving

logger = logging.getLogger(__name__)

# Umbral de entropía de uso, como fracción de ln N
ENTROPY_FRACTION = 0.8

# Rejilla de proporciones (α, β; γ) en porcentaje
RATIO_GRID = (
    (50, 25, 50),
    (50, 75, 25),
    (50, 50, 75),
    (75, 50, 75),
    (75, 75, 75),
)

EXPERT_COUNTS = (4, 8, 16, 32)
SCALE_SETS = ((7, 8), (9, 10))

SWEEP_COLUMNS = ['label', 'teacher_ce', 'student_ce', 'relative_gap', 'saving_percent', 'net_saving']


@dataclass
class ExperimentResult:
    """Resumen de una ejecución; se escribe como results.json"""
    teacher_ce: float
    student_ce: float
    flops: Dict
    coverage: Dict[str, float]
    union_coverage: float
    usage_entropy: Dict[str, float]
    entropy_threshold: float
    entropy_pass: bool
    jaccard: List[List[float]] = field(default_factory=list)
    activation: Dict = field(default_factory=dict)
    seed: int = 42

    @property
    def relative_gap(self) -> float:
        return (self.student_ce - self.teacher_ce) / self.teacher_ce if self.teacher_ce else 0.0

    def to_dict(self) -> Dict:
        return {
            'teacher_ce': self.teacher_ce,
            'student_ce': self.student_ce,
            'relative_gap': self.relative_gap,
            'flops': self.flops,
            'coverage': self.coverage,
            'union_coverage': self.union_coverage,
            'usage_entropy': self.usage_entropy,
            'entropy_threshold': self.entropy_threshold,
            'entropy_pass': self.entropy_pass,
            'jaccard': self.jaccard,
            'activation': self.activation,
            'seed': self.seed,
        }

    def row(self, label: str) -> Dict:
        return {
            'label': label,
            'teacher_ce': self.teacher_ce,
            'student_ce': self.student_ce,
            'relative_gap': self.relative_gap,
            'saving_percent': self.flops['saving_percent'],
            'net_saving': self.flops['net_saving'],
        }


def _write_json(path: Path, data: Dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
    return path


def ensure_dataset(spec: ExperimentSpec, data_dir: Union[str, Path]) -> Path:
    """Generar el conjunto si el directorio no contiene uno"""
    data_dir = Path(data_dir)
    if not (data_dir / "dataset.json").exists():
        gen_dataset(spec.dataset, spec.backbone.schedule, spec.backbone.vocab, data_dir)
    return data_dir


def prepare_teacher(spec: ExperimentSpec, data_dir: Union[str, Path], out_dir: Union[str, Path]) -> Path:
    """
    Entrenar el maestro denso y guardar teacher.avt con sus informes

    Returns:
        Path: Ruta del checkpoint
    """
    out_dir = Path(out_dir)
    train, _ = load_dataset(data_dir)
    teacher = VarModel.initialize(spec.backbone, seed=spec.teacher.seed)
    report = train_teacher(teacher, train, spec.teacher)
    report.to_csv(out_dir / "teacher.csv")
    report.to_json(out_dir / "teacher.json")
    path = teacher.save(out_dir / "teacher.avt")
    logger.info(f"Maestro guardado: {path}")
    return path


def export_run_maps(student: ActVarModel, tokens: np.ndarray, label: int,
                    out_dir: Union[str, Path]) -> List[List[float]]:
    """
    Exportar los mapas de todas las escalas activadas para una muestra

    Returns:
        list: Matriz de Jaccard entre bloques en la última escala activada
    """
    matrix: List[List[float]] = []
    for scale_index in student.activation.scale_indices:
        maps = collect_activation_maps(student, tokens, label, scale_index)
        export_activation_maps(maps, out_dir)
        matrix = jaccard_matrix(maps).tolist()
    off_diagonal = [v for a, row in enumerate(matrix) for b, v in enumerate(row) if a != b]
    if off_diagonal and max(off_diagonal) >= 1.0:
        logger.warning("Hay bloques con mapas de activación idénticos (Jaccard = 1)")
    return matrix


def _run_stage(stage: StageConfig, teacher: VarModel, student: ActVarModel, train: TokenDataset,
               stem: Path) -> None:
    try:
        report = run_stage(stage, teacher, student, train)
    except Exception as e:
        logger.error(f"Fase {stage.stage} abortada: {e}")
        raise
    report.to_csv(stem.with_suffix(".csv"))
    report.to_json(stem.with_suffix(".json"))


def run_experiment(spec: ExperimentSpec, teacher_path: Optional[Union[str, Path]] = None,
                   data_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """
    Ejecutar un experimento completo y escribir el paquete de resultados

    Args:
        spec: Especificación validada del experimento
        teacher_path: Checkpoint de un maestro ya entrenado (se reutiliza)
        data_dir: Directorio del conjunto (por defecto <out>/data)

    Returns:
        ExperimentResult: Resumen escrito en <out>/results.json

    Raises:
        ConfigError: Si la especificación no es coherente
        NonFiniteError: Si alguna fase produce pérdidas no finitas
    """
    spec.check()
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "experiment.json")
    data_dir = ensure_dataset(spec, data_dir or out / "data")
    train, val = load_dataset(data_dir)

    if teacher_path is None:
        teacher_path = prepare_teacher(spec, data_dir, out)
    teacher = VarModel.load(teacher_path, spec.backbone)

    student = apply_activation_policy(teacher, spec.activation, seed=spec.stage1.seed)
    _run_stage(spec.stage1, teacher, student, train, out / "stage1")
    after_stage1 = routing_statistics(student, val, spec.stage1.batch_size)
    _run_stage(spec.stage2, teacher, student, train, out / "stage2")
    student.save(out / "student.avt")

    teacher_ce = evaluate_ce(teacher, val, spec.stage2.batch_size)
    student_ce = evaluate_ce(student, val, spec.stage2.batch_size)
    final = routing_statistics(student, val, spec.stage2.batch_size)

    cost = net_saving(cost_config_from(spec.backbone, spec.activation))
    cost.to_json(out / "flops.json")
    (out / "flops.txt").write_text(cost.to_text() + "\n", encoding='utf-8')

    threshold = ENTROPY_FRACTION * math.log(spec.activation.experts)
    entropy_pass = all(h >= threshold for h in after_stage1.usage_entropy.values())
    if not entropy_pass:
        logger.warning(f"Entropía de uso por debajo de {threshold:.3f}: {after_stage1.usage_entropy}")

    jaccard = export_run_maps(student, val.tokens[0], int(val.labels[0]), out / "maps") \
        if spec.activation.scales else []

    result = ExperimentResult(
        teacher_ce=teacher_ce,
        student_ce=student_ce,
        flops=cost.to_dict(),
        coverage={str(k): v for k, v in final.coverage.items()},
        union_coverage=final.union_coverage,
        usage_entropy={str(k): v for k, v in after_stage1.usage_entropy.items()},
        entropy_threshold=threshold,
        entropy_pass=entropy_pass,
        jaccard=jaccard,
        activation=spec.activation.to_dict(),
        seed=spec.seed,
    )
    _write_json(out / "results.json", result.to_dict())
    logger.info(f"Experimento completado en {out}: CE maestro {teacher_ce:.4f}, estudiante {student_ce:.4f}, "
                f"ahorro {cost.saving_percent:.2f}%")
    return result


# ----------------------------------------------------------------------
# Barridos
# ----------------------------------------------------------------------
def _run_variant(job: Tuple[str, Dict, str, str]) -> Dict:
    label, spec_data, teacher_path, data_dir = job
    spec = ExperimentSpec.from_dict(spec_data)
    return run_experiment(spec, teacher_path=teacher_path, data_dir=data_dir).row(label)


def run_variants(base: ExperimentSpec, variants: Sequence[Tuple[str, ExperimentSpec]], kind: str,
                 workers: Optional[int] = None) -> List[Dict]:
    """
    Ejecutar variantes que comparten conjunto y maestro

    Cada variante escribe solo en su propio subdirectorio; las filas conservan el
    orden de `variants`.

    Args:
        base: Especificación base (define datos, maestro y directorio)
        variants: Pares (etiqueta, especificación)
        kind: Nombre del barrido
        workers: Procesos en paralelo (por defecto ACTVAR_THREADS)

    Returns:
        list: Una fila por variante
    """
    for _, spec in variants:
        spec.check()
    root = Path(base.out_dir) / f"sweep_{kind}"
    shared = root / "shared"
    shared.mkdir(parents=True, exist_ok=True)
    data_dir = ensure_dataset(base, shared / "data")
    teacher_path = shared / "teacher.avt"
    if not teacher_path.exists():
        prepare_teacher(base, data_dir, shared)

    jobs = [(label, spec.to_dict(), str(teacher_path), str(data_dir)) for label, spec in variants]
    workers = min(workers or get_settings().threads, len(jobs)) if jobs else 1
    if workers <= 1:
        rows = [_run_variant(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(_run_variant, jobs))

    for row in rows:
        logger.info(f"Barrido {kind} [{row['label']}]: CE {row['student_ce']:.4f}, "
                    f"ahorro {row['saving_percent']:.2f}%")
    write_sweep_table(rows, root)
    return rows


def write_sweep_table(rows: Sequence[Dict], root: Union[str, Path]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "table.csv"
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    _write_json(root / "table.json", {'rows': list(rows)})
    return path


def _variant(base: ExperimentSpec, out_dir: Path, **activation) -> ExperimentSpec:
    spec = ExperimentSpec.from_dict(base.to_dict())
    spec.activation = replace(spec.activation, **activation)
    spec.out_dir = str(out_dir)
    return spec


def expert_variants(base: ExperimentSpec, counts: Sequence[int] = EXPERT_COUNTS) -> List[Tuple[str, ExperimentSpec]]:
    """
    Variantes por número de expertos; N=1 fuerza γ = 1

    Raises:
        ArgumentError: Si algún N no divide la anchura oculta de la FFN
    """
    ffn_hidden = base.backbone.ffn_hidden
    bad = [n for n in counts if n < 1 or ffn_hidden % n != 0]
    if bad:
        raise ArgumentError(f"ffn_hidden={ffn_hidden} no es divisible entre N={bad}")
    root = Path(base.out_dir) / "sweep_experts"
    variants = []
    for n in counts:
        extra = {'weight_ratio': 1.0} if n == 1 else {}
        variants.append((f"N={n}", _variant(base, root / f"N{n}", experts=n, **extra)))
    return variants


def ratio_variants(base: ExperimentSpec, grid: Sequence[Tuple[float, float, float]] = RATIO_GRID):
    root = Path(base.out_dir) / "sweep_ratios"
    variants = []
    for a, b, g in grid:
        label = f"({a:g},{b:g};{g:g})"
        variants.append((label, _variant(base, root / f"r{a:g}_{b:g}_{g:g}",
                                         token_ratios=(a / 100.0, b / 100.0), weight_ratio=g / 100.0)))
    return variants


def scale_variants(base: ExperimentSpec, scale_sets: Sequence[Sequence[int]] = SCALE_SETS):
    root = Path(base.out_dir) / "sweep_scales"
    return [(f"S={tuple(s)}", _variant(base, root / ("s" + "_".join(str(v) for v in s)), scales=tuple(s)))
            for s in scale_sets]


def component_variants(base: ExperimentSpec):
    root = Path(base.out_dir) / "sweep_components"
    return [
        ("completo", _variant(base, root / "full")),
        ("sin enrutado de pesos", _variant(base, root / "no_weights", route_weights=False)),
        ("sin activación de tokens", _variant(base, root / "no_tokens", gate_tokens=False)),
    ]


def sweep_experts(base: ExperimentSpec, counts: Sequence[int] = EXPERT_COUNTS,
                  workers: Optional[int] = None) -> List[Dict]:
    """
    Comparar número de expertos: CE del estudiante y ahorro de FLOPs por N

    Raises:
        ArgumentError: Si algún N no divide la anchura oculta de la FFN
    """
    return run_variants(base, expert_variants(base, counts), "experts", workers)


def sweep_ratios(base: ExperimentSpec, grid: Sequence[Tuple[float, float, float]] = RATIO_GRID,
                 workers: Optional[int] = None) -> List[Dict]:
    """Rejilla de proporciones de activación (α, β; γ)"""
    return run_variants(base, ratio_variants(base, grid), "ratios", workers)


def sweep_scales(base: ExperimentSpec, scale_sets: Sequence[Sequence[int]] = SCALE_SETS,
                 workers: Optional[int] = None) -> List[Dict]:
    """Ablación de las escalas activadas"""
    return run_variants(base, scale_variants(base, scale_sets), "scales", workers)


def sweep_components(base: ExperimentSpec, workers: Optional[int] = None) -> List[Dict]:
    """Completo frente a sin enrutado de pesos y sin activación de tokens"""
    return run_variants(base, component_variants(base), "components", workers)
