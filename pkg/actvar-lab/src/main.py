"""
Interfaz de línea de comandos de ActVAR Lab
Generación de datos, entrenamiento, evaluación, FLOPs, mapas de activación y barridos
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .activation import ActVarModel
from .backbone import VarModel
from .config import ActivationConfig, ExperimentSpec, get_config, get_settings
from .dataset import gen_dataset, load_dataset
from .distill import evaluate_ce, routing_statistics
from .errors import ActVarError, ArgumentError, StateError
from .experiment import (
    EXPERT_COUNTS, SCALE_SETS, RATIO_GRID, ensure_dataset, prepare_teacher, run_experiment,
    sweep_components, sweep_experts, sweep_ratios, sweep_scales,
)
from .export import collect_activation_maps, export_activation_maps
from .flops import CONVENTIONS, cost_config_from, net_saving, reference_comparison, reference_comparison_text
from .tensor import set_checked_mode

logger = logging.getLogger(__name__)


def parse_int_list(text: str) -> Tuple[int, ...]:
    """'9,10' -> (9, 10); '0-3' -> (0, 1, 2, 3)"""
    values: List[int] = []
    try:
        for part in text.split(','):
            part = part.strip()
            if not part:
                continue
            if '-' in part:
                low, high = (int(v) for v in part.split('-', 1))
                values.extend(range(low, high + 1))
            else:
                values.append(int(part))
    except ValueError:
        raise ArgumentError(f"Lista de enteros no válida: '{text}'")
    return tuple(values)


def parse_scale_sets(text: str) -> Tuple[Tuple[int, ...], ...]:
    """'7,8;9,10' -> ((7, 8), (9, 10))"""
    return tuple(parse_int_list(group) for group in text.split(';') if group.strip())


def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    """
    Especificación a partir de --config y de los flags comunes

    Raises:
        ConfigError: Si la especificación resultante no es coherente
    """
    spec = get_config(args.config)
    if args.seed is not None:
        spec.with_seed(args.seed)
    elif not args.config:
        spec.with_seed(get_settings().seed)
    if args.out is not None:
        spec.out_dir = args.out
    activation = spec.activation
    if args.ratios:
        parsed = ActivationConfig.from_ratios(args.ratios)
        activation = replace(activation, token_ratios=parsed.token_ratios, weight_ratio=parsed.weight_ratio)
    if args.experts is not None:
        activation = replace(activation, experts=args.experts)
    if args.scales:
        activation = replace(activation, scales=parse_int_list(args.scales))
    spec.activation = activation
    spec.check()
    return spec


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True))


# ----------------------------------------------------------------------
# Subcomandos
# ----------------------------------------------------------------------
def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    paths = gen_dataset(spec.dataset, spec.backbone.schedule, spec.backbone.vocab, Path(spec.out_dir) / "data")
    _print_json({k: str(v) for k, v in paths.items()})
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    data_dir = ensure_dataset(spec, Path(spec.out_dir) / "data")
    print(prepare_teacher(spec, data_dir, spec.out_dir))
    return 0


def _teacher_path(args: argparse.Namespace, spec: ExperimentSpec) -> Path:
    path = Path(args.teacher) if args.teacher else Path(spec.out_dir) / "teacher.avt"
    if not path.exists():
        raise StateError(f"No existe el maestro {path}; ejecuta train-teacher primero")
    return path


def cmd_train_actvar(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    result = run_experiment(spec, teacher_path=_teacher_path(args, spec))
    _print_json(result.to_dict())
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    _print_json(run_experiment(spec).to_dict())
    return 0


def _load_student(spec: ExperimentSpec) -> ActVarModel:
    path = Path(spec.out_dir) / "student.avt"
    if not path.exists():
        raise StateError(f"No existe el estudiante {path}; ejecuta train-actvar primero")
    return ActVarModel.load(path, spec.backbone, spec.activation)


def cmd_eval(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    _, val = load_dataset(Path(spec.out_dir) / "data")
    teacher = VarModel.load(_teacher_path(args, spec), spec.backbone)
    student = _load_student(spec)
    teacher_ce = evaluate_ce(teacher, val)
    student_ce = evaluate_ce(student, val)
    _print_json({
        'teacher_ce': teacher_ce,
        'student_ce': student_ce,
        'relative_gap': (student_ce - teacher_ce) / teacher_ce if teacher_ce else 0.0,
        'routing': routing_statistics(student, val).summary(),
    })
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    if args.reference:
        rows = reference_comparison(ActivationConfig.from_ratios(args.ratios) if args.ratios else None)
        print(reference_comparison_text(rows))
        return 0
    spec = build_spec(args)
    report = net_saving(cost_config_from(spec.backbone, spec.activation, args.convention))
    out = Path(spec.out_dir)
    report.to_json(out / "flops.json")
    (out / "flops.txt").write_text(report.to_text() + "\n", encoding='utf-8')
    if args.json:
        _print_json(report.to_dict())
    else:
        print(report.to_text())
    return 0


def cmd_export_maps(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    student = _load_student(spec)
    _, val = load_dataset(Path(spec.out_dir) / "data")
    if not 0 <= args.sample < len(val):
        raise ArgumentError(f"Muestra {args.sample} fuera de rango [0, {len(val)})")
    steps = parse_int_list(args.step) if args.step else spec.activation.scales
    blocks = parse_int_list(args.blocks) if args.blocks else None
    out_dir = Path(spec.out_dir) / "maps"
    written = []
    for step in steps:
        maps = collect_activation_maps(student, val.tokens[args.sample], int(val.labels[args.sample]), step - 1)
        written.extend(str(p) for p in export_activation_maps(maps, out_dir, blocks))
    _print_json(written)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = build_spec(args)
    if args.kind == 'experts':
        counts = parse_int_list(args.values) if args.values else EXPERT_COUNTS
        rows = sweep_experts(spec, counts, args.workers)
    elif args.kind == 'ratios':
        grid = tuple(tuple(float(v) for v in group.split(',')) for group in args.values.split(';')) \
            if args.values else RATIO_GRID
        rows = sweep_ratios(spec, grid, args.workers)
    elif args.kind == 'scales':
        rows = sweep_scales(spec, parse_scale_sets(args.values) if args.values else SCALE_SETS, args.workers)
    else:
        rows = sweep_components(spec, args.workers)
    _print_json(rows)
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="JSON del experimento")
    common.add_argument('--seed', type=int, default=None, help="Semilla maestra")
    common.add_argument('--out', default=None, help="Directorio de salida")
    common.add_argument('--ratios', default=None, help="Proporciones A,B,G (porcentaje o fracción)")
    common.add_argument('--experts', type=int, default=None, help="Número de expertos N")
    common.add_argument('--scales', default=None, help="Pasos activados (1-based), p. ej. 9,10")

    parser = argparse.ArgumentParser(prog='actvar', description="Dispersión dual para transformers por escalas")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('gen-data', parents=[common], help="Generar el conjunto sintético") \
        .set_defaults(func=cmd_gen_data)
    sub.add_parser('train-teacher', parents=[common], help="Entrenar el maestro denso") \
        .set_defaults(func=cmd_train_teacher)

    p = sub.add_parser('train-actvar', parents=[common], help="Fases 1 y 2 sobre un maestro entrenado")
    p.add_argument('--teacher', default=None, help="Checkpoint del maestro (por defecto <out>/teacher.avt)")
    p.set_defaults(func=cmd_train_actvar)

    p = sub.add_parser('eval', parents=[common], help="Entropía cruzada de validación y estadísticas")
    p.add_argument('--teacher', default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('flops', parents=[common], help="Informe analítico de FLOPs")
    p.add_argument('--convention', choices=sorted(CONVENTIONS), default='default')
    p.add_argument('--reference', action='store_true', help="Comparar d16/d20/d24/d30 con los ahorros publicados")
    p.add_argument('--json', action='store_true', help="Imprimir JSON en lugar de la tabla")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser('export-maps', parents=[common], help="Exportar mapas de activación PGM/CSV")
    p.add_argument('--blocks', default=None, help="Rango de bloques, p. ej. 0-3")
    p.add_argument('--step', default=None, help="Pasos (1-based); por defecto los activados")
    p.add_argument('--sample', type=int, default=0, help="Índice de la muestra de validación")
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser('sweep', parents=[common], help="Barridos de ablación")
    p.add_argument('--kind', choices=['experts', 'ratios', 'scales', 'components'], default='experts')
    p.add_argument('--values', default=None, help="Valores: '4,8,16' | '50,25,50;75,75,75' | '7,8;9,10'")
    p.add_argument('--workers', type=int, default=None, help="Procesos (por defecto ACTVAR_THREADS)")
    p.set_defaults(func=cmd_sweep)

    sub.add_parser('run', parents=[common], help="Experimento completo") \
        .set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Función principal"""
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    set_checked_mode(settings.checked)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ActVarError as e:
        logger.error(f"Error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
