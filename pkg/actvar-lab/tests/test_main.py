"""
Tests de la interfaz de línea de comandos
"""

import json

import pytest

from src.errors import ArgumentError
from src.main import build_parser, main, parse_int_list, parse_scale_sets


class TestParsing:
    """Tests de lectura de listas"""

    def test_int_list(self):
        """Test listas y rangos"""
        assert parse_int_list("9,10") == (9, 10)
        assert parse_int_list("0-3") == (0, 1, 2, 3)
        assert parse_int_list("1, 4-5") == (1, 4, 5)

    def test_int_list_invalid(self):
        """Test lista no numérica"""
        with pytest.raises(ArgumentError):
            parse_int_list("a,b")

    def test_scale_sets(self):
        """Test conjuntos separados por punto y coma"""
        assert parse_scale_sets("7,8;9,10") == ((7, 8), (9, 10))

    def test_subcommand_required(self):
        """Test invocación sin subcomando"""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestCommands:
    """Tests de subcomandos"""

    def test_flops(self, temp_dir, capsys):
        """Test informe de FLOPs con la configuración por defecto"""
        assert main(['flops', '--out', str(temp_dir), '--json']) == 0
        data = json.loads(capsys.readouterr().out)
        assert data['saving_percent'] > 0
        assert (temp_dir / "flops.json").exists()
        assert (temp_dir / "flops.txt").exists()

    def test_flops_reference(self, capsys):
        """Test comparación con los ahorros publicados"""
        assert main(['flops', '--reference']) == 0
        out = capsys.readouterr().out
        assert "d16" in out and "d30" in out

    def test_invalid_ratios(self, temp_dir):
        """Test proporciones incompletas: código de salida 1"""
        assert main(['flops', '--out', str(temp_dir), '--ratios', '50,50']) == 1

    def test_eval_without_data(self, temp_dir):
        """Test evaluación sin conjunto generado"""
        assert main(['eval', '--out', str(temp_dir)]) == 1

    def test_gen_data(self, temp_dir, capsys):
        """Test generación del conjunto en <out>/data"""
        assert main(['gen-data', '--out', str(temp_dir), '--seed', '3']) == 0
        assert (temp_dir / "data" / "dataset.json").exists()
        assert "train_tokens" in capsys.readouterr().out

    def test_config_file(self, temp_dir, capsys):
        """Test --config con N y pasos propios"""
        config = temp_dir / "exp.json"
        config.write_text(json.dumps({'activation': {'experts': 8, 'scales': [7, 8]}}))
        assert main(['flops', '--config', str(config), '--out', str(temp_dir), '--json']) == 0
        data = json.loads(capsys.readouterr().out)
        assert data['experts'] == 8
        assert [s['step'] for s in data['steps'] if s['activated']] == [7, 8]
