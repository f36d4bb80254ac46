import pathlib
import runpy
import sys

import pytest

DEMOS = pathlib.Path(__file__).resolve().parents[1] / "demos"


@pytest.mark.parametrize("name,argv", [
    ("01_sparse_pooling.py", []),
    ("02_effective_receptive_field.py", []),
    ("03_long_range_rooms.py", ["2"]),
])
def test_demo_runs(name, argv, monkeypatch, capsys):
    monkeypatch.setattr(sys, "argv", [name, *argv])
    runpy.run_path(str(DEMOS / name), run_name="__main__")
    out = capsys.readouterr().out
    assert out.strip()
    assert "False" not in out
