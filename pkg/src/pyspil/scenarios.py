"""Scripted obstacle behaviour for evaluating robot policies.

Five scenarios ship with the package under `pyspil/scenario_data`; each file
gives the obstacle's start state [px, py, alpha, v, omega] and a list of
velocity commands held from their start time on.
"""

import tomllib
from importlib import resources
from pathlib import Path
from typing import List, Union

from pyspil.errors import UsageError
from pyspil.models import ScenarioScript

SCENARIO_PACKAGE = "pyspil.scenario_data"


def _scenario_files():
    return sorted(
        (f for f in resources.files(SCENARIO_PACKAGE).iterdir() if f.name.endswith(".toml")),
        key=lambda f: f.name,
    )


def builtin_scenarios() -> List[ScenarioScript]:
    """The packaged scenarios in their numbered order."""
    return [ScenarioScript.model_validate(tomllib.loads(f.read_text())) for f in _scenario_files()]


def load_scenario(source: Union[str, Path]) -> ScenarioScript:
    """A scenario from a .toml file path, or a packaged one by name.

    Raises:
        UsageError: no file or packaged scenario matches.
    """
    path = Path(source)
    if path.suffix == ".toml" and path.exists():
        return ScenarioScript.model_validate(tomllib.loads(path.read_text()))
    for scenario in builtin_scenarios():
        if scenario.name == str(source):
            return scenario
    names = ", ".join(s.name for s in builtin_scenarios())
    raise UsageError(f"unknown scenario {source!r}; packaged scenarios: {names}")
