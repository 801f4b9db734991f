"""
app/services/parameters.py - Seed Design Parameter Tables

A parametric seed design exposes its tunable dimensions through a named
table called "Spreadsheet": one row per parameter with a default value and
the bounds the design tolerates. This is the standard interface between the
optimizer/sampler and the geometry builders.

Sidecar file format (JSON, lengths in millimeters):

    {
      "Spreadsheet": [
        {"name": "chord", "default": 125.0, "min": 50.0, "max": 200.0},
        ...
      ]
    }

The built-in seed tables ship next to this package in app/seeds/.
"""

import json
from pathlib import Path
from typing import Mapping

from pydantic import BaseModel, ConfigDict, model_validator

from app.core.errors import ConfigError, OutOfBoundsError, UnknownParameterError

# Directory holding the sidecars of the built-in seed designs
SEEDS_DIR = Path(__file__).resolve().parent.parent / "seeds"

# Name of the table inside a sidecar file
TABLE_NAME = "Spreadsheet"


class ParameterEntry(BaseModel):
    """One spreadsheet row."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    default: float
    min: float
    max: float

    @model_validator(mode="after")
    def _check_order(self) -> "ParameterEntry":
        if not (self.min <= self.default <= self.max):
            raise ConfigError(
                f"parameter '{self.name}': expected min <= default <= max, "
                f"got {self.min} / {self.default} / {self.max}"
            )
        return self


class ParameterTable(BaseModel):
    """Ordered, uniquely named parameter rows of a seed design."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    entries: tuple[ParameterEntry, ...]

    @model_validator(mode="after")
    def _check_unique(self) -> "ParameterTable":
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in table: {names}")
        return self

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> ParameterEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise UnknownParameterError(name)

    def defaults(self) -> dict[str, float]:
        """Current values as a name -> value map."""
        return {e.name: e.default for e in self.entries}


def apply_parameters(table: ParameterTable, assignment: Mapping[str, float]) -> ParameterTable:
    """
    Return a copy of the table with the assigned values as new defaults.

    Args:
        table: The seed table
        assignment: name -> value; every name must exist and every value must
                    lie within the row's [min, max]

    Returns:
        A new ParameterTable; rows not named in the assignment are untouched

    Raises:
        UnknownParameterError: If a name is not in the table
        OutOfBoundsError: If a value falls outside its row's bounds
    """
    known = set(table.names)
    for name, value in assignment.items():
        if name not in known:
            raise UnknownParameterError(name)
        entry = table.get(name)
        if not (entry.min <= value <= entry.max):
            raise OutOfBoundsError(name, value, entry.min, entry.max)

    entries = tuple(
        e.model_copy(update={"default": float(assignment[e.name])}) if e.name in assignment else e
        for e in table.entries
    )
    return ParameterTable(entries=entries)


def load_parameter_table(path: str | Path) -> ParameterTable:
    """
    Load a "Spreadsheet" sidecar file.

    Raises:
        ConfigError: If the file has no Spreadsheet table or a malformed row
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if TABLE_NAME not in data:
        raise ConfigError(f"{path}: no '{TABLE_NAME}' table")
    return ParameterTable(entries=tuple(ParameterEntry(**row) for row in data[TABLE_NAME]))


def builtin_table(seed: str) -> ParameterTable:
    """Load the shipped table of a built-in seed design ("RevolvedHull", "WingedBody")."""
    files = {"RevolvedHull": "revolved_hull.json", "WingedBody": "winged_body.json"}
    if seed not in files:
        raise ConfigError(f"seed design '{seed}' has no built-in table")
    return load_parameter_table(SEEDS_DIR / files[seed])
