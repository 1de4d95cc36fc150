"""Action Unit types for the 24-unit FEAFA scheme.

A face is summarised by an :class:`AuVector` of 24 densities in ``[0, 1]``.
Position ``i`` holds AU index ``i + 1``. Prompts never see raw indices, only
the human-readable names from an :class:`AuNameTable`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

N_AUS = 24

AU_INDEX_PATTERN = re.compile(r"AU\s*[0-9]+")


class AuError(ValueError):
    """Raised for malformed AU data or name tables."""


def check_au_index(index: int) -> int:
    if isinstance(index, bool) or not isinstance(index, int):
        raise AuError(f"AU index must be an integer, got {index!r}")
    if not 1 <= index <= N_AUS:
        raise AuError(f"AU index {index} out of range [1, {N_AUS}]")
    return index


class AuNameTable(Mapping[int, str]):
    """Mapping from AU index (1..24) to a readable name.

    Construction does not require totality so that partial tables coming
    from user configuration can be reported precisely at lookup time; call
    :meth:`check_total` to validate eagerly.
    """

    def __init__(self, entries: Mapping[int, str]):
        names: dict[int, str] = {}
        for index, name in entries.items():
            check_au_index(index)
            name = name.strip()
            if not name:
                raise AuError(f"empty name for AU {index}")
            if AU_INDEX_PATTERN.search(name) or any(ch.isdigit() for ch in name):
                raise AuError(f"AU name {name!r} must not contain digits")
            names[index] = name
        if len(set(names.values())) != len(names):
            raise AuError("AU names must be unique")
        self._names = dict(sorted(names.items()))

    def __getitem__(self, index: int) -> str:
        return self._names[index]

    def __iter__(self):
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        return f"AuNameTable({len(self)} entries)"

    def check_total(self) -> "AuNameTable":
        missing = [i for i in range(1, N_AUS + 1) if i not in self._names]
        if missing:
            raise AuError(f"AU name table is missing indices {missing}")
        return self

    @classmethod
    def from_tsv(cls, text: str) -> "AuNameTable":
        """Parse ``<index><TAB><name>`` lines; exactly 24 records required."""
        entries: dict[int, str] = {}
        lines = [line for line in text.splitlines() if line.strip()]
        for lineno, line in enumerate(lines, start=1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise AuError(f"line {lineno}: expected '<index>\\t<name>', got {line!r}")
            try:
                index = int(parts[0])
            except ValueError:
                raise AuError(f"line {lineno}: bad index {parts[0]!r}") from None
            if index in entries:
                raise AuError(f"line {lineno}: duplicate index {index}")
            entries[index] = parts[1]
        if len(entries) != N_AUS:
            raise AuError(f"name table must have exactly {N_AUS} records, got {len(entries)}")
        return cls(entries).check_total()

    @classmethod
    def from_file(cls, path: str | Path) -> "AuNameTable":
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))

    def to_tsv(self) -> str:
        return "".join(f"{i}\t{name}\n" for i, name in self._names.items())


_DEFAULT_TABLE: AuNameTable | None = None


def default_name_table() -> AuNameTable:
    """The bundled FEAFA table. Only AU 1 is fixed by the source method."""
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        text = resources.files("expcot.data").joinpath("feafa_au_names.tsv").read_text("utf-8")
        _DEFAULT_TABLE = AuNameTable.from_tsv(text)
    return _DEFAULT_TABLE


def index_to_name(index: int, table: AuNameTable | None = None) -> str:
    check_au_index(index)
    table = default_name_table() if table is None else table
    try:
        return table[index]
    except KeyError:
        raise AuError(f"AU name table has no entry for AU {index}") from None


@dataclass(frozen=True)
class AuVector:
    densities: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(d) for d in self.densities)
        if len(values) != N_AUS:
            raise AuError(f"AU vector must have {N_AUS} densities, got {len(values)}")
        for i, d in enumerate(values):
            # NaN fails both comparisons
            if not 0.0 <= d <= 1.0:
                raise AuError(f"density for AU {i + 1} is {d!r}, outside [0, 1]")
        object.__setattr__(self, "densities", values)

    @classmethod
    def from_mapping(cls, densities: Mapping[int, float]) -> "AuVector":
        """Build from a sparse ``{au_index: density}`` mapping."""
        values = [0.0] * N_AUS
        for index, d in densities.items():
            values[check_au_index(index) - 1] = d
        return cls(tuple(values))

    @classmethod
    def zeros(cls) -> "AuVector":
        return cls((0.0,) * N_AUS)

    def __getitem__(self, index: int) -> float:
        """Density of AU ``index`` (1-based)."""
        return self.densities[check_au_index(index) - 1]

    def to_list(self) -> list[float]:
        return list(self.densities)


@dataclass(frozen=True)
class AuObservation:
    """Named split of an AU vector into active and inactive units."""

    positive: tuple[tuple[str, float], ...]
    negative: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "positive": [[name, d] for name, d in self.positive],
            "negative": list(self.negative),
        }


def partition(vector: AuVector, table: AuNameTable | None = None) -> AuObservation:
    """Split ``vector`` into AUs with density > 0 and the rest, by index order."""
    table = default_name_table() if table is None else table
    positive: list[tuple[str, float]] = []
    negative: list[str] = []
    for index, d in enumerate(vector.densities, start=1):
        name = index_to_name(index, table)
        if d > 0.0:
            positive.append((name, d))
        else:
            negative.append(name)
    return AuObservation(tuple(positive), tuple(negative))


def format_density(d: float) -> str:
    """Two-decimal fixed point, half away from zero.

    Goes through ``repr`` so that 0.005 rounds to 0.01 the way a reader of the
    literal expects, rather than by its binary expansion.
    """
    if not 0.0 <= d <= 1.0:
        raise AuError(f"density {d!r} outside [0, 1]")
    return str(Decimal(repr(float(d))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def as_vectors(rows: Iterable[Sequence[float]]) -> list[AuVector]:
    return [row if isinstance(row, AuVector) else AuVector(tuple(row)) for row in rows]
