"""General MIDI program to instrument-name merge table."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

DRUMS = "drums"


@dataclass(frozen=True)
class MergeTable:
    names: tuple[str, ...]
    percussive: frozenset[int] = frozenset()

    def name(self, program: int) -> str:
        return self.names[program]

    def is_percussive(self, program: int) -> bool:
        return program in self.percussive

    def merge(self, entries: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
        """Combine entries sharing a name, summing amounts; first-seen order is kept."""
        totals: dict[str, float] = {}
        for name, amount in entries:
            totals[name] = totals.get(name, 0.0) + amount
        return list(totals.items())


def parse_merge_table(text: str) -> MergeTable:
    """Parse ``program<TAB>name[<TAB>percussive]`` lines; ``#`` starts a comment.

    Every program 0-127 must appear exactly once.
    """
    names: dict[int, str] = {}
    percussive = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split("\t")]
        try:
            program = int(parts[0])
        except ValueError:
            raise ValueError(f"line {lineno}: bad program number {parts[0]!r}") from None
        if not 0 <= program <= 127 or len(parts) < 2 or not parts[1]:
            raise ValueError(f"line {lineno}: expected 'program<TAB>name'")
        if program in names:
            raise ValueError(f"line {lineno}: program {program} listed twice")
        names[program] = parts[1].lower()
        if len(parts) > 2 and parts[2].lower() == "percussive":
            percussive.add(program)
    missing = sorted(set(range(128)) - names.keys())
    if missing:
        raise ValueError(f"merge table is missing programs {missing[:8]}")
    return MergeTable(tuple(names[p] for p in range(128)), frozenset(percussive))


def load_merge_table(path: str | Path | None = None) -> MergeTable:
    if path is None:
        text = resources.files("midi_annotator.data").joinpath("gm_merge_table.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_merge_table(text)


_default: MergeTable | None = None


def default_merge_table() -> MergeTable:
    global _default
    if _default is None:
        _default = load_merge_table()
    return _default
