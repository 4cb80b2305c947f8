"""Per-file musical features read straight from the note and meta events."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gm import DRUMS, MergeTable, default_merge_table
from .smf import (DEFAULT_US_PER_QUARTER, DRUM_CHANNEL, MidiDocument, Note, ProgramChange,
                  SetTempo, TimeSignature, collect_notes)

PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# Krumhansl-Kessler probe-tone profiles, tonic first.
MAJOR_PROFILE = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
MINOR_PROFILE = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

MAX_INSTRUMENTS = 5


class NoNotes(ValueError):
    """The document has no pitched (non-drum) notes."""


@dataclass(frozen=True)
class KeyEstimate:
    tonic: int
    mode: str
    correlation: float

    @property
    def name(self) -> str:
        return f"{PITCH_NAMES[self.tonic]} {self.mode}"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class TimeSignatureEstimate:
    numerator: int = 4
    denominator: int = 4

    def __post_init__(self):
        if self.numerator < 1 or self.denominator not in (1, 2, 4, 8, 16, 32):
            raise ValueError(f"invalid time signature {self.numerator}/{self.denominator}")

    def __str__(self) -> str:
        return f"{self.numerator}/{self.denominator}"

    @classmethod
    def parse(cls, text: str) -> TimeSignatureEstimate:
        num, den = text.split("/")
        return cls(int(num), int(den))


@dataclass(frozen=True)
class InstrumentEntry:
    name: str
    total_note_duration: float
    programs: frozenset[int] = frozenset()


@dataclass(frozen=True)
class InstrumentSummary:
    entries: tuple[InstrumentEntry, ...] = ()

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def extract_tempo_bpm(doc: MidiDocument) -> float:
    """BPM of the first SetTempo event in file order, 120 when there is none."""
    for track in doc.tracks:
        for ev in track.events:
            if isinstance(ev.payload, SetTempo):
                return 60_000_000 / ev.payload.us_per_quarter
    return 60_000_000 / DEFAULT_US_PER_QUARTER


def extract_time_signature(doc: MidiDocument) -> TimeSignatureEstimate:
    for track in doc.tracks:
        for ev in track.events:
            if isinstance(ev.payload, TimeSignature):
                return TimeSignatureEstimate(ev.payload.numerator, ev.payload.denominator)
    return TimeSignatureEstimate(4, 4)


def pitch_class_histogram(notes: list[Note]) -> np.ndarray:
    """Seconds of sounding time per pitch class, drums excluded.

    Falls back to note counts when every pitched note has zero length.
    """
    pitched = [n for n in notes if not n.is_drum]
    if not pitched:
        raise NoNotes("no pitched notes")
    hist = np.zeros(12)
    for n in pitched:
        hist[n.pitch % 12] += n.duration
    if not hist.any():
        for n in pitched:
            hist[n.pitch % 12] += 1.0
    return hist


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = (dx * dx).sum()
    # A flat vector centres to rounding noise whose sign depends on scale.
    if sx <= 1e-24 * (x * x).sum():
        return 0.0
    denom = np.sqrt(sx * (dy * dy).sum())
    if denom == 0.0:
        return 0.0
    return float((dx * dy).sum() / denom)


def key_correlations(hist: np.ndarray) -> dict[tuple[int, str], float]:
    """Correlation of ``hist`` with every one of the 24 major/minor key profiles.

    The histogram is rotated so the candidate tonic sits at index 0; a
    transposed input therefore yields bit-identical scores for the
    transposed keys.
    """
    scores = {}
    for tonic in range(12):
        rotated = np.roll(hist, -tonic)
        scores[(tonic, "major")] = _pearson(rotated, MAJOR_PROFILE)
        scores[(tonic, "minor")] = _pearson(rotated, MINOR_PROFILE)
    return scores


def key_from_histogram(hist: np.ndarray) -> KeyEstimate:
    best: tuple[int, str] | None = None
    best_score = -np.inf
    # Iteration order (tonic ascending, major before minor) settles exact ties.
    for candidate, score in key_correlations(hist).items():
        if score > best_score:
            best, best_score = candidate, score
    return KeyEstimate(best[0], best[1], best_score)


def estimate_key(doc: MidiDocument, notes: list[Note] | None = None) -> KeyEstimate:
    """Krumhansl-Schmuckler key estimate from duration-weighted pitch classes."""
    if notes is None:
        notes = collect_notes(doc)
    return key_from_histogram(pitch_class_histogram(notes))


def channel_programs(doc: MidiDocument) -> dict[int, int]:
    """Last program assigned to each channel along the merged timeline."""
    programs: dict[int, int] = {}
    for _, _, _, payload in doc.iter_events():
        if isinstance(payload, ProgramChange):
            programs[payload.channel] = payload.program
    return programs


def extract_instruments(doc: MidiDocument, table: MergeTable | None = None,
                        notes: list[Note] | None = None, limit: int = MAX_INSTRUMENTS) -> InstrumentSummary:
    """Top instruments by total note duration.

    Each channel plays a single instrument: the last program it was given
    (program 0 by default).  Channel 10 is reported as drums unless its
    program is percussive in the merge table.  Programs mapping to the same
    name are merged before ranking; equal totals keep the order in which the
    instruments first sound.
    """
    table = table or default_merge_table()
    if notes is None:
        notes = collect_notes(doc)
    programs = channel_programs(doc)

    resolved: dict[int, tuple[str, int | None]] = {}
    for channel in range(16):
        program = programs.get(channel, 0)
        if channel == DRUM_CHANNEL and not table.is_percussive(program):
            resolved[channel] = (DRUMS, None)
        else:
            resolved[channel] = (table.name(program), program)

    totals: dict[str, float] = {}
    members: dict[str, set[int]] = {}
    for n in notes:  # notes are in first-occurrence order
        name, program = resolved[n.channel]
        totals[name] = totals.get(name, 0.0) + n.duration
        group = members.setdefault(name, set())
        if program is not None:
            group.add(program)

    ranked = sorted(totals.items(), key=lambda item: -item[1])  # stable on ties
    return InstrumentSummary(tuple(
        InstrumentEntry(name, seconds, frozenset(members[name])) for name, seconds in ranked[:limit]
    ))
