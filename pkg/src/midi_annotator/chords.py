"""Beat-synchronous chord labelling and frequent chord-pattern selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

from .features import PITCH_NAMES, NoNotes
from .smf import MidiDocument, Note, collect_notes

# quality -> (intervals above the root, rendered suffix); order breaks score ties.
QUALITIES: dict[str, tuple[tuple[int, ...], str]] = {
    "maj": ((0, 4, 7), ""),
    "min": ((0, 3, 7), "m"),
    "dim": ((0, 3, 6), "dim"),
    "aug": ((0, 4, 8), "aug"),
    "dom7": ((0, 4, 7, 10), "7"),
    "maj7": ((0, 4, 7, 11), "maj7"),
    "min7": ((0, 3, 7, 10), "m7"),
}
_SUFFIXES = {suffix: quality for quality, (_, suffix) in QUALITIES.items()}

SCORE_THRESHOLD = 0.6
OUTSIDE_PENALTY = 0.5
MIN_PITCH_CLASSES = 2
PATTERN_LENGTHS = (3, 4, 5)
_TIE_EPS = 1e-9


@dataclass(frozen=True, order=True)
class ChordSymbol:
    root: int
    quality: str

    def __str__(self) -> str:
        return PITCH_NAMES[self.root] + QUALITIES[self.quality][1]

    @classmethod
    def parse(cls, text: str) -> ChordSymbol:
        root_len = 2 if len(text) > 1 and text[1] == "#" else 1
        root, suffix = text[:root_len], text[root_len:]
        if root not in PITCH_NAMES or suffix not in _SUFFIXES:
            raise ValueError(f"unrecognised chord symbol {text!r}")
        return cls(PITCH_NAMES.index(root), _SUFFIXES[suffix])


@dataclass(frozen=True)
class ChordPattern:
    pattern: tuple
    occurrences: int

    @property
    def symbols(self) -> list[str]:
        return [str(c) for c in self.pattern]


def _templates() -> list[tuple[int, int, ChordSymbol, tuple[int, ...]]]:
    # (template size, quality rank, symbol, sorted pitch classes)
    out = []
    for rank, (quality, (intervals, _)) in enumerate(QUALITIES.items()):
        for root in range(12):
            pcs = tuple(sorted((root + i) % 12 for i in intervals))
            out.append((len(intervals), rank, ChordSymbol(root, quality), pcs))
    out.sort(key=lambda t: (t[0], t[1], t[2].root))
    return out


TEMPLATES = _templates()


def label_segment(mass: Sequence[float], threshold: float = SCORE_THRESHOLD,
                  penalty: float = OUTSIDE_PENALTY,
                  min_pitch_classes: int = MIN_PITCH_CLASSES) -> ChordSymbol | None:
    """Best chord template for one segment's pitch-class mass, or None.

    Score is ``(inside - penalty * outside) / total``.  Near-equal scores go
    to the smaller template, then the quality order of ``QUALITIES``, then the
    lower root.  Segments sounding fewer than ``min_pitch_classes`` distinct
    pitch classes are never labelled.
    """
    total = sum(mass)
    if total <= 0 or sum(1 for m in mass if m > 0) < min_pitch_classes:
        return None
    best, best_score = None, -float("inf")
    for _, _, symbol, pcs in TEMPLATES:
        inside = sum(mass[pc] for pc in pcs)
        score = (inside - penalty * (total - inside)) / total
        if score > best_score + _TIE_EPS:
            best, best_score = symbol, score
    return best if best_score >= threshold else None


def segment_masses(doc: MidiDocument, notes: list[Note]) -> list[list[float]]:
    """Per-beat pitch-class mass (seconds) of sounding pitched notes."""
    tpq = doc.ticks_per_quarter
    pitched = [n for n in notes if not n.is_drum and n.end_tick > n.start_tick]
    if not pitched:
        return []
    n_beats = -(-max(n.end_tick for n in pitched) // tpq)
    bounds = [doc.seconds(b * tpq) for b in range(n_beats + 1)]
    masses = [[0.0] * 12 for _ in range(n_beats)]
    for n in pitched:
        pc = n.pitch % 12
        first = n.start_tick // tpq
        last = (n.end_tick - 1) // tpq
        for beat in range(first, last + 1):
            lo = max(n.start, bounds[beat])
            hi = min(n.end, bounds[beat + 1])
            if hi > lo:
                masses[beat][pc] += hi - lo
    return masses


def collapse(symbols: Sequence) -> list:
    """Drop None entries and merge consecutive duplicates."""
    out: list = []
    for s in symbols:
        if s is not None and (not out or out[-1] != s):
            out.append(s)
    return out


def detect_chords(doc: MidiDocument, notes: list[Note] | None = None,
                  threshold: float = SCORE_THRESHOLD, penalty: float = OUTSIDE_PENALTY,
                  min_pitch_classes: int = MIN_PITCH_CLASSES) -> list[ChordSymbol]:
    if notes is None:
        notes = collect_notes(doc)
    if not any(not n.is_drum for n in notes):
        raise NoNotes("no pitched notes")
    labels = [label_segment(m, threshold, penalty, min_pitch_classes) for m in segment_masses(doc, notes)]
    return collapse(labels)


def count_ngrams(seq: Sequence[Hashable], n: int) -> ChordPattern | None:
    """Most frequent length-``n`` window whose first and last items differ.

    Windows overlap; ties go to the window that occurs first.
    """
    seq = tuple(seq)
    counts: dict[tuple, int] = {}
    get = counts.get
    for i in range(len(seq) - n + 1):
        window = seq[i:i + n]
        if window[0] != window[-1]:
            counts[window] = get(window, 0) + 1
    if not counts:
        return None
    # dicts keep insertion order and max() keeps the first maximum,
    # so ties resolve to the earliest first occurrence
    best = max(counts, key=counts.__getitem__)
    return ChordPattern(best, counts[best])


def select_pattern(p3, n3: int, p4, n4: int, p5, n5: int) -> ChordPattern | None:
    """Choose between the most frequent 3-, 4- and 5-chord patterns.

    Longer patterns win when they are nearly as frequent as the next shorter
    one and make up a large enough share of all counted occurrences
    (80% / 25% for five, 80% / 30% for four), compared in integers.
    """
    n = n3 + n4 + n5
    if n5 > 0 and 5 * n5 >= 4 * n4 and 4 * n5 >= n:
        return ChordPattern(tuple(p5), n5)
    if n4 > 0 and 5 * n4 >= 4 * n3 and 10 * n4 >= 3 * n:
        return ChordPattern(tuple(p4), n4)
    if n3 == 0:
        if n4 == 0:
            return ChordPattern(tuple(p5), n5) if n5 > 0 else None
        return ChordPattern(tuple(p4), n4)
    return ChordPattern(tuple(p3), n3)


def pattern_from_sequence(seq: Sequence[Hashable]) -> ChordPattern | None:
    args = []
    for length in PATTERN_LENGTHS:
        found = count_ngrams(seq, length)
        args += [found.pattern, found.occurrences] if found else [None, 0]
    return select_pattern(*args)


def mine_chord_pattern(doc: MidiDocument, notes: list[Note] | None = None, **detect_options) -> ChordPattern | None:
    return pattern_from_sequence(detect_chords(doc, notes, **detect_options))
