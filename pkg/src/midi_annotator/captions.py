"""Feature records, deterministic template captions and caption validation."""
from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, field
from typing import Any

from .features import PITCH_NAMES, KeyEstimate, TimeSignatureEstimate

MIN_SENTENCES = 3
MAX_SENTENCES = 7

# (upper bound exclusive, word); the last bucket is open-ended.
TEMPO_WORDS: list[tuple[float, str]] = [(70.0, "slow"), (110.0, "moderate"), (140.0, "upbeat"), (math.inf, "fast")]


def tempo_word(bpm: float, buckets: list[tuple[float, str]] | None = None) -> str:
    for upper, word in buckets or TEMPO_WORDS:
        if bpm < upper:
            return word
    return (buckets or TEMPO_WORDS)[-1][1]


def rounded_tempo(bpm: float) -> int:
    return int(math.floor(bpm + 0.5))


def parse_key(text: str) -> KeyEstimate:
    tonic, mode = text.split()
    if tonic not in PITCH_NAMES or mode not in ("major", "minor"):
        raise ValueError(f"unrecognised key {text!r}")
    return KeyEstimate(PITCH_NAMES.index(tonic), mode, 0.0)


@dataclass(frozen=True)
class FeatureRecord:
    file_id: str
    key: KeyEstimate
    time_signature: TimeSignatureEstimate
    tempo_bpm: float
    duration_s: float
    instruments: tuple[str, ...] = ()
    chord_pattern: tuple[str, ...] | None = None
    chord_pattern_count: int = 0
    genres: tuple[tuple[str, float], ...] = ()
    moods: tuple[tuple[str, float], ...] = ()
    tempo_word: str = ""

    def __post_init__(self):
        if not self.tempo_bpm > 0:
            raise ValueError(f"tempo must be positive, got {self.tempo_bpm}")
        if not self.tempo_word:
            object.__setattr__(self, "tempo_word", tempo_word(self.tempo_bpm))

    def to_dict(self) -> dict[str, Any]:
        return {
            "file_id": self.file_id,
            "duration_s": self.duration_s,
            "tempo_bpm": self.tempo_bpm,
            "time_signature": str(self.time_signature),
            "key": self.key.name,
            "key_correlation": self.key.correlation,
            "instruments": list(self.instruments),
            "chord_pattern": list(self.chord_pattern) if self.chord_pattern else None,
            "chord_pattern_count": self.chord_pattern_count,
            "genres": [t for t, _ in self.genres],
            "genre_confidences": [c for _, c in self.genres],
            "moods": [t for t, _ in self.moods],
            "mood_confidences": [c for _, c in self.moods],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FeatureRecord:
        key = parse_key(d["key"])
        key = KeyEstimate(key.tonic, key.mode, float(d.get("key_correlation", 0.0)))
        pattern = d.get("chord_pattern")
        return cls(
            file_id=d["file_id"],
            key=key,
            time_signature=TimeSignatureEstimate.parse(d["time_signature"]),
            tempo_bpm=float(d["tempo_bpm"]),
            duration_s=float(d["duration_s"]),
            instruments=tuple(d.get("instruments") or ()),
            chord_pattern=tuple(pattern) if pattern else None,
            chord_pattern_count=int(d.get("chord_pattern_count") or 0),
            genres=tuple(zip(d.get("genres") or (), map(float, d.get("genre_confidences") or ()))),
            moods=tuple(zip(d.get("moods") or (), map(float, d.get("mood_confidences") or ()))),
        )


@dataclass(frozen=True)
class CaptionRecord:
    features: FeatureRecord
    caption: str
    sentences: int
    source: str = "template"


class ValidationError(ValueError):
    """A caption failed the sentence-count or field-presence check.

    ``kind`` is ``"SentenceCount"`` (``detail`` holds the count) or
    ``"MissingField"`` (``detail`` holds the field name).
    """

    def __init__(self, kind: str, detail: Any):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}({detail})")


_SENTENCE_END = re.compile(r"[.!?]+(?:\s+|$)")


def count_sentences(text: str) -> int:
    """Sentences end at '.', '!' or '?' followed by whitespace or end of text.

    Decimal points and tokens such as "4/4" therefore never split a sentence.
    """
    return sum(1 for part in _SENTENCE_END.split(text) if part.strip())


def validate_caption(text: str, features: FeatureRecord, source: str = "template") -> CaptionRecord:
    n = count_sentences(text)
    if not MIN_SENTENCES <= n <= MAX_SENTENCES:
        raise ValidationError("SentenceCount", n)
    lowered = text.lower()
    if features.key.name.lower() not in lowered:
        raise ValidationError("MissingField", "key")
    if str(features.time_signature) not in text:
        raise ValidationError("MissingField", "time_signature")
    if str(rounded_tempo(features.tempo_bpm)) not in text and features.tempo_word not in lowered:
        raise ValidationError("MissingField", "tempo")
    return CaptionRecord(features, text, n, source)


# -- template grammar -------------------------------------------------------


def _clean(text: str) -> str:
    # tags come from outside; stray terminators would change the sentence count
    return " ".join(re.sub(r"[.!?]+", " ", text).split())


def _join(items: list[str]) -> str:
    if len(items) <= 2:
        return " and ".join(items)
    return ", ".join(items[:-1]) + ", and " + items[-1]


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def _rng(features: FeatureRecord, seed: int) -> random.Random:
    blob = json.dumps(features.to_dict(), sort_keys=True) + f"|{seed}"
    return random.Random(int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "big"))


def _duration_phrase(seconds: float) -> str:
    if seconds < 60:
        return f"{int(round(seconds))} seconds"
    minutes = seconds / 60
    whole = int(round(minutes))
    if whole <= 1:
        return "about a minute"
    return f"about {whole} minutes"


@dataclass
class _Parts:
    genres: list[str]
    moods: list[str]
    instruments: list[str]
    noun: str
    key: str
    meter: str
    bpm: int
    word: str
    chords: list[str] | None
    sentences: list[str] = field(default_factory=list)


def _opener(p: _Parts, rng: random.Random) -> bool:
    """Append the opening sentence; True when it already names the instruments."""
    desc = " ".join(filter(None, [_join(p.moods[:2]), _join(p.genres)]))
    if desc:
        options = [
            (f"Here is {_article(desc)} {desc} {p.noun}", False),
            (f"This is {_article(desc)} {desc} {p.noun}", False),
        ]
        if p.instruments:
            options.append((f"{_article(desc).capitalize()} {desc} {p.noun} featuring {_join(p.instruments)}", True))
    else:
        options = [(f"This is an instrumental {p.noun}", False),
                   (f"This instrumental {p.noun} was arranged for MIDI playback", False)]
        if p.instruments:
            options.append((f"This instrumental {p.noun} is built around {_join(p.instruments)}", True))
    text, named = rng.choice(options)
    p.sentences.append(text + ".")
    return named


def _instrument_sentence(p: _Parts, rng: random.Random) -> None:
    inst = _join(p.instruments)
    p.sentences.append(rng.choice([
        f"The arrangement features {inst}.",
        f"The instrumentation includes {inst}.",
        f"It is performed by {inst}.",
        f"{inst[0].upper()}{inst[1:]} carry the arrangement." if len(p.instruments) > 1
        else f"{inst[0].upper()}{inst[1:]} carries the arrangement.",
    ]))


def _key_tempo_sentences(p: _Parts, rng: random.Random, combine: bool) -> None:
    if combine:
        p.sentences.append(rng.choice([
            f"The {p.noun} is in the key of {p.key} with a {p.meter} time signature and a tempo of {p.bpm} BPM.",
            f"Set in {p.key} and {p.meter} time, it moves at {_article(p.word)} {p.word} tempo of {p.bpm} BPM.",
        ]))
        return
    p.sentences.append(rng.choice([
        f"The {p.noun} is in the key of {p.key} with a {p.meter} time signature.",
        f"It is written in {p.key} and follows a {p.meter} meter.",
        f"Set in {p.key}, the {p.noun} moves in {p.meter} time.",
    ]))
    p.sentences.append(rng.choice([
        f"The tempo is {p.word} at {p.bpm} BPM.",
        f"It keeps {_article(p.word)} {p.word} pace of around {p.bpm} beats per minute.",
        f"With a tempo of {p.bpm} BPM, the feel is {p.word}.",
    ]))


def _chord_sentence(p: _Parts, rng: random.Random) -> None:
    seq = ", ".join(p.chords)
    p.sentences.append(rng.choice([
        f"The chord progression revolves around {seq}.",
        f"A recurring progression of {seq} runs through the {p.noun}.",
        f"Harmonically, it cycles through {seq}.",
    ]))


def render_template_caption(features: FeatureRecord, seed: int = 0) -> CaptionRecord:
    """Deterministic caption from a fixed sentence grammar.

    Sentence choices are drawn from a generator seeded by the record contents
    and ``seed``.  Always three to seven sentences naming key, meter and tempo.
    """
    rng = _rng(features, seed)
    genres = [t for t in (_clean(g) for g, _ in features.genres) if t]
    moods = [t for t in (_clean(m) for m, _ in features.moods) if t]
    instruments = [t for t in map(_clean, features.instruments) if t]
    p = _Parts(
        genres=genres, moods=moods, instruments=instruments,
        noun=rng.choice(["song", "piece", "track"]) if genres else rng.choice(["piece", "composition"]),
        key=features.key.name, meter=str(features.time_signature),
        bpm=rounded_tempo(features.tempo_bpm), word=features.tempo_word,
        chords=list(features.chord_pattern) if features.chord_pattern else None,
    )
    named = _opener(p, rng)
    if p.instruments and not named:
        _instrument_sentence(p, rng)
    _key_tempo_sentences(p, rng, combine=rng.random() < 0.5)
    if p.chords:
        _chord_sentence(p, rng)
    if len(moods) > 2:
        p.sentences.append(f"Overall, the mood is {_join(moods[2:4])}.")
    if len(p.sentences) < MIN_SENTENCES:
        p.sentences.append(f"It lasts {_duration_phrase(features.duration_s)}.")
    text = " ".join(p.sentences)
    return validate_caption(text, features, "template")
