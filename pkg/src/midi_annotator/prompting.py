"""In-context prompt assembly for LLM captioning."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .captions import FeatureRecord, ValidationError, rounded_tempo, validate_caption

MAX_EXAMPLES = 17

INSTRUCTIONS = """\
You write short natural-language descriptions of pieces of music from features extracted from MIDI files.
Below are example pairs. Each pair gives a features block followed by a caption written by a human annotator using only those features.
Study how the captions turn features into fluent text, then write one caption for the final features block.
Use between three and seven sentences. Always state the key, the time signature and the tempo.
Mention the instruments, genre, mood and chord progression when they are given, and do not invent anything that is not in the features.
Reply with the caption text only."""


class InvalidExampleCount(ValueError):
    pass


class TooManyExamples(InvalidExampleCount):
    pass


@dataclass(frozen=True)
class InContextExample:
    features: FeatureRecord
    caption: str

    def __post_init__(self):
        validate_caption(self.caption, self.features)


def _js(value) -> str:
    # JSON with angle brackets escaped so no value can close a block early
    return json.dumps(value).replace("<", "\\u003c").replace(">", "\\u003e")


def features_block(features: FeatureRecord) -> str:
    """Stable text rendering of a record; list values and names are JSON-encoded."""
    lines = [
        f"id: {_js(features.file_id)}",
        f"key: {features.key.name} (correlation {features.key.correlation!r})",
        f"time signature: {features.time_signature}",
        f"tempo: {features.tempo_bpm!r} BPM ({features.tempo_word})",
        f"duration: {features.duration_s!r} seconds",
        f"instruments: {_js(list(features.instruments))}",
    ]
    pattern = list(features.chord_pattern) if features.chord_pattern is not None else None
    lines.append(f"chord progression: {_js(pattern)} (occurs {features.chord_pattern_count} times)")
    lines.append(f"genres: {_js([[t, c] for t, c in features.genres])}")
    lines.append(f"moods: {_js([[t, c] for t, c in features.moods])}")
    return "<features>\n" + "\n".join(lines) + "\n</features>"


def build_prompt(examples: Sequence[InContextExample], features: FeatureRecord) -> str:
    if not examples:
        raise InvalidExampleCount("at least one in-context example is required")
    if len(examples) > MAX_EXAMPLES:
        raise TooManyExamples(f"{len(examples)} examples given, at most {MAX_EXAMPLES} allowed")
    parts = [INSTRUCTIONS, ""]
    for i, ex in enumerate(examples, 1):
        parts += [f"Example {i}:", features_block(ex.features),
                  "<caption>", ex.caption.strip(), "</caption>", ""]
    parts += ["Now write the caption for these features:", features_block(features), "Caption:"]
    return "\n".join(parts)


def corrective_prompt(prompt: str, error: ValidationError, features: FeatureRecord) -> str:
    """The original prompt plus a note on why the previous reply was rejected."""
    return (
        f"{prompt}\n\nA previous reply was rejected ({error}). "
        f"Answer again in three to seven sentences and state the key ({features.key.name}), "
        f"the time signature ({features.time_signature}) and the tempo "
        f"({rounded_tempo(features.tempo_bpm)} BPM) explicitly.\nCaption:"
    )


def load_examples(path: str | Path | None = None) -> list[InContextExample]:
    if path is None:
        text = resources.files("midi_annotator.data").joinpath("in_context_examples.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    items = json.loads(text)
    examples = [InContextExample(FeatureRecord.from_dict(item["features"]), item["caption"]) for item in items]
    if not 1 <= len(examples) <= MAX_EXAMPLES:
        raise InvalidExampleCount(f"example file holds {len(examples)} pairs; 1 to {MAX_EXAMPLES} allowed")
    return examples
