"""Feature extraction and text captioning for Standard MIDI Files."""
from .captions import CaptionRecord, FeatureRecord, render_template_caption, validate_caption
from .chords import ChordPattern, ChordSymbol, count_ngrams, detect_chords, mine_chord_pattern, select_pattern
from .dataset import CorpusStats, PipelineConfig, emit_stats, ingest_sidecar_tags, run_pipeline
from .features import (InstrumentSummary, KeyEstimate, NoNotes, TimeSignatureEstimate, estimate_key,
                       extract_instruments, extract_tempo_bpm, extract_time_signature)
from .prompting import InContextExample, build_prompt, load_examples
from .smf import MidiDocument, ParseError, duration_filter, parse_smf, read_midi, sanitize, write_smf

__version__ = "0.1.0"
