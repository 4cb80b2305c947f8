"""Corpus-level orchestration: discover, annotate, write JSONL, count."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Iterator

from .captions import CaptionRecord, FeatureRecord, render_template_caption
from .chords import mine_chord_pattern
from .features import KeyEstimate, NoNotes, estimate_key, extract_instruments, extract_tempo_bpm, extract_time_signature
from .gm import MergeTable, default_merge_table, load_merge_table
from .smf import MAX_DURATION_S, MIN_DURATION_S, MidiDocument, ParseError, collect_notes, duration_filter, parse_smf, sanitize

log = logging.getLogger(__name__)

MIDI_SUFFIXES = {".mid", ".midi"}
SIDECAR_SUFFIX = ".tags.json"
MAX_GENRES = 2
MAX_MOODS = 5
TEMPO_BUCKET = 10
TEMPO_CEILING = 300


# -- sidecar tags -----------------------------------------------------------


class MalformedSidecar(ValueError):
    pass


@dataclass(frozen=True)
class SidecarTags:
    genres: tuple[tuple[str, float], ...] = ()
    moods: tuple[tuple[str, float], ...] = ()


def _tag_list(value: Any, what: str) -> list[tuple[str, float]]:
    if value is None:
        return []
    if isinstance(value, dict):
        items = list(value.items())
    elif isinstance(value, list):
        items = []
        for item in value:
            if isinstance(item, dict):
                items.append((item.get("tag"), item.get("confidence")))
            elif isinstance(item, (list, tuple)) and len(item) == 2:
                items.append(tuple(item))
            else:
                raise MalformedSidecar(f"{what}: cannot read entry {item!r}")
    else:
        raise MalformedSidecar(f"{what}: expected a list or an object")
    out = []
    for tag, conf in items:
        if not isinstance(tag, str) or not tag.strip():
            raise MalformedSidecar(f"{what}: tag must be a non-empty string")
        if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise MalformedSidecar(f"{what}: confidence for {tag!r} must be in [0, 1]")
        out.append((tag.strip(), float(conf)))
    return out


def select_top(tags: Iterable[tuple[str, float]], limit: int) -> tuple[tuple[str, float], ...]:
    """Highest-confidence tags first; equal confidences keep their input order."""
    return tuple(sorted(tags, key=lambda t: -t[1])[:limit])


def parse_sidecar(data: Any) -> SidecarTags:
    if not isinstance(data, dict):
        raise MalformedSidecar("sidecar must be a JSON object")
    return SidecarTags(
        genres=select_top(_tag_list(data.get("genres"), "genres"), MAX_GENRES),
        moods=select_top(_tag_list(data.get("moods"), "moods"), MAX_MOODS),
    )


def ingest_sidecar_tags(path: str | Path) -> SidecarTags:
    """Genre/mood tags from a sidecar file; missing or malformed files give no tags."""
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        return SidecarTags()
    except (OSError, UnicodeDecodeError) as exc:
        log.warning("ignoring unreadable sidecar %s: %s", path, exc)
        return SidecarTags()
    try:
        return parse_sidecar(json.loads(text))
    except (json.JSONDecodeError, MalformedSidecar) as exc:
        log.warning("ignoring malformed sidecar %s: %s", path, exc)
        return SidecarTags()


# -- per-file work ----------------------------------------------------------


def extract_features(doc: MidiDocument, file_id: str, tags: SidecarTags = SidecarTags(),
                     table: MergeTable | None = None) -> FeatureRecord:
    notes = collect_notes(doc)
    key = estimate_key(doc, notes)
    pattern = mine_chord_pattern(doc, notes)
    return FeatureRecord(
        file_id=file_id,
        key=KeyEstimate(key.tonic, key.mode, round(key.correlation, 4)),
        time_signature=extract_time_signature(doc),
        tempo_bpm=round(extract_tempo_bpm(doc), 2),
        duration_s=round(doc.duration_seconds, 3),
        instruments=tuple(extract_instruments(doc, table, notes).names),
        chord_pattern=tuple(pattern.symbols) if pattern else None,
        chord_pattern_count=pattern.occurrences if pattern else 0,
        genres=tags.genres,
        moods=tags.moods,
    )


def content_hash(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


@dataclass(frozen=True)
class FileTask:
    path: str
    file_id: str
    file_path: str
    sidecar: str
    min_duration: float = MIN_DURATION_S
    max_duration: float = MAX_DURATION_S
    template_captions: bool = False
    seed: int = 0
    merge_table: str | None = None


@lru_cache(maxsize=8)
def _table(path: str | None) -> MergeTable:
    return default_merge_table() if path is None else load_merge_table(path)


def make_record(features: FeatureRecord, file_path: str, caption: CaptionRecord | None = None) -> dict[str, Any]:
    record = {"file_id": features.file_id, "file_path": file_path}
    record.update(features.to_dict())
    record["caption"] = caption.caption if caption else None
    record["caption_source"] = caption.source if caption else None
    return record


def process_file(task: FileTask) -> dict[str, Any]:
    """Run one file through parse, sanitize, filter and feature extraction.

    Never raises for problems with the file itself; those come back as a
    ``rejected`` result with a reason.
    """
    result: dict[str, Any] = {"file_id": task.file_id, "file_path": task.file_path}
    try:
        data = Path(task.path).read_bytes()
    except OSError as exc:
        return {**result, "status": "rejected", "hash": None, "reason": "ReadError", "detail": str(exc)}
    result["hash"] = content_hash(data)
    try:
        doc = sanitize(parse_smf(data))
    except ParseError as exc:
        return {**result, "status": "rejected", "reason": f"ParseError:{exc.kind.value}", "detail": str(exc)}
    verdict = duration_filter(doc, task.min_duration, task.max_duration)
    if not verdict.accepted:
        return {**result, "status": "rejected", "reason": verdict.reason,
                "detail": f"duration {doc.duration_seconds:.3f}s"}
    tags = ingest_sidecar_tags(task.sidecar)
    try:
        features = extract_features(doc, task.file_id, tags, _table(task.merge_table))
    except NoNotes:
        return {**result, "status": "rejected", "reason": "NoNotes", "detail": "no pitched notes"}
    caption = render_template_caption(features, task.seed) if task.template_captions else None
    return {**result, "status": "ok", "record": make_record(features, task.file_path, caption)}


# -- statistics -------------------------------------------------------------


def tempo_bucket(bpm: float) -> str:
    if bpm >= TEMPO_CEILING:
        return f"{TEMPO_CEILING}+"
    lo = int(math.floor(bpm / TEMPO_BUCKET)) * TEMPO_BUCKET
    return f"{lo}-{lo + TEMPO_BUCKET - 1}"


TEMPO_BUCKETS = [tempo_bucket(b) for b in range(0, TEMPO_CEILING, TEMPO_BUCKET)] + [f"{TEMPO_CEILING}+"]


@dataclass
class CorpusStats:
    genre_hist: dict[str, Counter] = field(default_factory=lambda: {"primary": Counter(), "secondary": Counter()})
    mood_hist: Counter = field(default_factory=Counter)
    instrument_hist: Counter = field(default_factory=Counter)
    key_hist: Counter = field(default_factory=Counter)
    timesig_hist: Counter = field(default_factory=Counter)
    tempo_hist: Counter = field(default_factory=lambda: Counter({b: 0 for b in TEMPO_BUCKETS}))
    n_processed: int = 0
    n_rejected: int = 0
    reject_reasons: Counter = field(default_factory=Counter)

    def add(self, record: dict[str, Any] | CaptionRecord | FeatureRecord) -> None:
        if isinstance(record, CaptionRecord):
            record = record.features
        if isinstance(record, FeatureRecord):
            record = record.to_dict()
        self.n_processed += 1
        genres = record.get("genres") or []
        for slot, tag in zip(("primary", "secondary"), genres):
            self.genre_hist[slot][tag] += 1
        self.mood_hist.update(record.get("moods") or [])
        self.instrument_hist.update(record.get("instruments") or [])
        self.key_hist[record["key"]] += 1
        self.timesig_hist[record["time_signature"]] += 1
        self.tempo_hist[tempo_bucket(float(record["tempo_bpm"]))] += 1

    def add_reject(self, reason: str) -> None:
        self.n_rejected += 1
        self.reject_reasons[reason] += 1

    def histograms(self) -> dict[str, Counter]:
        return {
            "genre_primary": self.genre_hist["primary"],
            "genre_secondary": self.genre_hist["secondary"],
            "mood": self.mood_hist,
            "instrument": self.instrument_hist,
            "key": self.key_hist,
            "time_signature": self.timesig_hist,
            "tempo": self.tempo_hist,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_processed": self.n_processed,
            "n_rejected": self.n_rejected,
            "reject_reasons": dict(sorted(self.reject_reasons.items())),
            "genre_hist": {slot: dict(sorted(c.items())) for slot, c in self.genre_hist.items()},
            "mood_hist": dict(sorted(self.mood_hist.items())),
            "instrument_hist": dict(sorted(self.instrument_hist.items())),
            "key_hist": dict(sorted(self.key_hist.items())),
            "timesig_hist": dict(sorted(self.timesig_hist.items())),
            "tempo_hist": {b: self.tempo_hist[b] for b in TEMPO_BUCKETS},
        }

    def render_csv(self, threshold: int = 0) -> str:
        """``histogram,label,count`` rows, dropping labels with ``count <= threshold``.

        Tempo buckets stay in numeric order; other labels are sorted by count.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["histogram", "label", "count"])
        for name, counter in self.histograms().items():
            if name == "tempo":
                rows = [(b, counter[b]) for b in TEMPO_BUCKETS]
            else:
                rows = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
            for label, count in rows:
                if count > threshold:
                    writer.writerow([name, label, count])
        return buf.getvalue()

    def render_text(self, threshold: int = 0) -> str:
        lines = [f"processed: {self.n_processed}", f"rejected: {self.n_rejected}"]
        for reason, count in sorted(self.reject_reasons.items()):
            lines.append(f"  {reason}: {count}")
        for name, counter in self.histograms().items():
            rows = [(b, counter[b]) for b in TEMPO_BUCKETS] if name == "tempo" else \
                sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
            shown = [(label, count) for label, count in rows if count > threshold]
            if shown:
                lines.append(f"{name}:")
                lines += [f"  {label}: {count}" for label, count in shown]
        return "\n".join(lines) + "\n"


def emit_stats(records: Iterable[dict[str, Any] | CaptionRecord | FeatureRecord],
               rejects: Iterable[str] = ()) -> CorpusStats:
    stats = CorpusStats()
    for record in records:
        stats.add(record)
    for reason in rejects:
        stats.add_reject(reason)
    return stats


# -- pipeline ---------------------------------------------------------------


@dataclass
class PipelineConfig:
    input_dir: Path
    output: Path
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    min_duration: float = MIN_DURATION_S
    max_duration: float = MAX_DURATION_S
    captions: bool = True
    mode: str = "template"
    seed: int = 0
    merge_table: Path | None = None
    examples: Path | None = None
    resume: Path | None = None
    write_stats: bool = True
    stats_threshold: int = 0
    llm: Any = None  # LLMEndpointConfig when mode == "llm"

    @property
    def manifest_path(self) -> Path:
        return self.resume or sibling(self.output, ".manifest.json")


@dataclass
class ExitReport:
    discovered: int = 0
    processed: int = 0
    rejected: int = 0
    skipped: int = 0
    failed: int = 0

    def __str__(self) -> str:
        return (f"discovered: {self.discovered} processed: {self.processed} rejected: {self.rejected} "
                f"skipped: {self.skipped} failed: {self.failed}")


def sibling(output: Path, suffix: str) -> Path:
    """``out/records.jsonl`` -> ``out/records<suffix>``."""
    return output.with_name(output.stem + suffix)


def discover(input_dir: Path) -> list[tuple[str, Path]]:
    """``(file_id, path)`` for every MIDI file below ``input_dir``, sorted by file id.

    The file id is the path relative to ``input_dir`` without its suffix.
    """
    found = []
    for path in input_dir.rglob("*"):
        if path.suffix.lower() in MIDI_SUFFIXES and path.is_file():
            rel = path.relative_to(input_dir)
            found.append((rel.with_suffix("").as_posix(), path))
    found.sort(key=lambda item: (item[0], item[1].name))
    seen: set[str] = set()
    unique = []
    for file_id, path in found:
        if file_id in seen:
            file_id = path.relative_to(input_dir).as_posix()
        seen.add(file_id)
        unique.append((file_id, path))
    return unique


def read_jsonl(path: Path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _jsonl(rows: Iterable[dict[str, Any]]) -> str:
    return "".join(json.dumps(row, ensure_ascii=False) + "\n" for row in rows)


def _check_writable(output: Path) -> None:
    output.parent.mkdir(parents=True, exist_ok=True)
    probe = output.with_name(output.name + ".probe")
    with open(probe, "w", encoding="utf-8"):
        pass
    probe.unlink()


def _run_tasks(tasks: list[FileTask], jobs: int) -> list[dict[str, Any]]:
    if jobs <= 1 or len(tasks) <= 1:
        return [process_file(t) for t in tasks]
    chunk = max(1, len(tasks) // (jobs * 8))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(process_file, tasks, chunksize=chunk))


def _caption_llm(results: list[dict[str, Any]], config: PipelineConfig) -> None:
    """Fill captions for ok results through the LLM; failures turn into ``failed`` results."""
    from .llm import LlmClient, LlmError, llm_caption
    from .prompting import load_examples

    examples = load_examples(config.examples)
    pending = [r for r in results if r["status"] == "ok"]
    with LlmClient(config.llm) as client:
        def work(result):
            features = FeatureRecord.from_dict(result["record"])
            try:
                caption = llm_caption(features, client, examples, config.seed)
            except LlmError as exc:
                return result, exc
            result["record"] = make_record(features, result["file_path"], caption)
            return result, None

        with ThreadPoolExecutor(max_workers=max(1, config.llm.max_concurrency)) as pool:
            for result, error in pool.map(work, pending):
                if error is not None:
                    log.error("%s", error)
                    result.update(status="failed", reason=f"LlmError:{error.kind}", detail=str(error))
                    result.pop("record", None)


def run_pipeline(config: PipelineConfig) -> ExitReport:
    """Annotate every MIDI file under ``config.input_dir``.

    Records and rejects are rewritten sorted by file id, so the output does
    not depend on worker count or scheduling.  With ``config.resume`` set,
    files whose content hash matches the manifest are skipped.
    """
    input_dir = Path(config.input_dir)
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory {input_dir} does not exist")
    output = Path(config.output)
    _check_writable(output)
    rejects_path = sibling(output, ".rejects.jsonl")
    manifest_path = config.manifest_path

    records: dict[str, dict[str, Any]] = {}
    rejects: dict[str, dict[str, Any]] = {}
    manifest: dict[str, dict[str, str]] = {}
    if config.resume is not None and manifest_path.exists():
        manifest = json.loads(manifest_path.read_text("utf-8"))
        if output.exists():
            records = {r["file_id"]: r for r in read_jsonl(output)}
        if rejects_path.exists():
            rejects = {r["file_id"]: r for r in read_jsonl(rejects_path)}

    files = discover(input_dir)
    report = ExitReport(discovered=len(files))
    live = {file_id for file_id, _ in files}
    records = {k: v for k, v in records.items() if k in live}
    rejects = {k: v for k, v in rejects.items() if k in live}
    manifest = {k: v for k, v in manifest.items() if k in live}

    tasks = []
    template = config.captions and config.mode == "template"
    for file_id, path in files:
        entry = manifest.get(file_id)
        if entry is not None and (file_id in records or file_id in rejects):
            try:
                digest = content_hash(path.read_bytes())
            except OSError:
                digest = None
            if digest == entry.get("hash"):
                report.skipped += 1
                continue
        sidecar = input_dir / (file_id + SIDECAR_SUFFIX)
        tasks.append(FileTask(str(path), file_id, path.relative_to(input_dir).as_posix(), str(sidecar),
                              config.min_duration, config.max_duration, template, config.seed,
                              str(config.merge_table) if config.merge_table else None))

    results = _run_tasks(tasks, config.jobs)
    if config.captions and config.mode == "llm":
        _caption_llm(results, config)

    for result in results:
        file_id = result["file_id"]
        records.pop(file_id, None)
        rejects.pop(file_id, None)
        manifest.pop(file_id, None)
        if result["status"] == "ok":
            records[file_id] = result["record"]
            report.processed += 1
        else:
            rejects[file_id] = {k: result.get(k) for k in ("file_id", "file_path", "reason", "detail")}
            if result["status"] == "failed":
                report.failed += 1
                continue  # not recorded in the manifest, so a resumed run retries it
            report.rejected += 1
        if result.get("hash"):
            manifest[file_id] = {"hash": result["hash"], "status": result["status"]}

    ordered = [records[k] for k in sorted(records)]
    _write_atomic(output, _jsonl(ordered))
    _write_atomic(rejects_path, _jsonl(rejects[k] for k in sorted(rejects)))
    _write_atomic(manifest_path, json.dumps(dict(sorted(manifest.items())), indent=1) + "\n")
    if config.write_stats:
        stats = emit_stats(ordered, (rejects[k]["reason"] for k in sorted(rejects)))
        write_stats(stats, output, config.stats_threshold)
    log.info("%s", report)
    return report


def write_stats(stats: CorpusStats, output: Path, threshold: int = 0) -> tuple[Path, Path]:
    json_path = sibling(output, ".stats.json")
    csv_path = sibling(output, ".stats.csv")
    _write_atomic(json_path, json.dumps(stats.to_dict(), indent=2, ensure_ascii=False) + "\n")
    _write_atomic(csv_path, stats.render_csv(threshold))
    return json_path, csv_path
