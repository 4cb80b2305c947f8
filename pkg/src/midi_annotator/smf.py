"""Standard MIDI File reading, writing and preprocessing.

Only formats 0 and 1 with a ticks-per-quarter division are accepted.  The
parser is strict about structure (chunk lengths, variable-length quantities,
status bytes) and returns a :class:`MidiDocument` or raises
:class:`ParseError`; it never raises anything else on arbitrary input.
"""
from __future__ import annotations

import bisect
import enum
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, Union

DEFAULT_US_PER_QUARTER = 500_000
DRUM_CHANNEL = 9  # channel 10 when counted from 1

META_END_OF_TRACK = 0x2F
META_SET_TEMPO = 0x51
META_TIME_SIGNATURE = 0x58


class ParseErrorKind(str, enum.Enum):
    MISSING_HEADER = "MissingHeader"
    BAD_CHUNK_LENGTH = "BadChunkLength"
    UNSUPPORTED_FORMAT = "UnsupportedFormat"
    TRUNCATED_EVENT = "TruncatedEvent"
    BAD_VAR_LEN = "BadVarLen"
    BAD_STATUS = "BadStatus"


class ParseError(Exception):
    """Structural problem in an SMF byte stream, located by byte offset."""

    def __init__(self, kind: ParseErrorKind, offset: int, message: str = ""):
        self.kind = kind
        self.offset = offset
        self.message = message
        text = f"{kind.value} at byte {offset}"
        if message:
            text += f": {message}"
        super().__init__(text)


# -- event model ------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class NoteOn:
    channel: int
    pitch: int
    velocity: int


@dataclass(frozen=True, slots=True)
class NoteOff:
    channel: int
    pitch: int


@dataclass(frozen=True, slots=True)
class ProgramChange:
    channel: int
    program: int


@dataclass(frozen=True, slots=True)
class SetTempo:
    us_per_quarter: int


@dataclass(frozen=True, slots=True)
class TimeSignature:
    numerator: int
    denominator_power: int

    @property
    def denominator(self) -> int:
        return 1 << self.denominator_power


@dataclass(frozen=True, slots=True)
class Other:
    """Any event the feature extractors ignore, kept verbatim for writing.

    ``meta_type`` is set only for meta events (status 0xFF).
    """

    status: int
    meta_type: int | None = None
    data: bytes = b""

    @property
    def is_end_of_track(self) -> bool:
        return self.status == 0xFF and self.meta_type == META_END_OF_TRACK


Event = Union[NoteOn, NoteOff, ProgramChange, SetTempo, TimeSignature, Other]

END_OF_TRACK = Other(0xFF, META_END_OF_TRACK)


@dataclass(frozen=True, slots=True)
class TimedEvent:
    tick: int
    payload: Event


@dataclass(frozen=True)
class Track:
    events: tuple[TimedEvent, ...] = ()

    @property
    def end_tick(self) -> int:
        return self.events[-1].tick if self.events else 0


class TempoMap:
    """Piecewise-linear tick to seconds conversion.

    Ticks before the first explicit tempo use the 120 BPM default.
    """

    def __init__(self, entries: Sequence[tuple[int, int]], ticks_per_quarter: int):
        self.ticks_per_quarter = ticks_per_quarter
        self._ticks = [t for t, _ in entries]
        self._tempi = [us for _, us in entries]
        self._offsets: list[float] = []
        prev_tick, prev_us, elapsed = 0, DEFAULT_US_PER_QUARTER, 0.0
        for tick, us in entries:
            elapsed += (tick - prev_tick) * prev_us / (1e6 * ticks_per_quarter)
            self._offsets.append(elapsed)
            prev_tick, prev_us = tick, us

    def seconds(self, tick: int | float) -> float:
        i = bisect.bisect_right(self._ticks, tick) - 1
        if i < 0:
            return tick * DEFAULT_US_PER_QUARTER / (1e6 * self.ticks_per_quarter)
        return self._offsets[i] + (tick - self._ticks[i]) * self._tempi[i] / (
            1e6 * self.ticks_per_quarter
        )


@dataclass(frozen=True)
class MidiDocument:
    format: int
    ticks_per_quarter: int
    tracks: tuple[Track, ...]
    tempo_map: tuple[tuple[int, int], ...]
    duration_seconds: float

    @classmethod
    def build(cls, format: int, ticks_per_quarter: int, tracks: Iterable[Track]) -> MidiDocument:
        """Assemble a document, deriving the tempo map and duration from the events."""
        tracks = tuple(tracks)
        tempo_map = build_tempo_map(tracks)
        end = max((t.end_tick for t in tracks), default=0)
        duration = TempoMap(tempo_map, ticks_per_quarter).seconds(end)
        return cls(format, ticks_per_quarter, tracks, tempo_map, duration)

    @cached_property
    def timing(self) -> TempoMap:
        return TempoMap(self.tempo_map, self.ticks_per_quarter)

    def seconds(self, tick: int | float) -> float:
        return self.timing.seconds(tick)

    def iter_events(self) -> list[tuple[int, int, int, Event]]:
        """All events as ``(tick, track_index, event_index, payload)`` in timeline order."""
        merged = [
            (ev.tick, ti, ei, ev.payload)
            for ti, track in enumerate(self.tracks)
            for ei, ev in enumerate(track.events)
        ]
        merged.sort(key=lambda item: item[:3])
        return merged


def build_tempo_map(tracks: Sequence[Track]) -> tuple[tuple[int, int], ...]:
    """Sorted ``(tick, us_per_quarter)`` pairs; at a shared tick the later event wins."""
    found = [
        (ev.tick, ti, ei, ev.payload.us_per_quarter)
        for ti, track in enumerate(tracks)
        for ei, ev in enumerate(track.events)
        if isinstance(ev.payload, SetTempo)
    ]
    found.sort()
    by_tick: dict[int, int] = {}
    for tick, _, _, us in found:
        by_tick[tick] = us
    return tuple(by_tick.items())


# -- parsing ----------------------------------------------------------------


def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    start = pos
    value = 0
    for _ in range(4):
        if pos >= end:
            raise ParseError(ParseErrorKind.TRUNCATED_EVENT, pos, "variable-length quantity")
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise ParseError(ParseErrorKind.BAD_VAR_LEN, start, "more than 4 bytes")


def _parse_track(data: bytes, pos: int, end: int) -> Track:
    events: list[TimedEvent] = []
    append = events.append
    tick = 0
    running: int | None = None
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise ParseError(ParseErrorKind.TRUNCATED_EVENT, pos, "missing status byte")
        status = data[pos]
        if status < 0x80:
            if running is None:
                raise ParseError(ParseErrorKind.BAD_STATUS, pos, "data byte without running status")
            status = running
        else:
            pos += 1

        if status < 0xF0:
            running = status
            kind = status & 0xF0
            channel = status & 0x0F
            size = 1 if kind in (0xC0, 0xD0) else 2
            if pos + size > end:
                raise ParseError(ParseErrorKind.TRUNCATED_EVENT, pos, "channel message")
            d1 = data[pos]
            d2 = data[pos + 1] if size == 2 else 0
            if (d1 | d2) & 0x80:
                raise ParseError(ParseErrorKind.BAD_STATUS, pos, "status byte inside message data")
            pos += size
            if kind == 0x90 and d2:
                append(TimedEvent(tick, NoteOn(channel, d1, d2)))
            elif kind == 0x90 or kind == 0x80:
                append(TimedEvent(tick, NoteOff(channel, d1)))
            elif kind == 0xC0:
                append(TimedEvent(tick, ProgramChange(channel, d1)))
            else:
                append(TimedEvent(tick, Other(status, None, data[pos - size:pos])))
        elif status == 0xFF:
            if pos >= end:
                raise ParseError(ParseErrorKind.TRUNCATED_EVENT, pos, "meta type")
            meta_type = data[pos]
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise ParseError(ParseErrorKind.TRUNCATED_EVENT, pos, "meta payload")
            body = data[pos:pos + length]
            pos += length
            if meta_type == META_SET_TEMPO and length == 3:
                us = int.from_bytes(body, "big")
                append(TimedEvent(tick, SetTempo(us) if us > 0 else Other(0xFF, meta_type, body)))
            elif meta_type == META_TIME_SIGNATURE and length >= 2 and body[0] >= 1 and body[1] <= 5:
                append(TimedEvent(tick, TimeSignature(body[0], body[1])))
            elif meta_type == META_END_OF_TRACK:
                append(TimedEvent(tick, END_OF_TRACK))
                break
            else:
                append(TimedEvent(tick, Other(0xFF, meta_type, body)))
        elif status == 0xF0 or status == 0xF7:
            length, pos = _read_varlen(data, pos, end)
            if pos + length > end:
                raise ParseError(ParseErrorKind.TRUNCATED_EVENT, pos, "sysex payload")
            append(TimedEvent(tick, Other(status, None, data[pos:pos + length])))
            pos += length
        else:
            raise ParseError(ParseErrorKind.BAD_STATUS, pos - 1, f"status 0x{status:02X} not allowed in a file")
    return Track(tuple(events))


def parse_smf(data: bytes) -> MidiDocument:
    """Decode SMF bytes into a :class:`MidiDocument`.

    Delta times become absolute ticks and running status is honoured.
    Non-``MTrk`` chunks are skipped; bytes after the declared number of
    tracks are ignored.
    """
    data = bytes(data)
    size = len(data)
    if data[:4] != b"MThd":
        raise ParseError(ParseErrorKind.MISSING_HEADER, 0, "expected 'MThd'")
    if size < 8:
        raise ParseError(ParseErrorKind.BAD_CHUNK_LENGTH, 4, "header length missing")
    header_len = int.from_bytes(data[4:8], "big")
    if header_len < 6 or 8 + header_len > size:
        raise ParseError(ParseErrorKind.BAD_CHUNK_LENGTH, 4, f"header length {header_len}")
    fmt = int.from_bytes(data[8:10], "big")
    ntracks = int.from_bytes(data[10:12], "big")
    division = int.from_bytes(data[12:14], "big")
    if fmt not in (0, 1):
        raise ParseError(ParseErrorKind.UNSUPPORTED_FORMAT, 8, f"format {fmt}")
    if division & 0x8000 or division == 0:
        raise ParseError(ParseErrorKind.UNSUPPORTED_FORMAT, 12, f"division 0x{division:04X}")

    pos = 8 + header_len
    tracks: list[Track] = []
    while len(tracks) < ntracks and pos < size:
        if pos + 8 > size:
            raise ParseError(ParseErrorKind.BAD_CHUNK_LENGTH, pos, "incomplete chunk header")
        chunk_type = data[pos:pos + 4]
        length = int.from_bytes(data[pos + 4:pos + 8], "big")
        start = pos + 8
        if start + length > size:
            raise ParseError(ParseErrorKind.BAD_CHUNK_LENGTH, pos + 4, f"chunk length {length}")
        if chunk_type == b"MTrk":
            tracks.append(_parse_track(data, start, start + length))
        pos = start + length
    return MidiDocument.build(fmt, division, tracks)


def read_midi(path: str | Path) -> MidiDocument:
    return parse_smf(Path(path).read_bytes())


# -- writing ----------------------------------------------------------------


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _encode(payload: Event) -> bytes:
    if isinstance(payload, NoteOn):
        return bytes((0x90 | payload.channel, payload.pitch, payload.velocity))
    if isinstance(payload, NoteOff):
        return bytes((0x80 | payload.channel, payload.pitch, 64))
    if isinstance(payload, ProgramChange):
        return bytes((0xC0 | payload.channel, payload.program))
    if isinstance(payload, SetTempo):
        return b"\xff\x51\x03" + payload.us_per_quarter.to_bytes(3, "big")
    if isinstance(payload, TimeSignature):
        return bytes((0xFF, 0x58, 4, payload.numerator, payload.denominator_power, 24, 8))
    if payload.status == 0xFF:
        return bytes((0xFF, payload.meta_type)) + _varlen(len(payload.data)) + payload.data
    if payload.status in (0xF0, 0xF7):
        return bytes((payload.status,)) + _varlen(len(payload.data)) + payload.data
    return bytes((payload.status,)) + payload.data


def write_smf(doc: MidiDocument) -> bytes:
    """Serialize a document without running status; End of Track is added when missing."""
    chunks = [b"MThd", (6).to_bytes(4, "big"),
              doc.format.to_bytes(2, "big"),
              len(doc.tracks).to_bytes(2, "big"),
              doc.ticks_per_quarter.to_bytes(2, "big")]
    for track in doc.tracks:
        body = bytearray()
        last = 0
        for ev in track.events:
            body += _varlen(ev.tick - last)
            body += _encode(ev.payload)
            last = ev.tick
        if not (track.events and isinstance(track.events[-1].payload, Other)
                and track.events[-1].payload.is_end_of_track):
            body += b"\x00\xff\x2f\x00"
        chunks += [b"MTrk", len(body).to_bytes(4, "big"), bytes(body)]
    return b"".join(chunks)


# -- preprocessing ----------------------------------------------------------


def sanitize(doc: MidiDocument) -> MidiDocument:
    """Close never-ending notes at the end of their track.

    Each NoteOff resolves the oldest open NoteOn with the same channel and
    pitch.  Notes still open when the track ends get a NoteOff at the track's
    final tick, placed before a trailing End of Track.  Already well-paired
    documents are returned unchanged (the same object).
    """
    new_tracks = []
    changed = False
    for track in doc.tracks:
        open_notes: dict[tuple[int, int], int] = {}
        order: list[tuple[int, int]] = []
        for ev in track.events:
            p = ev.payload
            if isinstance(p, NoteOn):
                key = (p.channel, p.pitch)
                open_notes[key] = open_notes.get(key, 0) + 1
                order.append(key)
            elif isinstance(p, NoteOff):
                key = (p.channel, p.pitch)
                if open_notes.get(key):
                    open_notes[key] -= 1
                    order.remove(key)
        if not order:
            new_tracks.append(track)
            continue
        changed = True
        end = track.end_tick
        closing = [TimedEvent(end, NoteOff(ch, pitch)) for ch, pitch in order]
        events = list(track.events)
        if events and isinstance(events[-1].payload, Other) and events[-1].payload.is_end_of_track:
            events[-1:-1] = closing
        else:
            events.extend(closing)
        new_tracks.append(Track(tuple(events)))
    if not changed:
        return doc
    return MidiDocument(doc.format, doc.ticks_per_quarter, tuple(new_tracks),
                        doc.tempo_map, doc.duration_seconds)


@dataclass(frozen=True)
class Note:
    channel: int
    pitch: int
    velocity: int
    start_tick: int
    end_tick: int
    start: float
    end: float
    track: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def is_drum(self) -> bool:
        return self.channel == DRUM_CHANNEL


def collect_notes(doc: MidiDocument) -> list[Note]:
    """Pair NoteOn/NoteOff events into notes with start/end in ticks and seconds.

    Pairing is FIFO per track, channel and pitch.  Notes left open are closed
    at the track end, as :func:`sanitize` would.  Result is ordered by start
    tick, then track, then position in the track.
    """
    seconds = doc.timing.seconds
    found: list[tuple[int, int, int, Note]] = []
    for ti, track in enumerate(doc.tracks):
        pending: dict[tuple[int, int], deque] = {}
        for ei, ev in enumerate(track.events):
            p = ev.payload
            if isinstance(p, NoteOn):
                pending.setdefault((p.channel, p.pitch), deque()).append((ev.tick, ei, p.velocity))
            elif isinstance(p, NoteOff):
                queue = pending.get((p.channel, p.pitch))
                if queue:
                    start, ei0, vel = queue.popleft()
                    found.append((start, ti, ei0, Note(p.channel, p.pitch, vel, start, ev.tick,
                                                       seconds(start), seconds(ev.tick), ti)))
        end = track.end_tick
        for (channel, pitch), queue in pending.items():
            for start, ei0, vel in queue:
                found.append((start, ti, ei0, Note(channel, pitch, vel, start, end,
                                                   seconds(start), seconds(end), ti)))
    found.sort(key=lambda item: item[:3])
    return [item[3] for item in found]


# -- duration filter --------------------------------------------------------

MIN_DURATION_S = 3.0
MAX_DURATION_S = 900.0


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None


ACCEPT = Verdict(True)


def check_duration(seconds: float, min_s: float = MIN_DURATION_S, max_s: float = MAX_DURATION_S) -> Verdict:
    if not min_s < max_s:
        raise ValueError(f"min_s ({min_s}) must be below max_s ({max_s})")
    if seconds < min_s:
        return Verdict(False, "TooShort")
    if seconds > max_s:
        return Verdict(False, "TooLong")
    return ACCEPT


def duration_filter(doc: MidiDocument, min_s: float = MIN_DURATION_S,
                    max_s: float = MAX_DURATION_S) -> Verdict:
    """Accept iff ``min_s <= duration <= max_s`` (both bounds inclusive)."""
    return check_duration(doc.duration_seconds, min_s, max_s)
