"""Fixture builders.  MIDI bytes are produced with mido, independent of our writer."""
from __future__ import annotations

import io

import mido

from midi_annotator.smf import parse_smf, sanitize


def to_bytes(mid: mido.MidiFile) -> bytes:
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()


def track_from_events(events) -> mido.MidiTrack:
    """``events``: iterable of (abs_tick, mido message); sorted stably by tick."""
    track = mido.MidiTrack()
    last = 0
    for tick, msg in sorted(events, key=lambda e: e[0]):
        track.append(msg.copy(time=tick - last))
        last = tick
    return track


def note_events(channel, pitch, start, end, velocity=80):
    return [(start, mido.Message("note_on", channel=channel, note=pitch, velocity=velocity)),
            (end, mido.Message("note_off", channel=channel, note=pitch, velocity=0))]


def song(notes, programs=(), tempo=None, tpq=480, time_signature=None, fmt=0, extra=()):
    """Build SMF bytes.

    ``notes``: (channel, pitch, start_tick, end_tick).  ``programs``:
    (tick, channel, program).  ``fmt=1`` puts meta events in track 0 and
    each channel in its own track.
    """
    meta = []
    if tempo is not None:
        meta.append((0, mido.MetaMessage("set_tempo", tempo=tempo)))
    if time_signature is not None:
        num, den = time_signature
        meta.append((0, mido.MetaMessage("time_signature", numerator=num, denominator=den)))
    meta.extend(extra)
    channel_events: dict[int, list] = {}
    for tick, ch, program in programs:
        channel_events.setdefault(ch, []).append((tick, mido.Message("program_change", channel=ch, program=program)))
    for ch, pitch, start, end in notes:
        channel_events.setdefault(ch, []).extend(note_events(ch, pitch, start, end))
    mid = mido.MidiFile(type=fmt, ticks_per_beat=tpq)
    if fmt == 0:
        # programs before note-offs before note-ons at equal ticks
        events = list(meta)
        for evs in channel_events.values():
            events.extend(evs)
        order = {"program_change": 0, "note_off": 1, "note_on": 2}
        events.sort(key=lambda e: (e[0], order.get(e[1].type, -1)))
        mid.tracks.append(track_from_events(events))
    else:
        mid.tracks.append(track_from_events(meta))
        for ch in sorted(channel_events):
            order = {"program_change": 0, "note_off": 1, "note_on": 2}
            evs = sorted(channel_events[ch], key=lambda e: (e[0], order[e[1].type]))
            mid.tracks.append(track_from_events(evs))
    return to_bytes(mid)


def doc_of(data: bytes):
    return sanitize(parse_smf(data))


def chord_song(chords, beats_each=4, tpq=480, repeats=1, channel=0, tempo=None):
    """Sustained block chords, one after another."""
    notes = []
    t = 0
    for _ in range(repeats):
        for pitches in chords:
            end = t + beats_each * tpq
            notes.extend((channel, p, t, end) for p in pitches)
            t = end
    return song(notes, tpq=tpq, tempo=tempo)


def scale_song(pitches, dur=480, tpq=480, channel=0):
    notes = [(channel, p, i * dur, (i + 1) * dur) for i, p in enumerate(pitches)]
    return song(notes, tpq=tpq)


PITCHES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]
WORDS = ["rock", "pop", "jazz", "ambient", "classical", "electronic", "folk", "calm", "happy",
         "dark", "epic", "melancholic", "energetic", "relaxing", "film", "dreamy", "hip-hop"]
INSTRUMENTS = ["piano", "drums", "acoustic guitar", "violin", "flute", "synth pad", "strings",
               "electric bass", "trumpet", "choir"]


def random_record(rng, file_id=None):
    """A plausible random FeatureRecord, used by property tests."""
    from midi_annotator.captions import FeatureRecord
    from midi_annotator.features import KeyEstimate, TimeSignatureEstimate

    def tags(k):
        picked = rng.sample(WORDS, k)
        return tuple((t, round(rng.random(), 4)) for t in picked)

    chords = None
    if rng.random() < 0.7:
        chords = tuple(rng.choice(PITCHES) + rng.choice(["", "m", "7", "maj7", "m7", "dim", "aug"])
                       for _ in range(rng.randint(3, 5)))
    return FeatureRecord(
        file_id=file_id or f"f{rng.randrange(10**6)}",
        key=KeyEstimate(rng.randrange(12), rng.choice(["major", "minor"]), round(rng.uniform(-1, 1), 4)),
        time_signature=TimeSignatureEstimate(rng.randint(1, 15), rng.choice([1, 2, 4, 8, 16, 32])),
        tempo_bpm=round(rng.uniform(20, 300), rng.choice([0, 2])),
        duration_s=round(rng.uniform(3, 900), 3),
        instruments=tuple(rng.sample(INSTRUMENTS, rng.randint(0, 5))),
        chord_pattern=chords,
        chord_pattern_count=rng.randint(1, 40) if chords else 0,
        genres=tags(rng.randint(0, 2)),
        moods=tags(rng.randint(0, 5)),
    )


PROGRESSIONS = [
    [(60, 64, 67), (67, 71, 74), (57, 60, 64), (65, 69, 72)],
    [(62, 65, 69), (67, 71, 74), (60, 64, 67)],
    [(57, 60, 64), (65, 69, 72), (60, 64, 67), (67, 71, 74), (64, 67, 71)],
    [(60, 64, 67, 70), (65, 69, 72), (67, 71, 74, 77)],
]


def synthetic_song(rng, seconds=None):
    """Random small multi-track song: a chord loop, a bass line, optional drums."""
    tpq = rng.choice([96, 240, 480])
    tempo = rng.randint(300_000, 1_000_000)
    if seconds is None:
        seconds = rng.uniform(4, 40)
    beats = max(1, int(seconds * 1_000_000 / tempo))
    prog = rng.choice(PROGRESSIONS)
    shift = rng.randint(-5, 6)
    per = rng.choice([1, 2, 4])
    notes = []
    for b in range(0, beats, per):
        chord = prog[(b // per) % len(prog)]
        end = min(b + per, beats)
        notes += [(0, p + shift, b * tpq, end * tpq) for p in chord]
        notes.append((1, chord[0] + shift - 24, b * tpq, end * tpq))
    if rng.random() < 0.6:
        notes += [(9, 36 + (b % 2) * 2, b * tpq, b * tpq + tpq // 2) for b in range(beats)]
    programs = [(0, 0, rng.choice([0, 4, 24, 48, 88])), (0, 1, rng.choice([32, 33, 36]))]
    ts = rng.choice([(4, 4), (3, 4), (6, 8), None])
    return song(notes, programs=programs, tempo=tempo, tpq=tpq, time_signature=ts, fmt=rng.choice([0, 1]))


def write_corpus(root, n, seed=0, short=(), corrupt=(), sidecars=True):
    """Write ``n`` songs as root/<group>/song_<i>.mid; indices in ``short`` last 1-2 s."""
    import json
    import random

    rng = random.Random(seed)
    paths = []
    for i in range(n):
        sub = root / f"g{i % 7}"
        sub.mkdir(parents=True, exist_ok=True)
        path = sub / f"song_{i:05d}.mid"
        data = synthetic_song(rng, seconds=rng.uniform(1.0, 2.0) if i in short else None)
        if i in corrupt:
            data = data[: len(data) // 2]
        path.write_bytes(data)
        if sidecars and rng.random() < 0.7:
            tags = {
                "genres": [{"tag": t, "confidence": round(rng.random(), 3)} for t in rng.sample(WORDS[:8], 3)],
                "moods": [{"tag": t, "confidence": round(rng.random(), 3)} for t in rng.sample(WORDS[6:], 7)],
            }
            path.with_name(path.stem + ".tags.json").write_text(json.dumps(tags))
        paths.append(path)
    return paths
