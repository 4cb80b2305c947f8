import json
import random
import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midi_annotator.captions import FeatureRecord
from midi_annotator.dataset import (
    TEMPO_BUCKETS, CorpusStats, FileTask, MalformedSidecar, PipelineConfig, content_hash, discover,
    emit_stats, ingest_sidecar_tags, parse_sidecar, process_file, read_jsonl, run_pipeline, select_top,
    tempo_bucket,
)

from helpers import random_record, write_corpus


def _tags(confs, prefix="t"):
    return [{"tag": f"{prefix}{i}", "confidence": c} for i, c in enumerate(confs)]


class TestSidecar:
    def test_top_two_genres(self, tmp_path):
        path = tmp_path / "a.tags.json"
        path.write_text(json.dumps({"genres": _tags([0.6, 0.9, 0.2, 0.7])}))
        assert ingest_sidecar_tags(path).genres == (("t1", 0.9), ("t3", 0.7))

    def test_top_five_moods(self):
        tags = parse_sidecar({"moods": _tags([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])})
        assert [c for _, c in tags.moods] == [0.7, 0.6, 0.5, 0.4, 0.3]

    def test_missing_file(self, tmp_path):
        tags = ingest_sidecar_tags(tmp_path / "nope.tags.json")
        assert tags.genres == () and tags.moods == ()

    @pytest.mark.parametrize("text", ["{bad json", "[1, 2]", '{"genres": [{"tag": "x", "confidence": 2}]}',
                                      '{"genres": [{"tag": "", "confidence": 0.2}]}', '{"moods": 3}'])
    def test_malformed_treated_as_missing(self, tmp_path, text):
        path = tmp_path / "a.tags.json"
        path.write_text(text)
        assert ingest_sidecar_tags(path).genres == ()

    def test_unreadable_treated_as_missing(self, tmp_path):
        (tmp_path / "dir.tags.json").mkdir()
        (tmp_path / "bin.tags.json").write_bytes(b"\xff\xfe\x00")
        assert ingest_sidecar_tags(tmp_path / "dir.tags.json").moods == ()
        assert ingest_sidecar_tags(tmp_path / "bin.tags.json").moods == ()

    def test_malformed_raises_from_parser(self):
        with pytest.raises(MalformedSidecar):
            parse_sidecar({"genres": [{"tag": "rock", "confidence": True}]})

    def test_alternative_shapes(self):
        tags = parse_sidecar({"genres": {"rock": 0.3, "pop": 0.8}, "moods": [["calm", 0.4]]})
        assert tags.genres == (("pop", 0.8), ("rock", 0.3))
        assert tags.moods == (("calm", 0.4),)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=5).filter(str.strip), st.floats(0, 1)), max_size=20),
       st.integers(0, 8))
def test_select_top_property(tags, limit):
    top = select_top(tags, limit)
    assert len(top) == min(limit, len(tags))
    confs = [c for _, c in top]
    assert confs == sorted(confs, reverse=True)
    # nothing left out beats anything kept
    rest = list(tags)
    for item in top:
        rest.remove(item)
    if top and rest:
        assert max(c for _, c in rest) <= min(confs)


class TestStats:
    def _rec(self, bpm, ts="4/4", genres=(), instruments=()):
        return {"key": "C major", "time_signature": ts, "tempo_bpm": bpm, "genres": list(genres),
                "moods": [], "instruments": list(instruments)}

    def test_time_signatures(self):
        stats = emit_stats([self._rec(100)] * 3)
        assert dict(stats.timesig_hist) == {"4/4": 3}

    def test_tempo_buckets(self):
        stats = emit_stats([self._rec(120), self._rec(120), self._rec(65)])
        assert {k: v for k, v in stats.tempo_hist.items() if v} == {"120-129": 2, "60-69": 1}

    def test_empty(self):
        stats = emit_stats([])
        assert stats.n_processed == stats.n_rejected == 0
        assert all(v == 0 for v in stats.tempo_hist.values())
        assert set(stats.tempo_hist) == set(TEMPO_BUCKETS)

    @pytest.mark.parametrize("bpm,bucket", [(0.5, "0-9"), (9.99, "0-9"), (10, "10-19"), (299.99, "290-299"),
                                            (300, "300+"), (512, "300+")])
    def test_bucket_edges(self, bpm, bucket):
        assert tempo_bucket(bpm) == bucket

    def test_primary_and_secondary_genres(self):
        stats = emit_stats([self._rec(90, genres=["rock", "pop"]), self._rec(90, genres=["pop"])])
        assert stats.genre_hist["primary"] == {"rock": 1, "pop": 1}
        assert stats.genre_hist["secondary"] == {"pop": 1}

    def test_threshold_applies_only_when_rendering(self):
        stats = emit_stats([self._rec(90, instruments=["piano"])] * 3 + [self._rec(90, instruments=["harp"])])
        csv_text = stats.render_csv(threshold=1)
        assert "instrument,piano,3" in csv_text and "harp" not in csv_text
        assert stats.instrument_hist["harp"] == 1
        assert "harp" not in stats.render_text(threshold=1)

    def test_rejects_counted(self):
        stats = emit_stats([], ["TooShort", "TooShort", "NoNotes"])
        assert stats.n_rejected == 3 and stats.reject_reasons == {"TooShort": 2, "NoNotes": 1}

    def test_accepts_feature_records(self):
        rec = random_record(random.Random(1))
        assert emit_stats([rec]).key_hist == {rec.key.name: 1}


def test_histogram_totals_property():
    rng = random.Random(5)
    records = [random_record(rng).to_dict() for _ in range(300)]
    stats = emit_stats(records)
    assert sum(stats.tempo_hist.values()) == sum(stats.key_hist.values()) == sum(stats.timesig_hist.values()) == 300
    assert sum(stats.instrument_hist.values()) == sum(len(r["instruments"]) for r in records)
    assert sum(stats.genre_hist["primary"].values()) == sum(1 for r in records if r["genres"])
    assert sum(stats.genre_hist["secondary"].values()) == sum(1 for r in records if len(r["genres"]) > 1)
    assert sum(stats.mood_hist.values()) == sum(len(r["moods"]) for r in records)
    # order of accumulation does not matter
    rng.shuffle(records)
    assert emit_stats(records).to_dict() == stats.to_dict()


class TestProcessFile:
    def test_ok_record(self, tmp_path):
        (path,) = write_corpus(tmp_path, 1, seed=3, sidecars=False)
        result = process_file(FileTask(str(path), "x", "x.mid", str(tmp_path / "none"), template_captions=True))
        assert result["status"] == "ok"
        record = result["record"]
        assert list(record)[:2] == ["file_id", "file_path"]
        assert list(record)[-2:] == ["caption", "caption_source"]
        FeatureRecord.from_dict(record)
        assert record["caption_source"] == "template"
        assert result["hash"] == content_hash(path.read_bytes())

    def test_missing_file(self, tmp_path):
        result = process_file(FileTask(str(tmp_path / "gone.mid"), "gone", "gone.mid", ""))
        assert (result["status"], result["reason"]) == ("rejected", "ReadError")

    def test_garbage(self, tmp_path):
        path = tmp_path / "bad.mid"
        path.write_bytes(b"RIFF....")
        result = process_file(FileTask(str(path), "bad", "bad.mid", ""))
        assert result["reason"] == "ParseError:MissingHeader"

    def test_drums_only(self, tmp_path):
        from helpers import song
        path = tmp_path / "d.mid"
        path.write_bytes(song([(9, 36, i * 480, i * 480 + 240) for i in range(20)]))
        assert process_file(FileTask(str(path), "d", "d.mid", ""))["reason"] == "NoNotes"


def test_discover_ids(tmp_path):
    (tmp_path / "a" / "b").mkdir(parents=True)
    for name in ["a/b/x.mid", "a/y.MIDI", "z.mid", "a/notes.txt", "a/b/x.midi"]:
        (tmp_path / name).write_bytes(b"")
    ids = [fid for fid, _ in discover(tmp_path)]
    assert ids == sorted(ids)
    assert set(ids) == {"a/b/x", "a/b/x.midi", "a/y", "z"}


def config(tmp_path, **kw):
    kw.setdefault("jobs", 1)
    return PipelineConfig(input_dir=tmp_path / "in", output=tmp_path / "out" / "records.jsonl", **kw)


class TestPipeline:
    def test_short_files_rejected(self, tmp_path):
        write_corpus(tmp_path / "in", 10, seed=1, short={2, 7})
        report = run_pipeline(config(tmp_path))
        records = list(read_jsonl(tmp_path / "out" / "records.jsonl"))
        rejects = list(read_jsonl(tmp_path / "out" / "records.rejects.jsonl"))
        assert len(records) == 8 and [r["reason"] for r in rejects] == ["TooShort", "TooShort"]
        assert (report.discovered, report.processed, report.rejected) == (10, 8, 2)
        assert all(3 <= r["duration_s"] <= 900 for r in records)
        stats = json.loads((tmp_path / "out" / "records.stats.json").read_text())
        assert stats["n_processed"] == 8 and stats["reject_reasons"] == {"TooShort": 2}
        assert (tmp_path / "out" / "records.stats.csv").read_text().startswith("histogram,label,count")

    def test_resume_skips_everything(self, tmp_path):
        write_corpus(tmp_path / "in", 10, seed=1, short={2, 7})
        first = run_pipeline(config(tmp_path))
        out = tmp_path / "out" / "records.jsonl"
        before = out.read_bytes()
        manifest = tmp_path / "out" / "records.manifest.json"
        report = run_pipeline(config(tmp_path, resume=manifest))
        assert str(report) == "discovered: 10 processed: 0 rejected: 0 skipped: 10 failed: 0"
        assert out.read_bytes() == before
        assert first.processed == 8

    def test_resume_reprocesses_changed_file(self, tmp_path):
        paths = write_corpus(tmp_path / "in", 5, seed=2)
        run_pipeline(config(tmp_path))
        paths[3].write_bytes(write_corpus(tmp_path / "spare", 1, seed=99)[0].read_bytes())
        report = run_pipeline(config(tmp_path, resume=tmp_path / "out" / "records.manifest.json"))
        assert (report.processed, report.skipped) == (1, 4)

    def test_without_resume_everything_reruns(self, tmp_path):
        write_corpus(tmp_path / "in", 4, seed=2)
        run_pipeline(config(tmp_path))
        assert run_pipeline(config(tmp_path)).processed == 4

    def test_corrupt_file(self, tmp_path):
        write_corpus(tmp_path / "in", 10, seed=4, corrupt={5})
        report = run_pipeline(config(tmp_path))
        rejects = list(read_jsonl(tmp_path / "out" / "records.rejects.jsonl"))
        assert (report.processed, report.rejected) == (9, 1)
        assert rejects[0]["reason"].startswith("ParseError:")

    def test_removed_files_dropped_on_resume(self, tmp_path):
        paths = write_corpus(tmp_path / "in", 4, seed=2)
        run_pipeline(config(tmp_path))
        paths[0].unlink()
        run_pipeline(config(tmp_path, resume=tmp_path / "out" / "records.manifest.json"))
        assert len(list(read_jsonl(tmp_path / "out" / "records.jsonl"))) == 3

    def test_parallel_matches_serial(self, tmp_path):
        write_corpus(tmp_path / "in", 24, seed=6, short={3})
        run_pipeline(config(tmp_path, jobs=1))
        serial = (tmp_path / "out" / "records.jsonl").read_bytes()
        run_pipeline(PipelineConfig(input_dir=tmp_path / "in", output=tmp_path / "par.jsonl", jobs=3))
        assert (tmp_path / "par.jsonl").read_bytes() == serial

    def test_features_only(self, tmp_path):
        write_corpus(tmp_path / "in", 2, seed=2)
        run_pipeline(config(tmp_path, captions=False, write_stats=False))
        rec = next(read_jsonl(tmp_path / "out" / "records.jsonl"))
        assert rec["caption"] is None
        assert not (tmp_path / "out" / "records.stats.json").exists()

    def test_missing_input(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_pipeline(config(tmp_path))

    def test_template_mode_needs_no_network(self, tmp_path, monkeypatch):
        write_corpus(tmp_path / "in", 6, seed=8)

        def refuse(*args, **kwargs):
            raise AssertionError("network access attempted")

        monkeypatch.setattr(socket, "socket", refuse)
        monkeypatch.setattr(socket, "create_connection", refuse)
        monkeypatch.setattr(socket, "getaddrinfo", refuse)
        report = run_pipeline(config(tmp_path))
        assert report.processed == 6


class TestLlmPipeline:
    def test_llm_mode_with_mock(self, tmp_path):
        from midi_annotator.llm import LLMEndpointConfig
        from mockserver import MockEndpoint, Reply

        write_corpus(tmp_path / "in", 3, seed=2)
        # the model never produces a valid caption, so every record falls back
        with MockEndpoint([Reply(200, text="Nope.")]) as srv:
            llm = LLMEndpointConfig(url=srv.url, model="mock", requests_per_minute=0)
            report = run_pipeline(config(tmp_path, mode="llm", llm=llm))
        assert report.processed == 3 and srv.count == 6
        assert {r["caption_source"] for r in read_jsonl(tmp_path / "out" / "records.jsonl")} == {"template"}

    def test_llm_failures_are_retried_on_resume(self, tmp_path):
        from midi_annotator.llm import LLMEndpointConfig
        from mockserver import MockEndpoint, Reply

        write_corpus(tmp_path / "in", 2, seed=2)
        manifest = tmp_path / "out" / "records.manifest.json"
        with MockEndpoint([Reply(401)]) as srv:
            llm = LLMEndpointConfig(url=srv.url, model="mock", requests_per_minute=0)
            report = run_pipeline(config(tmp_path, mode="llm", llm=llm, resume=manifest))
        assert report.failed == 2
        rejects = list(read_jsonl(tmp_path / "out" / "records.rejects.jsonl"))
        assert {r["reason"] for r in rejects} == {"LlmError:AuthFailed"}
        report = run_pipeline(config(tmp_path, resume=manifest))
        assert (report.processed, report.skipped) == (2, 0)
