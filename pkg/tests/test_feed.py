import io
import json
import sys

import pytest

from navguard.feed import (
    FeedError,
    frame_to_json,
    generate_corpus,
    ingest_feed,
    ingest_process,
    labels_csv,
    labels_path_for,
    read_labels_csv,
    write_corpus,
)
from navguard.spatial import Region, annotate_stream, assign_region, classify_frame

GOOD = [
    '{"frame_id": 0, "timestamp_ms": 0, "source": "clip", "objects": []}',
    '{"frame_id": 1, "timestamp_ms": 33, "source": "clip", "objects": '
    '[{"class": "car", "conf": 0.9, "cx": 0.1, "cy": 0.3, "w": 0.4, "h": 0.4}]}',
]


def test_two_line_feed():
    frames = list(ingest_feed(GOOD))
    assert [f.frame_id for f in frames] == [0, 1]
    assert frames[1].detections[0].class_name == "car"
    assert frames[1].source_tag == "clip"


def test_blank_lines_skipped_and_file_handles():
    frames = list(ingest_feed(io.StringIO(GOOD[0] + "\n\n" + GOOD[1] + "\n")))
    assert len(frames) == 2


def test_round_trip():
    frames = list(ingest_feed(GOOD))
    assert list(ingest_feed([frame_to_json(f) for f in frames])) == frames


@pytest.mark.parametrize(
    "record, field",
    [
        ({"frame_id": 2, "timestamp_ms": 66, "objects": [{"class": "car", "conf": 0.9, "cx": 1.5, "cy": 0.3, "w": 0.1, "h": 0.1}]},
         "objects[0].cx"),
        ({"frame_id": 2, "timestamp_ms": 66, "objects": [{"class": "", "conf": 0.9, "cx": 0.5, "cy": 0.3, "w": 0.1, "h": 0.1}]},
         "objects[0].class"),
        ({"frame_id": 2, "timestamp_ms": 66, "objects": [{"class": "car", "cx": 0.5, "cy": 0.3, "w": 0.1, "h": 0.1}]},
         "objects[0].conf"),
        ({"frame_id": "2", "timestamp_ms": 66, "objects": []}, "frame_id"),
        ({"frame_id": 2, "timestamp_ms": -1, "objects": []}, "timestamp_ms"),
        ({"frame_id": 2, "timestamp_ms": 66}, "objects"),
        ({"frame_id": 1, "timestamp_ms": 66, "objects": []}, "frame_id"),
        ({"frame_id": 2, "timestamp_ms": 10, "objects": []}, "timestamp_ms"),
    ],
)
def test_errors_name_line_and_field(record, field):
    with pytest.raises(FeedError) as info:
        list(ingest_feed(GOOD + [json.dumps(record)]))
    assert info.value.line == 3 and info.value.field == field
    assert str(info.value).startswith(f"line 3: {field}")


def test_invalid_json_line():
    with pytest.raises(FeedError) as info:
        list(ingest_feed([GOOD[0], "{oops"]))
    assert info.value.line == 2


def test_ingest_process(tmp_path):
    feed = tmp_path / "f.ndjson"
    feed.write_text("\n".join(GOOD) + "\n")
    frames = list(ingest_process([sys.executable, "-c", f"print(open({str(feed)!r}).read(), end='')"]))
    assert len(frames) == 2
    with pytest.raises(RuntimeError):
        list(ingest_process([sys.executable, "-c", "import sys; sys.exit(3)"]))


# -- corpus ---------------------------------------------------------------------------


def test_seed1_counts(seed1_corpus):
    frames, labels = seed1_corpus
    assert len(frames) == 600
    assert sum(lab for _, lab in labels) == 120
    assert annotate_stream(frames) == labels


@pytest.mark.parametrize("seed, n, rate", [(2, 100, 0.0), (3, 97, 0.33), (4, 30, 1.0), (5, 0, 0.5)])
def test_corpus_labels_match_rules(seed, n, rate):
    frames, labels = generate_corpus(seed, n, rate)
    assert sum(lab for _, lab in labels) == int(n * rate)
    assert annotate_stream(frames) == labels


def test_corpus_margins(seed1_corpus):
    """Hazards clear the rule by a margin so compensation drift never flips a label."""
    frames, labels = seed1_corpus
    for f, (_, lab) in zip(frames, labels):
        for d in f.detections:
            r = assign_region(d)
            if r in (Region.LEFT, Region.RIGHT):
                assert d.area_fraction >= 0.14 or d.area_fraction <= 0.06
            assert not (0.24 < d.center_x < 0.26 or 0.74 < d.center_x < 0.76)
        assert classify_frame(f).is_anomaly == lab


def test_compensated_labels_equal_truth(seed1_corpus):
    frames, labels = seed1_corpus
    held = [frames[i - i % 5] for i in range(len(frames))]
    assert [classify_frame(h).is_anomaly for h in held] == [lab for _, lab in labels]


def test_corpus_rejects_bad_rate():
    with pytest.raises(ValueError):
        generate_corpus(1, 10, 1.5)


def test_write_corpus_deterministic(tmp_path):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    la = write_corpus(a, 1, 200, 0.2)
    lb = write_corpus(b, 1, 200, 0.2)
    assert a.read_bytes() == b.read_bytes()
    assert la.read_bytes() == lb.read_bytes()
    assert la == labels_path_for(a) == tmp_path / "a.labels.csv"
    assert read_labels_csv(la) == generate_corpus(1, 200, 0.2)[1]
    assert list(ingest_feed(a)) == generate_corpus(1, 200, 0.2)[0]


def test_labels_csv_format(tmp_path):
    text = labels_csv([(0, False), (1, True)])
    assert text == "frame_id,label\n0,0\n1,1\n"
    p = tmp_path / "bad.csv"
    p.write_text("id,lab\n")
    with pytest.raises(ValueError):
        read_labels_csv(p)
