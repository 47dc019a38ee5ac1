import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lane3d.errors import ChecksumMismatch, ParseError, ValidationError
from lane3d.geometry import default_camera
from lane3d.io import (parse_frame, read_frame_file, read_tensor, read_tensor_header, validate_config,
                       load_config, write_frame, write_tensor)
from lane3d.lanes import FrameRecord, Lane2D, Lane3D

DATA = Path(__file__).parent / "data"
CAM = {"fx": 400.0, "fy": 400.0, "cx": 240.0, "cy": 180.0, "pitch_rad": 0.04, "height_m": 1.5}


def minimal(**lane):
    l = {"points": [[0.0, 5.0, 0.0], [0.0, 10.0, 0.0]], "category": 1}
    l.update(lane)
    return {"camera": CAM, "lanes_3d": [l]}


def test_golden_round_trip_byte_identical():
    text = (DATA / "frame_golden.json").read_text()
    rec = parse_frame(text)
    assert len(rec.lanes_3d) == 6 and len(rec.lanes_2d) == 6
    assert rec.scene_tags.weather and rec.scene_tags.scene and rec.scene_tags.hours
    assert rec.extras["source"]["sensor"] == "front_camera"
    assert write_frame(rec) == text
    assert write_frame(read_frame_file(DATA / "frame_golden.json")) == text


def test_minimal_and_empty_frames():
    rec = parse_frame(json.dumps(minimal()))
    assert len(rec.lanes_3d) == 1 and rec.lanes_3d[0].visibility.all()
    empty = FrameRecord(default_camera())
    again = parse_frame(write_frame(empty))
    assert again.lanes_3d == [] and again.pose is None
    assert write_frame(again) == write_frame(empty)


def test_validation_errors():
    with pytest.raises(ValidationError):
        parse_frame(json.dumps(minimal(category=14)))
    with pytest.raises(ValidationError):
        parse_frame(json.dumps(minimal(category=True)))
    doc = minimal()
    doc["cipo"] = [{"level": 1, "box": [0, 0, 1, 1]}, {"level": 1, "box": [2, 2, 3, 3]}]
    with pytest.raises(ValidationError, match="level"):
        parse_frame(json.dumps(doc))
    doc = minimal()
    doc["camera"] = dict(CAM, height_m=-1.0)
    with pytest.raises(ValidationError):
        parse_frame(json.dumps(doc))


def test_parse_errors_name_line_and_field():
    text = json.dumps(minimal(), indent=2).replace('"category": 1', '"category": 1,,')
    with pytest.raises(ParseError) as e:
        parse_frame(text)
    assert e.value.line == next(i for i, l in enumerate(text.splitlines(), 1) if ",," in l)
    doc = minimal()
    del doc["lanes_3d"][0]["points"]
    with pytest.raises(ParseError) as e:
        parse_frame(json.dumps(doc))
    assert e.value.field == "lanes_3d[0].points"
    doc = minimal()
    del doc["camera"]["fx"]
    with pytest.raises(ParseError) as e:
        parse_frame(json.dumps(doc))
    assert e.value.field == "camera.fx"


def test_tensor_round_trip_and_corruption(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 5, 7)).astype(np.float32)
    p = tmp_path / "t.tensor"
    write_tensor(t, p, role="weights")
    back = read_tensor(p)
    assert back.dtype == np.float32 and back.tobytes() == t.tobytes()
    assert read_tensor_header(p)["role"] == "weights"
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(ChecksumMismatch):
        read_tensor(p)
    flipped = bytearray(raw)
    flipped[-1] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumMismatch):
        read_tensor(p)
    p.write_bytes(b"not a tensor\n")
    with pytest.raises(ParseError):
        read_tensor(p)
    write_tensor(np.zeros((0, 4)), p)
    assert read_tensor(p).shape == (0, 4)


def test_config_validation(tmp_path):
    assert validate_config({"seed": 3, "max_dist": 1, "scene": {"noise": 0.02}})["seed"] == 3
    for bad in ({"seeds": 1}, {"seed": 1.5}, {"seed": True}, {"scene": {"colour": 1}}, []):
        with pytest.raises(ValidationError):
            validate_config(bad)
    p = tmp_path / "c.json"
    p.write_text("{\n  \"seed\": \n}")
    with pytest.raises(ParseError) as e:
        load_config(p)
    assert e.value.line == 3


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), min_size=2, max_size=12), st.integers(0, 13),
       st.integers(0, 1000), st.sampled_from([None, 1, 2, 3, 4]), st.data())
def test_prop_serializer_inverts_parser(pts, cat, tid, slot, data):
    vis = data.draw(st.lists(st.booleans(), min_size=len(pts), max_size=len(pts)))
    l3 = Lane3D(np.array(pts), np.array(vis), cat, tid, slot)
    l2 = Lane2D(np.array(pts)[:, :2], np.array(vis), cat, tid)
    rec = FrameRecord(default_camera(), [l3], [l2], frame_id="f")
    text = write_frame(rec)
    back = parse_frame(text)
    assert back.lanes_3d[0] == l3 and back.lanes_2d[0] == l2
    assert write_frame(back) == text
