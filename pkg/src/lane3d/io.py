"""On-disk formats.

Frame documents are canonical JSON (sorted keys, two-space indent, trailing
newline) so that parse followed by write reproduces the bytes of any file
written by ``write_frame``. Unknown top-level fields are carried through
untouched.

Tensor files hold one little-endian float32 array::

    LANE3D-TENSOR 1\\n
    {"byte_order": "little", "crc32": ..., "dtype": "float32", "role": ..., "shape": [...]}\\n
    <raw payload>
"""
from __future__ import annotations

import json
import math
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, DegenerateLane, ParseError, ValidationError
from .geometry import CameraParams
from .lanes import CipoObject, FrameRecord, Lane2D, Lane3D, Pose, SceneTags

TENSOR_MAGIC = b"LANE3D-TENSOR 1\n"
KNOWN_FIELDS = {"frame_id", "camera", "pose", "lanes_3d", "lanes_2d", "scene_tags", "cipo"}


def _num(x):
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError("non-finite number in document")
    return x


def _require(d, key, where):
    if not isinstance(d, dict):
        raise ParseError(f"expected an object for {where}", field=where)
    if key not in d:
        raise ParseError("missing required field", field=f"{where}.{key}" if where else key)
    return d[key]


def _int_field(v, name):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValidationError(f"{name} must be an integer, got {v!r}")
    return v


def _lane3d(d, i):
    where = f"lanes_3d[{i}]"
    pts = _require(d, "points", where)
    try:
        arr = np.array([[_num(c) for c in p] for p in pts], dtype=np.float64).reshape(-1, 3)
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad point list: {e}", field=f"{where}.points")
    vis = d.get("visibility")
    slot = d.get("importance_slot")
    try:
        return Lane3D(arr, None if vis is None else np.array(vis, bool),
                      _int_field(_require(d, "category", where), f"{where}.category"),
                      _int_field(d.get("track_id", 0), f"{where}.track_id"), slot)
    except DegenerateLane as e:
        raise ValidationError(f"{where}: {e}")


def _lane2d(d, i):
    where = f"lanes_2d[{i}]"
    pts = _require(d, "points", where)
    try:
        arr = np.array([[_num(c) for c in p] for p in pts], dtype=np.float64).reshape(-1, 2)
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad point list: {e}", field=f"{where}.points")
    vis = d.get("visibility")
    try:
        return Lane2D(arr, None if vis is None else np.array(vis, bool),
                      _int_field(_require(d, "category", where), f"{where}.category"),
                      _int_field(d.get("track_id", 0), f"{where}.track_id"))
    except DegenerateLane as e:
        raise ValidationError(f"{where}: {e}")


def frame_from_dict(doc: dict) -> FrameRecord:
    if not isinstance(doc, dict):
        raise ParseError("frame document must be an object")
    cam_rec = _require(doc, "camera", "")
    try:
        cam = CameraParams.from_record(cam_rec)
    except KeyError as e:
        raise ParseError("missing camera field", field=f"camera.{e.args[0]}")
    except ValueError as e:
        raise ValidationError(f"camera: {e}")
    pose = doc.get("pose")
    if pose is not None:
        pose = Pose(*(_num(_require(pose, k, "pose")) for k in ("x", "y", "yaw", "z")))
    tags = doc.get("scene_tags") or {}
    rec = FrameRecord(
        cam=cam,
        lanes_3d=[_lane3d(l, i) for i, l in enumerate(doc.get("lanes_3d", []))],
        lanes_2d=[_lane2d(l, i) for i, l in enumerate(doc.get("lanes_2d", []))],
        scene_tags=SceneTags(tags.get("weather"), tags.get("scene"), tags.get("hours")),
        cipo_objects=[CipoObject(_int_field(_require(c, "level", f"cipo[{i}]"), f"cipo[{i}].level"),
                                 tuple(_num(v) for v in _require(c, "box", f"cipo[{i}]")))
                      for i, c in enumerate(doc.get("cipo", []))],
        frame_id=str(doc.get("frame_id", "")),
        pose=pose,
        extras={k: v for k, v in doc.items() if k not in KNOWN_FIELDS},
    )
    return rec.validate()


def parse_frame(text: str) -> FrameRecord:
    """Parse and validate one frame document.

    Raises:
        ParseError: malformed JSON (with line number) or a missing field.
        ValidationError: a value outside its allowed range.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno)
    return frame_from_dict(doc)


def _f(x):
    # integral floats stay floats so the document type is stable
    return float(x)


def frame_to_dict(rec: FrameRecord) -> dict:
    doc = dict(rec.extras)
    doc.update({
        "frame_id": rec.frame_id,
        "camera": rec.cam.to_record(),
        "pose": None if rec.pose is None else
        {"x": _f(rec.pose.x), "y": _f(rec.pose.y), "yaw": _f(rec.pose.yaw), "z": _f(rec.pose.z)},
        "lanes_3d": [{"points": [[_f(c) for c in p] for p in l.points],
                      "visibility": [bool(v) for v in l.visibility],
                      "category": int(l.category), "track_id": int(l.track_id),
                      "importance_slot": l.importance_slot} for l in rec.lanes_3d],
        "lanes_2d": [{"points": [[_f(c) for c in p] for p in l.points],
                      "visibility": [bool(v) for v in l.visibility],
                      "category": int(l.category), "track_id": int(l.track_id)} for l in rec.lanes_2d],
        "scene_tags": {"weather": rec.scene_tags.weather, "scene": rec.scene_tags.scene,
                       "hours": rec.scene_tags.hours},
        "cipo": [{"level": int(c.level), "box": [_f(v) for v in c.box]} for c in rec.cipo_objects],
    })
    return doc


def dumps_canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_frame(rec: FrameRecord) -> str:
    """Canonical text of a frame record."""
    return dumps_canonical(frame_to_dict(rec))


def read_frame_file(path) -> FrameRecord:
    return parse_frame(Path(path).read_text())


def write_frame_file(rec: FrameRecord, path):
    Path(path).write_text(write_frame(rec))


# ---------------------------------------------------------------------------
# tensors


def write_tensor(t, path, role: str = "") -> None:
    arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
    payload = arr.tobytes()
    header = {"byte_order": "little", "crc32": zlib.crc32(payload), "dtype": "float32",
              "role": role, "shape": list(arr.shape)}
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_tensor_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.readline() != TENSOR_MAGIC:
        raise ParseError("not a tensor file (bad magic line)", line=1)
    try:
        header = json.loads(fh.readline())
    except json.JSONDecodeError as e:
        raise ParseError(f"bad tensor header: {e.msg}", line=2)
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise ValidationError("only little-endian float32 tensors are supported")
    return header


def read_tensor(path) -> np.ndarray:
    """Load a tensor file; raises ChecksumMismatch on a wrong payload size or CRC."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    shape = tuple(int(s) for s in header["shape"])
    if len(payload) != 4 * math.prod(shape):
        raise ChecksumMismatch(f"payload has {len(payload)} bytes, header implies {4 * math.prod(shape)}")
    if zlib.crc32(payload) != header["crc32"]:
        raise ChecksumMismatch("payload CRC32 does not match header")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


# ---------------------------------------------------------------------------
# configuration

CONFIG_SCHEMA = {
    "seed": int,
    "workers": int,
    "radius_px": float,
    "support_px": float,
    "max_dist": float,
    "coverage": float,
    "near_far_split": float,
    "iou_thresh": float,
    "scene": dict,
}
SCENE_KEYS = {"n_frames", "frame_step", "curvature", "curvature_rate", "hill", "density", "band",
              "noise", "n_objects", "annotation_range", "lane_offsets"}


def load_config(path) -> dict:
    """Read a JSON config; unknown keys or wrongly typed values raise ValidationError."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno)
    return validate_config(doc)


def validate_config(doc) -> dict:
    if not isinstance(doc, dict):
        raise ValidationError("config must be an object")
    for k, v in doc.items():
        if k not in CONFIG_SCHEMA:
            raise ValidationError(f"unknown config key {k!r}")
        want = CONFIG_SCHEMA[k]
        ok = isinstance(v, (int, float)) and not isinstance(v, bool) if want is float else isinstance(v, want)
        if not ok or (want is int and isinstance(v, bool)):
            raise ValidationError(f"config key {k!r} must be {want.__name__}")
    for k in doc.get("scene", {}):
        if k not in SCENE_KEYS:
            raise ValidationError(f"unknown scene key {k!r}")
    return doc
