import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosmae.errors import ConfigError, FormatError
from cosmae.io import (
    MetricsLog, decode_tensor, encode_tensor, load_manifest, manifest_to_json, parse_manifest, read_metrics,
    read_tensor, write_tensor,
)


def test_tensor_roundtrip(tmp_path, rng):
    a = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "a.f32t", a)
    b = read_tensor(tmp_path / "a.f32t")
    assert b.dtype == np.float32 and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(shape=st.lists(st.integers(0, 4), min_size=0, max_size=4))
def test_tensor_roundtrip_any_shape(shape):
    a = np.random.default_rng(len(shape)).standard_normal(shape).astype(np.float32)
    b = decode_tensor(encode_tensor(a))
    assert b.shape == a.shape and a.tobytes() == b.tobytes()


def test_scalar_layout():
    buf = encode_tensor(np.float32(1.5))
    assert len(buf) == 9
    assert buf == b"F32T" + b"\x00" + struct.pack("<f", 1.5)
    assert decode_tensor(buf).shape == ()


def test_little_endian_layout():
    buf = encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[4] == 2
    assert struct.unpack("<II", buf[5:13]) == (1, 3)
    assert struct.unpack("<3f", buf[13:]) == (1.0, 2.0, 3.0)


def test_truncated_payload_names_byte_counts():
    buf = encode_tensor(np.zeros((2, 3), np.float32))[:-4]
    with pytest.raises(FormatError, match=r"20 bytes, expected 24"):
        decode_tensor(buf)


def test_bad_magic_and_short_header():
    with pytest.raises(FormatError, match="offset 0"):
        decode_tensor(b"XXXX\x00\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        decode_tensor(b"F32T\x02\x01\x00")
    with pytest.raises(FormatError):
        read_tensor("/nonexistent/file.f32t")


MANIFEST = """{
  "tasks": [
    {"task_id": 1, "train": "t1/train.f32t", "val": "t1/val.f32t"},
    {"task_id": 2, "train": "t2/train.f32t", "epochs": 3}
  ],
  "eval": {"train_images": "e/a", "train_labels": "e/b", "test_images": "e/c", "test_labels": "e/d"}
}
"""


def test_manifest_roundtrip(tmp_path):
    (tmp_path / "m.json").write_text(MANIFEST)
    m = load_manifest(tmp_path / "m.json")
    assert [t.task_id for t in m.tasks] == [1, 2]
    assert m.tasks[1].epochs == 3
    assert m.resolve("t1/train.f32t") == tmp_path / "t1/train.f32t"
    again = parse_manifest(manifest_to_json(m), root=m.root)
    assert again == m


@pytest.mark.parametrize("mutate,pattern", [
    (lambda d: d["tasks"][1].update(task_id=1), r":4: task ids must strictly increase"),
    (lambda d: d["tasks"][0].update(task_id=2, extra=1), r":3: tasks\[0\] has unknown keys"),
    (lambda d: d["tasks"][1].update(epochs=0), r":4: tasks\[1\].epochs"),
    (lambda d: d.update(tasks=[]), "non-empty"),
    (lambda d: d.update(other=1), "unknown top-level"),
    (lambda d: d["eval"].pop("test_labels"), "'eval' needs keys"),
])
def test_manifest_errors_are_located(mutate, pattern):
    doc = json.loads(MANIFEST)
    mutate(doc)
    # one task per line: line 1 "{", line 2 "tasks", tasks from line 3
    rest = {k: v for k, v in doc.items() if k != "tasks"}
    text = '{\n"tasks": [\n' + ",\n".join(json.dumps(t) for t in doc["tasks"]) + "\n]"
    text += "".join(f",\n{json.dumps(k)}: {json.dumps(v)}" for k, v in rest.items()) + "\n}"
    with pytest.raises(ConfigError, match=pattern):
        parse_manifest(text, "m.json")


def test_manifest_invalid_json_line():
    with pytest.raises(ConfigError, match=r"m.json:3: invalid JSON"):
        parse_manifest('{\n "tasks": [\n  {"task_id": 1,,}\n]}', "m.json")


def test_metrics_log_append_only(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    log.append({"b": 1, "a": 2})
    log.append({"epoch": "eval", "micro_map": 0.5})
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert lines[0] == '{"a": 2, "b": 1}'
    assert read_metrics(tmp_path / "m.jsonl")[1]["epoch"] == "eval"
    (tmp_path / "m.jsonl").write_text(lines[0] + "\nnot json\n")
    with pytest.raises(FormatError, match=":2:"):
        read_metrics(tmp_path / "m.jsonl")
