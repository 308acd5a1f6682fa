"""Raw tensor files, task manifests and the metrics log.

Raw tensor layout (little-endian)::

    b"F32T" | u8 rank | rank x u32 dims | float32 payload

All writes go to a temporary file in the target directory and are renamed
into place.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

TENSOR_MAGIC = b"F32T"


_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype=np.float32)
    if a.ndim > 255:
        raise FormatError("rank above 255 cannot be stored")
    head = TENSOR_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f4").tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 5:
        raise FormatError(f"{source}: file too short for a tensor header ({len(buf)} bytes, need >= 5)")
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r} at byte offset 0, expected {TENSOR_MAGIC!r}")
    rank = buf[4]
    head = 5 + 4 * rank
    if len(buf) < head:
        raise FormatError(f"{source}: header truncated at byte offset {len(buf)}, expected {head} header bytes")
    dims = struct.unpack(f"<{rank}I", buf[5:head])
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    actual = len(buf) - head
    if actual != expected:
        raise FormatError(
            f"{source}: payload at byte offset {head} has {actual} bytes, expected {expected} for shape {dims}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor file {p}: {exc}") from None
    return decode_tensor(buf, str(p))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    train: str
    val: str | None = None
    epochs: int | None = None
    batch_size: int | None = None

    @property
    def name(self) -> str:
        return f"task{self.task_id}"


@dataclass(frozen=True)
class EvalSpec:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass(frozen=True)
class Manifest:
    tasks: tuple[TaskSpec, ...]
    eval: EvalSpec | None = None
    root: str = "."

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p


def _manifest_error(source, msg, line=None):
    where = f"{source}:{line}" if line else source
    return ConfigError(f"{where}: {msg}")


def _task_lines(text: str) -> list[int]:
    """1-based line on which each element of the top-level "tasks" array starts."""
    m = re.search(r'"tasks"\s*:\s*\[', text)
    if m is None:
        return []
    dec = json.JSONDecoder()
    pos, lines = m.end(), []
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            return lines
        lines.append(text.count("\n", 0, pos) + 1)
        try:
            _, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError:
            return lines


def parse_manifest(text: str, source: str = "<manifest>", root: str = ".") -> Manifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("tasks"), list) or not doc["tasks"]:
        raise _manifest_error(source, "manifest needs a non-empty 'tasks' list")
    tasks = []
    allowed = {"task_id", "train", "val", "epochs", "batch_size"}
    lines = _task_lines(text)

    def line(i):
        return lines[i] if i < len(lines) else None

    for i, t in enumerate(doc["tasks"]):
        if not isinstance(t, dict):
            raise _manifest_error(source, f"tasks[{i}] must be an object", line(i))
        unknown = set(t) - allowed
        if unknown:
            raise _manifest_error(source, f"tasks[{i}] has unknown keys {sorted(unknown)}", line(i))
        if "task_id" not in t or "train" not in t:
            raise _manifest_error(source, f"tasks[{i}] needs 'task_id' and 'train'", line(i))
        for key in ("task_id", "epochs", "batch_size"):
            if key in t and (not isinstance(t[key], int) or isinstance(t[key], bool) or t[key] < 1):
                raise _manifest_error(source, f"tasks[{i}].{key} must be a positive integer", line(i))
        for key in ("train", "val"):
            if key in t and not (isinstance(t[key], str) or (key == "val" and t[key] is None)):
                raise _manifest_error(source, f"tasks[{i}].{key} must be a path string", line(i))
        tasks.append(TaskSpec(t["task_id"], t["train"], t.get("val"), t.get("epochs"), t.get("batch_size")))
    ids = [t.task_id for t in tasks]
    for i, (a, b) in enumerate(zip(ids, ids[1:]), start=1):
        if b <= a:
            raise _manifest_error(source, f"task ids must strictly increase, got {ids}", line(i))
    if ids[0] != 1:
        raise _manifest_error(source, f"task ids must start at 1, got {ids}", line(0))
    ev = None
    if doc.get("eval") is not None:
        e = doc["eval"]
        keys = ("train_images", "train_labels", "test_images", "test_labels")
        if not isinstance(e, dict) or any(k not in e for k in keys):
            raise _manifest_error(source, f"'eval' needs keys {list(keys)}")
        ev = EvalSpec(*(e[k] for k in keys))
    extra = set(doc) - {"tasks", "eval"}
    if extra:
        raise _manifest_error(source, f"unknown top-level keys {sorted(extra)}")
    return Manifest(tuple(tasks), ev, root)


def load_manifest(path) -> Manifest:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {p}: {exc}") from None
    return parse_manifest(text, str(p), root=str(p.parent))


def manifest_to_json(m: Manifest) -> str:
    doc: dict = {"tasks": []}
    for t in m.tasks:
        entry = {"task_id": t.task_id, "train": t.train}
        for key in ("val", "epochs", "batch_size"):
            if getattr(t, key) is not None:
                entry[key] = getattr(t, key)
        doc["tasks"].append(entry)
    if m.eval is not None:
        doc["eval"] = dict(m.eval.__dict__)
    return json.dumps(doc, indent=2) + "\n"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class MetricsLog:
    """Append-only JSON-lines metrics file (one record per epoch or eval)."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                fh.flush()


def read_metrics(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                raise FormatError(f"{path}:{lineno}: not a JSON record") from None
    return out
