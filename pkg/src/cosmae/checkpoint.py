"""Binary checkpoint format for :class:`TrainState`.

Little-endian layout::

    header    b"CSMAE1" | u32 version | 32-byte sha256 config digest
              | u32 task_index | u32 active_task | u32 epoch | u64 task_step
              | u64 counters.steps | u64 counters.buffer_reads | u64 counters.teacher_builds
              | rng: u128 state | u128 inc | u8 has_uint32 | u32 uinteger
              | u32 len + utf-8 config text
    tensors   u32 count, then per tensor:
              u16 name len | name | u8 dtype (0=f32, 1=f64) | u8 flags (bit0 trainable)
              | u8 rank | rank x u32 dims | payload
              names: encoder.* / decoder.* / projector.* and prev.encoder.* for the snapshot
    buffer    u32 capacity | u32 count | per entry: u32 task_id | u8 dtype | u8 rank | dims | payload
    optimizer u64 step_count | 5 x f64 (lr_base, beta1, beta2, eps, weight_decay)
              | u32 count | per entry: u16 name len | name | m record | v record

A load reproduces the saved state bit for bit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config_text
from .distill import Projector
from .errors import ConfigError, FormatError
from .io import atomic_write_bytes
from .mae import MAEModel
from .replay import MemoryBuffer
from .state import Counters, TrainState
from .tensor_nn.autograd import Tensor
from .tensor_nn.optim import OptimizerState
from .tensor_nn.params import ParamSet

MAGIC = b"CSMAE1"
VERSION = 1
PREV_PREFIX = "prev."
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def name(self, s: str) -> None:
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.raw(b)

    def array(self, a: np.ndarray) -> None:
        a = np.asarray(a)
        code = _CODES.get(a.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {a.dtype} in checkpoint")
        self.pack("BB", code, a.ndim)
        self.pack(f"{a.ndim}I", *a.shape)
        self.raw(a.astype(_DTYPES[code]).tobytes(order="C"))

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.source}: truncated at byte offset {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def name(self) -> str:
        return self.take(self.unpack("H")).decode("utf-8")

    def array(self) -> np.ndarray:
        code, rank = self.unpack("BB")
        if code not in _DTYPES:
            raise FormatError(f"{self.source}: unknown dtype code {code} at byte offset {self.pos - 2}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(dims)
        return data.astype(dt.newbyteorder("="), copy=True)


def _u128(x: int) -> tuple[int, int]:
    return x & 0xFFFFFFFFFFFFFFFF, x >> 64


def _write_rng(w: _Writer, rng: np.random.Generator) -> None:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise FormatError(f"only PCG64 generators can be checkpointed, got {st['bit_generator']}")
    w.pack("QQ", *_u128(st["state"]["state"]))
    w.pack("QQ", *_u128(st["state"]["inc"]))
    w.pack("BI", int(st["has_uint32"]), int(st["uinteger"]))


def _read_rng(r: _Reader) -> np.random.Generator:
    lo, hi = r.unpack("QQ")
    state = lo | (hi << 64)
    lo, hi = r.unpack("QQ")
    inc = lo | (hi << 64)
    has_uint32, uinteger = r.unpack("BI")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    return np.random.Generator(bg)


def _tensor_records(state: TrainState) -> list[tuple[str, Tensor]]:
    out = list(state.model.params.items()) + list(state.projector.params.items())
    if state.prev_encoder is not None:
        out += [(PREV_PREFIX + n, t) for n, t in state.prev_encoder.items()]
    return out


def encode_checkpoint(state: TrainState) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.raw(state.config.digest())
    w.pack("IIIQ", state.task_index, state.active_task, state.epoch, state.task_step)
    c = state.counters
    w.pack("QQQ", c.steps, c.buffer_reads, c.teacher_builds)
    _write_rng(w, state.rng)
    cfg = state.config.to_text().encode("utf-8")
    w.pack("I", len(cfg))
    w.raw(cfg)

    records = _tensor_records(state)
    w.pack("I", len(records))
    for name, t in records:
        w.name(name)
        code = _CODES[t.data.dtype]
        w.pack("BB", code, 1 if t.requires_grad else 0)
        w.pack("B", t.data.ndim)
        w.pack(f"{t.data.ndim}I", *t.data.shape)
        w.raw(t.data.astype(_DTYPES[code]).tobytes(order="C"))

    buf = state.buffer
    w.pack("II", buf.capacity, len(buf))
    for img, tid in zip(buf.images, buf.task_ids):
        w.pack("I", tid)
        w.array(img)

    opt = state.optimizer
    w.pack("Q", opt.step_count)
    w.pack("5d", *opt.hyperparameters())
    w.pack("I", len(opt.m))
    for name in opt.m:
        w.name(name)
        w.array(opt.m[name])
        w.array(opt.v[name])
    return w.bytes()


def save_checkpoint(state: TrainState, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(state))


def read_header(buf: bytes, source: str = "<checkpoint>") -> dict:
    r = _Reader(buf, source)
    magic = r.take(6)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version = r.unpack("I")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    digest = r.take(32)
    task_index, active_task, epoch, task_step = r.unpack("IIIQ")
    steps, reads, builds = r.unpack("QQQ")
    rng = _read_rng(r)
    cfg_text = r.take(r.unpack("I")).decode("utf-8")
    return {
        "reader": r,
        "version": version,
        "digest": digest,
        "task_index": task_index,
        "active_task": active_task,
        "epoch": epoch,
        "task_step": task_step,
        "counters": Counters(steps, reads, builds),
        "rng": rng,
        "config_text": cfg_text,
    }


def decode_checkpoint(buf: bytes, source: str = "<checkpoint>", config: RunConfig | None = None,
                      force: bool = False) -> TrainState:
    """Rebuild a TrainState. ``config`` (if given) must match the stored digest unless ``force``."""
    h = read_header(buf, source)
    r: _Reader = h["reader"]
    stored = parse_config_text(h["config_text"], source=f"{source}[config]")
    if stored.digest() != h["digest"]:
        raise FormatError(f"{source}: embedded config does not match its digest")
    if config is not None and config.digest() != h["digest"] and not force:
        raise ConfigError(f"{source}: checkpoint was written with a different config (digest mismatch)")
    cfg = config if (config is not None and force) else stored

    model_ps, proj_ps, prev_ps = ParamSet(), ParamSet(), ParamSet()
    for _ in range(r.unpack("I")):
        name = r.name()
        code, flags = r.unpack("BB")
        if code not in _DTYPES:
            raise FormatError(f"{source}: unknown dtype code {code} for tensor {name}")
        rank = r.unpack("B")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        t = Tensor(data, requires_grad=bool(flags & 1), dtype=data.dtype)
        if name.startswith(PREV_PREFIX):
            prev_ps.add(name[len(PREV_PREFIX):], t)
        elif name.startswith("projector."):
            proj_ps.add(name, t)
        else:
            model_ps.add(name, t)

    capacity, count = r.unpack("II")
    buffer = MemoryBuffer(capacity)
    for _ in range(count):
        buffer.task_ids.append(r.unpack("I"))
        buffer.images.append(r.array())

    step_count = r.unpack("Q")
    hyper = r.unpack("5d")
    opt = OptimizerState(*hyper, step_count=step_count)
    for _ in range(r.unpack("I")):
        name = r.name()
        opt.m[name] = r.array()
        opt.v[name] = r.array()
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes after byte offset {r.pos}")

    return TrainState(
        config=cfg,
        model=MAEModel(cfg.model, model_ps),
        projector=Projector(proj_ps),
        buffer=buffer,
        optimizer=opt,
        rng=h["rng"],
        prev_encoder=prev_ps if len(prev_ps) else None,
        task_index=h["task_index"],
        active_task=h["active_task"],
        epoch=h["epoch"],
        task_step=h["task_step"],
        counters=h["counters"],
    )


def load_checkpoint(path, config: RunConfig | None = None, force: bool = False) -> TrainState:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {p}: {exc}") from None
    return decode_checkpoint(buf, str(p), config=config, force=force)


def inspect_checkpoint(path) -> str:
    """Human-readable header and tensor inventory grouped by namespace."""
    p = Path(path)
    state = load_checkpoint(p)
    lines = [
        f"file: {p}",
        f"format: {MAGIC.decode()} v{VERSION}",
        f"config digest: {state.config.digest().hex()}",
        f"completed tasks: {state.task_index}",
        f"active task: {state.active_task or '-'} (epoch {state.epoch}, step {state.task_step})",
        f"optimizer steps: {state.optimizer.step_count}",
        f"buffer: {len(state.buffer)}/{state.buffer.capacity} images, per task {state.buffer.counts()}",
    ]
    groups: dict[str, list[tuple[str, Tensor]]] = {}
    for name, t in _tensor_records(state):
        ns = "prev.encoder" if name.startswith(PREV_PREFIX) else name.split(".", 1)[0]
        groups.setdefault(ns, []).append((name, t))
    for ns, items in groups.items():
        n_el = sum(t.data.size for _, t in items)
        lines.append(f"[{ns}] {len(items)} tensors, {n_el} elements")
        for name, t in items:
            flag = "trainable" if t.requires_grad else "frozen"
            lines.append(f"  {name:48s} {str(t.data.dtype):8s} {'x'.join(map(str, t.shape)) or 'scalar':>12s} {flag}")
    return "\n".join(lines)
