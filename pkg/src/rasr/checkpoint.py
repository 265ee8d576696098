"""Binary checkpoint format: params, bank snapshot, config, RNG state.

Layout: magic ``RASR``, u32 LE format version, u32 LE CRC32 of the
payload, then the payload: length-prefixed canonical JSON header (config,
variant, epoch, rng state), named float32 tensors, bank snapshot.
Save -> load -> save is byte-identical; tensors are stored at 32-bit
precision so a load restores bitwise-identical forward outputs.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .corpus import Domain
from .cspr import BankEntry, MemoryBank, SemanticPrimitive
from .dgmp import AnalysisReport
from .errors import DataError
from .numerics import ParamStore

MAGIC = b"RASR"
FORMAT_VERSION = 1


@dataclass
class SnapReport:
    text: str
    confidence: float
    low_confidence: bool
    attempts: int
    parsing_feature: np.ndarray  # float32


@dataclass
class SnapEntry:
    video_id: str
    domain: str
    label: int
    s: np.ndarray
    s_v: np.ndarray
    s_t: np.ndarray
    s_a: np.ndarray
    text_digest: str
    reports: dict[str, SnapReport] = field(default_factory=dict)


@dataclass
class Checkpoint:
    config: TrainConfig
    variant: str
    epoch: int
    rng_state: dict | None
    params: dict[str, np.ndarray]  # float32, keyed by tensor name
    bank_entries: list[SnapEntry]
    version: int = FORMAT_VERSION

    def param_store(self) -> ParamStore:
        store = ParamStore()
        for name in sorted(self.params):
            store.add(name, self.params[name].astype(np.float64))
        return store

    def bank(self) -> MemoryBank:
        entries = []
        for e in self.bank_entries:
            reports = {
                m: AnalysisReport(
                    modality=m,
                    text=r.text,
                    confidence=r.confidence,
                    low_confidence=r.low_confidence,
                    attempts=r.attempts,
                    parsing_feature=r.parsing_feature.astype(np.float64),
                )
                for m, r in e.reports.items()
            }
            entries.append(
                BankEntry(
                    video_id=e.video_id,
                    domain=Domain.parse(e.domain),
                    label=e.label,
                    primitive=SemanticPrimitive(
                        s=e.s.astype(np.float64),
                        s_v=e.s_v.astype(np.float64),
                        s_t=e.s_t.astype(np.float64),
                        s_a=e.s_a.astype(np.float64),
                    ),
                    text_digest=e.text_digest,
                    reports=reports,
                )
            )
        return MemoryBank(entries)


def make_checkpoint(
    config: TrainConfig,
    variant: str,
    epoch: int,
    rng_state: dict | None,
    params: ParamStore,
    bank: MemoryBank,
) -> Checkpoint:
    """Narrow live training state to serialization precision."""
    snap_params = {name: value.astype(np.float32) for name, value in params.items()}
    entries = []
    for e in bank.entries:
        reports = {
            m: SnapReport(
                text=r.text,
                confidence=float(r.confidence),
                low_confidence=bool(r.low_confidence),
                attempts=int(r.attempts),
                parsing_feature=np.asarray(r.parsing_feature, dtype=np.float32),
            )
            for m, r in e.reports.items()
        }
        entries.append(
            SnapEntry(
                video_id=e.video_id,
                domain=e.domain.value,
                label=int(e.label),
                s=e.primitive.s.astype(np.float32),
                s_v=e.primitive.s_v.astype(np.float32),
                s_t=e.primitive.s_t.astype(np.float32),
                s_a=e.primitive.s_a.astype(np.float32),
                text_digest=e.text_digest,
                reports=reports,
            )
        )
    return Checkpoint(
        config=config,
        variant=variant,
        epoch=epoch,
        rng_state=rng_state,
        params=snap_params,
        bank_entries=entries,
    )


# ---------------------------------------------------------------------------
# binary encoding
# ---------------------------------------------------------------------------

def _w_u32(buf: io.BytesIO, x: int) -> None:
    buf.write(struct.pack("<I", x))


def _w_str(buf: io.BytesIO, s: str) -> None:
    data = s.encode("utf-8")
    _w_u32(buf, len(data))
    buf.write(data)


def _w_vec32(buf: io.BytesIO, v: np.ndarray) -> None:
    v = np.ascontiguousarray(v, dtype="<f4")
    _w_u32(buf, v.shape[0])
    buf.write(v.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def str_(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def vec32(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self.take(4 * n), dtype="<f4").copy()


def _encode_payload(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    header = {
        "config": ckpt.config.to_dict(),
        "variant": ckpt.variant,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
    }
    _w_str(buf, json.dumps(header, sort_keys=True))
    _w_u32(buf, len(ckpt.params))
    for name in sorted(ckpt.params):
        tensor = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        _w_str(buf, name)
        _w_u32(buf, tensor.ndim)
        for d in tensor.shape:
            _w_u32(buf, d)
        buf.write(tensor.tobytes())
    _w_u32(buf, len(ckpt.bank_entries))
    for e in ckpt.bank_entries:
        _w_str(buf, e.video_id)
        _w_str(buf, e.domain)
        buf.write(bytes([e.label]))
        for v in (e.s, e.s_v, e.s_t, e.s_a):
            _w_vec32(buf, v)
        _w_str(buf, e.text_digest)
        buf.write(bytes([len(e.reports)]))
        for m in sorted(e.reports):
            r = e.reports[m]
            _w_str(buf, m)
            _w_str(buf, r.text)
            buf.write(struct.pack("<d", r.confidence))
            buf.write(bytes([1 if r.low_confidence else 0]))
            _w_u32(buf, r.attempts)
            _w_vec32(buf, r.parsing_feature)
    return buf.getvalue()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    payload = _encode_payload(ckpt)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
        fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path.name}: not a RASR checkpoint")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise DataError(f"{path.name}: format version {version}, expected {FORMAT_VERSION}")
    crc = struct.unpack("<I", raw[8:12])[0]
    payload = raw[12:]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DataError(f"{path.name}: checksum mismatch (corrupt or truncated)")
    r = _Reader(payload)
    header = json.loads(r.str_())
    config = TrainConfig.from_dict(header["config"])
    params = {}
    for _ in range(r.u32()):
        name = r.str_()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").copy().reshape(shape)
        params[name] = data
    entries = []
    for _ in range(r.u32()):
        vid = r.str_()
        domain = r.str_()
        label = r.u8()
        s, s_v, s_t, s_a = (r.vec32() for _ in range(4))
        digest = r.str_()
        reports = {}
        for _ in range(r.u8()):
            m = r.str_()
            text = r.str_()
            conf = r.f64()
            low = bool(r.u8())
            attempts = r.u32()
            feat = r.vec32()
            reports[m] = SnapReport(
                text=text, confidence=conf, low_confidence=low,
                attempts=attempts, parsing_feature=feat,
            )
        entries.append(
            SnapEntry(
                video_id=vid, domain=domain, label=label,
                s=s, s_v=s_v, s_t=s_t, s_a=s_a,
                text_digest=digest, reports=reports,
            )
        )
    ckpt = Checkpoint(
        config=config,
        variant=header["variant"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        params=params,
        bank_entries=entries,
        version=version,
    )
    _validate_shapes(ckpt)
    return ckpt


def _validate_shapes(ckpt: Checkpoint) -> None:
    """Tensor shapes must match what the embedded config implies."""
    from .pipeline import init_params

    expected = init_params(ckpt.config, ckpt.variant)
    names = set(expected.names())
    got = set(ckpt.params)
    if names != got:
        missing = sorted(names - got)
        extra = sorted(got - names)
        raise DataError(f"checkpoint tensors mismatch config: missing={missing[:3]} extra={extra[:3]}")
    for name in sorted(names):
        want = expected[name].shape
        have = ckpt.params[name].shape
        if want != have:
            raise DataError(f"checkpoint tensor {name!r} has shape {have}, config implies {want}")
    d_s = ckpt.config.d_s
    for e in ckpt.bank_entries:
        for v in (e.s, e.s_v, e.s_t, e.s_a):
            if v.shape != (d_s,):
                raise DataError(
                    f"bank entry {e.video_id!r} primitive has dim {v.shape[0]}, config implies {d_s}"
                )
