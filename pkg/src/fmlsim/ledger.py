"""Simulated append-only ledger: SHA-256 hash chain over canonical bytes.

Canonical serialization (all integers little-endian):

  record   = u8 kind || payload fields in declaration order
             ints as i64 (<q), floats as f64 (<d), int/float lists as
             u32 count (<I) followed by items, nested int lists as u32
             count followed by encoded inner lists
  preimage = u64 index || u64 round || u32 record count || records || prev_hash
  block    = preimage || sha256(preimage)
  file     = b"FMLLEDG1" || u32 block count || (u32 block length || block)*

The genesis block's prev_hash is 32 zero bytes.  A parser must consume
exactly the declared bytes; any surplus, shortage, or unknown kind is an
integrity failure, as is any hash or link mismatch found by verify().

Record kinds: Contribution (a member's audited round contribution),
PartitionCommit (the round's final coalitions), Equilibrium (one
coalition's solved incentives), ReputationUpdate (post-round global
reputation), Recruitment (the advertised task terms).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields

from .errors import InvalidParam, NonMonotoneRound, TruncatedFile

MAGIC = b"FMLLEDG1"
ZERO_HASH = b"\x00" * 32


@dataclass
class ContributionRecord:
    kind = 1
    learner: int
    head: int
    round: int
    theta: float
    u: float
    t_comp: float
    t_comm: float


@dataclass
class PartitionCommitRecord:
    kind = 2
    round: int
    coalitions: list  # list of sorted member-id lists
    heads: list       # head id per coalition, -1 for none
    parked: list


@dataclass
class EquilibriumRecord:
    kind = 3
    round: int
    coalition: int
    i_comp: float
    u_msp: float
    learners: list
    deltas: list
    kkt_cases: list


@dataclass
class ReputationUpdateRecord:
    kind = 4
    learner: int
    round: int
    r_global: float


@dataclass
class RecruitmentRecord:
    kind = 5
    round: int
    r_th: float
    i_rep: float
    i_comp_min: float
    i_comp_max: float
    tau: int


RECORD_TYPES = {
    1: ContributionRecord,
    2: PartitionCommitRecord,
    3: EquilibriumRecord,
    4: ReputationUpdateRecord,
    5: RecruitmentRecord,
}


def _encode_value(value) -> bytes:
    if isinstance(value, bool):
        raise InvalidParam("booleans are not a ledger payload type")
    if isinstance(value, (int,)):
        return struct.pack("<q", value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InvalidParam(f"non-finite payload value {value}")
        return struct.pack("<d", value)
    if isinstance(value, (list, tuple)):
        out = struct.pack("<I", len(value))
        for item in value:
            out += _encode_value(item)
        return out
    raise InvalidParam(f"unsupported payload type {type(value)!r}")


def encode_record(record) -> bytes:
    out = struct.pack("<B", record.kind)
    for f in fields(record):
        out += _encode_value(getattr(record, f.name))
    return out


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise TruncatedFile("record payload ends early")
        value = struct.unpack_from(fmt, self.buf, self.off)[0]
        self.off += size
        return value

    def done(self) -> bool:
        return self.off == len(self.buf)


def _decode_like(reader: _Reader, template):
    if isinstance(template, float):
        value = reader.take("<d")
        if not math.isfinite(value):
            raise InvalidParam(f"non-finite payload value {value}")
        return value
    if isinstance(template, int):
        return reader.take("<q")
    if isinstance(template, list):
        count = reader.take("<I")
        return [_decode_like(reader, template[0]) for _ in range(count)]
    raise InvalidParam(f"unsupported template {template!r}")


# Field templates drive decoding: an int, a float, or a list of a template.
_TEMPLATES = {
    1: [0, 0, 0, 0.0, 0.0, 0.0, 0.0],
    2: [0, [[0]], [0], [0]],
    3: [0, 0, 0.0, 0.0, [0], [0.0], [0]],
    4: [0, 0, 0.0],
    5: [0, 0.0, 0.0, 0.0, 0.0, 0],
}


def decode_record(reader: _Reader):
    kind = reader.take("<B")
    if kind not in RECORD_TYPES:
        raise InvalidParam(f"unknown record kind {kind}")
    values = [_decode_like(reader, t) for t in _TEMPLATES[kind]]
    return RECORD_TYPES[kind](*values)


@dataclass
class LedgerBlock:
    index: int
    round: int
    records: list
    prev_hash: bytes
    hash: bytes = b""

    def preimage(self) -> bytes:
        body = struct.pack("<QQI", self.index, self.round, len(self.records))
        for r in self.records:
            body += encode_record(r)
        return body + self.prev_hash

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.preimage()).digest()


class Chain:
    """The append-only block list plus verification and query helpers."""

    def __init__(self):
        self.blocks = []

    def append(self, round_idx: int, records: list) -> LedgerBlock:
        """Seal records into a new block; rounds must never decrease."""
        if self.blocks and round_idx < self.blocks[-1].round:
            raise NonMonotoneRound(
                f"round {round_idx} after round {self.blocks[-1].round}"
            )
        prev = self.blocks[-1].hash if self.blocks else ZERO_HASH
        block = LedgerBlock(
            index=len(self.blocks), round=round_idx, records=list(records), prev_hash=prev
        )
        block.hash = block.compute_hash()
        self.blocks.append(block)
        return block

    def verify(self):
        """Recompute every hash and link; returns (ok, first_bad_index)."""
        prev = ZERO_HASH
        for k, block in enumerate(self.blocks):
            if (
                block.index != k
                or block.prev_hash != prev
                or block.hash != block.compute_hash()
                or (k > 0 and block.round < self.blocks[k - 1].round)
            ):
                return False, k
            prev = block.hash
        return True, None

    def query_contributions(self, learner: int, head: int | None = None) -> list:
        """Ordered (round, theta, head) triples for one learner."""
        out = []
        for block in self.blocks:
            for r in block.records:
                if isinstance(r, ContributionRecord) and r.learner == learner:
                    if head is None or r.head == head:
                        out.append((r.round, r.theta, r.head))
        return out

    def dump(self) -> bytes:
        out = MAGIC + struct.pack("<I", len(self.blocks))
        for block in self.blocks:
            body = block.preimage() + block.hash
            out += struct.pack("<I", len(body)) + body
        return out

    @staticmethod
    def load(buf: bytes) -> "Chain":
        """Strict parse of dump() output; raises on any framing violation."""
        if len(buf) < len(MAGIC) + 4 or buf[: len(MAGIC)] != MAGIC:
            raise TruncatedFile("not a ledger file")
        count = struct.unpack_from("<I", buf, len(MAGIC))[0]
        off = len(MAGIC) + 4
        chain = Chain()
        for _ in range(count):
            if off + 4 > len(buf):
                raise TruncatedFile("block header ends early")
            size = struct.unpack_from("<I", buf, off)[0]
            off += 4
            if off + size > len(buf):
                raise TruncatedFile("block body ends early")
            body = buf[off : off + size]
            off += size
            if size < 8 + 8 + 4 + 64:
                raise TruncatedFile("block too small")
            index, round_idx, n_rec = struct.unpack_from("<QQI", body, 0)
            reader = _Reader(body[20 : size - 64])
            records = [decode_record(reader) for _ in range(n_rec)]
            if not reader.done():
                raise TruncatedFile("trailing bytes inside block records")
            block = LedgerBlock(
                index=index,
                round=round_idx,
                records=records,
                prev_hash=body[size - 64 : size - 32],
                hash=body[size - 32 :],
            )
            chain.blocks.append(block)
        if off != len(buf):
            raise TruncatedFile("trailing bytes after last block")
        return chain

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.dump())

    @staticmethod
    def load_file(path: str) -> "Chain":
        with open(path, "rb") as f:
            return Chain.load(f.read())

    def to_json(self) -> list:
        """Human-readable export (hashes hex-encoded)."""
        out = []
        for block in self.blocks:
            out.append(
                {
                    "index": block.index,
                    "round": block.round,
                    "prev_hash": block.prev_hash.hex(),
                    "hash": block.hash.hex(),
                    "records": [
                        {"kind": type(r).__name__, **{f.name: getattr(r, f.name) for f in fields(r)}}
                        for r in block.records
                    ],
                }
            )
        return out
