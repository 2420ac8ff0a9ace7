"""RPC wire format: frames, opcode schemas, and sequence-bound channels.

Frame layout (all integers little-endian):

    frame_len u32 | channel_class u8 | peer_id u32 | nonce(12) | ciphertext | tag(16)

frame_len counts every byte after itself. Only the routing fields
(channel_class, peer_id) and the nonce/tag are plaintext; the opcode,
request id, and body travel inside the ciphertext. The AEAD tag covers the
ciphertext with AAD = seq u64 | channel_class u8 | peer_id u32, binding
every envelope to its position in the per-direction sequence.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

from .crypto import NONCE_LEN, TAG_LEN, AeadCiphertext, SymmetricKey, aead_decrypt, aead_encrypt
from .errors import AuthFailure, SchemaError, SequenceViolation

MAX_FRAME = 2 * 1024 * 1024

# Failed opens retry verification against nearby sequence numbers, only to
# classify the failure (replay vs gap vs tamper); every path still rejects.
SEQ_CLASSIFY_WINDOW = 64


class ChannelClass(IntEnum):
    FILE_RPC = 1
    BLOCK_RPC = 2


class Opcode(IntEnum):
    GETATTR = 1
    MKDIR = 2
    UNLINK = 3
    RMDIR = 4
    RENAME = 5
    CHMOD = 6
    OPEN = 7
    READ = 8
    WRITE = 9
    RELEASE = 10
    FSYNC = 11
    OPENDIR = 12
    READDIR = 13
    RELEASEDIR = 14
    CREATE = 15
    MOUNT = 32
    UNMOUNT = 33
    SET_POLICY = 34
    SET_ACL = 35
    BLOCK_READ = 64
    BLOCK_WRITE = 65


FILE_OPCODES = frozenset(op for op in Opcode if op < Opcode.MOUNT)
CONTROL_OPCODES = frozenset({Opcode.MOUNT, Opcode.UNMOUNT, Opcode.SET_POLICY, Opcode.SET_ACL})
BLOCK_OPCODES = frozenset({Opcode.BLOCK_READ, Opcode.BLOCK_WRITE})


@dataclass(frozen=True)
class Attr:
    """File attributes as carried in responses."""

    mode: int
    uid: int
    gid: int
    size: int
    nlink: int
    atime: int
    mtime: int
    ctime: int
    ino: int

    _STRUCT = struct.Struct("<HIIQHQQQI")

    def pack(self) -> bytes:
        return self._STRUCT.pack(self.mode, self.uid, self.gid, self.size,
                                 self.nlink, self.atime, self.mtime,
                                 self.ctime, self.ino)

    @classmethod
    def unpack(cls, raw: bytes) -> "Attr":
        return cls(*cls._STRUCT.unpack(raw))

    @property
    def is_dir(self) -> bool:
        return bool(self.mode & 0x4000)


class _Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> None:
        self.buf += struct.pack("<B", v)

    def u16(self, v: int) -> None:
        self.buf += struct.pack("<H", v)

    def u32(self, v: int) -> None:
        self.buf += struct.pack("<I", v)

    def u64(self, v: int) -> None:
        self.buf += struct.pack("<Q", v)

    def i32(self, v: int) -> None:
        self.buf += struct.pack("<i", v)

    def raw(self, v: bytes, length: int) -> None:
        if len(v) != length:
            raise SchemaError(f"fixed field must be {length} bytes")
        self.buf += v

    def data(self, v: bytes) -> None:
        self.u32(len(v))
        self.buf += v

    def string(self, v: str) -> None:
        raw = v.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise SchemaError("string too long")
        self.u16(len(raw))
        self.buf += raw


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise SchemaError("message body truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self._take(4))[0]

    def raw_bytes(self, length: int) -> bytes:
        return self._take(length)

    def data(self) -> bytes:
        n = self.u32()
        if n > MAX_FRAME:
            raise SchemaError("variable field too large")
        return self._take(n)

    def string(self) -> str:
        n = self.u16()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise SchemaError("string field not valid UTF-8") from None

    def expect_end(self) -> None:
        if self.pos != len(self.raw):
            raise SchemaError("trailing bytes after message body")


# Field kinds: u8/u16/u32/u64/i32 integers, str (u16-prefixed UTF-8),
# data (u32-prefixed bytes), bytes8/bytes32 fixed, attr, dirents, acl.
_REQUEST_SCHEMAS: dict[Opcode, tuple[tuple[str, str], ...]] = {
    Opcode.GETATTR: (("path", "str"),),
    Opcode.MKDIR: (("path", "str"), ("mode", "u16")),
    Opcode.UNLINK: (("path", "str"),),
    Opcode.RMDIR: (("path", "str"),),
    Opcode.RENAME: (("old_path", "str"), ("new_path", "str")),
    Opcode.CHMOD: (("path", "str"), ("mode", "u16")),
    Opcode.OPEN: (("path", "str"), ("flags", "u32")),
    Opcode.READ: (("fh", "u64"), ("offset", "u64"), ("size", "u32")),
    Opcode.WRITE: (("fh", "u64"), ("offset", "u64"), ("data", "data")),
    Opcode.RELEASE: (("fh", "u64"),),
    Opcode.FSYNC: (("fh", "u64"),),
    Opcode.OPENDIR: (("path", "str"),),
    Opcode.READDIR: (("dh", "u64"),),
    Opcode.RELEASEDIR: (("dh", "u64"),),
    Opcode.CREATE: (("path", "str"), ("mode", "u16")),
    Opcode.MOUNT: (("uid", "u32"), ("gid", "u32"), ("token", "bytes32")),
    Opcode.UNMOUNT: (),
    Opcode.SET_POLICY: (("policy", "data"),),
    Opcode.SET_ACL: (("path", "str"), ("entries", "acl")),
    Opcode.BLOCK_READ: (("addr", "bytes8"),),
    Opcode.BLOCK_WRITE: (("addr", "bytes8"), ("slot", "data")),
}

_RESPONSE_SCHEMAS: dict[Opcode, tuple[tuple[str, str], ...]] = {
    Opcode.GETATTR: (("attr", "attr"),),
    Opcode.MKDIR: (),
    Opcode.UNLINK: (),
    Opcode.RMDIR: (),
    Opcode.RENAME: (),
    Opcode.CHMOD: (),
    Opcode.OPEN: (("fh", "u64"), ("attr", "attr")),
    Opcode.READ: (("data", "data"),),
    Opcode.WRITE: (("written", "u32"),),
    Opcode.RELEASE: (),
    Opcode.FSYNC: (),
    Opcode.OPENDIR: (("dh", "u64"),),
    Opcode.READDIR: (("entries", "dirents"),),
    Opcode.RELEASEDIR: (),
    Opcode.CREATE: (("fh", "u64"), ("attr", "attr")),
    Opcode.MOUNT: (("session_gen", "u32"),),
    Opcode.UNMOUNT: (),
    Opcode.SET_POLICY: (),
    Opcode.SET_ACL: (),
    Opcode.BLOCK_READ: (("slot", "data"),),
    Opcode.BLOCK_WRITE: (),
}


def _encode_fields(w: _Writer, schema, fields: dict) -> None:
    for name, kind in schema:
        v = fields[name]
        if kind == "u8":
            w.u8(v)
        elif kind == "u16":
            w.u16(v)
        elif kind == "u32":
            w.u32(v)
        elif kind == "u64":
            w.u64(v)
        elif kind == "i32":
            w.i32(v)
        elif kind == "str":
            w.string(v)
        elif kind == "data":
            w.data(v)
        elif kind == "bytes8":
            w.raw(v, 8)
        elif kind == "bytes32":
            w.raw(v, 32)
        elif kind == "attr":
            w.raw(v.pack(), Attr._STRUCT.size)
        elif kind == "dirents":
            w.u16(len(v))
            for name_, ino in v:
                w.string(name_)
                w.u32(ino)
        elif kind == "acl":
            w.u16(len(v))
            for uid, perms in v:
                w.u32(uid)
                w.u8(perms)
        else:  # pragma: no cover - schema tables are static
            raise SchemaError(f"unknown field kind {kind}")


def _decode_fields(r: _Reader, schema) -> dict:
    out: dict = {}
    for name, kind in schema:
        if kind == "u8":
            out[name] = r.u8()
        elif kind == "u16":
            out[name] = r.u16()
        elif kind == "u32":
            out[name] = r.u32()
        elif kind == "u64":
            out[name] = r.u64()
        elif kind == "i32":
            out[name] = r.i32()
        elif kind == "str":
            out[name] = r.string()
        elif kind == "data":
            out[name] = r.data()
        elif kind == "bytes8":
            out[name] = r.raw_bytes(8)
        elif kind == "bytes32":
            out[name] = r.raw_bytes(32)
        elif kind == "attr":
            out[name] = Attr.unpack(r.raw_bytes(Attr._STRUCT.size))
        elif kind == "dirents":
            n = r.u16()
            out[name] = [(r.string(), r.u32()) for _ in range(n)]
        elif kind == "acl":
            n = r.u16()
            out[name] = [(r.u32(), r.u8()) for _ in range(n)]
        else:  # pragma: no cover
            raise SchemaError(f"unknown field kind {kind}")
    return out


def encode_request(opcode: Opcode, request_id: int, **fields) -> bytes:
    """Serialize a request message (opcode and body stay inside ciphertext)."""
    w = _Writer()
    w.u16(int(opcode))
    w.u64(request_id)
    _encode_fields(w, _REQUEST_SCHEMAS[opcode], fields)
    return bytes(w.buf)


def encode_response(opcode: Opcode, request_id: int, status: int, **fields) -> bytes:
    """Serialize a response; a negative status carries no payload."""
    w = _Writer()
    w.u16(int(opcode))
    w.u64(request_id)
    w.i32(status)
    if status == 0:
        _encode_fields(w, _RESPONSE_SCHEMAS[opcode], fields)
    return bytes(w.buf)


def decode_message(raw: bytes) -> tuple[Opcode, int, bytes]:
    """Split a decrypted message into (opcode, request_id, body bytes)."""
    if len(raw) < 10:
        raise SchemaError("message shorter than its header")
    (op_val,) = struct.unpack_from("<H", raw, 0)
    (request_id,) = struct.unpack_from("<Q", raw, 2)
    try:
        opcode = Opcode(op_val)
    except ValueError:
        raise SchemaError(f"unknown opcode {op_val}") from None
    return opcode, request_id, raw[10:]


def decode_request_body(opcode: Opcode, body: bytes) -> dict:
    r = _Reader(body)
    out = _decode_fields(r, _REQUEST_SCHEMAS[opcode])
    r.expect_end()
    return out


def decode_response_body(opcode: Opcode, body: bytes) -> tuple[int, dict]:
    r = _Reader(body)
    status = r.i32()
    fields = _decode_fields(r, _RESPONSE_SCHEMAS[opcode]) if status == 0 else {}
    r.expect_end()
    return status, fields


# ---------------------------------------------------------------------------
# Envelopes and frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SecureEnvelope:
    """A sealed message plus the plaintext routing fields the host may read."""

    channel_class: ChannelClass
    peer_id: int
    ciphertext: AeadCiphertext

    def to_frame(self) -> bytes:
        ct = self.ciphertext
        payload = struct.pack("<BI", int(self.channel_class), self.peer_id) \
            + ct.nonce + ct.body + ct.tag
        return struct.pack("<I", len(payload)) + payload


def parse_frame_payload(payload: bytes) -> SecureEnvelope:
    """Parse the bytes after frame_len into an envelope."""
    if len(payload) < 1 + 4 + NONCE_LEN + TAG_LEN:
        raise SchemaError("frame too short")
    class_val, peer_id = struct.unpack_from("<BI", payload, 0)
    try:
        channel_class = ChannelClass(class_val)
    except ValueError:
        raise SchemaError(f"unknown channel class {class_val}") from None
    rest = payload[5:]
    ct = AeadCiphertext(rest[:NONCE_LEN], rest[NONCE_LEN:-TAG_LEN], rest[-TAG_LEN:])
    return SecureEnvelope(channel_class, peer_id, ct)


def parse_frame(raw: bytes) -> SecureEnvelope:
    if len(raw) < 4:
        raise SchemaError("frame header truncated")
    (frame_len,) = struct.unpack_from("<I", raw, 0)
    if frame_len != len(raw) - 4:
        raise SchemaError("frame length mismatch")
    if frame_len > MAX_FRAME:
        raise SchemaError("frame exceeds maximum size")
    return parse_frame_payload(raw[4:])


def read_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame from a stream socket, returning raw bytes."""
    header = _recv_exact(sock, 4)
    (frame_len,) = struct.unpack("<I", header)
    if frame_len > MAX_FRAME:
        raise SchemaError("frame exceeds maximum size")
    return header + _recv_exact(sock, frame_len)


def write_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        piece = sock.recv(n - len(chunks))
        if not piece:
            raise ConnectionError("peer closed while reading frame")
        chunks += piece
    return bytes(chunks)


def envelope_aad(seq: int, channel_class: ChannelClass, peer_id: int) -> bytes:
    return struct.pack("<QBI", seq, int(channel_class), peer_id)


def nonce_channel_id(nonce: bytes) -> int:
    """The u32 channel discriminator carried in the nonce suffix."""
    return struct.unpack_from("<I", nonce, 8)[0]


@dataclass
class SequenceState:
    """Per-peer, per-direction sequence counters.

    send_seq is the last sequence number consumed; recv_seq is the last one
    accepted. An inbound envelope must verify at recv_seq + 1.
    """

    send_seq: int = 0
    recv_seq: int = 0


class SecureChannel:
    """One direction pair of an authenticated, sequence-bound connection.

    seal() consumes the next send sequence number; open() accepts an
    envelope only if its tag verifies at exactly recv_seq + 1. Failed opens
    are classified (replay / gap / tamper) by re-verifying against nearby
    sequence numbers, but every failure path rejects the envelope and the
    classification never releases plaintext.
    """

    def __init__(self, key: SymmetricKey, channel_class: ChannelClass,
                 peer_id: int, send_channel: int, recv_channel: int):
        self.key = key
        self.channel_class = channel_class
        self.peer_id = peer_id
        self.send_channel = send_channel
        self.recv_channel = recv_channel
        self.seq = SequenceState()

    def seal(self, payload: bytes) -> SecureEnvelope:
        self.seq.send_seq += 1
        aad = envelope_aad(self.seq.send_seq, self.channel_class, self.peer_id)
        ct = aead_encrypt(self.key, payload, aad, channel=self.send_channel)
        return SecureEnvelope(self.channel_class, self.peer_id, ct)

    def open(self, env: SecureEnvelope) -> bytes:
        if env.channel_class != self.channel_class or env.peer_id != self.peer_id:
            raise AuthFailure("envelope routed to the wrong channel")
        if nonce_channel_id(env.ciphertext.nonce) != self.recv_channel:
            self._classify_foreign(env)
        expected = self.seq.recv_seq + 1
        aad = envelope_aad(expected, self.channel_class, self.peer_id)
        try:
            plaintext = aead_decrypt(self.key, env.ciphertext, aad)
        except AuthFailure:
            self._classify_failure(env, expected)
            raise  # _classify_failure returns only for genuine tamper
        self.seq.recv_seq = expected
        return plaintext

    def _classify_foreign(self, env: SecureEnvelope) -> None:
        """An envelope whose nonce names another channel: replayed traffic of
        ours (same key verifies somewhere) or foreign/tampered bytes."""
        recent = range(max(1, self.seq.recv_seq - SEQ_CLASSIFY_WINDOW),
                       self.seq.recv_seq + SEQ_CLASSIFY_WINDOW + 1)
        for seq in dict.fromkeys(list(recent) + list(range(1, 9))):
            if self._verifies_at(env, seq):
                raise SequenceViolation(
                    "stale-channel traffic replayed into this session")
        raise AuthFailure("envelope not authenticated for this channel")

    def _classify_failure(self, env: SecureEnvelope, expected: int) -> None:
        lo = max(1, expected - SEQ_CLASSIFY_WINDOW)
        for seq in range(lo, expected):
            if self._verifies_at(env, seq):
                raise SequenceViolation(
                    f"replayed envelope (seq {seq}, expected {expected})")
        for seq in range(expected + 1, expected + 1 + SEQ_CLASSIFY_WINDOW):
            if self._verifies_at(env, seq):
                raise SequenceViolation(
                    f"sequence gap (seq {seq}, expected {expected}): "
                    "drop or reorder upstream")

    def _verifies_at(self, env: SecureEnvelope, seq: int) -> bool:
        aad = envelope_aad(seq, self.channel_class, self.peer_id)
        try:
            aead_decrypt(self.key, env.ciphertext, aad)
        except AuthFailure:
            return False
        return True
