"""Storage node: a simple networked block device.

The node verifies the transport layer under its session key, then stores and
serves slot bytes verbatim. It never holds the persistent key, so sealed
block interiors are opaque to it.
"""

from __future__ import annotations

import errno
import mmap
import os
import socket
import struct
import threading
from typing import Optional

from .alarms import AlarmLog
from .crypto import SymmetricKey
from .errors import AuthFailure, SchemaError, SequenceViolation
from .wire import (
    ChannelClass,
    Opcode,
    SecureChannel,
    SecureEnvelope,
    decode_message,
    decode_request_body,
    encode_response,
    nonce_channel_id,
    parse_frame,
    read_frame,
    write_frame,
)

DEVICE_MAGIC = b"BFSDEV01"
DEVICE_HEADER = struct.Struct("<8sII")  # magic, capacity, block_size
BLOCK_SIZE = 4096
SLOT_LEN = 1 + 12 + BLOCK_SIZE + 16


def create_device_file(path: str, capacity: int) -> None:
    """Write a fresh device file: header plus zeroed slots."""
    with open(path, "wb") as f:
        f.write(DEVICE_HEADER.pack(DEVICE_MAGIC, capacity, BLOCK_SIZE))
        f.truncate(DEVICE_HEADER.size + capacity * SLOT_LEN)


class DeviceFile:
    """Slot-addressed access to a device file, memory-mapped when possible."""

    def __init__(self, path: str, use_mmap: bool = True):
        self.path = path
        self._fh = open(path, "r+b")
        header = self._fh.read(DEVICE_HEADER.size)
        magic, capacity, block_size = DEVICE_HEADER.unpack(header)
        if magic != DEVICE_MAGIC or block_size != BLOCK_SIZE:
            raise SchemaError(f"{path} is not a device file")
        self.capacity = capacity
        self._mmap: Optional[mmap.mmap] = None
        if use_mmap:
            try:
                self._mmap = mmap.mmap(self._fh.fileno(), 0)
            except (OSError, ValueError):
                self._mmap = None
        self._lock = threading.Lock()

    def _offset(self, block_id: int) -> int:
        return DEVICE_HEADER.size + block_id * SLOT_LEN

    def read_slot(self, block_id: int) -> bytes:
        off = self._offset(block_id)
        with self._lock:
            if self._mmap is not None:
                return bytes(self._mmap[off:off + SLOT_LEN])
            self._fh.seek(off)
            return self._fh.read(SLOT_LEN)

    def write_slot(self, block_id: int, slot: bytes) -> None:
        off = self._offset(block_id)
        with self._lock:
            if self._mmap is not None:
                self._mmap[off:off + SLOT_LEN] = slot
                self._mmap.flush(off & ~0xFFF,
                                 ((off + SLOT_LEN + 0xFFF) & ~0xFFF) - (off & ~0xFFF))
            else:
                self._fh.seek(off)
                self._fh.write(slot)
                self._fh.flush()
                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._mmap is not None:
                self._mmap.flush()
                self._mmap.close()
                self._mmap = None
            self._fh.close()


class StorageNode:
    """Serves block RPCs against one device file.

    Transport acceptance: a fresh channel generation (strictly greater than
    any seen) opens a new connection; anything else must continue the
    current one in sequence. Transport failures discard the envelope and
    bump the alarm counter; in-band errors travel back inside a sealed
    response.
    """

    def __init__(self, device_id: int, device: DeviceFile, key: SymmetricKey,
                 alarms: AlarmLog | None = None,
                 record_history: bool = False):
        self.device_id = device_id
        self.device = device
        self.key = key
        self.alarms = alarms or AlarmLog()
        self._chan: Optional[SecureChannel] = None
        self._max_generation = -1
        self._lock = threading.Lock()
        # Untrusted bookkeeping the adversary harness may consult.
        self.record_history = record_history
        self.slot_history: dict[int, list[bytes]] = {}

    @property
    def component(self) -> str:
        return f"storage-node-{self.device_id}"

    def _open_envelope(self, env: SecureEnvelope) -> Optional[bytes]:
        chan_id = nonce_channel_id(env.ciphertext.nonce)
        with self._lock:
            if self._chan is not None and chan_id == self._chan.recv_channel:
                try:
                    return self._chan.open(env)
                except SequenceViolation as exc:
                    # Fail closed: the connection is dead, the server must
                    # re-establish with a fresh channel generation.
                    self.alarms.record_exc(self.component, exc)
                    self._chan = None
                    return None
                except AuthFailure as exc:
                    self.alarms.record_exc(self.component, exc)
                    return None
            # Possible new connection: server-to-node channels have bit 0
            # clear and must carry a generation above anything seen.
            generation = chan_id >> 1
            if chan_id & 1 or generation <= self._max_generation:
                self.alarms.record(self.component, "SequenceViolation",
                                   f"stale or invalid channel {chan_id}")
                return None
            trial = SecureChannel(self.key, ChannelClass.BLOCK_RPC,
                                  self.device_id,
                                  send_channel=chan_id | 1,
                                  recv_channel=chan_id)
            try:
                payload = trial.open(env)
            except (AuthFailure, SequenceViolation) as exc:
                self.alarms.record_exc(self.component, exc)
                return None
            self._chan = trial
            self._max_generation = generation
            return payload

    def serve_block_rpc(self, env: SecureEnvelope) -> Optional[SecureEnvelope]:
        """Handle one envelope; None means it was discarded (alarm counted)."""
        if env.channel_class is not ChannelClass.BLOCK_RPC or \
                env.peer_id != self.device_id:
            self.alarms.record(self.component, "AuthFailure",
                               "misrouted envelope")
            return None
        payload = self._open_envelope(env)
        if payload is None:
            return None
        try:
            opcode, request_id, body = decode_message(payload)
            fields = decode_request_body(opcode, body)
        except SchemaError as exc:
            self.alarms.record_exc(self.component, exc)
            return None
        response = self._execute(opcode, request_id, fields)
        if response is None:
            return None
        with self._lock:
            assert self._chan is not None
            return self._chan.seal(response)

    def _execute(self, opcode: Opcode, request_id: int,
                 fields: dict) -> Optional[bytes]:
        if opcode is Opcode.BLOCK_READ:
            status, block_id = self._check_addr(fields["addr"])
            if status != 0:
                return encode_response(opcode, request_id, status)
            slot = self.device.read_slot(block_id)
            return encode_response(opcode, request_id, 0, slot=slot)
        if opcode is Opcode.BLOCK_WRITE:
            status, block_id = self._check_addr(fields["addr"])
            if status == 0 and len(fields["slot"]) != SLOT_LEN:
                status = -errno.EINVAL
            if status != 0:
                return encode_response(opcode, request_id, status)
            if self.record_history:
                self.slot_history.setdefault(block_id, []).append(
                    self.device.read_slot(block_id))
            self.device.write_slot(block_id, fields["slot"])
            return encode_response(opcode, request_id, 0)
        self.alarms.record(self.component, "SchemaError",
                           f"non-block opcode {opcode}")
        return None

    def _check_addr(self, addr8: bytes) -> tuple[int, int]:
        dev, blk = struct.unpack("<HIxx", addr8)
        if dev != self.device_id:
            return -errno.ENXIO, 0
        if blk >= self.device.capacity:
            return -errno.ERANGE, 0
        return 0, blk

    # -- TCP service ----------------------------------------------------------

    def serve_socket(self, sock: socket.socket) -> None:
        """Serve frames on an accepted connection until it closes."""
        try:
            while True:
                raw = read_frame(sock)
                try:
                    env = parse_frame(raw)
                except SchemaError as exc:
                    self.alarms.record_exc(self.component, exc)
                    continue
                resp = self.serve_block_rpc(env)
                if resp is not None:
                    write_frame(sock, resp.to_frame())
        except (ConnectionError, OSError):
            return


class StorageNodeServer:
    """TCP listener wrapping a StorageNode."""

    def __init__(self, node: StorageNode, host: str = "127.0.0.1",
                 port: int = 0):
        self.node = node
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(4)
        self.address = self._sock.getsockname()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self.node.serve_socket, args=(conn,),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
