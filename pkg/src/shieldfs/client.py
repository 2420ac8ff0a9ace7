"""Client library: mounted sessions, POSIX-like calls, writeback page cache.

The client holds exactly one secret (its session key) plus the attestation
fingerprint it expects from the server. With caching disabled every call is
a round trip (direct I/O); with caching enabled reads are served from local
pages and writes are batched out by a background flusher, with fsync and
release forcing dirty state to the server (close-to-open consistency).
"""

from __future__ import annotations

import os
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from .crypto import SymmetricKey
from .errors import (
    AuthFailure,
    FsError,
    SchemaError,
    SequenceViolation,
    SessionLost,
)
from .wire import (
    Attr,
    ChannelClass,
    Opcode,
    SecureChannel,
    SecureEnvelope,
    decode_message,
    decode_response_body,
    encode_request,
    parse_frame,
)

PAGE = 4096
_BOOTSTRAP_BIT = 0x80000000

O_RDONLY, O_WRONLY, O_RDWR = 0, 1, 2


@dataclass
class CacheConfig:
    enabled: bool = True
    flush_interval: float = 5.0
    capacity_pages: int = 4096          # 16 MiB of page cache
    dirty_watermark: float = 0.25       # flush-all trigger, fraction of capacity
    attr_ttl: float = 3.0

    @classmethod
    def disabled(cls) -> "CacheConfig":
        return cls(enabled=False, attr_ttl=0.0)


class _PageCache:
    """Pages keyed by (inode, page index) with LRU eviction of clean pages."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.pages: "OrderedDict[tuple[int, int], bytearray]" = OrderedDict()
        self.dirty: set[tuple[int, int]] = set()

    def get(self, ino: int, idx: int) -> Optional[bytearray]:
        page = self.pages.get((ino, idx))
        if page is not None:
            self.pages.move_to_end((ino, idx))
        return page

    def put(self, ino: int, idx: int, data: bytearray, dirty: bool) -> None:
        key = (ino, idx)
        self.pages[key] = data
        self.pages.move_to_end(key)
        if dirty:
            self.dirty.add(key)
        self._evict()

    def mark_dirty(self, ino: int, idx: int) -> None:
        self.dirty.add((ino, idx))

    def _evict(self) -> None:
        while len(self.pages) > self.capacity:
            for key in self.pages:
                if key not in self.dirty:
                    del self.pages[key]
                    break
            else:
                return  # everything dirty; flusher will drain

    def dirty_pages_of(self, ino: int) -> list[int]:
        return sorted(idx for (i, idx) in self.dirty if i == ino)

    def dirty_inodes(self) -> set[int]:
        return {i for (i, _) in self.dirty}

    def drop_inode(self, ino: int) -> None:
        for key in [k for k in self.pages if k[0] == ino]:
            del self.pages[key]
            self.dirty.discard(key)

    def clear_dirty(self, ino: int, idx: int) -> None:
        self.dirty.discard((ino, idx))


@dataclass
class _OpenFile:
    fh: int
    ino: int
    path: str
    size: int
    mtime: int


class ClientSession:
    """One mounted client. Safe for concurrent callers."""

    def __init__(self, link, key: SymmetricKey, peer_id: int,
                 expected_fingerprint: bytes,
                 cache: Optional[CacheConfig] = None, timeout: float = 2.0,
                 flush_window: int = 8):
        self._link = link
        self._key = key
        self.peer_id = peer_id
        self._fingerprint = expected_fingerprint
        self.cache_config = cache or CacheConfig.disabled()
        self.timeout = timeout
        self.flush_window = flush_window
        self._chan: Optional[SecureChannel] = None
        self._rpc_lock = threading.RLock()
        self._cache_lock = threading.RLock()
        self._request_id = 0
        self.alive = False
        self.session_gen = 0
        self._files: dict[int, _OpenFile] = {}
        self._pages = _PageCache(self.cache_config.capacity_pages)
        self._attr_cache: dict[str, tuple[Attr, float]] = {}
        self._sizes: dict[int, int] = {}
        self._flusher: Optional[threading.Thread] = None
        self._stop_flusher = threading.Event()
        self.integrity_events: list[str] = []

    # -- transport ----------------------------------------------------------------

    def _next_request_id(self) -> int:
        self._request_id += 1
        return self._request_id

    def _send(self, payload: bytes) -> None:
        assert self._chan is not None
        self._link.send_frame(self._chan.seal(payload).to_frame())

    def _recv_matching(self, opcode: Opcode, request_id: int) -> tuple[int, dict]:
        assert self._chan is not None
        deadline = time.monotonic() + self.timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.alive = False
                raise SessionLost("timed out waiting for server response")
            frame = self._link.recv_frame(remaining)
            if frame is None:
                continue
            try:
                env = parse_frame(frame)
            except SchemaError:
                continue
            try:
                payload = self._chan.open(env)
            except AuthFailure:
                self.integrity_events.append("AuthFailure")
                continue  # tampered envelope; the genuine one may still arrive
            except SequenceViolation:
                self.integrity_events.append("SequenceViolation")
                self.alive = False
                raise SessionLost("response stream out of sequence") from None
            got_op, got_rid, body = decode_message(payload)
            if got_op is not opcode or got_rid != request_id:
                raise SessionLost("mismatched response; session aborted")
            return decode_response_body(got_op, body)

    def _call(self, opcode: Opcode, **fields) -> dict:
        with self._rpc_lock:
            if not self.alive:
                raise SessionLost("session is not mounted")
            rid = self._next_request_id()
            self._send(encode_request(opcode, rid, **fields))
            status, out = self._recv_matching(opcode, rid)
        if status != 0:
            raise FsError(-status)
        return out

    # -- mount / unmount -------------------------------------------------------------

    def mount(self, uid: int, gid: int) -> None:
        with self._rpc_lock:
            if self.alive:
                raise SessionLost("already mounted")
            boot_chan = (int.from_bytes(os.urandom(4), "little")
                         | _BOOTSTRAP_BIT) & ~1
            bootstrap = SecureChannel(self._key, ChannelClass.FILE_RPC,
                                      self.peer_id,
                                      send_channel=boot_chan,
                                      recv_channel=boot_chan | 1)
            rid = self._next_request_id()
            req = encode_request(Opcode.MOUNT, rid, uid=uid, gid=gid,
                                 token=self._fingerprint)
            self._link.send_frame(bootstrap.seal(req).to_frame())
            self._chan = bootstrap
            self.alive = True
            try:
                status, out = self._recv_matching(Opcode.MOUNT, rid)
            except SessionLost:
                self._chan = None
                self.alive = False
                raise
            if status != 0:
                self._chan = None
                self.alive = False
                raise FsError(-status, "mount rejected")
            self.session_gen = out["session_gen"]
            self._chan = SecureChannel(
                self._key, ChannelClass.FILE_RPC, self.peer_id,
                send_channel=(self.session_gen << 1),
                recv_channel=(self.session_gen << 1) | 1)
        self.uid, self.gid = uid, gid
        if self.cache_config.enabled and self.cache_config.flush_interval > 0:
            self._stop_flusher.clear()
            self._flusher = threading.Thread(target=self._flusher_loop,
                                             daemon=True)
            self._flusher.start()

    def unmount(self) -> None:
        self._stop_flusher.set()
        if self.alive:
            self.flush_all()
            try:
                self._call(Opcode.UNMOUNT)
            except SessionLost:
                pass
        self.alive = False

    def held_secrets(self) -> list[SymmetricKey]:
        """Everything secret this client holds (audited in tests)."""
        return [self._key]

    # -- plain (uncached) operations ----------------------------------------------------

    def getattr(self, path: str) -> Attr:
        if self.cache_config.enabled:
            with self._cache_lock:
                hit = self._attr_cache.get(path)
                if hit and hit[1] > time.monotonic():
                    return hit[0]
        attr = self._call(Opcode.GETATTR, path=path)["attr"]
        if self.cache_config.enabled:
            with self._cache_lock:
                self._attr_cache[path] = (
                    attr, time.monotonic() + self.cache_config.attr_ttl)
        return attr

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        self._call(Opcode.MKDIR, path=path, mode=mode)
        self._invalidate_attrs()

    def unlink(self, path: str) -> None:
        self._call(Opcode.UNLINK, path=path)
        self._invalidate_attrs()

    def rmdir(self, path: str) -> None:
        self._call(Opcode.RMDIR, path=path)
        self._invalidate_attrs()

    def rename(self, old_path: str, new_path: str) -> None:
        self._call(Opcode.RENAME, old_path=old_path, new_path=new_path)
        self._invalidate_attrs()

    def chmod(self, path: str, mode: int) -> None:
        self._call(Opcode.CHMOD, path=path, mode=mode)
        self._invalidate_attrs()

    def setacl(self, path: str, entries: list[tuple[int, int]]) -> None:
        self._call(Opcode.SET_ACL, path=path, entries=entries)
        self._invalidate_attrs()

    def set_policy(self, blob: bytes) -> None:
        self._call(Opcode.SET_POLICY, policy=blob)

    def opendir(self, path: str) -> int:
        return self._call(Opcode.OPENDIR, path=path)["dh"]

    def readdir(self, dh: int) -> list[tuple[str, int]]:
        return self._call(Opcode.READDIR, dh=dh)["entries"]

    def releasedir(self, dh: int) -> None:
        self._call(Opcode.RELEASEDIR, dh=dh)

    def _invalidate_attrs(self) -> None:
        if self.cache_config.enabled:
            with self._cache_lock:
                self._attr_cache.clear()

    # -- file operations ------------------------------------------------------------------

    def create(self, path: str, mode: int = 0o644) -> int:
        out = self._call(Opcode.CREATE, path=path, mode=mode)
        return self._register_open(out, path)

    def open(self, path: str, flags: int = O_RDONLY) -> int:
        out = self._call(Opcode.OPEN, path=path, flags=flags)
        return self._register_open(out, path)

    def _register_open(self, out: dict, path: str) -> int:
        attr = out["attr"]
        fh = out["fh"]
        state = _OpenFile(fh=fh, ino=attr.ino, path=path, size=attr.size,
                          mtime=attr.mtime)
        with self._cache_lock:
            if self.cache_config.enabled:
                known = self._sizes.get(attr.ino)
                # Close-to-open: revalidate against server attributes.
                if known is not None and known != attr.size:
                    self._pages.drop_inode(attr.ino)
                self._sizes[attr.ino] = attr.size
            self._files[fh] = state
        return fh

    def _file(self, fh: int) -> _OpenFile:
        state = self._files.get(fh)
        if state is None:
            raise FsError(9)  # EBADF
        return state

    def read(self, fh: int, offset: int, size: int) -> bytes:
        state = self._file(fh)
        if not self.cache_config.enabled:
            return self._call(Opcode.READ, fh=fh, offset=offset,
                              size=size)["data"]
        with self._cache_lock:
            file_size = self._sizes.get(state.ino, state.size)
            if offset >= file_size:
                return b""
            end = min(offset + size, file_size)
            first, last = offset // PAGE, (end - 1) // PAGE
            missing = [i for i in range(first, last + 1)
                       if self._pages.get(state.ino, i) is None]
            for run_start, run_len in _runs(missing):
                data = self._call(Opcode.READ, fh=fh,
                                  offset=run_start * PAGE,
                                  size=run_len * PAGE)["data"]
                for k in range(run_len):
                    chunk = data[k * PAGE:(k + 1) * PAGE]
                    page = bytearray(chunk.ljust(PAGE, b"\x00"))
                    self._pages.put(state.ino, run_start + k, page, dirty=False)
            out = bytearray()
            for i in range(first, last + 1):
                page = self._pages.get(state.ino, i)
                out += page if page is not None else bytes(PAGE)
            lo = offset - first * PAGE
            return bytes(out[lo:lo + (end - offset)])

    def write(self, fh: int, offset: int, data: bytes) -> int:
        state = self._file(fh)
        if not self.cache_config.enabled:
            return self._call(Opcode.WRITE, fh=fh, offset=offset,
                              data=data)["written"]
        if not data:
            return 0
        with self._cache_lock:
            file_size = self._sizes.get(state.ino, state.size)
            end = offset + len(data)
            first, last = offset // PAGE, (end - 1) // PAGE
            pos = 0
            for i in range(first, last + 1):
                page_lo = i * PAGE
                lo = max(offset, page_lo)
                hi = min(end, page_lo + PAGE)
                page = self._pages.get(state.ino, i)
                if page is None:
                    if (hi - lo) == PAGE or page_lo >= file_size:
                        page = bytearray(PAGE)
                    else:
                        # Partial write into an uncached page inside the
                        # server-side extent: fetch before merging.
                        fetched = self._call(Opcode.READ, fh=fh,
                                             offset=page_lo, size=PAGE)["data"]
                        page = bytearray(fetched.ljust(PAGE, b"\x00"))
                    self._pages.put(state.ino, i, page, dirty=True)
                page[lo - page_lo:hi - page_lo] = data[pos:pos + (hi - lo)]
                pos += hi - lo
                self._pages.mark_dirty(state.ino, i)
            self._sizes[state.ino] = max(file_size, end)
            dirty_count = len(self._pages.dirty)
        if dirty_count >= self.cache_config.capacity_pages * \
                self.cache_config.dirty_watermark:
            self.flush_all()
        return len(data)

    def fsync(self, fh: int) -> None:
        state = self._file(fh)
        if self.cache_config.enabled:
            self._flush_ino(state.ino, fh)
        self._call(Opcode.FSYNC, fh=fh)

    def release(self, fh: int) -> None:
        state = self._file(fh)
        if self.cache_config.enabled:
            self._flush_ino(state.ino, fh)
        self._call(Opcode.RELEASE, fh=fh)
        self._files.pop(fh, None)

    # -- writeback ---------------------------------------------------------------------------

    def _flush_ino(self, ino: int, fh: int) -> None:
        """Push the inode's dirty pages with pipelined write RPCs."""
        with self._cache_lock:
            dirty = self._pages.dirty_pages_of(ino)
            if not dirty:
                return
            size = self._sizes.get(ino, 0)
            payloads: list[tuple[int, bytes]] = []
            for idx in dirty:
                page = self._pages.get(ino, idx)
                if page is None:
                    continue
                lo = idx * PAGE
                hi = min(lo + PAGE, size)
                if hi <= lo:
                    self._pages.clear_dirty(ino, idx)
                    continue
                payloads.append((lo, bytes(page[:hi - lo])))
            with self._rpc_lock:
                if not self.alive:
                    raise SessionLost("session is not mounted")
                for start in range(0, len(payloads), self.flush_window):
                    window = payloads[start:start + self.flush_window]
                    rids = []
                    for off, chunk in window:
                        rid = self._next_request_id()
                        rids.append(rid)
                        self._send(encode_request(Opcode.WRITE, rid, fh=fh,
                                                  offset=off, data=chunk))
                    for rid in rids:
                        status, _ = self._recv_matching(Opcode.WRITE, rid)
                        if status != 0:
                            raise FsError(-status, "writeback failed")
            for idx in dirty:
                self._pages.clear_dirty(ino, idx)

    def flush_all(self) -> None:
        with self._cache_lock:
            inodes = self._pages.dirty_inodes()
            fh_by_ino = {st.ino: fh for fh, st in self._files.items()}
        for ino in inodes:
            fh = fh_by_ino.get(ino)
            if fh is not None:
                self._flush_ino(ino, fh)

    def _flusher_loop(self) -> None:
        while not self._stop_flusher.wait(self.cache_config.flush_interval):
            if not self.alive:
                return
            try:
                self.flush_all()
            except (SessionLost, FsError):
                return


def _runs(indices: list[int]) -> list[tuple[int, int]]:
    """Collapse sorted ints into (start, length) runs."""
    runs: list[tuple[int, int]] = []
    for i in indices:
        if runs and runs[-1][0] + runs[-1][1] == i:
            runs[-1] = (runs[-1][0], runs[-1][1] + 1)
        else:
            runs.append((i, 1))
    return runs


class TcpClientLink:
    """Client-side socket transport to a host front door."""

    def __init__(self, address: tuple[str, int]):
        import socket as _socket
        from .wire import read_frame, write_frame
        self._read_frame = read_frame
        self._write_frame = write_frame
        self._sock = _socket.create_connection(address)

    def send_frame(self, frame: bytes) -> None:
        self._write_frame(self._sock, frame)

    def recv_frame(self, timeout) -> "bytes | None":
        import socket as _socket
        self._sock.settimeout(timeout)
        try:
            return self._read_frame(self._sock)
        except (_socket.timeout, TimeoutError):
            return None

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
