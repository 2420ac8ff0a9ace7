"""Trusted file system core: ext-style metadata and the file operation handlers.

All structures live in plaintext only inside this module's FsCore; every
persisted byte goes through the block engine (sealed, Merkle-tracked).
Metadata mutations are write-through at operation granularity under one
coarse mutation lock.
"""

from __future__ import annotations

import errno
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .blocks import (
    BLOCK_SIZE,
    AllocStrategy,
    BlockAddress,
    BlockEngine,
)
from .errors import FsError, GenericIoError, NoSpace, PolicyRejected
from .wire import Attr

S_IFREG = 0x8000
S_IFDIR = 0x4000
PERM_MASK = 0o777

INODE_SIZE = 256
INODES_PER_BLOCK = BLOCK_SIZE // INODE_SIZE
DIRECT_POINTERS = 12
INDIRECT_ENTRIES = BLOCK_SIZE // 4  # u32 global block indices
MAX_FILE_BLOCKS = DIRECT_POINTERS + INDIRECT_ENTRIES
MAX_FILE_SIZE = MAX_FILE_BLOCKS * BLOCK_SIZE
MAX_IO = 1024 * 1024
NAME_MAX = 255
MAX_ACL_ENTRIES = 256

SUPERBLOCK_MAGIC = b"BFSSUPER"

R_OK, W_OK, X_OK = 4, 2, 1


@dataclass(frozen=True)
class Credential:
    """AUTH_SYS-style identity, fixed at mount time for a session."""

    uid: int
    gid: int
    session: int = 0


@dataclass
class Policy:
    """System-wide policy record installed through set_policy."""

    audit_allowed: bool = False

    def to_blob(self) -> bytes:
        return f"audit_allowed={'true' if self.audit_allowed else 'false'}\n" \
            .encode("ascii")

    @classmethod
    def from_blob(cls, blob: bytes) -> "Policy":
        policy = cls()
        try:
            text = blob.decode("utf-8")
        except UnicodeDecodeError:
            raise PolicyRejected("policy blob is not text") from None
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise PolicyRejected(f"malformed policy line: {line!r}")
            key, value = line.split("=", 1)
            if key.strip() == "audit_allowed":
                policy.audit_allowed = value.strip().lower() in ("1", "true", "yes")
            else:
                raise PolicyRejected(f"unknown policy key: {key.strip()!r}")
        return policy


@dataclass
class Inode:
    inode_id: int
    mode: int
    uid: int
    gid: int
    size: int
    atime: int
    mtime: int
    ctime: int
    link_count: int
    direct: list[BlockAddress | None] = field(
        default_factory=lambda: [None] * DIRECT_POINTERS)
    indirect: BlockAddress | None = None
    acl_block: BlockAddress | None = None

    _HEAD = struct.Struct("<IHIIQQQQH")

    @property
    def is_dir(self) -> bool:
        return bool(self.mode & S_IFDIR)

    def pack(self) -> bytes:
        out = bytearray(INODE_SIZE)
        self._HEAD.pack_into(out, 0, self.inode_id, self.mode, self.uid,
                             self.gid, self.size, self.atime, self.mtime,
                             self.ctime, self.link_count)
        pos = self._HEAD.size
        for ptr in self.direct:
            out[pos:pos + 8] = ptr.pack() if ptr else b"\x00" * 8
            pos += 8
        out[pos:pos + 8] = self.indirect.pack() if self.indirect else b"\x00" * 8
        pos += 8
        out[pos:pos + 8] = self.acl_block.pack() if self.acl_block else b"\x00" * 8
        return bytes(out)

    @classmethod
    def unpack(cls, raw: bytes) -> "Inode":
        vals = cls._HEAD.unpack_from(raw, 0)
        node = cls(*vals)
        pos = cls._HEAD.size

        def ptr(at: int) -> BlockAddress | None:
            chunk = raw[at:at + 8]
            return None if chunk == b"\x00" * 8 else BlockAddress.unpack(chunk)

        node.direct = [ptr(pos + i * 8) for i in range(DIRECT_POINTERS)]
        pos += DIRECT_POINTERS * 8
        node.indirect = ptr(pos)
        node.acl_block = ptr(pos + 8)
        return node


@dataclass
class Superblock:
    total_blocks: int
    inode_count: int
    free_block_count: int
    free_inode_count: int
    root_inode_id: int
    format_epoch: int
    num_devices: int
    blocks_per_device: int
    strategy: AllocStrategy
    block_bitmap_start: int
    block_bitmap_blocks: int
    inode_bitmap_start: int
    inode_bitmap_blocks: int
    inode_table_start: int
    inode_table_blocks: int

    _STRUCT = struct.Struct("<8sIIIIIIHIBIIIIII")

    def pack(self) -> bytes:
        out = self._STRUCT.pack(
            SUPERBLOCK_MAGIC, self.total_blocks, self.inode_count,
            self.free_block_count, self.free_inode_count, self.root_inode_id,
            self.format_epoch, self.num_devices, self.blocks_per_device,
            1 if self.strategy is AllocStrategy.STRIPED else 0,
            self.block_bitmap_start, self.block_bitmap_blocks,
            self.inode_bitmap_start, self.inode_bitmap_blocks,
            self.inode_table_start, self.inode_table_blocks)
        return out.ljust(BLOCK_SIZE, b"\x00")

    @classmethod
    def unpack(cls, raw: bytes) -> "Superblock":
        vals = cls._STRUCT.unpack_from(raw, 0)
        if vals[0] != SUPERBLOCK_MAGIC:
            raise FsError(errno.EIO, "superblock magic mismatch")
        return cls(total_blocks=vals[1], inode_count=vals[2],
                   free_block_count=vals[3], free_inode_count=vals[4],
                   root_inode_id=vals[5], format_epoch=vals[6],
                   num_devices=vals[7], blocks_per_device=vals[8],
                   strategy=AllocStrategy.STRIPED if vals[9] else
                   AllocStrategy.LINEAR,
                   block_bitmap_start=vals[10], block_bitmap_blocks=vals[11],
                   inode_bitmap_start=vals[12], inode_bitmap_blocks=vals[13],
                   inode_table_start=vals[14], inode_table_blocks=vals[15])


def pack_dir_entries(entries: list[tuple[str, int]]) -> bytes:
    out = bytearray()
    for name, ino in entries:
        raw = name.encode("utf-8")
        out += struct.pack("<IB", ino, len(raw))
        out += raw
    return bytes(out)


def unpack_dir_entries(payload: bytes) -> list[tuple[str, int]]:
    entries = []
    pos = 0
    while pos < len(payload):
        ino, name_len = struct.unpack_from("<IB", payload, pos)
        pos += 5
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        entries.append((name, ino))
    return entries


def dir_entry_size(name: str) -> int:
    return 5 + len(name.encode("utf-8"))


def blocks_for_size(size: int) -> int:
    return (size + BLOCK_SIZE - 1) // BLOCK_SIZE


def file_block_cost(size: int) -> int:
    """Data blocks plus the indirect block once the file outgrows the
    direct pointers."""
    n = blocks_for_size(size)
    return n + (1 if n > DIRECT_POINTERS else 0)


def valid_name(name: str) -> bool:
    if name in (".", ".."):
        return False
    raw = name.encode("utf-8", errors="ignore")
    if not 1 <= len(raw) <= NAME_MAX:
        return False
    return "/" not in name and "\x00" not in name


class HandleTable:
    """Per-session open file/directory handles.

    Each handle remembers the inode's incarnation so a handle cannot attach
    to a different file that later recycles the same inode slot.
    """

    def __init__(self) -> None:
        self._next = 0
        self.files: dict[int, tuple[int, int]] = {}  # fh -> (ino, incarnation)
        self.dirs: dict[int, tuple[int, int]] = {}

    def open_file(self, inode_id: int, incarnation: int) -> int:
        self._next += 1
        self.files[self._next] = (inode_id, incarnation)
        return self._next

    def open_dir(self, inode_id: int, incarnation: int) -> int:
        self._next += 1
        self.dirs[self._next] = (inode_id, incarnation)
        return self._next


@dataclass(frozen=True)
class AuditEvent:
    uid: int
    action: str
    path_or_ino: str


class FsCore:
    """The trusted core: in-memory image with write-through persistence."""

    def __init__(self, engine: BlockEngine, superblock: Superblock):
        self.engine = engine
        self.sb = superblock
        self.inodes: list[Optional[Inode]] = [None] * (superblock.inode_count + 1)
        self.inode_bits = bytearray((superblock.inode_count + 7) // 8)
        self.dirs: dict[int, list[tuple[str, int]]] = {}
        self.acls: dict[int, dict[int, int]] = {}
        self.policy = Policy()
        self.audit_log: list[AuditEvent] = []
        self._incarnation: dict[int, int] = {}
        self._mutex = threading.RLock()
        self._dirty_super = False
        self._dirty_inodes: set[int] = set()
        self._dirty_block_bitmap = False
        self._dirty_inode_bitmap = False

    # -- format / boot ---------------------------------------------------------

    @classmethod
    def format(cls, engine: BlockEngine, inode_count: int = 512,
               strategy: AllocStrategy = AllocStrategy.LINEAR,
               root_uid: int = 0, root_gid: int = 0,
               root_mode: int = 0o777, format_epoch: int = 1) -> "FsCore":
        geom = engine.geometry
        nbb = (geom.total_blocks + BLOCK_SIZE * 8 - 1) // (BLOCK_SIZE * 8)
        nib = (inode_count + BLOCK_SIZE * 8 - 1) // (BLOCK_SIZE * 8)
        nit = (inode_count + INODES_PER_BLOCK - 1) // INODES_PER_BLOCK
        reserved = 1 + nbb + nib + nit
        if reserved >= geom.blocks_per_device:
            raise FsError(errno.EINVAL, "device 0 too small for metadata")
        sb = Superblock(
            total_blocks=geom.total_blocks, inode_count=inode_count,
            free_block_count=geom.total_blocks - reserved,
            free_inode_count=inode_count, root_inode_id=1,
            format_epoch=format_epoch, num_devices=geom.num_devices,
            blocks_per_device=geom.blocks_per_device, strategy=strategy,
            block_bitmap_start=1, block_bitmap_blocks=nbb,
            inode_bitmap_start=1 + nbb, inode_bitmap_blocks=nib,
            inode_table_start=1 + nbb + nib, inode_table_blocks=nit)
        core = cls(engine, sb)
        for gidx in range(reserved):
            engine.allocator.mark_allocated(gidx)
        now = int(time.time())
        root = Inode(inode_id=1, mode=S_IFDIR | (root_mode & PERM_MASK),
                     uid=root_uid, gid=root_gid, size=0, atime=now, mtime=now,
                     ctime=now, link_count=2)
        core._install_inode(root)
        core.dirs[1] = [(".", 1), ("..", 1)]
        core._write_dir_payload(root)
        core._dirty_super = True
        core._dirty_block_bitmap = True
        core._dirty_inode_bitmap = True
        core._commit()
        # Full metadata image to disk, then anchor it.
        core._write_all_metadata()
        engine.checkpoint_merkle()
        return core

    @classmethod
    def boot(cls, engine: BlockEngine) -> "FsCore":
        raw = engine.read_block(BlockAddress(0, 0))
        sb = Superblock.unpack(raw)
        core = cls(engine, sb)
        # bitmaps
        bits = bytearray()
        for i in range(sb.block_bitmap_blocks):
            bits += engine.read_block(core._meta_addr(sb.block_bitmap_start + i))
        engine.allocator.load_bits(bytes(bits))
        ibits = bytearray()
        for i in range(sb.inode_bitmap_blocks):
            ibits += engine.read_block(core._meta_addr(sb.inode_bitmap_start + i))
        core.inode_bits = ibits[:(sb.inode_count + 7) // 8]
        # inode table
        for b in range(sb.inode_table_blocks):
            raw = engine.read_block(core._meta_addr(sb.inode_table_start + b))
            for s in range(INODES_PER_BLOCK):
                idx = b * INODES_PER_BLOCK + s
                if idx >= sb.inode_count:
                    break
                if core._inode_bit(idx + 1):
                    node = Inode.unpack(raw[s * INODE_SIZE:(s + 1) * INODE_SIZE])
                    core.inodes[idx + 1] = node
                    core._incarnation[idx + 1] = 1
        # directory payloads and ACLs
        for node in core.inodes:
            if node is None:
                continue
            if node.is_dir:
                payload = core._read_file_content(node)
                core.dirs[node.inode_id] = unpack_dir_entries(payload)
            if node.acl_block is not None:
                core.acls[node.inode_id] = core._read_acl_block(node)
        sanity = core.fsck()
        if sanity:
            raise FsError(errno.EIO, f"boot fsck failed: {sanity[0]}")
        return core

    # -- low-level helpers -------------------------------------------------------

    def _meta_addr(self, global_index: int) -> BlockAddress:
        return self.engine.geometry.address(global_index)

    def _inode_bit(self, inode_id: int) -> bool:
        idx = inode_id - 1
        return bool(self.inode_bits[idx // 8] & (1 << (idx % 8)))

    def _set_inode_bit(self, inode_id: int, value: bool) -> None:
        idx = inode_id - 1
        mask = 1 << (idx % 8)
        if value:
            self.inode_bits[idx // 8] |= mask
        else:
            self.inode_bits[idx // 8] &= ~mask
        self._dirty_inode_bitmap = True

    def _install_inode(self, node: Inode) -> None:
        self._incarnation[node.inode_id] = \
            self._incarnation.get(node.inode_id, 0) + 1
        self.inodes[node.inode_id] = node
        self._set_inode_bit(node.inode_id, True)
        self.sb.free_inode_count -= 1
        self._dirty_inodes.add(node.inode_id)
        self._dirty_super = True

    def _alloc_inode_id(self) -> int:
        for idx in range(self.sb.inode_count):
            if not self._inode_bit(idx + 1):
                return idx + 1
        raise FsError(errno.ENOSPC, "out of inodes")

    def _drop_inode(self, node: Inode) -> None:
        self.inodes[node.inode_id] = None
        self._set_inode_bit(node.inode_id, False)
        self.sb.free_inode_count += 1
        self._dirty_inodes.add(node.inode_id)
        self._dirty_super = True

    def _alloc_blocks(self, n: int) -> list[BlockAddress]:
        if n == 0:
            return []
        try:
            addrs = self.engine.allocate_blocks(n, self.sb.strategy)
        except NoSpace:
            raise FsError(errno.ENOSPC, "out of blocks") from None
        self.sb.free_block_count -= n
        self._dirty_super = True
        self._dirty_block_bitmap = True
        return addrs

    def _free_blocks(self, addrs: list[BlockAddress]) -> None:
        if not addrs:
            return
        self.engine.free_blocks(addrs)
        self.sb.free_block_count += len(addrs)
        self._dirty_super = True
        self._dirty_block_bitmap = True

    def _logical_addrs(self, node: Inode, count: int) -> list[BlockAddress]:
        """Addresses of the first count logical blocks of a file."""
        out = []
        indirect: list[int] | None = None
        for logical in range(count):
            if logical < DIRECT_POINTERS:
                ptr = node.direct[logical]
                if ptr is None:
                    raise FsError(errno.EIO, "missing direct pointer")
                out.append(ptr)
            else:
                if indirect is None:
                    if node.indirect is None:
                        raise FsError(errno.EIO, "missing indirect block")
                    raw = self.engine.read_block(node.indirect)
                    indirect = list(struct.unpack(f"<{INDIRECT_ENTRIES}I", raw))
                gidx = indirect[logical - DIRECT_POINTERS]
                if gidx == 0:
                    raise FsError(errno.EIO, "missing indirect pointer")
                out.append(self.engine.geometry.address(gidx))
        return out

    def _read_file_content(self, node: Inode) -> bytes:
        if node.size == 0:
            return b""
        count = blocks_for_size(node.size)
        addrs = self._logical_addrs(node, count)
        blocks = self.engine.read_blocks(addrs)
        return b"".join(blocks)[:node.size]

    def _indirect_payload(self, addrs: list[BlockAddress]) -> bytes:
        entries = [0] * INDIRECT_ENTRIES
        for i, addr in enumerate(addrs[DIRECT_POINTERS:]):
            entries[i] = self.engine.geometry.global_index(addr)
        return struct.pack(f"<{INDIRECT_ENTRIES}I", *entries)

    def _place_pointers(self, node: Inode, addrs: list[BlockAddress],
                        indirect: BlockAddress | None) -> None:
        node.direct = [addrs[i] if i < len(addrs) else None
                       for i in range(DIRECT_POINTERS)]
        node.indirect = indirect
        self._dirty_inodes.add(node.inode_id)

    def _set_file_content(self, node: Inode, payload: bytes) -> None:
        """Replace a file's content wholesale (directory/ACL payloads).

        Storage writes happen first; in-memory pointers and sizes change only
        after every block is acknowledged, so a failed write leaves the old
        state intact and verifiable.
        """
        old_count = blocks_for_size(node.size)
        new_count = blocks_for_size(len(payload))
        need_indirect = new_count > DIRECT_POINTERS
        had_indirect = node.indirect is not None
        old_addrs = self._logical_addrs(node, old_count) if node.size else []
        fresh: list[BlockAddress] = []
        indirect = node.indirect
        if new_count > old_count or (need_indirect and not had_indirect):
            grow = max(0, new_count - old_count)
            extra = 1 if need_indirect and not had_indirect else 0
            fresh = self._alloc_blocks(grow + extra)
            if extra:
                indirect = fresh[0]
            addrs = old_addrs + fresh[extra:] if fresh[extra:] else old_addrs
        else:
            addrs = old_addrs[:new_count]
        writes = []
        for i, addr in enumerate(addrs):
            chunk = payload[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE]
            writes.append((addr, chunk.ljust(BLOCK_SIZE, b"\x00")))
        if need_indirect:
            writes.append((indirect, self._indirect_payload(addrs)))
        try:
            self.engine.write_blocks(writes)
        except GenericIoError:
            if fresh:
                self._free_blocks(fresh)
            raise FsError(errno.EIO, "metadata write failed") from None
        if not need_indirect and had_indirect:
            self._free_blocks([node.indirect])
            indirect = None
        if new_count < old_count:
            self._free_blocks(old_addrs[new_count:])
        self._place_pointers(node, addrs, indirect)
        node.size = len(payload)
        node.mtime = int(time.time())
        self._dirty_inodes.add(node.inode_id)

    def _write_dir_payload(self, node: Inode) -> None:
        self._set_file_content(node, pack_dir_entries(self.dirs[node.inode_id]))

    def _update_dir(self, node: Inode, entries: list[tuple[str, int]]) -> None:
        """Persist a directory's new entry list, then adopt it in memory."""
        self._set_file_content(node, pack_dir_entries(entries))
        self.dirs[node.inode_id] = entries

    def _read_acl_block(self, node: Inode) -> dict[int, int]:
        raw = self.engine.read_block(node.acl_block)
        (count,) = struct.unpack_from("<H", raw, 0)
        out = {}
        for i in range(count):
            uid, perms = struct.unpack_from("<IB", raw, 2 + i * 5)
            out[uid] = perms
        return out

    def _write_acl_block(self, node: Inode) -> None:
        acl = self.acls.get(node.inode_id, {})
        if not acl:
            if node.acl_block is not None:
                self._free_blocks([node.acl_block])
                node.acl_block = None
                self._dirty_inodes.add(node.inode_id)
            return
        if node.acl_block is None:
            [node.acl_block] = self._alloc_blocks(1)
            self._dirty_inodes.add(node.inode_id)
        out = bytearray(struct.pack("<H", len(acl)))
        for uid, perms in sorted(acl.items()):
            out += struct.pack("<IB", uid, perms)
        self.engine.write_block(node.acl_block,
                                bytes(out).ljust(BLOCK_SIZE, b"\x00"))

    # -- write-through commit -----------------------------------------------------

    def _commit(self) -> None:
        writes: list[tuple[BlockAddress, bytes]] = []
        if self._dirty_super:
            writes.append((self._meta_addr(0), self.sb.pack()))
        if self._dirty_block_bitmap:
            bits = self.engine.allocator.bits
            for i in range(self.sb.block_bitmap_blocks):
                chunk = bytes(bits[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE])
                writes.append((self._meta_addr(self.sb.block_bitmap_start + i),
                               chunk.ljust(BLOCK_SIZE, b"\x00")))
        if self._dirty_inode_bitmap:
            for i in range(self.sb.inode_bitmap_blocks):
                chunk = bytes(self.inode_bits[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE])
                writes.append((self._meta_addr(self.sb.inode_bitmap_start + i),
                               chunk.ljust(BLOCK_SIZE, b"\x00")))
        touched_blocks = {(i - 1) // INODES_PER_BLOCK for i in self._dirty_inodes}
        for b in touched_blocks:
            out = bytearray(BLOCK_SIZE)
            for s in range(INODES_PER_BLOCK):
                idx = b * INODES_PER_BLOCK + s
                if idx >= self.sb.inode_count:
                    break
                node = self.inodes[idx + 1]
                if node is not None:
                    out[s * INODE_SIZE:(s + 1) * INODE_SIZE] = node.pack()
            writes.append((self._meta_addr(self.sb.inode_table_start + b),
                           bytes(out)))
        if writes:
            self.engine.write_blocks(writes)
        self._dirty_super = False
        self._dirty_block_bitmap = False
        self._dirty_inode_bitmap = False
        self._dirty_inodes.clear()

    def _write_all_metadata(self) -> None:
        """Materialize every metadata block, including empty table blocks."""
        self._dirty_super = True
        self._dirty_block_bitmap = True
        self._dirty_inode_bitmap = True
        self._dirty_inodes = {b * INODES_PER_BLOCK + 1
                              for b in range(self.sb.inode_table_blocks)}
        self._dirty_inodes.update(n.inode_id for n in self.inodes if n)
        self._commit()

    # -- permissions ---------------------------------------------------------------

    def _effective_perms(self, node: Inode, cred: Credential) -> int:
        if cred.uid == node.uid:
            base = (node.mode >> 6) & 7
        elif cred.gid == node.gid:
            base = (node.mode >> 3) & 7
        else:
            base = node.mode & 7
        return base | self.acls.get(node.inode_id, {}).get(cred.uid, 0)

    def _check_perm(self, node: Inode, cred: Credential, want: int,
                    what: str = "") -> None:
        if self._effective_perms(node, cred) & want == want:
            return
        if cred.uid == 0 and self.policy.audit_allowed and not (want & W_OK):
            self.audit_log.append(AuditEvent(cred.uid, "audit-read",
                                             what or str(node.inode_id)))
            return
        raise FsError(errno.EACCES, what)

    # -- path resolution -------------------------------------------------------------

    @staticmethod
    def _components(path: str) -> list[str]:
        if not path.startswith("/"):
            raise FsError(errno.EINVAL, f"path must be absolute: {path!r}")
        return [c for c in path.split("/") if c]

    def _node(self, inode_id: int) -> Inode:
        node = self.inodes[inode_id] if 0 < inode_id < len(self.inodes) else None
        if node is None:
            raise FsError(errno.EIO, f"dangling inode reference {inode_id}")
        return node

    def _resolve(self, path: str, cred: Credential) -> Inode:
        node = self._node(self.sb.root_inode_id)
        for name in self._components(path):
            if not node.is_dir:
                raise FsError(errno.ENOTDIR, path)
            self._check_perm(node, cred, X_OK, path)
            entries = dict(self.dirs[node.inode_id])
            if name not in entries:
                raise FsError(errno.ENOENT, path)
            node = self._node(entries[name])
        return node

    def _resolve_parent(self, path: str, cred: Credential) -> tuple[Inode, str]:
        parts = self._components(path)
        if not parts:
            raise FsError(errno.EINVAL, "operation on root directory")
        name = parts[-1]
        parent = self._node(self.sb.root_inode_id)
        for comp in parts[:-1]:
            if not parent.is_dir:
                raise FsError(errno.ENOTDIR, path)
            self._check_perm(parent, cred, X_OK, path)
            entries = dict(self.dirs[parent.inode_id])
            if comp not in entries:
                raise FsError(errno.ENOENT, path)
            parent = self._node(entries[comp])
        if not parent.is_dir:
            raise FsError(errno.ENOTDIR, path)
        return parent, name

    def _lookup(self, parent: Inode, name: str) -> Optional[Inode]:
        entries = dict(self.dirs[parent.inode_id])
        if name not in entries:
            return None
        return self._node(entries[name])

    def _attr(self, node: Inode) -> Attr:
        return Attr(mode=node.mode, uid=node.uid, gid=node.gid, size=node.size,
                    nlink=node.link_count, atime=node.atime, mtime=node.mtime,
                    ctime=node.ctime, ino=node.inode_id)

    # -- handlers ------------------------------------------------------------------

    def getattr(self, cred: Credential, path: str) -> Attr:
        with self._mutex:
            return self._attr(self._resolve(path, cred))

    def _prepare_entry(self, cred: Credential, path: str) -> tuple[Inode, str]:
        """Shared create/mkdir path checks, in a fixed order."""
        parent, name = self._resolve_parent(path, cred)
        if not valid_name(name):
            raise FsError(errno.EINVAL, f"bad name {name!r}")
        self._check_perm(parent, cred, W_OK | X_OK, path)
        if self._lookup(parent, name) is not None:
            raise FsError(errno.EEXIST, path)
        return parent, name

    def _dir_growth_cost(self, parent: Inode, name: str) -> int:
        new_len = parent.size + dir_entry_size(name)
        return blocks_for_size(new_len) - blocks_for_size(parent.size)

    def _require_space(self, blocks: int, inodes: int) -> None:
        if self.sb.free_inode_count < inodes or \
                self.sb.free_block_count < blocks:
            raise FsError(errno.ENOSPC)

    def create(self, cred: Credential, handles: HandleTable, path: str,
               mode: int) -> tuple[int, Attr]:
        with self._mutex:
            parent, name = self._prepare_entry(cred, path)
            self._require_space(self._dir_growth_cost(parent, name), 1)
            now = int(time.time())
            node = Inode(inode_id=self._alloc_inode_id(),
                         mode=S_IFREG | (mode & PERM_MASK), uid=cred.uid,
                         gid=cred.gid, size=0, atime=now, mtime=now, ctime=now,
                         link_count=1)
            self._install_inode(node)
            try:
                self._update_dir(parent, self.dirs[parent.inode_id] +
                                 [(name, node.inode_id)])
            except FsError:
                self._drop_inode(node)
                self._commit()
                raise
            self._commit()
            return handles.open_file(node.inode_id,
                                     self._incarnation[node.inode_id]), \
                self._attr(node)

    def mkdir(self, cred: Credential, path: str, mode: int) -> None:
        with self._mutex:
            parent, name = self._prepare_entry(cred, path)
            self._require_space(1 + self._dir_growth_cost(parent, name), 1)
            now = int(time.time())
            node = Inode(inode_id=self._alloc_inode_id(),
                         mode=S_IFDIR | (mode & PERM_MASK), uid=cred.uid,
                         gid=cred.gid, size=0, atime=now, mtime=now, ctime=now,
                         link_count=2)
            self._install_inode(node)
            try:
                self._update_dir(node, [(".", node.inode_id),
                                        ("..", parent.inode_id)])
                self._update_dir(parent, self.dirs[parent.inode_id] +
                                 [(name, node.inode_id)])
            except FsError:
                self._free_file_storage(node)
                self.dirs.pop(node.inode_id, None)
                self._drop_inode(node)
                self._commit()
                raise
            parent.link_count += 1
            self._dirty_inodes.add(parent.inode_id)
            self._commit()

    def open(self, cred: Credential, handles: HandleTable, path: str,
             flags: int) -> tuple[int, Attr]:
        with self._mutex:
            node = self._resolve(path, cred)
            if node.is_dir:
                raise FsError(errno.EISDIR, path)
            access = flags & 3  # 0=rdonly 1=wronly 2=rdwr
            want = {0: R_OK, 1: W_OK, 2: R_OK | W_OK}.get(access)
            if want is None:
                raise FsError(errno.EINVAL, "bad open flags")
            self._check_perm(node, cred, want, path)
            return handles.open_file(node.inode_id,
                                     self._incarnation[node.inode_id]), \
                self._attr(node)

    def _file_handle(self, handles: HandleTable, fh: int) -> Inode:
        entry = handles.files.get(fh)
        if entry is None:
            raise FsError(errno.EBADF)
        inode_id, incarnation = entry
        node = self.inodes[inode_id]
        if node is None or self._incarnation.get(inode_id) != incarnation:
            # Blocks are reclaimed at unlink time, so a handle to an
            # unlinked file goes stale rather than lingering POSIX-style.
            raise FsError(errno.EBADF, "stale handle to removed file")
        return node

    def read(self, cred: Credential, handles: HandleTable, fh: int,
             offset: int, size: int) -> bytes:
        with self._mutex:
            node = self._file_handle(handles, fh)
            # Re-checked on every request: revocation takes effect at once.
            self._check_perm(node, cred, R_OK, f"ino {node.inode_id}")
            if size > MAX_IO:
                raise FsError(errno.EINVAL, "read larger than max I/O size")
            if offset >= node.size:
                return b""
            end = min(node.size, offset + size)
            first = offset // BLOCK_SIZE
            last = (end - 1) // BLOCK_SIZE
            addrs = self._logical_addrs(node, last + 1)[first:]
            data = b"".join(self.engine.read_blocks(addrs))
            return data[offset - first * BLOCK_SIZE:
                        offset - first * BLOCK_SIZE + (end - offset)]

    def write(self, cred: Credential, handles: HandleTable, fh: int,
              offset: int, data: bytes) -> int:
        with self._mutex:
            node = self._file_handle(handles, fh)
            self._check_perm(node, cred, W_OK, f"ino {node.inode_id}")
            if len(data) > MAX_IO:
                raise FsError(errno.EINVAL, "write larger than max I/O size")
            if not data:
                return 0
            end = offset + len(data)
            if end > MAX_FILE_SIZE:
                raise FsError(errno.EFBIG)
            old_size = node.size
            old_count = blocks_for_size(old_size)
            new_count = max(old_count, blocks_for_size(end))
            need = new_count - old_count
            grows_indirect = new_count > DIRECT_POINTERS and \
                old_count <= DIRECT_POINTERS
            self._require_space(need + (1 if grows_indirect else 0), 0)
            fresh: list[BlockAddress] = []
            indirect = node.indirect
            if need or grows_indirect:
                fresh = self._alloc_blocks(need + (1 if grows_indirect else 0))
            if grows_indirect:
                indirect = fresh[0]
                fresh_data = fresh[1:]
            else:
                fresh_data = fresh
            addrs = (self._logical_addrs(node, old_count) if old_size else []) \
                + fresh_data
            first = offset // BLOCK_SIZE
            last = (end - 1) // BLOCK_SIZE
            # Every newly allocated block must be materialized, including
            # zero-fill gap blocks between the old extent and the write.
            touched = sorted(set(range(first, last + 1)) |
                             set(range(old_count, new_count)))
            writes = []
            for logical in touched:
                blk_start = logical * BLOCK_SIZE
                lo = max(offset, blk_start)
                hi = min(end, blk_start + BLOCK_SIZE)
                covered = lo < hi
                fully_covered = covered and lo == blk_start and \
                    hi == blk_start + BLOCK_SIZE
                if logical < old_count and not fully_covered:
                    base = bytearray(self.engine.read_block(addrs[logical]))
                else:
                    base = bytearray(BLOCK_SIZE)
                if covered:
                    base[lo - blk_start:hi - blk_start] = \
                        data[lo - offset:hi - offset]
                writes.append((addrs[logical], bytes(base)))
            if new_count > DIRECT_POINTERS and (grows_indirect or need):
                writes.append((indirect, self._indirect_payload(addrs)))
            try:
                self.engine.write_blocks(writes)
            except GenericIoError:
                # The extension never happened: sealed bytes for these blocks
                # are uncommitted in the tree and thus unreachable.
                if fresh:
                    self._free_blocks(fresh)
                self._commit()
                raise FsError(errno.EIO, "block write failed") from None
            self._place_pointers(node, addrs, indirect)
            node.size = max(old_size, end)
            node.mtime = int(time.time())
            self._dirty_inodes.add(node.inode_id)
            self._commit()
            return len(data)

    def release(self, handles: HandleTable, fh: int) -> None:
        if handles.files.pop(fh, None) is None:
            raise FsError(errno.EBADF)

    def fsync(self, handles: HandleTable, fh: int) -> None:
        with self._mutex:
            self._file_handle(handles, fh)
            # Data and metadata are write-through; anchor the tree.
            self.engine.checkpoint_merkle()

    def unlink(self, cred: Credential, path: str) -> None:
        with self._mutex:
            parent, name = self._resolve_parent(path, cred)
            if not valid_name(name):
                raise FsError(errno.EINVAL, f"bad name {name!r}")
            self._check_perm(parent, cred, W_OK | X_OK, path)
            node = self._lookup(parent, name)
            if node is None:
                raise FsError(errno.ENOENT, path)
            if node.is_dir:
                raise FsError(errno.EISDIR, path)
            self._update_dir(parent, [(n, i) for n, i in
                                      self.dirs[parent.inode_id] if n != name])
            node.link_count -= 1
            if node.link_count == 0:
                self._free_file_storage(node)
                self._drop_inode(node)
            else:
                self._dirty_inodes.add(node.inode_id)
            self._commit()

    def _free_file_storage(self, node: Inode) -> None:
        count = blocks_for_size(node.size)
        addrs = self._logical_addrs(node, count) if node.size else []
        if node.indirect is not None:
            addrs = addrs + [node.indirect]
        if node.acl_block is not None:
            addrs = addrs + [node.acl_block]
        self.acls.pop(node.inode_id, None)
        self._free_blocks(addrs)

    def rmdir(self, cred: Credential, path: str) -> None:
        with self._mutex:
            parts = self._components(path)
            if not parts:
                raise FsError(errno.EBUSY, "cannot remove root directory")
            parent, name = self._resolve_parent(path, cred)
            if not valid_name(name):
                raise FsError(errno.EINVAL, f"bad name {name!r}")
            self._check_perm(parent, cred, W_OK | X_OK, path)
            node = self._lookup(parent, name)
            if node is None:
                raise FsError(errno.ENOENT, path)
            if not node.is_dir:
                raise FsError(errno.ENOTDIR, path)
            if len(self.dirs[node.inode_id]) > 2:
                raise FsError(errno.ENOTEMPTY, path)
            self._update_dir(parent, [(n, i) for n, i in
                                      self.dirs[parent.inode_id] if n != name])
            parent.link_count -= 1
            self._dirty_inodes.add(parent.inode_id)
            self._free_file_storage(node)
            self.dirs.pop(node.inode_id, None)
            self._drop_inode(node)
            self._commit()

    def rename(self, cred: Credential, old_path: str, new_path: str) -> None:
        with self._mutex:
            old_parent, old_name = self._resolve_parent(old_path, cred)
            if not valid_name(old_name):
                raise FsError(errno.EINVAL, "bad rename source name")
            new_parent, new_name = self._resolve_parent(new_path, cred)
            if not valid_name(new_name):
                raise FsError(errno.EINVAL, "bad rename target name")
            self._check_perm(old_parent, cred, W_OK | X_OK, old_path)
            self._check_perm(new_parent, cred, W_OK | X_OK, new_path)
            node = self._lookup(old_parent, old_name)
            if node is None:
                raise FsError(errno.ENOENT, old_path)
            if node.is_dir and self._inside_subtree(node, new_parent):
                raise FsError(errno.EINVAL, "rename into own subtree")
            if old_parent.inode_id == new_parent.inode_id and \
                    old_name == new_name:
                return
            target = self._lookup(new_parent, new_name)
            if target is not None:
                if node.is_dir and not target.is_dir:
                    raise FsError(errno.ENOTDIR, new_path)
                if not node.is_dir and target.is_dir:
                    raise FsError(errno.EISDIR, new_path)
                if target.is_dir and len(self.dirs[target.inode_id]) > 2:
                    raise FsError(errno.ENOTEMPTY, new_path)
            growth = 0 if target is not None else \
                self._dir_growth_cost(new_parent, new_name)
            self._require_space(growth, 0)
            same_parent = old_parent.inode_id == new_parent.inode_id
            # All checks passed: apply everything inside one mutation scope.
            new_entries = [(n, i) for n, i in self.dirs[new_parent.inode_id]
                           if n != new_name]
            if same_parent:
                new_entries = [(n, i) for n, i in new_entries if n != old_name]
            new_entries.append((new_name, node.inode_id))
            if target is not None:
                if target.is_dir:
                    new_parent.link_count -= 1
                    self.dirs.pop(target.inode_id, None)
                    self._free_file_storage(target)
                    self._drop_inode(target)
                else:
                    target.link_count -= 1
                    if target.link_count == 0:
                        self._free_file_storage(target)
                        self._drop_inode(target)
                    else:
                        self._dirty_inodes.add(target.inode_id)
            self._update_dir(new_parent, new_entries)
            if not same_parent:
                self._update_dir(old_parent,
                                 [(n, i) for n, i in
                                  self.dirs[old_parent.inode_id]
                                  if n != old_name])
            if node.is_dir and not same_parent:
                old_parent.link_count -= 1
                new_parent.link_count += 1
                self._dirty_inodes.update({old_parent.inode_id,
                                           new_parent.inode_id})
                self._update_dir(node, [
                    (n, (new_parent.inode_id if n == ".." else i))
                    for n, i in self.dirs[node.inode_id]])
            node.ctime = int(time.time())
            self._dirty_inodes.add(node.inode_id)
            self._commit()

    def _inside_subtree(self, root: Inode, candidate: Inode) -> bool:
        """True if candidate is root itself or lives under it."""
        if root.inode_id == candidate.inode_id:
            return True
        seen = set()
        stack = [root.inode_id]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            for name, ino in self.dirs.get(cur, []):
                if name in (".", ".."):
                    continue
                if ino == candidate.inode_id:
                    return True
                child = self.inodes[ino]
                if child is not None and child.is_dir:
                    stack.append(ino)
        return False

    def chmod(self, cred: Credential, path: str, mode: int) -> None:
        with self._mutex:
            node = self._resolve(path, cred)
            if cred.uid != 0 and cred.uid != node.uid:
                raise FsError(errno.EPERM, path)
            node.mode = (node.mode & ~PERM_MASK) | (mode & PERM_MASK)
            node.ctime = int(time.time())
            self._dirty_inodes.add(node.inode_id)
            self._commit()

    def setacl(self, cred: Credential, path: str,
               entries: list[tuple[int, int]]) -> None:
        with self._mutex:
            node = self._resolve(path, cred)
            if cred.uid != 0 and cred.uid != node.uid:
                raise FsError(errno.EPERM, path)
            if len(entries) > MAX_ACL_ENTRIES:
                raise FsError(errno.EINVAL, "too many ACL entries")
            if any(perms > 7 for _, perms in entries):
                raise FsError(errno.EINVAL, "ACL perms must be rwx bits")
            if entries and node.acl_block is None:
                self._require_space(1, 0)
            self.acls[node.inode_id] = {uid: perms for uid, perms in entries}
            if not entries:
                self.acls.pop(node.inode_id, None)
            self._write_acl_block(node)
            node.ctime = int(time.time())
            self._dirty_inodes.add(node.inode_id)
            self._commit()

    def opendir(self, cred: Credential, handles: HandleTable,
                path: str) -> int:
        with self._mutex:
            node = self._resolve(path, cred)
            if not node.is_dir:
                raise FsError(errno.ENOTDIR, path)
            self._check_perm(node, cred, R_OK, path)
            return handles.open_dir(node.inode_id,
                                    self._incarnation[node.inode_id])

    def readdir(self, cred: Credential, handles: HandleTable,
                dh: int) -> list[tuple[str, int]]:
        with self._mutex:
            entry = handles.dirs.get(dh)
            if entry is None:
                raise FsError(errno.EBADF)
            inode_id, incarnation = entry
            node = self.inodes[inode_id]
            if node is None or self._incarnation.get(inode_id) != incarnation:
                raise FsError(errno.EBADF, "stale handle to removed directory")
            self._check_perm(node, cred, R_OK, f"ino {inode_id}")
            return list(self.dirs[inode_id])

    def releasedir(self, handles: HandleTable, dh: int) -> None:
        if handles.dirs.pop(dh, None) is None:
            raise FsError(errno.EBADF)

    def set_policy(self, cred: Credential, blob: bytes) -> None:
        with self._mutex:
            if cred.uid != 0:
                raise PolicyRejected("set_policy requires the admin uid")
            self.policy = Policy.from_blob(blob)

    # -- fsck -----------------------------------------------------------------------

    def fsck(self) -> list[str]:
        """Invariant check over the in-memory image; empty list = clean."""
        with self._mutex:
            problems: list[str] = []
            alloc = self.engine.allocator
            # bitmap counts vs superblock
            allocated_blocks = alloc.allocated_popcount()
            if self.sb.free_block_count != \
                    self.sb.total_blocks - allocated_blocks:
                problems.append(
                    f"free block count {self.sb.free_block_count} != bitmap "
                    f"{self.sb.total_blocks - allocated_blocks}")
            used_inodes = sum(bin(b).count("1") for b in self.inode_bits)
            if self.sb.free_inode_count != self.sb.inode_count - used_inodes:
                problems.append(
                    f"free inode count {self.sb.free_inode_count} != bitmap "
                    f"{self.sb.inode_count - used_inodes}")
            # reachability and link counts
            reachable: dict[int, int] = {}  # ino -> entries referencing it
            subdirs: dict[int, int] = {}
            stack = [self.sb.root_inode_id]
            visited = set()
            while stack:
                ino = stack.pop()
                if ino in visited:
                    continue
                visited.add(ino)
                for name, child_ino in self.dirs.get(ino, []):
                    if name == ".":
                        continue
                    if name == "..":
                        continue
                    child = self.inodes[child_ino] \
                        if 0 < child_ino < len(self.inodes) else None
                    if child is None:
                        problems.append(f"dangling entry {name!r} in {ino}")
                        continue
                    reachable[child_ino] = reachable.get(child_ino, 0) + 1
                    if child.is_dir:
                        subdirs[ino] = subdirs.get(ino, 0) + 1
                        stack.append(child_ino)
            for idx in range(self.sb.inode_count):
                ino = idx + 1
                allocated = self._inode_bit(ino)
                node = self.inodes[ino]
                if allocated != (node is not None):
                    problems.append(f"inode {ino} bitmap/table mismatch")
                    continue
                if node is None:
                    continue
                if ino != self.sb.root_inode_id and ino not in reachable:
                    problems.append(f"orphan inode {ino}")
                    continue
                if node.is_dir:
                    expect = 2 + subdirs.get(ino, 0)
                else:
                    expect = reachable.get(ino, 0)
                if node.link_count != expect:
                    problems.append(
                        f"inode {ino} link count {node.link_count} != {expect}")
                if node.is_dir:
                    entries = self.dirs.get(ino, [])
                    names = [n for n, _ in entries]
                    if "." not in names or ".." not in names:
                        problems.append(f"dir {ino} missing . or ..")
                    if len(names) != len(set(names)):
                        problems.append(f"dir {ino} has duplicate names")
                if node.size > MAX_FILE_SIZE:
                    problems.append(f"inode {ino} exceeds max size")
            # block references
            refs: dict[int, int] = {}

            def ref(addr: BlockAddress, what: str) -> None:
                gidx = self.engine.geometry.global_index(addr)
                refs[gidx] = refs.get(gidx, 0) + 1
                if not alloc.is_allocated(gidx):
                    problems.append(f"{what} references free block {addr}")

            for node in self.inodes:
                if node is None:
                    continue
                count = blocks_for_size(node.size)
                try:
                    for addr in self._logical_addrs(node, count):
                        ref(addr, f"inode {node.inode_id}")
                except FsError:
                    problems.append(f"inode {node.inode_id} pointer chain broken")
                if node.indirect is not None:
                    ref(node.indirect, f"inode {node.inode_id} indirect")
                if node.acl_block is not None:
                    ref(node.acl_block, f"inode {node.inode_id} acl")
            doubly = [g for g, c in refs.items() if c > 1]
            if doubly:
                problems.append(f"blocks referenced more than once: {doubly}")
            reserved = 1 + self.sb.block_bitmap_blocks + \
                self.sb.inode_bitmap_blocks + self.sb.inode_table_blocks
            leaked = [g for g in range(reserved, self.sb.total_blocks)
                      if alloc.is_allocated(g) and g not in refs]
            if leaked:
                problems.append(f"allocated but unreferenced blocks: {leaked}")
            return problems
