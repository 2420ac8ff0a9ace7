"""Trusted block layer: sealed 4 KiB blocks, Merkle freshness, allocation.

This is the only exit point toward persistent storage. Every block leaving
the trusted core is encrypted under the persistent key with its address (and
key epoch) as AAD; every block coming back is verified against transport
auth, block auth, and the in-memory Merkle tree, in that order.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional

from .alarms import AlarmLog
from .crypto import (
    NONCE_LEN,
    TAG_LEN,
    AeadCiphertext,
    KeyRing,
    MonotonicCounter,
    SymmetricKey,
    aead_decrypt,
    aead_encrypt,
)
from .errors import (
    AuthFailure,
    GenericIoError,
    NoSpace,
    RollbackDetected,
    RotationInProgress,
    SchemaError,
    SequenceViolation,
    SwapDetected,
)
from .wire import (
    ChannelClass,
    Opcode,
    SecureChannel,
    decode_message,
    decode_request_body,
    decode_response_body,
    encode_request,
)

BLOCK_SIZE = 4096
SLOT_LEN = 1 + NONCE_LEN + BLOCK_SIZE + TAG_LEN  # epoch | nonce | ct | tag
SENTINEL_LEAF = b"\x00" * TAG_LEN
MERKLE_MAGIC = b"BFSMERK1"
ROOT_SEAL_MAGIC = b"BFSROOT1"
ROOT_SEAL_AAD = b"merkle-root"

DEFAULT_RETRY_LIMIT = 3
DEFAULT_RPC_TIMEOUT = 2.0
WRITE_PIPELINE_WINDOW = 8


@dataclass(frozen=True, order=True)
class BlockAddress:
    """Device/block pair; serialized as u16 LE | u32 LE | 2 zero bytes."""

    device_id: int
    block_id: int

    _STRUCT = struct.Struct("<HIxx")

    def pack(self) -> bytes:
        return self._STRUCT.pack(self.device_id, self.block_id)

    @classmethod
    def unpack(cls, raw: bytes) -> "BlockAddress":
        if len(raw) != 8 or raw[6:8] != b"\x00\x00":
            raise SchemaError("block address must be 8 bytes with zero padding")
        dev, blk = cls._STRUCT.unpack(raw)
        return cls(dev, blk)


@dataclass(frozen=True)
class DeviceGeometry:
    """Fixed-capacity devices declared at format time."""

    num_devices: int
    blocks_per_device: int

    @property
    def total_blocks(self) -> int:
        return self.num_devices * self.blocks_per_device

    def global_index(self, addr: BlockAddress) -> int:
        if addr.device_id >= self.num_devices or \
                addr.block_id >= self.blocks_per_device:
            raise SchemaError(f"address {addr} outside geometry")
        return addr.device_id * self.blocks_per_device + addr.block_id

    def address(self, global_index: int) -> BlockAddress:
        if not 0 <= global_index < self.total_blocks:
            raise SchemaError(f"global index {global_index} outside geometry")
        return BlockAddress(global_index // self.blocks_per_device,
                            global_index % self.blocks_per_device)


@dataclass(frozen=True)
class SealedBlock:
    """A block ciphertext bound to its address and key epoch."""

    addr: BlockAddress
    key_epoch: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def slot_bytes(self) -> bytes:
        return bytes([self.key_epoch]) + self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_slot(cls, addr: BlockAddress, slot: bytes) -> "SealedBlock":
        if len(slot) != SLOT_LEN:
            raise SchemaError(f"slot must be {SLOT_LEN} bytes")
        epoch = slot[0]
        nonce = slot[1:1 + NONCE_LEN]
        ct = slot[1 + NONCE_LEN:1 + NONCE_LEN + BLOCK_SIZE]
        tag = slot[1 + NONCE_LEN + BLOCK_SIZE:]
        return cls(addr, epoch, nonce, ct, tag)

    def aad(self) -> bytes:
        return self.addr.pack() + bytes([self.key_epoch])


def seal_block(key: SymmetricKey, addr: BlockAddress, plaintext: bytes,
               channel: int) -> SealedBlock:
    if len(plaintext) != BLOCK_SIZE:
        raise SchemaError(f"block plaintext must be {BLOCK_SIZE} bytes")
    aad = addr.pack() + bytes([key.epoch])
    ct = aead_encrypt(key, plaintext, aad, channel)
    return SealedBlock(addr, key.epoch, ct.nonce, ct.body, ct.tag)


def open_block(key: SymmetricKey, blk: SealedBlock) -> bytes:
    return aead_decrypt(key, AeadCiphertext(blk.nonce, blk.ciphertext, blk.tag),
                        blk.aad())


class GuardVerdict(Enum):
    PROCEED = 0
    GENERIC_IO_ERROR = 1


def guard_return(host_code: int) -> GuardVerdict:
    """Collapse every host return code except zero into one generic failure.

    Total over all integers: the host never gets to pick which error-handling
    path the trusted core takes.
    """
    if host_code == 0:
        return GuardVerdict.PROCEED
    return GuardVerdict.GENERIC_IO_ERROR


# ---------------------------------------------------------------------------
# Merkle tree over block MAC tags
# ---------------------------------------------------------------------------


def _hash_pair(left: bytes, right: bytes, leaf_level: bool) -> bytes:
    prefix = b"L" if leaf_level else b"N"
    return hashlib.sha256(prefix + left + right).digest()


class MerkleStore:
    """Binary hash tree whose leaves are the 16-byte block tags.

    Unallocated slots hold an all-zero sentinel leaf. The root lives in
    trusted memory; the persisted tree region is advisory and is checked
    against the sealed root on boot.
    """

    def __init__(self, leaf_count: int):
        self.leaf_count = leaf_count
        padded = 1
        while padded < max(leaf_count, 2):
            padded *= 2
        self.padded = padded
        self.leaves: list[bytes] = [SENTINEL_LEAF] * padded
        # levels[0] is directly above the leaves; levels[-1] has one node.
        self.levels: list[list[bytes]] = []
        width = padded // 2
        while width >= 1:
            self.levels.append([b""] * width)
            width //= 2
        self._tag_index: dict[bytes, int] = {}
        self._rebuild()

    def _rebuild(self) -> None:
        for i in range(0, self.padded, 2):
            self.levels[0][i // 2] = _hash_pair(self.leaves[i],
                                                self.leaves[i + 1], True)
        for lvl in range(1, len(self.levels)):
            below = self.levels[lvl - 1]
            for i in range(0, len(below), 2):
                self.levels[lvl][i // 2] = _hash_pair(below[i], below[i + 1],
                                                      False)
        self._tag_index = {leaf: i for i, leaf in enumerate(self.leaves)
                           if leaf != SENTINEL_LEAF}

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def leaf(self, index: int) -> bytes:
        return self.leaves[index]

    def update(self, index: int, tag: bytes) -> None:
        if len(tag) != TAG_LEN:
            raise SchemaError("merkle leaf must be a 16-byte tag")
        old = self.leaves[index]
        if old != SENTINEL_LEAF:
            self._tag_index.pop(old, None)
        self.leaves[index] = tag
        if tag != SENTINEL_LEAF:
            self._tag_index[tag] = index
        node = index // 2
        self.levels[0][node] = _hash_pair(self.leaves[node * 2],
                                          self.leaves[node * 2 + 1], True)
        for lvl in range(1, len(self.levels)):
            node //= 2
            below = self.levels[lvl - 1]
            self.levels[lvl][node] = _hash_pair(below[node * 2],
                                                below[node * 2 + 1], False)

    def index_of_tag(self, tag: bytes) -> Optional[int]:
        return self._tag_index.get(tag)

    def path(self, index: int) -> list[tuple[bytes, bool]]:
        """Sibling path bottom-up; each entry is (sibling, sibling_is_right)."""
        out: list[tuple[bytes, bool]] = []
        sib = index ^ 1
        out.append((self.leaves[sib], sib > index))
        node = index // 2
        for lvl in range(len(self.levels) - 1):
            sib = node ^ 1
            out.append((self.levels[lvl][sib], sib > node))
            node //= 2
        return out

    @staticmethod
    def verify(leaf: bytes, index: int, path: list[tuple[bytes, bool]],
               root: bytes) -> bool:
        current = leaf
        first = True
        for sibling, sibling_is_right in path:
            if sibling_is_right:
                current = _hash_pair(current, sibling, first)
            else:
                current = _hash_pair(sibling, current, first)
            first = False
        return current == root

    # -- persistence ---------------------------------------------------------

    def to_region_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MERKLE_MAGIC)
        out.write(struct.pack("<II", self.leaf_count, self.padded))
        for leaf in self.leaves:
            out.write(leaf)
        for level in self.levels:
            for node in level:
                out.write(node)
        return out.getvalue()

    @classmethod
    def from_region_bytes(cls, raw: bytes) -> "MerkleStore":
        if len(raw) < 16 or raw[:8] != MERKLE_MAGIC:
            raise RollbackDetected("merkle region file malformed")
        leaf_count, padded = struct.unpack_from("<II", raw, 8)
        store = cls(leaf_count)
        if store.padded != padded:
            raise RollbackDetected("merkle region geometry mismatch")
        pos = 16
        need = 16 + padded * TAG_LEN + (padded - 1) * 32
        if len(raw) != need:
            raise RollbackDetected("merkle region file truncated")
        leaves = [raw[pos + i * TAG_LEN:pos + (i + 1) * TAG_LEN]
                  for i in range(padded)]
        store.leaves = leaves
        store._rebuild()
        # The stored internal nodes are advisory; recompute and compare so a
        # tampered region is caught even before the sealed-root comparison.
        pos += padded * TAG_LEN
        for level in store.levels:
            for node in level:
                stored = raw[pos:pos + 32]
                pos += 32
                if stored != node:
                    raise RollbackDetected("merkle region nodes inconsistent")
        return store


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


class AllocStrategy(Enum):
    LINEAR = "linear"
    STRIPED = "striped"


class BlockAllocator:
    """Bitmap-backed allocator over the global block space."""

    def __init__(self, geometry: DeviceGeometry):
        self.geometry = geometry
        self.bits = bytearray((geometry.total_blocks + 7) // 8)
        self.free_count = geometry.total_blocks
        self._last_striped_device = geometry.num_devices - 1
        self._hints = [0] * geometry.num_devices  # lowest possibly-free block

    def is_allocated(self, index: int) -> bool:
        return bool(self.bits[index // 8] & (1 << (index % 8)))

    def _set(self, index: int, value: bool) -> None:
        mask = 1 << (index % 8)
        if value:
            self.bits[index // 8] |= mask
        else:
            self.bits[index // 8] &= ~mask

    def mark_allocated(self, index: int) -> None:
        if not self.is_allocated(index):
            self._set(index, True)
            self.free_count -= 1

    def free(self, addrs: Iterable[BlockAddress]) -> None:
        for addr in addrs:
            idx = self.geometry.global_index(addr)
            if self.is_allocated(idx):
                self._set(idx, False)
                self.free_count += 1
                if addr.block_id < self._hints[addr.device_id]:
                    self._hints[addr.device_id] = addr.block_id

    def _lowest_free_on_device(self, device: int) -> Optional[int]:
        base = device * self.geometry.blocks_per_device
        for blk in range(self._hints[device], self.geometry.blocks_per_device):
            if not self.is_allocated(base + blk):
                self._hints[device] = blk
                return blk
        self._hints[device] = self.geometry.blocks_per_device
        return None

    def allocate(self, n: int, strategy: AllocStrategy) -> list[BlockAddress]:
        """Pick and mark n blocks; atomic (all or NoSpace)."""
        if n > self.free_count:
            raise NoSpace(f"need {n} blocks, {self.free_count} free")
        picked: list[BlockAddress] = []
        if strategy is AllocStrategy.LINEAR:
            for dev in range(self.geometry.num_devices):
                while len(picked) < n:
                    blk = self._lowest_free_on_device(dev)
                    if blk is None:
                        break
                    addr = BlockAddress(dev, blk)
                    self.mark_allocated(self.geometry.global_index(addr))
                    picked.append(addr)
                if len(picked) == n:
                    break
        else:
            dev = (self._last_striped_device + 1) % self.geometry.num_devices
            while len(picked) < n:
                for probe in range(self.geometry.num_devices):
                    cand = (dev + probe) % self.geometry.num_devices
                    blk = self._lowest_free_on_device(cand)
                    if blk is not None:
                        addr = BlockAddress(cand, blk)
                        self.mark_allocated(self.geometry.global_index(addr))
                        picked.append(addr)
                        self._last_striped_device = cand
                        dev = (cand + 1) % self.geometry.num_devices
                        break
                else:  # no device had room; unreachable given free_count check
                    break
        if len(picked) != n:
            self.free(picked)
            raise NoSpace("allocator ran out of blocks mid-request")
        return picked

    def allocated_popcount(self) -> int:
        return self.geometry.total_blocks - self.free_count

    def load_bits(self, raw: bytes) -> None:
        """Adopt a persisted bitmap (boot path)."""
        n = len(self.bits)
        self.bits = bytearray(raw[:n])
        allocated = sum(bin(b).count("1") for b in self.bits)
        self.free_count = self.geometry.total_blocks - allocated
        self._hints = [0] * self.geometry.num_devices


# ---------------------------------------------------------------------------
# Block engine
# ---------------------------------------------------------------------------


class _NodeConnection:
    """Transport state for one storage node, rebuilt on any failure."""

    def __init__(self, key: SymmetricKey, device_id: int, generation: int):
        self.generation = generation
        self.channel = SecureChannel(
            key, ChannelClass.BLOCK_RPC, device_id,
            send_channel=(generation << 1) & 0xFFFFFFFF,
            recv_channel=((generation << 1) | 1) & 0xFFFFFFFF)


class BlockEngine:
    """Sealed, freshness-checked block I/O through the host boundary.

    All mutations of the Merkle tree are funnelled through one lock, so the
    root always reflects a serializable history of writes.
    """

    def __init__(self, boundary, geometry: DeviceGeometry, keyring: KeyRing,
                 storage_keys: dict[int, SymmetricKey],
                 gen_counter: MonotonicCounter, chan_counter: MonotonicCounter,
                 alarms: AlarmLog,
                 merkle_region_path: str, root_seal_path: str,
                 retry_limit: int = DEFAULT_RETRY_LIMIT,
                 rpc_timeout: float = DEFAULT_RPC_TIMEOUT,
                 crypto_enabled: bool = True,
                 merkle_enabled: bool = True):
        self.boundary = boundary
        self.geometry = geometry
        self.keyring = keyring
        self.storage_keys = storage_keys
        # gen_counter moves only at checkpoints and anchors the boot-time
        # freshness check; chan_counter issues never-reused nonce channel ids.
        self.gen_counter = gen_counter
        self.chan_counter = chan_counter
        self.alarms = alarms
        self.merkle_region_path = merkle_region_path
        self.root_seal_path = root_seal_path
        self.retry_limit = retry_limit
        self.rpc_timeout = rpc_timeout
        self.crypto_enabled = crypto_enabled
        self.merkle_enabled = merkle_enabled

        self._lock = threading.Lock()
        self._request_id = 0
        self._connections: dict[int, _NodeConnection] = {}
        self.merkle = MerkleStore(geometry.total_blocks)
        self.allocator = BlockAllocator(geometry)
        self.at_rest_channel = chan_counter.bump() & 0xFFFFFFFF
        self.retries_observed = 0
        self._rotation_pending: list[int] = []
        self.rotation_active = False

    # -- transport ----------------------------------------------------------

    def _connection(self, device_id: int) -> _NodeConnection:
        conn = self._connections.get(device_id)
        if conn is None:
            conn = self._reconnect(device_id)
        return conn

    def _reconnect(self, device_id: int) -> _NodeConnection:
        generation = self.chan_counter.bump()
        conn = _NodeConnection(self.storage_keys[device_id], device_id,
                               generation)
        self._connections[device_id] = conn
        return conn

    def _next_request_id(self) -> int:
        self._request_id += 1
        return self._request_id

    def _send_one(self, conn: _NodeConnection, payload: bytes) -> None:
        env = conn.channel.seal(payload)
        code = self.boundary.send_block_msg(env)
        if guard_return(code) is not GuardVerdict.PROCEED:
            raise GenericIoError(f"host rejected block send (code {code})")

    def _recv_one(self, conn: _NodeConnection, want_opcode: Opcode,
                  want_request_id: int) -> dict:
        env = self.boundary.recv_block_msg(self.rpc_timeout)
        if env is None:
            raise GenericIoError("block RPC timed out")
        try:
            payload = conn.channel.open(env)
        except (AuthFailure, SequenceViolation) as exc:
            self.alarms.record_exc("block-engine", exc)
            raise
        opcode, request_id, body = decode_message(payload)
        if opcode is not want_opcode or request_id != want_request_id:
            raise SchemaError("mismatched block RPC response")
        status, fields = decode_response_body(opcode, body)
        if guard_return(status) is not GuardVerdict.PROCEED:
            raise GenericIoError(f"storage node reported failure ({status})")
        return fields

    def _rpc_batch(self, device_id: int,
                   requests: list[tuple[Opcode, dict]]) -> list[dict]:
        """Send a pipelined batch to one node; any failure retries the rest.

        Raises GenericIoError once the retry budget is exhausted. Integrity
        failures on the response path are re-raised after being recorded.
        """
        results: list[Optional[dict]] = [None] * len(requests)
        pending = list(range(len(requests)))
        attempts = 0
        while pending:
            try:
                conn = self._connection(device_id)
                for start in range(0, len(pending), WRITE_PIPELINE_WINDOW):
                    window = pending[start:start + WRITE_PIPELINE_WINDOW]
                    rids = []
                    for i in window:
                        opcode, fields = requests[i]
                        rid = self._next_request_id()
                        rids.append(rid)
                        self._send_one(conn, encode_request(opcode, rid, **fields))
                    for i, rid in zip(window, rids):
                        results[i] = self._recv_one(conn, requests[i][0], rid)
                pending = []
            except (GenericIoError, AuthFailure, SequenceViolation, SchemaError):
                pending = [i for i in pending if results[i] is None]
                self._connections.pop(device_id, None)
                if attempts >= self.retry_limit:
                    raise GenericIoError(
                        f"block RPC to device {device_id} failed after "
                        f"{attempts} retries") from None
                attempts += 1
                self.retries_observed += 1
        return [r for r in results if r is not None]

    # -- sealed block I/O ----------------------------------------------------

    def _persistent_key(self) -> SymmetricKey:
        return self.keyring.persistent

    def _seal(self, addr: BlockAddress, plaintext: bytes) -> SealedBlock:
        key = self._persistent_key()
        if not self.crypto_enabled:
            # Benchmark-only passthrough: keep the slot layout, skip AEAD.
            digest = hashlib.sha256(addr.pack() + plaintext).digest()
            return SealedBlock(addr, key.epoch, b"\x00" * NONCE_LEN, plaintext,
                               digest[:TAG_LEN])
        return seal_block(key, addr, plaintext, self.at_rest_channel)

    def _unseal(self, blk: SealedBlock) -> bytes:
        if not self.crypto_enabled:
            digest = hashlib.sha256(blk.addr.pack() + blk.ciphertext).digest()
            if digest[:TAG_LEN] != blk.tag:
                raise AuthFailure("block checksum mismatch")
            return blk.ciphertext
        key = self.keyring.persistent_for_epoch(blk.key_epoch)
        return open_block(key, blk)

    def write_block(self, addr: BlockAddress, plaintext: bytes) -> None:
        self.write_blocks([(addr, plaintext)])

    def write_blocks(self, items: list[tuple[BlockAddress, bytes]]) -> None:
        """Seal, ship, and (only once every ACK is in) commit Merkle leaves."""
        if not items:
            return
        with self._lock:
            staged: list[tuple[int, bytes]] = []
            by_device: dict[int, list[tuple[Opcode, dict]]] = {}
            for addr, plaintext in items:
                gidx = self.geometry.global_index(addr)
                if not self.allocator.is_allocated(gidx):
                    raise SchemaError(f"write to unallocated block {addr}")
                sealed = self._seal(addr, plaintext)
                staged.append((gidx, sealed.tag))
                by_device.setdefault(addr.device_id, []).append(
                    (Opcode.BLOCK_WRITE,
                     {"addr": addr.pack(), "slot": sealed.slot_bytes()}))
            for device_id, reqs in by_device.items():
                self._rpc_batch(device_id, reqs)
            if self.merkle_enabled:
                for gidx, tag in staged:
                    self.merkle.update(gidx, tag)

    def read_block(self, addr: BlockAddress) -> bytes:
        return self.read_blocks([addr])[0]

    def read_blocks(self, addrs: list[BlockAddress]) -> list[bytes]:
        if not addrs:
            return []
        with self._lock:
            by_device: dict[int, list[int]] = {}
            for i, addr in enumerate(addrs):
                by_device.setdefault(addr.device_id, []).append(i)
            out: list[Optional[bytes]] = [None] * len(addrs)
            for device_id, positions in by_device.items():
                reqs = [(Opcode.BLOCK_READ, {"addr": addrs[i].pack()})
                        for i in positions]
                fields = self._rpc_batch(device_id, reqs)
                for i, f in zip(positions, fields):
                    out[i] = self._verify_and_open(addrs[i], f["slot"])
            return out  # type: ignore[return-value]

    def _verify_and_open(self, addr: BlockAddress, slot: bytes) -> bytes:
        gidx = self.geometry.global_index(addr)
        try:
            sealed = SealedBlock.from_slot(addr, slot)
        except SchemaError as exc:
            self.alarms.record_exc("block-engine", exc)
            raise AuthFailure("malformed block slot") from None
        if self.merkle_enabled and self.merkle.leaf(gidx) == SENTINEL_LEAF:
            exc: Exception = AuthFailure(f"read of never-written block {addr}")
            self.alarms.record_exc("block-engine", exc)
            raise exc
        try:
            plaintext = self._unseal(sealed)
        except AuthFailure:
            other = self.merkle.index_of_tag(sealed.tag)
            if other is not None and other != gidx:
                swapped = SwapDetected(
                    f"block for {self.geometry.address(other)} served at {addr}")
                self.alarms.record_exc("block-engine", swapped)
                raise swapped from None
            failure = AuthFailure(f"block at {addr} failed authentication")
            self.alarms.record_exc("block-engine", failure)
            raise failure from None
        if self.merkle_enabled:
            if sealed.tag != self.merkle.leaf(gidx):
                rolled = RollbackDetected(
                    f"stale but genuine block served for {addr}")
                self.alarms.record_exc("block-engine", rolled)
                raise rolled
            path = self.merkle.path(gidx)
            if not MerkleStore.verify(sealed.tag, gidx, path, self.merkle.root):
                rolled = RollbackDetected(f"merkle path mismatch for {addr}")
                self.alarms.record_exc("block-engine", rolled)
                raise rolled
        return plaintext

    # -- allocation ----------------------------------------------------------

    def allocate_blocks(self, n: int, strategy: AllocStrategy) -> list[BlockAddress]:
        with self._lock:
            return self.allocator.allocate(n, strategy)

    def free_blocks(self, addrs: Iterable[BlockAddress]) -> None:
        with self._lock:
            addrs = list(addrs)
            self.allocator.free(addrs)
            if self.merkle_enabled:
                for addr in addrs:
                    self.merkle.update(self.geometry.global_index(addr),
                                       SENTINEL_LEAF)

    # -- checkpoint / boot ----------------------------------------------------

    def checkpoint_merkle(self) -> int:
        """Persist the tree region and seal the root to the new generation."""
        with self._lock:
            generation = self.gen_counter.bump()
            with open(self.merkle_region_path, "wb") as f:
                f.write(self.merkle.to_region_bytes())
                f.flush()
                os.fsync(f.fileno())
            key = self._persistent_key()
            aad = ROOT_SEAL_AAD + struct.pack("<Q", generation)
            if self.crypto_enabled:
                ct = aead_encrypt(key, self.merkle.root, aad,
                                  channel=self.chan_counter.bump() & 0xFFFFFFFF)
            else:
                ct = AeadCiphertext(b"\x00" * NONCE_LEN, self.merkle.root,
                                    hashlib.sha256(aad + self.merkle.root)
                                    .digest()[:TAG_LEN])
            with open(self.root_seal_path, "wb") as f:
                f.write(ROOT_SEAL_MAGIC)
                f.write(struct.pack("<BQ", key.epoch, generation))
                f.write(ct.nonce)
                f.write(struct.pack("<I", len(ct.body)))
                f.write(ct.body)
                f.write(ct.tag)
                f.flush()
                os.fsync(f.fileno())
            return generation

    def load_merkle_on_boot(self) -> None:
        """Reload the persisted tree, verify it against the sealed root."""
        with self._lock:
            with open(self.root_seal_path, "rb") as f:
                raw = f.read()
            if len(raw) < 8 + 9 + NONCE_LEN + 4 + TAG_LEN or \
                    raw[:8] != ROOT_SEAL_MAGIC:
                raise RollbackDetected("sealed root file malformed")
            key_epoch, generation = struct.unpack_from("<BQ", raw, 8)
            pos = 8 + 9
            nonce = raw[pos:pos + NONCE_LEN]
            (ct_len,) = struct.unpack_from("<I", raw, pos + NONCE_LEN)
            body_off = pos + NONCE_LEN + 4
            body = raw[body_off:body_off + ct_len]
            tag = raw[body_off + ct_len:body_off + ct_len + TAG_LEN]
            if generation != self.gen_counter.value:
                exc = RollbackDetected(
                    f"sealed root generation {generation} != trusted counter "
                    f"{self.gen_counter.value}")
                self.alarms.record_exc("block-engine", exc)
                raise exc
            aad = ROOT_SEAL_AAD + struct.pack("<Q", generation)
            if self.crypto_enabled:
                key = self.keyring.persistent_for_epoch(key_epoch)
                root = aead_decrypt(key, AeadCiphertext(nonce, body, tag), aad)
            else:
                if hashlib.sha256(aad + body).digest()[:TAG_LEN] != tag:
                    raise AuthFailure("root checksum mismatch")
                root = body
            with open(self.merkle_region_path, "rb") as f:
                region = f.read()
            store = MerkleStore.from_region_bytes(region)
            if store.root != root:
                exc = RollbackDetected(
                    "persisted tree region does not hash to the sealed root")
                self.alarms.record_exc("block-engine", exc)
                raise exc
            self.merkle = store

    # -- rotation --------------------------------------------------------------

    def rotate_persistent_key(self) -> SymmetricKey:
        """Install a fresh persistent key; blocks re-encrypt lazily."""
        with self._lock:
            if self.rotation_active:
                raise RotationInProgress("previous sweep incomplete")
            new = self.keyring.begin_persistent_rotation()
            self._rotation_pending = [
                i for i in range(self.geometry.total_blocks)
                if self.merkle.leaf(i) != SENTINEL_LEAF]
            self.rotation_active = True
            return new

    def sweep_step(self, max_blocks: int = 64) -> int:
        """Re-encrypt up to max_blocks stale blocks; returns remaining count."""
        if not self.rotation_active:
            return 0
        current_epoch = self.keyring.persistent.epoch
        done = 0
        while self._rotation_pending and done < max_blocks:
            gidx = self._rotation_pending.pop()
            self._reencrypt_one(gidx, current_epoch)
            done += 1
        if not self._rotation_pending:
            self.checkpoint_merkle()
            self.keyring.retire_persistent_before(current_epoch)
            self.rotation_active = False
        return len(self._rotation_pending)

    def _reencrypt_one(self, gidx: int, current_epoch: int) -> None:
        """Atomically re-seal one block under the current epoch if stale."""
        addr = self.geometry.address(gidx)
        with self._lock:
            if self.merkle.leaf(gidx) == SENTINEL_LEAF:
                return  # freed since the rotation started
            fields = self._rpc_batch(addr.device_id,
                                     [(Opcode.BLOCK_READ,
                                       {"addr": addr.pack()})])[0]
            plaintext = self._verify_and_open(addr, fields["slot"])
            sealed = SealedBlock.from_slot(addr, fields["slot"])
            if sealed.key_epoch >= current_epoch:
                return  # already re-encrypted by an ordinary write
            fresh = self._seal(addr, plaintext)
            self._rpc_batch(addr.device_id,
                            [(Opcode.BLOCK_WRITE,
                              {"addr": addr.pack(),
                               "slot": fresh.slot_bytes()})])
            if self.merkle_enabled:
                self.merkle.update(gidx, fresh.tag)

    def sweep_all(self) -> None:
        while self.rotation_active:
            self.sweep_step(256)

    def resume_rotation(self) -> None:
        """Re-arm an interrupted sweep (boot found two sealed keys)."""
        with self._lock:
            self._rotation_pending = [
                i for i in range(self.geometry.total_blocks)
                if self.merkle.leaf(i) != SENTINEL_LEAF]
            self.rotation_active = True

    def epoch_census(self) -> dict[int, int]:
        """Count allocated, written blocks by their on-disk key epoch."""
        census: dict[int, int] = {}
        for gidx in range(self.geometry.total_blocks):
            if self.merkle.leaf(gidx) == SENTINEL_LEAF:
                continue
            addr = self.geometry.address(gidx)
            with self._lock:
                fields = self._rpc_batch(addr.device_id,
                                         [(Opcode.BLOCK_READ,
                                           {"addr": addr.pack()})])[0]
                sealed = SealedBlock.from_slot(addr, fields["slot"])
            census[sealed.key_epoch] = census.get(sealed.key_epoch, 0) + 1
        return census
