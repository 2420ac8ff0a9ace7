"""Block engine: sealed I/O, Merkle freshness, allocation, guard_return."""

import os
import struct

import pytest

from shieldfs import host as host_mod
from shieldfs.alarms import AlarmLog
from shieldfs.blocks import (
    BLOCK_SIZE,
    SLOT_LEN,
    AllocStrategy,
    BlockAddress,
    BlockAllocator,
    BlockEngine,
    DeviceGeometry,
    GuardVerdict,
    MerkleStore,
    SENTINEL_LEAF,
    guard_return,
)
from shieldfs.crypto import KeyRing, KeyRole, MonotonicCounter, generate_key
from shieldfs.errors import (
    AuthFailure,
    GenericIoError,
    NoSpace,
    RollbackDetected,
    RotationInProgress,
    SchemaError,
    SwapDetected,
)
from shieldfs.host import AttackConfig, AttackMode, AttackTrigger, HostRuntime
from shieldfs.storage import DeviceFile, StorageNode, create_device_file
from shieldfs.wire import ChannelClass


class BlockStack:
    """Engine + host runtime + in-process storage nodes on temp files."""

    def __init__(self, tmp_path, devices=2, capacity=64, attack=None,
                 retry_limit=3, rpc_timeout=0.4, record_history=False):
        self.geometry = DeviceGeometry(devices, capacity)
        self.alarms = AlarmLog()
        self.runtime = HostRuntime(attack=attack, node_timeout=rpc_timeout)
        self.keyring = KeyRing()
        self.keyring.install_persistent(generate_key(KeyRole.PERSISTENT))
        self.storage_keys = {}
        self.nodes = []
        self.device_paths = []
        for d in range(devices):
            path = str(tmp_path / f"dev{d}.blk")
            create_device_file(path, capacity)
            key = generate_key(KeyRole.STORAGE_SESSION)
            node = StorageNode(d, DeviceFile(path), key, self.alarms,
                               record_history=record_history)
            self.runtime.attach_local_node(d, node.serve_block_rpc)
            self.storage_keys[d] = key
            self.nodes.append(node)
            self.device_paths.append(path)
        self.gen_counter = MonotonicCounter(str(tmp_path / "gen.ctr"))
        self.chan_counter = MonotonicCounter(str(tmp_path / "chan.ctr"))
        self.merkle_path = str(tmp_path / "merkle.region")
        self.root_path = str(tmp_path / "root.seal")
        self.runtime.start()
        self.engine = self._make_engine(retry_limit, rpc_timeout)

    def _make_engine(self, retry_limit=3, rpc_timeout=0.4):
        return BlockEngine(self.runtime.boundary, self.geometry, self.keyring,
                           self.storage_keys, self.gen_counter,
                           self.chan_counter, self.alarms,
                           self.merkle_path, self.root_path,
                           retry_limit=retry_limit, rpc_timeout=rpc_timeout)

    def reboot_engine(self):
        """Fresh engine instance, as after a server restart."""
        self.engine = self._make_engine()
        self.engine.load_merkle_on_boot()
        # Boot reconstructs the allocator from fs metadata; block-level tests
        # mark everything the previous engine had allocated.
        return self.engine


@pytest.fixture
def stack(tmp_path):
    s = BlockStack(tmp_path)
    yield s
    s.runtime.close()


def block_of(byte: int) -> bytes:
    return bytes([byte]) * BLOCK_SIZE


def test_write_read_round_trip(stack):
    [addr] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    stack.engine.write_block(addr, block_of(0xAB))
    assert stack.engine.read_block(addr) == block_of(0xAB)


def test_multi_block_round_trip(stack):
    addrs = stack.engine.allocate_blocks(10, AllocStrategy.STRIPED)
    items = [(a, block_of(i)) for i, a in enumerate(addrs)]
    stack.engine.write_blocks(items)
    assert stack.engine.read_blocks(addrs) == [block_of(i) for i in range(10)]


def test_overwrite_updates_leaf(stack):
    [addr] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    stack.engine.write_block(addr, block_of(1))
    first_leaf = stack.engine.merkle.leaf(stack.geometry.global_index(addr))
    stack.engine.write_block(addr, block_of(2))
    second_leaf = stack.engine.merkle.leaf(stack.geometry.global_index(addr))
    assert first_leaf != second_leaf
    assert stack.engine.read_block(addr) == block_of(2)


def test_read_of_never_written_block_fails(stack):
    [addr] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    with pytest.raises(AuthFailure):
        stack.engine.read_block(addr)


def test_block_swap_detected(stack):
    a, b = stack.engine.allocate_blocks(2, AllocStrategy.LINEAR)
    stack.engine.write_block(a, block_of(1))
    stack.engine.write_block(b, block_of(2))
    host_mod.swap_device_slots(stack.device_paths[a.device_id], a.block_id,
                               stack.device_paths[b.device_id], b.block_id)
    with pytest.raises(SwapDetected):
        stack.engine.read_block(a)
    assert stack.alarms.count("SwapDetected") >= 1


def test_stale_block_replay_detected(stack):
    [addr] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    stack.engine.write_block(addr, block_of(1))
    stale = host_mod.read_device_slot(stack.device_paths[addr.device_id],
                                      addr.block_id)
    stack.engine.write_block(addr, block_of(2))
    host_mod.write_device_slot(stack.device_paths[addr.device_id],
                               addr.block_id, stale)
    with pytest.raises(RollbackDetected):
        stack.engine.read_block(addr)
    assert stack.alarms.count("RollbackDetected") >= 1


def test_random_garbage_slot_fails_auth(stack):
    [addr] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    stack.engine.write_block(addr, block_of(7))
    host_mod.write_device_slot(stack.device_paths[addr.device_id],
                               addr.block_id, os.urandom(SLOT_LEN))
    with pytest.raises(AuthFailure):
        stack.engine.read_block(addr)


def test_double_encryption_on_the_wire(stack):
    """Frames carry no sealed-block plaintext: outer layer under the storage
    session key, inner still under the persistent key."""
    [addr] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    payload = block_of(0x5A)
    stack.engine.write_block(addr, payload)
    for record in stack.runtime.trace.records():
        assert payload[:64] not in record.frame
    # and the slot at rest holds ciphertext, not the plaintext
    slot = host_mod.read_device_slot(stack.device_paths[addr.device_id],
                                     addr.block_id)
    assert payload[:64] not in slot


def test_allocator_striped_round_robin(stack):
    addrs = stack.engine.allocate_blocks(4, AllocStrategy.STRIPED)
    assert [a.device_id for a in addrs] == [0, 1, 0, 1]


def test_allocator_linear(stack):
    addrs = stack.engine.allocate_blocks(4, AllocStrategy.LINEAR)
    assert [a.device_id for a in addrs] == [0, 0, 0, 0]
    first = addrs[0].block_id
    assert [a.block_id for a in addrs] == [first, first + 1, first + 2,
                                           first + 3]


def test_allocator_no_space(stack):
    total = stack.geometry.total_blocks
    stack.engine.allocate_blocks(total, AllocStrategy.LINEAR)
    with pytest.raises(NoSpace):
        stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)


def test_allocator_free_and_reuse(stack):
    addrs = stack.engine.allocate_blocks(4, AllocStrategy.LINEAR)
    stack.engine.write_block(addrs[0], block_of(9))
    free_before = stack.engine.allocator.free_count
    stack.engine.free_blocks(addrs)
    assert stack.engine.allocator.free_count == free_before + 4
    again = stack.engine.allocate_blocks(4, AllocStrategy.LINEAR)
    assert set(again) == set(addrs)


def test_guard_return_total():
    assert guard_return(0) is GuardVerdict.PROCEED
    assert guard_return(-13) is GuardVerdict.GENERIC_IO_ERROR
    proceeds = [c for c in range(-4096, 4097)
                if guard_return(c) is GuardVerdict.PROCEED]
    assert proceeds == [0]


def test_checkpoint_and_boot_round_trip(stack):
    addrs = stack.engine.allocate_blocks(3, AllocStrategy.LINEAR)
    for i, a in enumerate(addrs):
        stack.engine.write_block(a, block_of(i + 1))
    root = stack.engine.merkle.root
    stack.engine.checkpoint_merkle()
    engine = stack.reboot_engine()
    assert engine.merkle.root == root
    for i, a in enumerate(addrs):
        engine.allocator.mark_allocated(stack.geometry.global_index(a))
        assert engine.read_block(a) == block_of(i + 1)


def test_boot_detects_tree_region_rollback(stack):
    [a] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    stack.engine.write_block(a, block_of(1))
    stack.engine.checkpoint_merkle()
    old_region = host_mod.snapshot_file(stack.merkle_path)
    old_root = host_mod.snapshot_file(stack.root_path)
    stack.engine.write_block(a, block_of(2))
    stack.engine.checkpoint_merkle()
    # Host restores yesterday's tree region AND sealed root.
    host_mod.restore_file(stack.merkle_path, old_region)
    host_mod.restore_file(stack.root_path, old_root)
    fresh = stack._make_engine()
    with pytest.raises(RollbackDetected):
        fresh.load_merkle_on_boot()


def test_boot_detects_tampered_region(stack):
    [a] = stack.engine.allocate_blocks(1, AllocStrategy.LINEAR)
    stack.engine.write_block(a, block_of(1))
    stack.engine.checkpoint_merkle()
    region = bytearray(host_mod.snapshot_file(stack.merkle_path))
    region[40] ^= 0xFF
    host_mod.restore_file(stack.merkle_path, bytes(region))
    fresh = stack._make_engine()
    with pytest.raises(RollbackDetected):
        fresh.load_merkle_on_boot()


def test_empty_tree_root_matches_independent_computation(stack):
    # Independent bottom-up fold over all-sentinel leaves.
    import hashlib

    def pair(a, b, leaf):
        return hashlib.sha256((b"L" if leaf else b"N") + a + b).digest()

    level = [SENTINEL_LEAF] * stack.engine.merkle.padded
    nodes = [pair(level[i], level[i + 1], True) for i in range(0, len(level), 2)]
    while len(nodes) > 1:
        nodes = [pair(nodes[i], nodes[i + 1], False)
                 for i in range(0, len(nodes), 2)]
    assert stack.engine.merkle.root == nodes[0]


def test_merkle_path_verify():
    store = MerkleStore(64)
    tags = {}
    for i in (0, 1, 5, 62):
        tag = os.urandom(16)
        store.update(i, tag)
        tags[i] = tag
    for i, tag in tags.items():
        assert MerkleStore.verify(tag, i, store.path(i), store.root)
        assert not MerkleStore.verify(os.urandom(16), i, store.path(i),
                                      store.root)


def test_ack_suppression_retries_then_generic_io(tmp_path):
    attack = AttackConfig(
        mode=AttackMode.DROP_ENVELOPE,
        trigger=AttackTrigger(channel=ChannelClass.BLOCK_RPC,
                              direction="to_trusted", count=-1))
    s = BlockStack(tmp_path, attack=attack, rpc_timeout=0.15)
    try:
        [addr] = s.engine.allocate_blocks(1, AllocStrategy.LINEAR)
        with pytest.raises(GenericIoError):
            s.engine.write_block(addr, block_of(3))
        assert s.engine.retries_observed == s.engine.retry_limit
    finally:
        s.runtime.close()


def test_tampered_return_code_yields_generic_io(tmp_path):
    attack = AttackConfig(
        mode=AttackMode.TAMPER_RETURN_CODE, tamper_code=-2,
        trigger=AttackTrigger(channel=ChannelClass.BLOCK_RPC,
                              direction="from_trusted", count=-1))
    s = BlockStack(tmp_path, attack=attack, rpc_timeout=0.15)
    try:
        [addr] = s.engine.allocate_blocks(1, AllocStrategy.LINEAR)
        with pytest.raises(GenericIoError):
            s.engine.write_block(addr, block_of(3))
    finally:
        s.runtime.close()


def test_corrupt_response_recovers_with_alarm(tmp_path):
    attack = AttackConfig(
        mode=AttackMode.CORRUPT_BODY,
        trigger=AttackTrigger(channel=ChannelClass.BLOCK_RPC,
                              direction="to_trusted", count=1))
    s = BlockStack(tmp_path, attack=attack, rpc_timeout=0.15)
    try:
        [addr] = s.engine.allocate_blocks(1, AllocStrategy.LINEAR)
        s.engine.write_block(addr, block_of(4))
        assert s.engine.read_block(addr) == block_of(4)
        assert s.alarms.count("AuthFailure") >= 1
        assert s.engine.retries_observed >= 1
    finally:
        s.runtime.close()


def test_out_of_range_address_is_generic_io(stack):
    bad = BlockAddress(0, stack.geometry.blocks_per_device)
    stack.engine.allocator  # geometry guard happens engine-side first
    with pytest.raises((GenericIoError, SchemaError)):
        stack.engine.read_block(bad)


def test_rotation_lazy_reencryption(tmp_path):
    s = BlockStack(tmp_path, capacity=128)
    try:
        addrs = s.engine.allocate_blocks(100, AllocStrategy.STRIPED)
        payloads = {a: block_of(i % 251) for i, a in enumerate(addrs)}
        s.engine.write_blocks(list(payloads.items()))
        snapshot = {a: s.engine.read_block(a) for a in addrs}
        old_epoch = s.keyring.persistent.epoch

        new = s.engine.rotate_persistent_key()
        assert new.epoch == old_epoch + 1
        with pytest.raises(RotationInProgress):
            s.engine.rotate_persistent_key()

        # Mid-sweep: everything stays readable, both epochs in play.
        remaining = s.engine.sweep_step(30)
        assert remaining > 0
        census_mid = s.engine.epoch_census()
        assert set(census_mid) == {old_epoch, new.epoch}
        for a in addrs:
            assert s.engine.read_block(a) == snapshot[a]

        s.engine.sweep_all()
        census = s.engine.epoch_census()
        assert census == {new.epoch: 100}
        assert s.keyring.epochs_held() == [new.epoch]
        for a in addrs:
            assert s.engine.read_block(a) == snapshot[a]
    finally:
        s.runtime.close()


def test_rotation_on_empty_store_completes_immediately(stack):
    stack.engine.rotate_persistent_key()
    stack.engine.sweep_step(1)
    assert not stack.engine.rotation_active


def test_block_address_serialization():
    addr = BlockAddress(3, 0x01020304)
    raw = addr.pack()
    assert len(raw) == 8
    assert raw == struct.pack("<HI", 3, 0x01020304) + b"\x00\x00"
    assert BlockAddress.unpack(raw) == addr
    with pytest.raises(SchemaError):
        BlockAddress.unpack(raw[:7] + b"\x01")
