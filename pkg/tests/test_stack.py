"""End-to-end stack tests: deployment, sessions, handlers, persistence."""

import errno
import os

import pytest

from shieldfs.attest import attestation_fingerprint
from shieldfs.client import O_RDONLY, O_RDWR, O_WRONLY, ClientSession
from shieldfs.deploy import DeployConfig, Deployment
from shieldfs.errors import FsError, SessionLost


@pytest.fixture
def deployment(tmp_path):
    config = DeployConfig(data_dir=str(tmp_path / "data"), devices=2,
                          device_capacity=512, inode_count=128,
                          rpc_timeout=1.0, cache_enabled=False)
    Deployment.mkfs(config)
    dep = Deployment.open(config)
    yield dep
    dep.shutdown()


def test_mount_and_root_listing(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    dh = c.opendir("/")
    entries = c.readdir(dh)
    c.releasedir(dh)
    assert {n for n, _ in entries} == {".", ".."}
    attr = c.getattr("/")
    assert attr.is_dir
    assert attr.nlink == 2


def test_mount_with_bad_token_rejected(tmp_path, deployment):
    key_link = deployment.runtime.register_client(2)
    from shieldfs.crypto import KeyRole, read_key_file
    key = read_key_file(deployment.config.client_key_path(2),
                        KeyRole.CLIENT_SESSION)
    bad = bytearray(attestation_fingerprint())
    bad[0] ^= 0xFF
    session = ClientSession(key_link, key, 2, bytes(bad),
                            timeout=1.0)
    with pytest.raises((FsError, SessionLost)):
        session.mount(1000, 100)
    assert deployment.alarms.count("AttestationMismatch") == 1


def test_create_write_read_round_trip(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    fh = c.create("/a", 0o644)
    payload = bytes(range(256)) * 20  # 5120 bytes, crosses a block boundary
    assert c.write(fh, 0, payload[:5000]) == 5000
    assert c.read(fh, 0, 6000) == payload[:5000]
    attr = c.getattr("/a")
    assert attr.size == 5000
    # 2 data blocks allocated for 5000 bytes
    assert deployment.core.sb.free_block_count == \
        deployment.core.sb.total_blocks - _reserved(deployment) - 1 - 2
    c.release(fh)


def _reserved(deployment):
    sb = deployment.core.sb
    return 1 + sb.block_bitmap_blocks + sb.inode_bitmap_blocks + \
        sb.inode_table_blocks


def test_partial_overwrite_and_extension(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    fh = c.create("/f", 0o644)
    c.write(fh, 0, b"A" * 9000)
    c.write(fh, 4000, b"B" * 200)
    c.write(fh, 12000, b"C" * 100)  # gap 9000..12000 reads as zeros
    data = c.read(fh, 0, 12100)
    assert data[:4000] == b"A" * 4000
    assert data[4000:4200] == b"B" * 200
    assert data[4200:9000] == b"A" * 4800
    assert data[9000:12000] == b"\x00" * 3000
    assert data[12000:] == b"C" * 100
    assert c.getattr("/f").size == 12100
    c.release(fh)


def test_mkdir_nested_and_readdir(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    c.mkdir("/d", 0o755)
    c.mkdir("/d/e", 0o755)
    fh = c.create("/d/e/file", 0o600)
    c.release(fh)
    dh = c.opendir("/d/e")
    names = {n for n, _ in c.readdir(dh)}
    c.releasedir(dh)
    assert names == {".", "..", "file"}
    assert c.getattr("/d").nlink == 3  # ., parent entry, child's ..


def test_unlink_frees_blocks(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    fh = c.create("/victim", 0o644)
    c.write(fh, 0, b"x" * 8192)
    c.release(fh)
    free_before = deployment.core.sb.free_block_count
    c.unlink("/victim")
    assert deployment.core.sb.free_block_count == free_before + 2
    with pytest.raises(FsError) as exc_info:
        c.getattr("/victim")
    assert exc_info.value.errno == errno.ENOENT
    assert deployment.core.fsck() == []


def test_rename_and_rmdir(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    c.mkdir("/src", 0o755)
    c.mkdir("/dst", 0o755)
    fh = c.create("/src/f", 0o644)
    c.write(fh, 0, b"hello")
    c.release(fh)
    c.rename("/src/f", "/dst/g")
    with pytest.raises(FsError):
        c.getattr("/src/f")
    fh = c.open("/dst/g", O_RDONLY)
    assert c.read(fh, 0, 10) == b"hello"
    c.release(fh)
    c.rmdir("/src")
    with pytest.raises(FsError) as e:
        c.rmdir("/dst")
    assert e.value.errno == errno.ENOTEMPTY
    assert deployment.core.fsck() == []


def test_rename_into_unwritable_dir_is_atomic(deployment):
    owner = deployment.client(1, uid=1000, gid=100)
    other = deployment.client(2, uid=2000, gid=200)
    owner.mkdir("/locked", 0o755)
    fh = other.create("/mine", 0o644)
    other.release(fh)
    with pytest.raises(FsError) as e:
        other.rename("/mine", "/locked/stolen")
    assert e.value.errno == errno.EACCES
    assert other.getattr("/mine").size == 0
    assert deployment.core.fsck() == []


def test_permissions_and_revocation(deployment):
    owner = deployment.client(1, uid=1000, gid=100)
    other = deployment.client(2, uid=2000, gid=200)
    fh = owner.create("/shared", 0o644)
    owner.write(fh, 0, b"secret data")
    owner.release(fh)
    # other uid can read at 0o644
    fh2 = other.open("/shared", O_RDONLY)
    assert other.read(fh2, 0, 16) == b"secret data"
    # revoke: the very next request from the other session fails
    owner.chmod("/shared", 0o600)
    with pytest.raises(FsError) as e:
        other.read(fh2, 0, 16)
    assert e.value.errno == errno.EACCES
    with pytest.raises(FsError):
        other.open("/shared", O_RDONLY)
    # re-grant via ACL without touching mode bits
    owner.setacl("/shared", [(2000, 4)])
    assert other.read(fh2, 0, 16) == b"secret data"
    # ACL revocation is immediate too
    owner.setacl("/shared", [])
    with pytest.raises(FsError):
        other.read(fh2, 0, 16)


def test_group_permissions(deployment):
    owner = deployment.client(1, uid=1000, gid=100)
    same_group = deployment.client(2, uid=2000, gid=100)
    fh = owner.create("/groupfile", 0o640)
    owner.write(fh, 0, b"group readable")
    owner.release(fh)
    fh2 = same_group.open("/groupfile", O_RDONLY)
    assert same_group.read(fh2, 0, 20) == b"group readable"
    with pytest.raises(FsError):
        same_group.open("/groupfile", O_WRONLY)


def test_admin_audit_policy(deployment):
    user = deployment.client(1, uid=1000, gid=100)
    admin = deployment.client(2, uid=0, gid=0)
    user.mkdir("/private", 0o700)
    with pytest.raises(FsError) as e:
        admin.opendir("/private")
    assert e.value.errno == errno.EACCES
    admin.set_policy(b"audit_allowed=true\n")
    dh = admin.opendir("/private")
    assert {n for n, _ in admin.readdir(dh)} == {".", ".."}
    admin.releasedir(dh)
    assert any(ev.action == "audit-read"
               for ev in deployment.core.audit_log)
    # non-admin cannot set policy
    with pytest.raises(FsError) as e:
        user.set_policy(b"audit_allowed=false\n")
    assert e.value.errno == errno.EPERM


def test_chmod_requires_owner_or_root(deployment):
    owner = deployment.client(1, uid=1000, gid=100)
    other = deployment.client(2, uid=2000, gid=200)
    admin = deployment.client(3, uid=0, gid=0)
    fh = owner.create("/file", 0o644)
    owner.release(fh)
    with pytest.raises(FsError) as e:
        other.chmod("/file", 0o777)
    assert e.value.errno == errno.EPERM
    admin.chmod("/file", 0o600)
    assert owner.getattr("/file").mode & 0o777 == 0o600


def test_persistence_across_restart(tmp_path):
    config = DeployConfig(data_dir=str(tmp_path / "data"), devices=2,
                          device_capacity=512, inode_count=128,
                          rpc_timeout=1.0, cache_enabled=False)
    Deployment.mkfs(config)
    dep = Deployment.open(config)
    c = dep.client(1, uid=1000, gid=100)
    c.mkdir("/keep", 0o755)
    fh = c.create("/keep/data", 0o644)
    c.write(fh, 0, b"persistent bytes" * 300)
    c.fsync(fh)
    c.release(fh)
    dep.shutdown()

    dep2 = Deployment.open(config)
    try:
        c2 = dep2.client(1, uid=1000, gid=100)
        fh2 = c2.open("/keep/data", O_RDONLY)
        assert c2.read(fh2, 0, 16 * 300) == b"persistent bytes" * 300
        c2.release(fh2)
        assert dep2.core.fsck() == []
    finally:
        dep2.shutdown()


def test_machine_migration_preserves_data(tmp_path):
    from shieldfs.crypto import (KeyRole, SealedKeyFile, generate_key,
                                 read_key_file, seal_persistent_key,
                                 unseal_persistent_key, write_key_file)
    config = DeployConfig(data_dir=str(tmp_path / "data"), devices=2,
                          device_capacity=512, inode_count=128,
                          rpc_timeout=1.0, cache_enabled=False)
    Deployment.mkfs(config)
    dep = Deployment.open(config)
    c = dep.client(1, uid=1000, gid=100)
    fh = c.create("/doc", 0o644)
    c.write(fh, 0, b"survives relocation")
    c.release(fh)
    dep.shutdown()

    # New machine: different sealing key; re-wrap the persistent key.
    old_kek = read_key_file(config.kek_path, KeyRole.SEALING)
    with open(config.kt_seal_path, "rb") as f:
        kt = unseal_persistent_key(SealedKeyFile.from_bytes(f.read()), old_kek)
    new_kek = generate_key(KeyRole.SEALING)
    write_key_file(config.kek_path, new_kek)
    with open(config.kt_seal_path, "wb") as f:
        f.write(seal_persistent_key(kt, new_kek, channel=0x7FFFFFFF)
                .to_bytes())

    dep2 = Deployment.open(config)
    try:
        c2 = dep2.client(1, uid=1000, gid=100)
        fh2 = c2.open("/doc", O_RDONLY)
        assert c2.read(fh2, 0, 64) == b"survives relocation"
    finally:
        dep2.shutdown()


def test_rotation_end_to_end(tmp_path):
    config = DeployConfig(data_dir=str(tmp_path / "data"), devices=2,
                          device_capacity=512, inode_count=128,
                          rpc_timeout=1.0, cache_enabled=False)
    Deployment.mkfs(config)
    dep = Deployment.open(config)
    c = dep.client(1, uid=1000, gid=100)
    fh = c.create("/spin", 0o644)
    c.write(fh, 0, b"R" * 40960)
    old_epoch = dep.keyring.persistent.epoch
    new = dep.rotate_key(sweep=False)
    assert new.epoch == old_epoch + 1
    # live read mid-rotation
    assert c.read(fh, 0, 40960) == b"R" * 40960
    dep.finish_rotation()
    census = dep.engine.epoch_census()
    assert list(census) == [new.epoch]
    assert c.read(fh, 0, 40960) == b"R" * 40960
    c.release(fh)
    dep.shutdown()
    # reboot under the rotated key
    dep2 = Deployment.open(config)
    try:
        c2 = dep2.client(1, uid=1000, gid=100)
        fh2 = c2.open("/spin", O_RDONLY)
        assert c2.read(fh2, 0, 100) == b"R" * 100
    finally:
        dep2.shutdown()


def test_large_file_uses_indirect_block(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    fh = c.create("/big", 0o644)
    chunk = os.urandom(65536)
    for i in range(2):
        c.write(fh, i * 65536, chunk)
    # 128 KiB = 32 blocks > 12 direct pointers
    assert c.read(fh, 0, 65536) == chunk
    assert c.read(fh, 65536, 65536) == chunk
    assert c.getattr("/big").size == 131072
    assert deployment.core.fsck() == []
    c.release(fh)


def test_max_file_size_enforced(deployment):
    from shieldfs.fs import MAX_FILE_SIZE
    c = deployment.client(1, uid=1000, gid=100)
    fh = c.create("/limit", 0o644)
    with pytest.raises(FsError) as e:
        c.write(fh, MAX_FILE_SIZE - 10, b"x" * 20)
    assert e.value.errno == errno.EFBIG
    c.release(fh)


def test_unmount_and_remount(deployment):
    c = deployment.client(1, uid=1000, gid=100)
    c.mkdir("/here", 0o755)
    c.unmount()
    with pytest.raises(SessionLost):
        c.getattr("/here")
    c2 = deployment.client(1, uid=1000, gid=100)
    assert c2.getattr("/here").is_dir
