"""The wire format over real sockets: TCP storage nodes and client front door."""

import pytest

from shieldfs.attest import attestation_fingerprint
from shieldfs.client import O_RDONLY, ClientSession, TcpClientLink
from shieldfs.crypto import KeyRole, read_key_file
from shieldfs.deploy import DeployConfig, Deployment, start_tcp_storage
from shieldfs.host import TcpFrontDoor


def test_tcp_storage_nodes(tmp_path):
    config = DeployConfig(data_dir=str(tmp_path / "data"), devices=2,
                          device_capacity=256, inode_count=64,
                          rpc_timeout=1.0, cache_enabled=False,
                          storage_mode="local")
    # mkfs locally, then serve the same device files over TCP
    Deployment.mkfs(config)
    servers = [start_tcp_storage(config, d) for d in range(2)]
    config.storage_mode = "tcp"
    config.storage_addresses = ",".join(
        f"{s.address[0]}:{s.address[1]}" for s in servers)
    dep = Deployment.open(config)
    try:
        c = dep.client(1, uid=1000, gid=100)
        fh = c.create("/over-tcp", 0o644)
        c.write(fh, 0, b"block bytes via sockets" * 200)
        assert c.read(fh, 0, 23 * 200) == b"block bytes via sockets" * 200
        c.release(fh)
        assert dep.core.fsck() == []
    finally:
        dep.shutdown(checkpoint=True)
        for s in servers:
            s.close()


def test_tcp_client_front_door(tmp_path):
    config = DeployConfig(data_dir=str(tmp_path / "data"), devices=2,
                          device_capacity=256, inode_count=64,
                          rpc_timeout=1.0, cache_enabled=False)
    Deployment.mkfs(config)
    dep = Deployment.open(config)
    door = TcpFrontDoor(dep.runtime)
    try:
        key = read_key_file(config.client_key_path(1), KeyRole.CLIENT_SESSION)
        link = TcpClientLink(door.address)
        session = ClientSession(link, key, 1, attestation_fingerprint(),
                                timeout=2.0)
        session.mount(1000, 100)
        fh = session.create("/socket-file", 0o644)
        session.write(fh, 0, b"hello over tcp")
        assert session.read(fh, 0, 32) == b"hello over tcp"
        session.release(fh)
        session.unmount()
        link.close()
    finally:
        door.close()
        dep.shutdown()
