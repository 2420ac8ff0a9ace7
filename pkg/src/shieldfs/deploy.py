"""Deployment wiring: keys, devices, host runtime, trusted server, clients.

A deployment directory holds everything the simulated machine persists:
device files, sealed key files, the Merkle region, the sealed root, the
trusted counters, pre-shared key files, and the key=value config.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional

from .alarms import AlarmLog
from .attest import attestation_fingerprint
from .blocks import AllocStrategy, BlockEngine, DeviceGeometry
from .client import CacheConfig, ClientSession
from .crypto import (
    KeyRing,
    KeyRole,
    MonotonicCounter,
    SealedKeyFile,
    generate_key,
    read_key_file,
    seal_persistent_key,
    unseal_persistent_key,
    write_key_file,
)
from .errors import SetupFailure
from .fs import FsCore
from .host import AttackConfig, HostRuntime
from .server import TrustedServer
from .storage import DeviceFile, StorageNode, StorageNodeServer, create_device_file

ENV_PREFIX = "SHIELDFS_"


@dataclass
class DeployConfig:
    data_dir: str
    devices: int = 2
    device_capacity: int = 1024
    inode_count: int = 512
    strategy: str = "linear"
    num_clients: int = 4
    cache_enabled: bool = True
    flush_interval: float = 5.0
    attr_ttl: float = 3.0
    dirty_watermark: float = 0.25
    retry_limit: int = 3
    rpc_timeout: float = 2.0
    storage_mode: str = "local"          # local | tcp
    storage_addresses: str = ""          # "host:port,host:port" for tcp

    # -- paths -------------------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.data_dir, name)

    def device_path(self, device_id: int) -> str:
        return self.path(f"dev{device_id}.blk")

    @property
    def kek_path(self) -> str:
        return self.path("machine-kek.key")

    @property
    def kt_seal_path(self) -> str:
        return self.path("kt.seal")

    @property
    def kt_prev_path(self) -> str:
        return self.path("kt.seal.prev")

    def client_key_path(self, client_id: int) -> str:
        return self.path(f"client-{client_id}.key")

    def storage_key_path(self, device_id: int) -> str:
        return self.path(f"storage-{device_id}.key")

    @property
    def merkle_region_path(self) -> str:
        return self.path("merkle.region")

    @property
    def root_seal_path(self) -> str:
        return self.path("root.seal")

    @property
    def gen_counter_path(self) -> str:
        return self.path("generation.ctr")

    @property
    def chan_counter_path(self) -> str:
        return self.path("channel.ctr")

    @property
    def config_path(self) -> str:
        return self.path("shieldfs.conf")

    @property
    def alloc_strategy(self) -> AllocStrategy:
        return AllocStrategy.STRIPED if self.strategy == "striped" \
            else AllocStrategy.LINEAR

    def cache(self, enabled: Optional[bool] = None) -> CacheConfig:
        on = self.cache_enabled if enabled is None else enabled
        if not on:
            return CacheConfig.disabled()
        return CacheConfig(enabled=True, flush_interval=self.flush_interval,
                           attr_ttl=self.attr_ttl,
                           dirty_watermark=self.dirty_watermark)

    # -- persistence ----------------------------------------------------------------

    def save(self) -> None:
        with open(self.config_path, "w", encoding="ascii") as f:
            for fld in dc_fields(self):
                f.write(f"{fld.name}={getattr(self, fld.name)}\n")

    @classmethod
    def load(cls, data_dir: str) -> "DeployConfig":
        config = cls(data_dir=data_dir)
        path = config.config_path
        if os.path.exists(path):
            values = {}
            with open(path, encoding="ascii") as f:
                for line in f:
                    line = line.strip()
                    if not line or line.startswith("#") or "=" not in line:
                        continue
                    key, value = line.split("=", 1)
                    values[key.strip()] = value.strip()
            config = _apply_values(config, values)
        env = {k[len(ENV_PREFIX):].lower(): v for k, v in os.environ.items()
               if k.startswith(ENV_PREFIX)}
        config = _apply_values(config, env)
        config.data_dir = data_dir
        return config


def _apply_values(config: DeployConfig, values: dict[str, str]) -> DeployConfig:
    for fld in dc_fields(config):
        if fld.name not in values:
            continue
        raw = values[fld.name]
        if fld.type == "bool" or isinstance(getattr(config, fld.name), bool):
            setattr(config, fld.name, raw.lower() in ("1", "true", "yes"))
        elif isinstance(getattr(config, fld.name), int):
            setattr(config, fld.name, int(raw))
        elif isinstance(getattr(config, fld.name), float):
            setattr(config, fld.name, float(raw))
        else:
            setattr(config, fld.name, raw)
    return config


class Deployment:
    """A fully wired stack rooted at one deployment directory."""

    def __init__(self, config: DeployConfig,
                 attack: Optional[AttackConfig] = None,
                 crypto_enabled: bool = True, merkle_enabled: bool = True):
        self.config = config
        self.alarms = AlarmLog()
        self.runtime = HostRuntime(attack=attack,
                                   node_timeout=config.rpc_timeout)
        self.geometry = DeviceGeometry(config.devices, config.device_capacity)
        self.keyring = KeyRing()
        self.nodes: list[StorageNode] = []
        self.storage_keys = {}
        self.client_keys = {}
        self.crypto_enabled = crypto_enabled
        self.merkle_enabled = merkle_enabled
        self.engine: Optional[BlockEngine] = None
        self.core: Optional[FsCore] = None
        self.server: Optional[TrustedServer] = None
        self._client_sessions: list[ClientSession] = []

    # -- creation ------------------------------------------------------------------

    @classmethod
    def mkfs(cls, config: DeployConfig, root_uid: int = 0,
             root_gid: int = 0) -> None:
        """Create keys and devices, format the file system, shut down."""
        os.makedirs(config.data_dir, exist_ok=True)
        if os.path.exists(config.kt_seal_path):
            raise SetupFailure(f"{config.data_dir} already holds a file system")
        # Pre-shared keys and the simulated machine sealing key.
        if not os.path.exists(config.kek_path):
            write_key_file(config.kek_path, generate_key(KeyRole.SEALING))
        for c in range(1, config.num_clients + 1):
            write_key_file(config.client_key_path(c),
                           generate_key(KeyRole.CLIENT_SESSION))
        for d in range(config.devices):
            write_key_file(config.storage_key_path(d),
                           generate_key(KeyRole.STORAGE_SESSION))
            if config.storage_mode == "local":
                create_device_file(config.device_path(d),
                                   config.device_capacity)
        config.save()
        deployment = cls(config)
        try:
            kek = read_key_file(config.kek_path, KeyRole.SEALING)
            kt = generate_key(KeyRole.PERSISTENT)
            deployment.keyring.install_persistent(kt)
            chan = MonotonicCounter(config.chan_counter_path)
            sealed = seal_persistent_key(kt, kek, channel=chan.bump())
            with open(config.kt_seal_path, "wb") as f:
                f.write(sealed.to_bytes())
            deployment._build(counter_preloaded=chan)
            FsCore.format(deployment.engine, inode_count=config.inode_count,
                          strategy=config.alloc_strategy, root_uid=root_uid,
                          root_gid=root_gid)
        finally:
            deployment.runtime.close()

    # -- opening -------------------------------------------------------------------

    @classmethod
    def open(cls, config: DeployConfig,
             attack: Optional[AttackConfig] = None,
             crypto_enabled: bool = True,
             merkle_enabled: bool = True) -> "Deployment":
        deployment = cls(config, attack=attack, crypto_enabled=crypto_enabled,
                         merkle_enabled=merkle_enabled)
        kek = read_key_file(config.kek_path, KeyRole.SEALING)
        with open(config.kt_seal_path, "rb") as f:
            kt = unseal_persistent_key(SealedKeyFile.from_bytes(f.read()), kek)
        deployment.keyring.install_persistent(kt)
        resume_rotation = False
        if os.path.exists(config.kt_prev_path):
            with open(config.kt_prev_path, "rb") as f:
                old = unseal_persistent_key(SealedKeyFile.from_bytes(f.read()),
                                            kek)
            deployment.keyring.install_persistent(old)
            resume_rotation = True
        deployment._build()
        deployment.engine.load_merkle_on_boot()
        deployment.core = FsCore.boot(deployment.engine)
        if resume_rotation:
            # Finish the interrupted re-encryption sweep before serving.
            deployment.engine.resume_rotation()
            deployment.engine.sweep_all()
            os.unlink(config.kt_prev_path)
        deployment.server = TrustedServer(deployment.runtime.boundary,
                                          deployment.core, deployment.engine,
                                          deployment.client_keys,
                                          deployment.alarms)
        deployment.server.start()
        return deployment

    # -- shared wiring ----------------------------------------------------------------

    def _build(self, counter_preloaded: Optional[MonotonicCounter] = None) -> None:
        config = self.config
        for d in range(config.devices):
            key = read_key_file(config.storage_key_path(d),
                                KeyRole.STORAGE_SESSION)
            self.storage_keys[d] = key
            if config.storage_mode == "tcp":
                addr = config.storage_addresses.split(",")[d]
                host_part, port_part = addr.rsplit(":", 1)
                self.runtime.attach_tcp_node(d, (host_part, int(port_part)))
            else:
                node = StorageNode(d, DeviceFile(config.device_path(d)), key,
                                   self.alarms)
                self.nodes.append(node)
                self.runtime.attach_local_node(d, node.serve_block_rpc)
        for c in range(1, config.num_clients + 1):
            path = config.client_key_path(c)
            if os.path.exists(path):
                self.client_keys[c] = read_key_file(path,
                                                    KeyRole.CLIENT_SESSION)
        gen = MonotonicCounter(config.gen_counter_path)
        chan = counter_preloaded or MonotonicCounter(config.chan_counter_path)
        self.engine = BlockEngine(
            self.runtime.boundary, self.geometry, self.keyring,
            self.storage_keys, gen, chan, self.alarms,
            config.merkle_region_path, config.root_seal_path,
            retry_limit=config.retry_limit, rpc_timeout=config.rpc_timeout,
            crypto_enabled=self.crypto_enabled,
            merkle_enabled=self.merkle_enabled)
        self.runtime.start()

    # -- clients -----------------------------------------------------------------------

    def client(self, client_id: int, uid: int, gid: int,
               caching: Optional[bool] = None,
               timeout: Optional[float] = None) -> ClientSession:
        key = read_key_file(self.config.client_key_path(client_id),
                            KeyRole.CLIENT_SESSION)
        link = self.runtime.register_client(client_id)
        session = ClientSession(
            link, key, client_id, attestation_fingerprint(),
            cache=self.config.cache(caching),
            timeout=timeout if timeout is not None else self.config.rpc_timeout)
        session.mount(uid, gid)
        self._client_sessions.append(session)
        return session

    # -- key rotation ---------------------------------------------------------------------

    def rotate_key(self, sweep: bool = True):
        """Swap in a fresh persistent key; optionally run the sweep now."""
        config = self.config
        kek = read_key_file(config.kek_path, KeyRole.SEALING)
        old = self.keyring.persistent
        new = self.engine.rotate_persistent_key()
        chan = self.engine.chan_counter
        with open(config.kt_prev_path, "wb") as f:
            f.write(seal_persistent_key(old, kek, channel=chan.bump())
                    .to_bytes())
        with open(config.kt_seal_path, "wb") as f:
            f.write(seal_persistent_key(new, kek, channel=chan.bump())
                    .to_bytes())
        if sweep:
            self.finish_rotation()
        return new

    def finish_rotation(self) -> None:
        self.engine.sweep_all()
        if os.path.exists(self.config.kt_prev_path):
            os.unlink(self.config.kt_prev_path)

    # -- teardown ----------------------------------------------------------------------------

    def shutdown(self, checkpoint: bool = True) -> None:
        for session in self._client_sessions:
            try:
                if session.alive:
                    session.unmount()
            except Exception:
                pass
        if self.server is not None:
            self.server.stop()
            if checkpoint:
                self.engine.checkpoint_merkle()
        self.runtime.close()
        for node in self.nodes:
            node.device.close()


def start_tcp_storage(config: DeployConfig, device_id: int,
                      port: int = 0) -> StorageNodeServer:
    """Run one storage node as a TCP service (its own thread)."""
    path = config.device_path(device_id)
    if not os.path.exists(path):
        create_device_file(path, config.device_capacity)
    key = read_key_file(config.storage_key_path(device_id),
                        KeyRole.STORAGE_SESSION)
    node = StorageNode(device_id, DeviceFile(path), key, AlarmLog())
    return StorageNodeServer(node, port=port)
