"""AES-128-GCM primitives, key roles, sealed-key persistence, and counters.

Everything here runs on the trusted side of the deployment (or inside a
client, for its own session key). The host proxy never imports this module.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, NonceExhausted, RoleMismatch

KEY_LEN = 16
NONCE_LEN = 12
TAG_LEN = 16

SEALED_KEY_MAGIC = b"BFSKSEAL"
COUNTER_MAGIC = b"BFSCTR01"

_COUNTER_MAX = 2**64 - 1


class KeyRole(Enum):
    PERSISTENT = "persistent"            # long-lived block-encryption key
    CLIENT_SESSION = "client-session"    # per-client transport key
    STORAGE_SESSION = "storage-session"  # per-storage-node transport key
    SEALING = "sealing"                  # machine KEK wrapping the persistent key


# Optional test instrumentation: when set, every (key_id, nonce) pair used
# for encryption is appended here so tests can audit global nonce uniqueness.
_nonce_audit: Optional[list] = None


class nonce_audit:
    """Context manager collecting every (key_id, nonce) pair used to encrypt."""

    def __enter__(self) -> list:
        global _nonce_audit
        self._prev = _nonce_audit
        _nonce_audit = []
        return _nonce_audit

    def __exit__(self, *exc) -> None:
        global _nonce_audit
        _nonce_audit = self._prev


@dataclass
class SymmetricKey:
    """A 16-byte AES key plus its escrow metadata.

    Key material is immutable; the only mutable state is the nonce counter,
    which is advanced under a lock so concurrent encryptors never collide.
    """

    key_id: bytes
    material: bytes
    epoch: int
    role: KeyRole
    _counter: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _cipher: AESGCM = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if len(self.material) != KEY_LEN:
            raise ValueError(f"key material must be {KEY_LEN} bytes")
        if len(self.key_id) != 16:
            raise ValueError("key_id must be 16 bytes")
        self._cipher = AESGCM(self.material)

    def next_nonce(self, channel: int) -> bytes:
        """Atomically take the next nonce for this key on the given channel.

        Layout: u64 LE per-key counter followed by u32 LE channel
        discriminator. Distinct channels never share a nonce even across
        independently counted key instances holding the same material.
        """
        with self._lock:
            if self._counter >= _COUNTER_MAX:
                raise NonceExhausted(f"key {self.key_id.hex()} counter wrapped")
            value = self._counter
            self._counter += 1
        return struct.pack("<QI", value, channel & 0xFFFFFFFF)

    def nonces_used(self) -> int:
        with self._lock:
            return self._counter


@dataclass(frozen=True)
class AeadCiphertext:
    """One AEAD encryption: nonce, ciphertext body, and 16-byte tag."""

    nonce: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AeadCiphertext":
        if len(raw) < NONCE_LEN + TAG_LEN:
            raise AuthFailure("ciphertext too short")
        return cls(raw[:NONCE_LEN], raw[NONCE_LEN:-TAG_LEN], raw[-TAG_LEN:])


def aead_encrypt(key: SymmetricKey, plaintext: bytes, aad: bytes,
                 channel: int = 0) -> AeadCiphertext:
    """Encrypt and authenticate plaintext; the tag also covers aad."""
    nonce = key.next_nonce(channel)
    if _nonce_audit is not None:
        _nonce_audit.append((key.key_id, nonce))
    out = key._cipher.encrypt(nonce, plaintext, aad or None)
    return AeadCiphertext(nonce, out[:-TAG_LEN], out[-TAG_LEN:])


def aead_decrypt(key: SymmetricKey, ct: AeadCiphertext, aad: bytes) -> bytes:
    """Return the plaintext iff the tag verifies over body and aad.

    Fails atomically: on any mismatch no partial plaintext is released.
    """
    try:
        return key._cipher.decrypt(ct.nonce, ct.body + ct.tag, aad or None)
    except InvalidTag:
        raise AuthFailure("AEAD tag verification failed") from None


def generate_key(role: KeyRole, epoch: int = 1) -> SymmetricKey:
    """Fresh uniformly random key for the given role."""
    return SymmetricKey(key_id=os.urandom(16), material=os.urandom(16),
                        epoch=epoch, role=role)


def key_from_material(material: bytes, role: KeyRole, epoch: int = 1,
                      key_id: bytes | None = None) -> SymmetricKey:
    """Wrap pre-shared key material (e.g. loaded from a key file)."""
    if key_id is None:
        # Deterministic id for pre-shared keys so both peers agree on it.
        import hashlib
        key_id = hashlib.sha256(b"shieldfs-key-id" + material).digest()[:16]
    return SymmetricKey(key_id=key_id, material=material, epoch=epoch, role=role)


# ---------------------------------------------------------------------------
# Sealed persistent key file
# ---------------------------------------------------------------------------

_KEY_PAYLOAD = struct.Struct("<16s16sIB")  # key_id, material, epoch, role code

_ROLE_CODES = {
    KeyRole.PERSISTENT: 1,
    KeyRole.CLIENT_SESSION: 2,
    KeyRole.STORAGE_SESSION: 3,
    KeyRole.SEALING: 4,
}
_CODE_ROLES = {v: k for k, v in _ROLE_CODES.items()}


@dataclass(frozen=True)
class SealedKeyFile:
    """The persistent key wrapped under the machine sealing key.

    created_at is in-memory bookkeeping only; the on-disk layout is
    magic(8) | kek_epoch u32 | nonce(12) | ct_len u32 | ciphertext | tag(16),
    all integers little-endian.
    """

    kek_epoch: int
    ciphertext: AeadCiphertext
    created_at: int = 0

    def to_bytes(self) -> bytes:
        ct = self.ciphertext
        return b"".join([
            SEALED_KEY_MAGIC,
            struct.pack("<I", self.kek_epoch),
            ct.nonce,
            struct.pack("<I", len(ct.body)),
            ct.body,
            ct.tag,
        ])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedKeyFile":
        if len(raw) < 8 + 4 + NONCE_LEN + 4 + TAG_LEN:
            raise AuthFailure("sealed key file truncated")
        if raw[:8] != SEALED_KEY_MAGIC:
            raise AuthFailure("sealed key file has wrong magic")
        kek_epoch = struct.unpack_from("<I", raw, 8)[0]
        nonce = raw[12:12 + NONCE_LEN]
        (ct_len,) = struct.unpack_from("<I", raw, 12 + NONCE_LEN)
        body_off = 12 + NONCE_LEN + 4
        body = raw[body_off:body_off + ct_len]
        tag = raw[body_off + ct_len:body_off + ct_len + TAG_LEN]
        if len(body) != ct_len or len(tag) != TAG_LEN:
            raise AuthFailure("sealed key file truncated")
        return cls(kek_epoch=kek_epoch, ciphertext=AeadCiphertext(nonce, body, tag))


def seal_persistent_key(kt: SymmetricKey, sealing_key: SymmetricKey,
                        channel: int = 0) -> SealedKeyFile:
    """Wrap the persistent key under the machine KEK.

    The KEK only ever wraps; the persistent key is never derived from it, so
    re-sealing on a different machine leaves the key (and all sealed data)
    intact.
    """
    if kt.role is not KeyRole.PERSISTENT:
        raise RoleMismatch("can only seal a persistent-role key")
    if sealing_key.role is not KeyRole.SEALING:
        raise RoleMismatch("sealing key must have the sealing role")
    payload = _KEY_PAYLOAD.pack(kt.key_id, kt.material, kt.epoch,
                                _ROLE_CODES[kt.role])
    aad = SEALED_KEY_MAGIC + struct.pack("<I", sealing_key.epoch)
    ct = aead_encrypt(sealing_key, payload, aad, channel)
    return SealedKeyFile(kek_epoch=sealing_key.epoch, ciphertext=ct,
                         created_at=int(time.time()))


def unseal_persistent_key(sealed: SealedKeyFile,
                          sealing_key: SymmetricKey) -> SymmetricKey:
    """Recover the persistent key; raises AuthFailure under the wrong KEK."""
    if sealing_key.role is not KeyRole.SEALING:
        raise RoleMismatch("sealing key must have the sealing role")
    aad = SEALED_KEY_MAGIC + struct.pack("<I", sealed.kek_epoch)
    payload = aead_decrypt(sealing_key, sealed.ciphertext, aad)
    if len(payload) != _KEY_PAYLOAD.size:
        raise AuthFailure("sealed key payload malformed")
    key_id, material, epoch, role_code = _KEY_PAYLOAD.unpack(payload)
    role = _CODE_ROLES.get(role_code)
    if role is not KeyRole.PERSISTENT:
        raise AuthFailure("sealed payload is not a persistent key")
    return SymmetricKey(key_id=key_id, material=material, epoch=epoch, role=role)


# ---------------------------------------------------------------------------
# Key ring
# ---------------------------------------------------------------------------


class KeyRing:
    """Read-mostly registry of the trusted core's keys.

    Holds the current persistent key, the previous one while a rotation
    sweep is running, and the pre-shared session keys. Epochs increase by
    exactly one per rotation.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._persistent: dict[int, SymmetricKey] = {}
        self._current_epoch = 0
        self.client_keys: dict[int, SymmetricKey] = {}
        self.storage_keys: dict[int, SymmetricKey] = {}

    def install_persistent(self, key: SymmetricKey) -> None:
        if key.role is not KeyRole.PERSISTENT:
            raise RoleMismatch("expected a persistent-role key")
        with self._lock:
            self._persistent[key.epoch] = key
            if key.epoch > self._current_epoch:
                self._current_epoch = key.epoch

    @property
    def persistent(self) -> SymmetricKey:
        with self._lock:
            return self._persistent[self._current_epoch]

    def persistent_for_epoch(self, epoch: int) -> SymmetricKey:
        with self._lock:
            key = self._persistent.get(epoch)
        if key is None:
            raise AuthFailure(f"no persistent key for epoch {epoch}")
        return key

    def begin_persistent_rotation(self) -> SymmetricKey:
        """Install a fresh persistent key at epoch+1, keeping the old one."""
        with self._lock:
            new = generate_key(KeyRole.PERSISTENT, epoch=self._current_epoch + 1)
            self._persistent[new.epoch] = new
            self._current_epoch = new.epoch
            return new

    def retire_persistent_before(self, epoch: int) -> None:
        """Drop persistent keys older than epoch (sweep finished)."""
        with self._lock:
            for old in [e for e in self._persistent if e < epoch]:
                del self._persistent[old]

    def epochs_held(self) -> list[int]:
        with self._lock:
            return sorted(self._persistent)


# ---------------------------------------------------------------------------
# Monotonic counter (simulated TEE counter) and key files
# ---------------------------------------------------------------------------


class MonotonicCounter:
    """File-backed strictly increasing u64, standing in for a TEE counter.

    The simulation's trust assumption is that the host cannot roll this file
    back; everything that needs freshness across restarts (sealed Merkle
    root, transport channel generations) is keyed to values issued here.
    """

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        if os.path.exists(path):
            with open(path, "rb") as f:
                raw = f.read()
            if len(raw) != 16 or raw[:8] != COUNTER_MAGIC:
                raise AuthFailure("monotonic counter file malformed")
            self._value = struct.unpack("<Q", raw[8:])[0]
        else:
            self._value = 0
            self._write()

    def _write(self) -> None:
        with open(self.path, "wb") as f:
            f.write(COUNTER_MAGIC + struct.pack("<Q", self._value))
            f.flush()
            os.fsync(f.fileno())

    @property
    def value(self) -> int:
        with self._lock:
            return self._value

    def bump(self) -> int:
        with self._lock:
            self._value += 1
            self._write()
            return self._value


def write_key_file(path: str, key: SymmetricKey) -> None:
    """Store key material as one hex line (pre-shared key distribution)."""
    with open(path, "w", encoding="ascii") as f:
        f.write(key.material.hex() + "\n")
    os.chmod(path, 0o600)


def read_key_file(path: str, role: KeyRole, epoch: int = 1) -> SymmetricKey:
    with open(path, "r", encoding="ascii") as f:
        material = bytes.fromhex(f.read().strip())
    return key_from_material(material, role, epoch)
