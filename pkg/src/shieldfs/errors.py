"""Exception hierarchy shared across the trusted core, clients, and harness."""

from __future__ import annotations

import errno as _errno
import os


class ShieldFsError(Exception):
    """Base class for all errors raised by this package."""


class IntegrityError(ShieldFsError):
    """Base class for errors that indicate tampering rather than misuse.

    Anything derived from this class is treated as an attack signal: it is
    counted in alarm logs and mapped to a distinct CLI exit code.
    """


class AuthFailure(IntegrityError):
    """AEAD verification failed: ciphertext, tag, nonce, or AAD was altered."""


class SequenceViolation(IntegrityError):
    """An envelope arrived out of sequence (replay, reorder, or drop)."""


class SwapDetected(IntegrityError):
    """A genuine sealed block was served for the wrong block address."""


class RollbackDetected(IntegrityError):
    """Stale but authentic state was served in place of the current state."""


class AttestationMismatch(IntegrityError):
    """The attestation token presented at mount does not match this build."""


class SchemaError(ShieldFsError):
    """A decrypted message had an unknown opcode or a malformed body."""


class NonceExhausted(ShieldFsError):
    """The per-key nonce counter wrapped; the key must be rotated."""


class RoleMismatch(ShieldFsError):
    """A key with the wrong role was passed to a key-management operation."""


class RotationInProgress(ShieldFsError):
    """A persistent-key rotation sweep is still incomplete."""


class GenericIoError(ShieldFsError):
    """The single error the trusted core reports for any host-side failure."""


class NoSpace(ShieldFsError):
    """The block allocator has no free blocks left."""


class QueueClosed(ShieldFsError):
    """The host boundary was shut down while a send or receive was pending."""


class SessionLost(ShieldFsError):
    """The client session is dead (timeout or sequence violation); re-mount."""


class PolicyRejected(ShieldFsError):
    """A policy update was rejected (bad credential or malformed record)."""


class SetupFailure(ShieldFsError):
    """A benchmark or harness could not prepare its working state."""


class SuiteFailure(ShieldFsError):
    """The attack suite found an undetected attack or corrupted state."""


class FsError(ShieldFsError):
    """A POSIX-style file system error chosen by trusted logic.

    Carries a positive errno value from the ``errno`` module; the wire
    protocol transports it as a negative status.
    """

    def __init__(self, err: int, detail: str = ""):
        self.errno = err
        name = _errno.errorcode.get(err, str(err))
        super().__init__(f"{name}: {detail}" if detail else name)


def fs_error_name(err: int) -> str:
    """Symbolic name for an errno value, e.g. 2 -> 'ENOENT'."""
    return _errno.errorcode.get(err, f"E{err}")


def fs_error_message(err: int) -> str:
    return os.strerror(err)
