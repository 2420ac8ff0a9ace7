"""Trusted server: session management, authenticated dispatch, workers.

The dispatcher thread pulls envelopes through the host boundary, routes them
to per-session workers, and each worker opens, dispatches, and answers its
own traffic. Opcodes live inside the ciphertext, so only an authenticated
client can choose which handler runs; the dispatch log records every handler
invocation for the mis-dispatch audit.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Optional

from .alarms import AlarmLog
from .attest import attestation_fingerprint
from .blocks import BlockEngine
from .crypto import MonotonicCounter, SymmetricKey
from .errors import (
    AttestationMismatch,
    AuthFailure,
    FsError,
    PolicyRejected,
    QueueClosed,
    SchemaError,
    SequenceViolation,
)
from .fs import Credential, FsCore, HandleTable
from .wire import (
    BLOCK_OPCODES,
    ChannelClass,
    Opcode,
    SecureChannel,
    SecureEnvelope,
    decode_message,
    decode_request_body,
    encode_response,
    nonce_channel_id,
)

import errno as _errno

_BOOTSTRAP_BIT = 0x80000000


@dataclass
class Session:
    peer_id: int
    generation: int
    channel: SecureChannel
    cred: Credential
    handles: HandleTable = field(default_factory=HandleTable)
    alive: bool = True
    inbox: "queue.SimpleQueue[Optional[SecureEnvelope]]" = field(
        default_factory=queue.SimpleQueue)


@dataclass(frozen=True)
class DispatchRecord:
    peer_id: int
    opcode: Opcode
    status: int


class TrustedServer:
    """Runs the trusted core behind the four-function host boundary."""

    def __init__(self, boundary, core: FsCore, engine: BlockEngine,
                 client_keys: dict[int, SymmetricKey],
                 alarms: AlarmLog | None = None):
        self.boundary = boundary
        self.core = core
        self.engine = engine
        self.client_keys = client_keys
        self.alarms = alarms or AlarmLog()
        self.fingerprint = attestation_fingerprint()
        self.dispatch_log: list[DispatchRecord] = []
        self._sessions: dict[int, Session] = {}
        self._session_gen = 0
        self._bootstrap_seen: set[int] = set()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> None:
        t = threading.Thread(target=self._dispatcher_loop, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        with self._lock:
            for session in self._sessions.values():
                session.inbox.put(None)

    def shutdown(self) -> None:
        """Stop threads and anchor the final state."""
        self.stop()
        self.engine.checkpoint_merkle()

    # -- dispatcher ---------------------------------------------------------------

    def _dispatcher_loop(self) -> None:
        while not self._stop.is_set():
            try:
                env = self.boundary.recv_file_msg(timeout=0.1)
            except QueueClosed:
                return
            if env is None:
                continue
            self._route(env)

    def _route(self, env: SecureEnvelope) -> None:
        chan_id = nonce_channel_id(env.ciphertext.nonce)
        with self._lock:
            session = self._sessions.get(env.peer_id)
        if chan_id & _BOOTSTRAP_BIT:
            self._handle_mount(env, chan_id)
            return
        if session is None or not session.alive:
            self.alarms.record("server", "SequenceViolation",
                               f"envelope for dead session {env.peer_id}")
            return
        session.inbox.put(env)

    # -- mount bootstrap -------------------------------------------------------------

    def _handle_mount(self, env: SecureEnvelope, chan_id: int) -> None:
        key = self.client_keys.get(env.peer_id)
        if key is None:
            self.alarms.record("server", "AuthFailure",
                               f"mount from unknown peer {env.peer_id}")
            return
        with self._lock:
            if chan_id in self._bootstrap_seen:
                self.alarms.record("server", "SequenceViolation",
                                   "bootstrap channel reuse")
                return
            self._bootstrap_seen.add(chan_id)
        bootstrap = SecureChannel(key, ChannelClass.FILE_RPC, env.peer_id,
                                  send_channel=chan_id | 1,
                                  recv_channel=chan_id)
        try:
            payload = bootstrap.open(env)
            opcode, request_id, body = decode_message(payload)
            if opcode is not Opcode.MOUNT:
                raise SchemaError("bootstrap channel only accepts mount")
            fields = decode_request_body(opcode, body)
        except (AuthFailure, SequenceViolation, SchemaError) as exc:
            self.alarms.record_exc("server", exc)
            return
        if fields["token"] != self.fingerprint:
            exc = AttestationMismatch("mount token does not match this build")
            self.alarms.record_exc("server", exc)
            resp = encode_response(opcode, request_id, -_errno.EACCES)
            self.boundary.send_file_msg(bootstrap.seal(resp))
            return
        with self._lock:
            self._session_gen += 1
            generation = self._session_gen
            channel = SecureChannel(key, ChannelClass.FILE_RPC, env.peer_id,
                                    send_channel=(generation << 1) | 1,
                                    recv_channel=(generation << 1))
            old = self._sessions.get(env.peer_id)
            if old is not None:
                old.alive = False
                old.inbox.put(None)
            cred = Credential(uid=fields["uid"], gid=fields["gid"],
                              session=env.peer_id)
            session = Session(peer_id=env.peer_id, generation=generation,
                              channel=channel, cred=cred)
            self._sessions[env.peer_id] = session
        worker = threading.Thread(target=self._worker_loop, args=(session,),
                                  daemon=True)
        worker.start()
        self._threads.append(worker)
        resp = encode_response(opcode, request_id, 0, session_gen=generation)
        self.boundary.send_file_msg(bootstrap.seal(resp))
        self._log_dispatch(env.peer_id, Opcode.MOUNT, 0)

    # -- per-session worker -------------------------------------------------------------

    def _worker_loop(self, session: Session) -> None:
        while session.alive and not self._stop.is_set():
            env = session.inbox.get()
            if env is None:
                return
            try:
                payload = session.channel.open(env)
            except SequenceViolation as exc:
                # Fail closed: one bad sequence kills the session.
                self.alarms.record_exc("server", exc)
                session.alive = False
                return
            except AuthFailure as exc:
                self.alarms.record_exc("server", exc)
                continue  # envelope discarded
            response = self._dispatch(session, payload)
            if response is None:
                continue
            try:
                self.boundary.send_file_msg(session.channel.seal(response))
            except QueueClosed:
                return

    def _dispatch(self, session: Session, payload: bytes) -> Optional[bytes]:
        try:
            opcode, request_id, body = decode_message(payload)
        except SchemaError as exc:
            self.alarms.record_exc("server", exc)
            return None
        if opcode in BLOCK_OPCODES:
            self.alarms.record("server", "SchemaError",
                               f"block opcode {opcode} on file channel")
            return encode_response(opcode, request_id, -_errno.EIO)
        try:
            fields = decode_request_body(opcode, body)
        except SchemaError as exc:
            self.alarms.record_exc("server", exc)
            return encode_response(opcode, request_id, -_errno.EIO)
        try:
            out = self._invoke(session, opcode, fields)
            status = 0
        except FsError as exc:
            out = {}
            status = -exc.errno
        except PolicyRejected as exc:
            self.alarms.record_exc("server", exc)
            out = {}
            status = -_errno.EPERM
        self._log_dispatch(session.peer_id, opcode, status)
        return encode_response(opcode, request_id, status, **out)

    def _invoke(self, session: Session, opcode: Opcode, f: dict) -> dict:
        core = self.core
        cred = session.cred
        handles = session.handles
        if opcode is Opcode.GETATTR:
            return {"attr": core.getattr(cred, f["path"])}
        if opcode is Opcode.MKDIR:
            core.mkdir(cred, f["path"], f["mode"])
            return {}
        if opcode is Opcode.UNLINK:
            core.unlink(cred, f["path"])
            return {}
        if opcode is Opcode.RMDIR:
            core.rmdir(cred, f["path"])
            return {}
        if opcode is Opcode.RENAME:
            core.rename(cred, f["old_path"], f["new_path"])
            return {}
        if opcode is Opcode.CHMOD:
            core.chmod(cred, f["path"], f["mode"])
            return {}
        if opcode is Opcode.OPEN:
            fh, attr = core.open(cred, handles, f["path"], f["flags"])
            return {"fh": fh, "attr": attr}
        if opcode is Opcode.READ:
            return {"data": core.read(cred, handles, f["fh"], f["offset"],
                                      f["size"])}
        if opcode is Opcode.WRITE:
            return {"written": core.write(cred, handles, f["fh"], f["offset"],
                                          f["data"])}
        if opcode is Opcode.RELEASE:
            core.release(handles, f["fh"])
            return {}
        if opcode is Opcode.FSYNC:
            core.fsync(handles, f["fh"])
            return {}
        if opcode is Opcode.OPENDIR:
            return {"dh": core.opendir(cred, handles, f["path"])}
        if opcode is Opcode.READDIR:
            return {"entries": core.readdir(cred, handles, f["dh"])}
        if opcode is Opcode.RELEASEDIR:
            core.releasedir(handles, f["dh"])
            return {}
        if opcode is Opcode.CREATE:
            fh, attr = core.create(cred, handles, f["path"], f["mode"])
            return {"fh": fh, "attr": attr}
        if opcode is Opcode.UNMOUNT:
            session.alive = False
            return {}
        if opcode is Opcode.SET_POLICY:
            core.set_policy(cred, f["policy"])
            return {}
        if opcode is Opcode.SET_ACL:
            core.setacl(cred, f["path"], f["entries"])
            return {}
        raise FsError(_errno.EIO, f"unhandled opcode {opcode}")

    def _log_dispatch(self, peer_id: int, opcode: Opcode, status: int) -> None:
        with self._lock:
            self.dispatch_log.append(DispatchRecord(peer_id, opcode, status))

    # -- introspection ------------------------------------------------------------------

    def session_for(self, peer_id: int) -> Optional[Session]:
        with self._lock:
            return self._sessions.get(peer_id)

    def dispatched_opcodes(self) -> list[Opcode]:
        with self._lock:
            return [r.opcode for r in self.dispatch_log]
