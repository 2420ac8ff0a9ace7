"""Untrusted host: boundary queues, proxy pumps, and attack injection.

Everything in this module handles opaque frames. It parses routing fields
(channel class, peer id) to move envelopes around and can mutate, drop,
duplicate, or reorder them, but it holds no keys and never sees plaintext.
The four methods of HostBoundary are the only functions trusted code may
call to cross the trust boundary.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .errors import QueueClosed, SchemaError
from .wire import ChannelClass, SecureEnvelope, parse_frame, read_frame, write_frame

# Frame geometry the host legitimately knows: 4-byte length, 1-byte class,
# 4-byte peer id, 12-byte nonce, ciphertext, 16-byte tag.
_HDR_LEN = 4 + 1 + 4
_CT_START = _HDR_LEN + 12


class AttackMode(Enum):
    NONE = "none"
    CORRUPT_BODY = "corrupt-body"
    SWAP_ENVELOPES = "swap-envelopes"
    REPLAY_ENVELOPE = "replay-envelope"
    REORDER_ENVELOPES = "reorder-envelopes"
    DROP_ENVELOPE = "drop-envelope"
    RECAST_OPCODE = "recast-opcode"
    SWAP_BLOCKS = "swap-blocks"
    REPLAY_OLD_BLOCK = "replay-old-block"
    TAMPER_RETURN_CODE = "tamper-return-code"
    ROLLBACK_TREE_REGION = "rollback-tree-region"


# Attack modes applied frame-by-frame at the proxy; the rest operate on
# host-visible files or boundary return codes.
FRAME_ATTACKS = {
    AttackMode.CORRUPT_BODY,
    AttackMode.SWAP_ENVELOPES,
    AttackMode.REPLAY_ENVELOPE,
    AttackMode.REORDER_ENVELOPES,
    AttackMode.DROP_ENVELOPE,
    AttackMode.RECAST_OPCODE,
}


@dataclass
class AttackTrigger:
    """Selects which host-visible frames (or send calls) an attack hits."""

    channel: Optional[ChannelClass] = None  # None = either channel
    direction: str = "any"                  # to_trusted | from_trusted | any
    skip: int = 0                           # matching frames to pass first
    count: int = 1                          # frames to affect; -1 = unlimited

    def matches(self, channel: ChannelClass, direction: str) -> bool:
        if self.channel is not None and channel != self.channel:
            return False
        if self.direction != "any" and direction != self.direction:
            return False
        return True


@dataclass
class AttackConfig:
    mode: AttackMode = AttackMode.NONE
    trigger: AttackTrigger = field(default_factory=AttackTrigger)
    # mode-specific parameters
    swap_addr_a: Optional[tuple[int, int]] = None   # (device, block)
    swap_addr_b: Optional[tuple[int, int]] = None
    replay_generation: int = 0                      # history index to restore
    tamper_code: int = -1


@dataclass(frozen=True)
class TraceRecord:
    index: int
    direction: str
    channel_class: int
    peer_id: int
    frame: bytes
    attack: Optional[str] = None


class TraceLog:
    """Append-only record of every frame the host moved."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: list[TraceRecord] = []

    def append(self, direction: str, frame: bytes,
               attack: Optional[str] = None) -> None:
        cls, peer = struct.unpack_from("<BI", frame, 4)
        with self._lock:
            self._records.append(TraceRecord(len(self._records), direction,
                                             cls, peer, frame, attack))

    def records(self) -> list[TraceRecord]:
        with self._lock:
            return list(self._records)

    def attacks_applied(self) -> int:
        with self._lock:
            return sum(1 for r in self._records if r.attack)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


class _AttackState:
    """Per-run mutable attack bookkeeping (trigger counting, held frames)."""

    def __init__(self, config: AttackConfig):
        self.config = config
        self.lock = threading.Lock()
        self.seen = 0
        self.applied = 0
        self.held: Optional[bytes] = None

    def should_fire(self, channel: ChannelClass, direction: str) -> bool:
        cfg = self.config
        if cfg.mode not in FRAME_ATTACKS:
            return False
        if not cfg.trigger.matches(channel, direction):
            return False
        with self.lock:
            self.seen += 1
            if self.seen <= cfg.trigger.skip:
                return False
            if cfg.trigger.count >= 0 and \
                    self.applied >= cfg.trigger.count:
                return False
            self.applied += 1
            return True

    def fire_send_code(self, channel: ChannelClass) -> Optional[int]:
        cfg = self.config
        if cfg.mode is not AttackMode.TAMPER_RETURN_CODE:
            return None
        if not cfg.trigger.matches(channel, "from_trusted"):
            return None
        with self.lock:
            self.seen += 1
            if self.seen <= cfg.trigger.skip:
                return None
            if cfg.trigger.count >= 0 and self.applied >= cfg.trigger.count:
                return None
            self.applied += 1
            return cfg.tamper_code


def _mutate_frame(mode: AttackMode, frame: bytes,
                  held: Optional[bytes]) -> list[tuple[bytes, str]]:
    """Apply a frame attack; returns (frame, attack-label) pairs to deliver."""
    label = mode.value
    if mode is AttackMode.DROP_ENVELOPE:
        return []
    if mode is AttackMode.CORRUPT_BODY:
        out = bytearray(frame)
        out[_CT_START] ^= 0x01  # first ciphertext byte
        return [(bytes(out), label)]
    if mode is AttackMode.REPLAY_ENVELOPE:
        return [(frame, None), (frame, label)]
    if mode is AttackMode.RECAST_OPCODE:
        out = bytearray(frame)
        out[4] = 2 if out[4] == 1 else 1  # flip the channel class
        return [(bytes(out), label)]
    raise AssertionError(f"unsupported frame attack {mode}")


def _splice_frames(a: bytes, b: bytes) -> tuple[bytes, bytes]:
    """Swap the sealed payloads of two frames, keeping their routing headers."""
    header_a, payload_a = a[4:_HDR_LEN], a[_HDR_LEN:]
    header_b, payload_b = b[4:_HDR_LEN], b[_HDR_LEN:]
    fa = struct.pack("<I", len(header_a) + len(payload_b)) + header_a + payload_b
    fb = struct.pack("<I", len(header_b) + len(payload_a)) + header_b + payload_a
    return fa, fb


class HostBoundary:
    """The four-function trust boundary.

    Trusted code calls exactly these methods; the host runtime moves frames
    between the queues behind them and the outside world. Send methods
    return a host-supplied status code that trusted code must pass through
    guard_return; receive methods block until an envelope (or timeout).
    """

    def __init__(self, runtime: "HostRuntime"):
        self._runtime = runtime
        self._closed = False

    def send_file_msg(self, env: SecureEnvelope) -> int:
        return self._runtime._outbound(ChannelClass.FILE_RPC, env)

    def recv_file_msg(self, timeout: Optional[float] = None) -> Optional[SecureEnvelope]:
        return self._runtime._inbound(ChannelClass.FILE_RPC, timeout)

    def send_block_msg(self, env: SecureEnvelope) -> int:
        return self._runtime._outbound(ChannelClass.BLOCK_RPC, env)

    def recv_block_msg(self, timeout: Optional[float] = None) -> Optional[SecureEnvelope]:
        return self._runtime._inbound(ChannelClass.BLOCK_RPC, timeout)


BOUNDARY_FUNCTIONS = ("send_file_msg", "recv_file_msg",
                      "send_block_msg", "recv_block_msg")


class ClientLink:
    """The client's network endpoint as seen through the host."""

    def __init__(self, runtime: "HostRuntime", peer_id: int):
        self._runtime = runtime
        self.peer_id = peer_id
        self.inbox: "queue.SimpleQueue[bytes]" = queue.SimpleQueue()

    def send_frame(self, frame: bytes) -> None:
        self._runtime.client_frame_arrived(frame)

    def recv_frame(self, timeout: Optional[float]) -> Optional[bytes]:
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None


class LocalNodeLink:
    """In-process storage node attachment."""

    def __init__(self, serve: Callable):
        self._serve = serve

    def exchange(self, env: SecureEnvelope,
                 timeout: float) -> Optional[SecureEnvelope]:
        return self._serve(env)


class TcpFrontDoor:
    """TCP listener bridging remote clients into the host runtime.

    Each accepted connection is bound to the peer id of its first frame;
    responses for that peer are written back to the same socket.
    """

    def __init__(self, runtime: "HostRuntime", host: str = "127.0.0.1",
                 port: int = 0):
        self._runtime = runtime
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,),
                             daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        link: Optional[ClientLink] = None
        writer: Optional[threading.Thread] = None
        try:
            while not self._stop.is_set():
                frame = read_frame(conn)
                if link is None:
                    (peer,) = struct.unpack_from("<I", frame, 5)
                    link = self._runtime.register_client(peer)
                    writer = threading.Thread(target=self._writer,
                                              args=(conn, link), daemon=True)
                    writer.start()
                self._runtime.client_frame_arrived(frame)
        except (ConnectionError, OSError, SchemaError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _writer(self, conn: socket.socket, link: ClientLink) -> None:
        while not self._stop.is_set():
            frame = link.recv_frame(timeout=0.2)
            if frame is None:
                continue
            try:
                write_frame(conn, frame)
            except OSError:
                return

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


class TcpNodeLink:
    """Storage node reached over a stream socket."""

    def __init__(self, address: tuple[str, int]):
        self._sock = socket.create_connection(address)

    def exchange(self, env: SecureEnvelope,
                 timeout: float) -> Optional[SecureEnvelope]:
        write_frame(self._sock, env.to_frame())
        self._sock.settimeout(timeout)
        try:
            return parse_frame(read_frame(self._sock))
        except (TimeoutError, socket.timeout, ConnectionError, OSError):
            return None

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class HostRuntime:
    """Proxy loop: moves frames between clients, trusted core, and storage.

    One pump thread carries client traffic into the trusted file queue, one
    routes trusted responses back to client links, and one walks block
    requests out to the storage nodes and returns their responses. Every
    frame is traced; the active AttackConfig is applied where it triggers.
    """

    def __init__(self, attack: Optional[AttackConfig] = None,
                 node_timeout: float = 2.0):
        self.trace = TraceLog()
        self.attack = _AttackState(attack or AttackConfig())
        self.node_timeout = node_timeout
        self.boundary = HostBoundary(self)
        self._file_to_trusted: "queue.SimpleQueue" = queue.SimpleQueue()
        self._block_to_trusted: "queue.SimpleQueue" = queue.SimpleQueue()
        self._clients: dict[int, ClientLink] = {}
        self._nodes: dict[int, object] = {}
        self._closed = threading.Event()

    def arm_attack(self, config: AttackConfig) -> None:
        """Swap in a fresh attack configuration (suite phase boundary)."""
        self.attack = _AttackState(config)

    # -- topology -------------------------------------------------------------

    def register_client(self, peer_id: int) -> ClientLink:
        link = ClientLink(self, peer_id)
        self._clients[peer_id] = link
        return link

    def attach_local_node(self, device_id: int, serve: Callable) -> None:
        self._nodes[device_id] = LocalNodeLink(serve)

    def attach_tcp_node(self, device_id: int, address: tuple[str, int]) -> None:
        self._nodes[device_id] = TcpNodeLink(address)

    def start(self) -> None:
        """Kept for symmetry; host work runs inline on the calling thread,
        the way an ocall leaves the enclave and executes host code."""

    def close(self) -> None:
        self._closed.set()
        # Wake any blocked consumers.
        self._file_to_trusted.put(None)
        self._block_to_trusted.put(None)
        for link in self._clients.values():
            link.inbox.put(None)
        for node in self._nodes.values():
            close = getattr(node, "close", None)
            if close:
                close()

    # -- boundary internals (host side of the four functions) -----------------

    def _outbound(self, channel: ChannelClass, env: SecureEnvelope) -> int:
        """Host side of send_file_msg / send_block_msg.

        Runs on the trusted caller's thread like an ocall: applies the
        attack, then delivers file responses to client links and walks block
        requests through the storage node, queueing the node's response for
        recv_block_msg.
        """
        if self._closed.is_set():
            raise QueueClosed("host runtime is shut down")
        override = self.attack.fire_send_code(channel)
        frame = env.to_frame()
        if channel is ChannelClass.FILE_RPC:
            for out in self._process("from_trusted", channel, frame):
                (peer,) = struct.unpack_from("<I", out, 5)
                link = self._clients.get(peer)
                if link is not None:
                    link.inbox.put(out)
        else:
            for out in self._process("from_trusted", channel, frame):
                self._deliver_to_node(out)
        return 0 if override is None else override

    def _deliver_to_node(self, frame: bytes) -> None:
        (peer,) = struct.unpack_from("<I", frame, 5)
        node = self._nodes.get(peer)
        if node is None:
            return
        try:
            env = parse_frame(frame)
        except Exception:
            return
        resp = node.exchange(env, self.node_timeout)
        if resp is None:
            return
        for back in self._process("to_trusted", ChannelClass.BLOCK_RPC,
                                  resp.to_frame()):
            try:
                self._block_to_trusted.put(parse_frame(back))
            except Exception:
                pass

    def client_frame_arrived(self, frame: bytes) -> None:
        """Client-side ingress (called from the client link or a socket
        reader): apply attacks and hand the frame to the trusted queue."""
        for out in self._process("to_trusted", ChannelClass.FILE_RPC, frame):
            try:
                self._file_to_trusted.put(parse_frame(out))
            except Exception:
                # The host mangled the frame beyond parsing; trusted side
                # simply never sees it.
                pass

    def _inbound(self, channel: ChannelClass,
                 timeout: Optional[float]) -> Optional[SecureEnvelope]:
        q = self._file_to_trusted if channel is ChannelClass.FILE_RPC \
            else self._block_to_trusted
        try:
            item = q.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is None:
            raise QueueClosed("host runtime is shut down")
        return item

    # -- attack application ----------------------------------------------------

    def _process(self, direction: str, channel: ChannelClass,
                 frame: bytes) -> list[bytes]:
        mode = self.attack.config.mode
        if not self.attack.should_fire(channel, direction):
            self.trace.append(direction, frame)
            return [frame]
        if mode in (AttackMode.REORDER_ENVELOPES, AttackMode.SWAP_ENVELOPES):
            with self.attack.lock:
                held = self.attack.held
                if held is None:
                    self.attack.held = frame
                    # Holding counts as one application; the release pairs
                    # with the next triggered frame.
                    self.trace.append(direction, frame, mode.value + ":hold")
                    return []
                self.attack.held = None
            if mode is AttackMode.REORDER_ENVELOPES:
                pair = [(frame, mode.value), (held, mode.value)]
            else:
                fa, fb = _splice_frames(held, frame)
                pair = [(fa, mode.value), (fb, mode.value)]
            out = []
            for f, label in pair:
                self.trace.append(direction, f, label)
                out.append(f)
            return out
        out = []
        for f, label in _mutate_frame(mode, frame, None):
            self.trace.append(direction, f, label)
            out.append(f)
        return out

# ---------------------------------------------------------------------------
# Host-side raw file manipulation (storage attacks)
# ---------------------------------------------------------------------------

_DEVICE_HEADER_LEN = 16
_SLOT_LEN = 1 + 12 + 4096 + 16


def _slot_offset(block_id: int) -> int:
    return _DEVICE_HEADER_LEN + block_id * _SLOT_LEN


def read_device_slot(path: str, block_id: int) -> bytes:
    with open(path, "rb") as f:
        f.seek(_slot_offset(block_id))
        return f.read(_SLOT_LEN)


def write_device_slot(path: str, block_id: int, slot: bytes) -> None:
    with open(path, "r+b") as f:
        f.seek(_slot_offset(block_id))
        f.write(slot)
        f.flush()


def swap_device_slots(path_a: str, block_a: int,
                      path_b: str, block_b: int) -> None:
    """Exchange two genuine slots on disk (the block-swapping attack)."""
    slot_a = read_device_slot(path_a, block_a)
    slot_b = read_device_slot(path_b, block_b)
    write_device_slot(path_a, block_a, slot_b)
    write_device_slot(path_b, block_b, slot_a)


def snapshot_file(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def restore_file(path: str, contents: bytes) -> None:
    with open(path, "wb") as f:
        f.write(contents)
        f.flush()
