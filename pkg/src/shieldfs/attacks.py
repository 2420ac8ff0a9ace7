"""Adversary harness: every threat-catalog attack driven end to end.

Each scenario builds a fresh deployment, runs a deterministic populate
phase, arms one attack, executes a victim operation, and then verifies
three things: the attack was detected by the right check, no silently
corrupted state is visible anywhere, and the captured host traffic still
leaks nothing.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field

from . import host as host_mod
from .blocks import BlockAddress
from .client import O_RDONLY, O_RDWR, ClientSession
from .deploy import DeployConfig, Deployment
from .errors import (
    FsError,
    GenericIoError,
    RollbackDetected,
    SessionLost,
    SuiteFailure,
)
from .host import AttackConfig, AttackMode, AttackTrigger, TraceLog
from .wire import ChannelClass

import errno as _errno

# Content markers planted by the populate phase; the scanner proves they
# never cross the host in plaintext.
MARKERS = [f"MARKER-{i:02d}-{os.urandom(8).hex()}".encode("ascii")
           for i in range(4)]


@dataclass
class ScenarioResult:
    name: str
    mode: AttackMode
    detected_by: str
    passed: bool
    notes: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.name} detected_by={self.detected_by} {status}"


@dataclass
class SuiteReport:
    results: list[ScenarioResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]

    def render(self) -> str:
        out = ["attack suite results:"]
        out += ["  " + line for line in self.lines()]
        verdict = "ALL ATTACKS DETECTED" if self.passed else "SUITE FAILED"
        out.append(verdict)
        return "\n".join(out)


# ---------------------------------------------------------------------------
# Confidentiality scanner
# ---------------------------------------------------------------------------


def scan_trace(trace: TraceLog, needles: list[bytes]) -> list[str]:
    """Needle hits anywhere in captured frames (ciphertext included: a hit
    means plaintext crossed the host)."""
    hits = []
    for record in trace.records():
        for needle in needles:
            if needle in record.frame:
                hits.append(f"frame {record.index}: {needle[:16]!r}")
    return hits


def scan_host_files(config: DeployConfig, needles: list[bytes]) -> list[str]:
    """Needle hits in anything persisted on the untrusted disk."""
    hits = []
    names = [config.device_path(d) for d in range(config.devices)]
    names += [config.merkle_region_path, config.root_seal_path,
              config.kt_seal_path]
    for path in names:
        if not os.path.exists(path):
            continue
        with open(path, "rb") as f:
            blob = f.read()
        for needle in needles:
            if needle in blob:
                hits.append(f"{os.path.basename(path)}: {needle[:16]!r}")
    return hits


def plaintext_regions_are_routing_only(trace: TraceLog) -> bool:
    """Structural check: every captured frame parses, and nothing but the
    length/class/peer/nonce fields lies outside the ciphertext."""
    from .wire import parse_frame
    for record in trace.records():
        if record.attack:
            continue  # attack-mutated frames may be arbitrarily mangled
        try:
            env = parse_frame(record.frame)
        except Exception:
            return False
        overhead = 4 + 1 + 4 + 12 + 16
        if len(record.frame) != overhead + len(env.ciphertext.body):
            return False
    return True


# ---------------------------------------------------------------------------
# Scenario plumbing
# ---------------------------------------------------------------------------


class ScenarioEnv:
    """Fresh deployment plus the canonical populate phase."""

    def __init__(self, base_dir: str, name: str, cache_enabled: bool = False):
        self.name = name
        self.config = DeployConfig(
            data_dir=os.path.join(base_dir, name.replace(" ", "-")),
            devices=2, device_capacity=512, inode_count=128,
            rpc_timeout=0.4, retry_limit=3, cache_enabled=cache_enabled,
            flush_interval=60.0)
        Deployment.mkfs(self.config)
        self.dep = Deployment.open(self.config)
        self.expected: dict[str, bytes] = {}
        self.dirs = ["/", "/docs", "/docs/sub"]
        self.c1 = self.dep.client(1, uid=1000, gid=100)
        self.c2 = self.dep.client(2, uid=2000, gid=100)
        self._populate()

    def _populate(self) -> None:
        c1, c2 = self.c1, self.c2
        c1.mkdir("/docs", 0o777)
        c1.mkdir("/docs/sub", 0o777)
        self._write(c1, "/docs/a", (MARKERS[0] * 300)[:5000])
        self._write(c1, "/docs/b", (MARKERS[1] * 500)[:8192])
        self._write(c1, "/docs/sub/c", (MARKERS[2] * 700)[:12288])
        self._write(c2, "/notes", (MARKERS[3] * 40)[:600])

    def _write(self, session: ClientSession, path: str, data: bytes) -> None:
        fh = session.create(path, 0o666)
        session.write(fh, 0, data)
        session.fsync(fh)
        session.release(fh)
        self.expected[path] = data

    def arm(self, mode: AttackMode, channel=None, direction="any",
            skip=0, count=1, **params) -> None:
        self.dep.runtime.arm_attack(AttackConfig(
            mode=mode,
            trigger=AttackTrigger(channel=channel, direction=direction,
                                  skip=skip, count=count),
            **params))

    def disarm(self) -> None:
        self.dep.runtime.arm_attack(AttackConfig())

    # -- verification ----------------------------------------------------------

    def alarm_kinds(self) -> set[str]:
        return self.dep.alarms.kinds()

    def verify_state(self, skip_paths: set[str] = frozenset(),
                     reopened: "Deployment | None" = None) -> list[str]:
        """Fresh admin walk: every populated file still reads back exactly."""
        dep = reopened or self.dep
        problems = []
        admin = dep.client(4, uid=0, gid=0, caching=False)
        admin.set_policy(b"audit_allowed=true\n")
        for path, want in sorted(self.expected.items()):
            if path in skip_paths:
                continue
            try:
                attr = admin.getattr(path)
                if attr.size != len(want):
                    problems.append(f"{path}: size {attr.size} != {len(want)}")
                    continue
                fh = admin.open(path, O_RDONLY)
                got = bytearray()
                while len(got) < len(want):
                    chunk = admin.read(fh, len(got), 65536)
                    if not chunk:
                        break
                    got += chunk
                admin.release(fh)
                if bytes(got) != want:
                    problems.append(f"{path}: contents corrupted")
            except (FsError, SessionLost) as exc:
                problems.append(f"{path}: unreadable ({exc})")
        fsck = dep.core.fsck()
        if fsck:
            problems.append(f"fsck: {fsck[:2]}")
        return problems

    def verify_confidentiality(self) -> list[str]:
        hits = scan_trace(self.dep.runtime.trace, MARKERS)
        hits += scan_host_files(self.config, MARKERS)
        if not plaintext_regions_are_routing_only(self.dep.runtime.trace):
            hits.append("frame structure violated")
        return hits

    def data_block_of(self, path: str) -> BlockAddress:
        """First data block address of a file (harness-side introspection)."""
        core = self.dep.core
        cred_node = core._resolve(path, _admin_cred())
        return cred_node.direct[0]

    def close(self) -> None:
        try:
            self.dep.shutdown()
        except Exception:
            pass


def _admin_cred():
    from .fs import Credential
    return Credential(uid=0, gid=0)


def _expect_lost(fn, *args) -> tuple[bool, str]:
    try:
        fn(*args)
        return False, "operation unexpectedly succeeded"
    except SessionLost:
        return True, "session lost (timeout/violation)"
    except FsError as exc:
        return True, f"errno {exc.errno}"


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def _result(env: ScenarioEnv, name: str, mode: AttackMode, detected_by: str,
            ok: bool, notes: str, skip_paths: set[str] = frozenset(),
            reopened=None) -> ScenarioResult:
    env.disarm()
    problems = env.verify_state(skip_paths=skip_paths, reopened=reopened)
    leaks = env.verify_confidentiality()
    passed = ok and not problems and not leaks
    detail = notes
    if problems:
        detail += f" | state: {problems[:2]}"
    if leaks:
        detail += f" | leaks: {leaks[:2]}"
    return ScenarioResult(name, mode, detected_by, passed, detail)


def scenario_corrupt_file_request(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.CORRUPT_BODY, ChannelClass.FILE_RPC, "to_trusted")
    lost, note = _expect_lost(env.c1.getattr, "/docs/a")
    detected = "AuthFailure" in env.alarm_kinds()
    return _result(env, "corrupt file request", AttackMode.CORRUPT_BODY,
                   "server AEAD check", lost and detected, note)


def scenario_corrupt_file_response(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.CORRUPT_BODY, ChannelClass.FILE_RPC, "from_trusted")
    lost, note = _expect_lost(env.c1.getattr, "/docs/a")
    detected = "AuthFailure" in env.c1.integrity_events
    return _result(env, "corrupt file response", AttackMode.CORRUPT_BODY,
                   "client AEAD check", lost and detected, note)


def scenario_swap_file_envelopes(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.SWAP_ENVELOPES, ChannelClass.FILE_RPC, "to_trusted",
            count=2)
    outcomes = {}

    def issue(tag, session):
        outcomes[tag] = _expect_lost(session.getattr, "/docs/b")

    t1 = threading.Thread(target=issue, args=("c1", env.c1))
    t1.start()
    time.sleep(0.1)  # let c1's request reach the proxy and be held
    issue("c2", env.c2)
    t1.join()
    both_lost = outcomes["c1"][0] and outcomes["c2"][0]
    detected = "AuthFailure" in env.alarm_kinds()
    return _result(env, "swap file envelopes", AttackMode.SWAP_ENVELOPES,
                   "server AEAD check (wrong session key)",
                   both_lost and detected, str(outcomes))


def scenario_replay_file_request(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.REPLAY_ENVELOPE, ChannelClass.FILE_RPC, "to_trusted")
    fh = env.c1.create("/docs/replayed", 0o644)  # original applies once
    ok_create = fh > 0
    detected = "SequenceViolation" in env.alarm_kinds()
    env.expected["/docs/replayed"] = b""
    # session was killed by the duplicate; next call must fail closed
    lost, note = _expect_lost(env.c1.getattr, "/docs/a")
    return _result(env, "replay file request", AttackMode.REPLAY_ENVELOPE,
                   "server sequence check",
                   ok_create and detected and lost,
                   f"create ok, then {note}")


def scenario_reorder_file_writeback(env: ScenarioEnv) -> ScenarioResult:
    cached = env.dep.client(3, uid=3000, gid=300, caching=True)
    fh = cached.create("/wb", 0o644)
    cached.write(fh, 0, b"P0" * 2048)      # page 0
    cached.write(fh, 4096, b"P1" * 2048)   # page 1, still client-side
    env.arm(AttackMode.REORDER_ENVELOPES, ChannelClass.FILE_RPC,
            "to_trusted", count=2)
    lost, note = _expect_lost(cached.fsync, fh)
    detected = "SequenceViolation" in env.alarm_kinds()
    size = env.dep.core.getattr(_admin_cred(), "/wb").size
    unapplied = size == 0
    env.expected["/wb"] = b""
    return _result(env, "reorder pipelined writeback",
                   AttackMode.REORDER_ENVELOPES, "server sequence check",
                   lost and detected and unapplied,
                   f"{note}, server size {size}")


def scenario_drop_file_request(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.DROP_ENVELOPE, ChannelClass.FILE_RPC, "to_trusted")
    lost, note = _expect_lost(env.c1.getattr, "/docs/a")
    return _result(env, "drop file request", AttackMode.DROP_ENVELOPE,
                   "client timeout (no silent loss)", lost, note)


def scenario_recast_opcode(env: ScenarioEnv) -> ScenarioResult:
    dispatched_before = len(env.dep.server.dispatch_log)
    env.arm(AttackMode.RECAST_OPCODE, ChannelClass.FILE_RPC, "to_trusted")
    lost, note = _expect_lost(env.c1.open, "/docs/a", O_RDONLY)
    detected = "AuthFailure" in env.alarm_kinds()
    no_dispatch = len(env.dep.server.dispatch_log) == dispatched_before
    return _result(env, "recast opcode via routing fields",
                   AttackMode.RECAST_OPCODE,
                   "authenticated dispatch (pre-dispatch reject)",
                   lost and detected and no_dispatch,
                   f"{note}, zero mis-dispatches")


def scenario_corrupt_block_request(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.CORRUPT_BODY, ChannelClass.BLOCK_RPC, "from_trusted")
    fh = env.c1.open("/docs/a", O_RDWR)
    payload = (MARKERS[0] * 300)[:5000]
    wrote = env.c1.write(fh, 0, payload)
    env.c1.release(fh)
    detected = env.dep.alarms.count() >= 1
    recovered = wrote == 5000 and env.dep.engine.retries_observed >= 1
    return _result(env, "corrupt block request", AttackMode.CORRUPT_BODY,
                   "storage-node AEAD check, engine retry",
                   detected and recovered, f"wrote {wrote} after retry")


def scenario_corrupt_block_response(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.CORRUPT_BODY, ChannelClass.BLOCK_RPC, "to_trusted")
    fh = env.c1.open("/docs/a", O_RDONLY)
    data = env.c1.read(fh, 0, 5000)
    env.c1.release(fh)
    ok = data == env.expected["/docs/a"]
    detected = "AuthFailure" in env.alarm_kinds()
    return _result(env, "corrupt block response", AttackMode.CORRUPT_BODY,
                   "engine transport AEAD check, retry",
                   ok and detected, "read served correctly after retry")


def scenario_swap_block_envelopes(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.SWAP_ENVELOPES, ChannelClass.BLOCK_RPC,
            "from_trusted", count=2)
    fh = env.c1.open("/docs/sub/c", O_RDWR)
    payload = (MARKERS[2] * 700)[:12288]
    wrote = env.c1.write(fh, 0, payload)  # 3 blocks pipelined
    env.c1.release(fh)
    detected = env.dep.alarms.count() >= 1
    return _result(env, "swap block envelopes", AttackMode.SWAP_ENVELOPES,
                   "storage-node sequence/AEAD check, engine retry",
                   wrote == 12288 and detected, f"wrote {wrote}")


def scenario_replay_block_envelope(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.REPLAY_ENVELOPE, ChannelClass.BLOCK_RPC, "from_trusted")
    fh = env.c1.open("/docs/b", O_RDWR)
    payload = (MARKERS[1] * 500)[:8192]
    wrote = env.c1.write(fh, 0, payload)
    env.c1.release(fh)
    detected = "SequenceViolation" in env.alarm_kinds()
    return _result(env, "replay block envelope", AttackMode.REPLAY_ENVELOPE,
                   "storage-node sequence check",
                   wrote == 8192 and detected, f"wrote {wrote}")


def scenario_drop_block_acks(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.DROP_ENVELOPE, ChannelClass.BLOCK_RPC, "to_trusted",
            count=-1)
    fh = env.c1.create("/victim-write", 0o644)
    try:
        env.c1.write(fh, 0, b"Z" * 4096)
        ok, note = False, "write unexpectedly succeeded"
    except FsError as exc:
        ok = exc.errno == _errno.EIO
        note = f"errno {exc.errno}"
    env.disarm()
    env.c1.release(fh)
    retried = env.dep.engine.retries_observed == env.dep.engine.retry_limit
    env.expected["/victim-write"] = b""
    return _result(env, "suppress block acks", AttackMode.DROP_ENVELOPE,
                   "guarded retry limit, generic EIO",
                   ok and retried,
                   f"{note}, retries {env.dep.engine.retries_observed}")


def scenario_tamper_return_code(env: ScenarioEnv) -> ScenarioResult:
    env.arm(AttackMode.TAMPER_RETURN_CODE, ChannelClass.BLOCK_RPC,
            "from_trusted", count=-1, tamper_code=-2)
    fh = env.c1.create("/victim-code", 0o644)
    try:
        env.c1.write(fh, 0, b"Q" * 4096)
        ok, note = False, "write unexpectedly succeeded"
    except FsError as exc:
        # The would-be ENOENT must surface as the generic EIO, never -2.
        ok = exc.errno == _errno.EIO
        note = f"errno {exc.errno}"
    env.disarm()
    env.c1.release(fh)
    env.expected["/victim-code"] = b""
    return _result(env, "tamper host return code",
                   AttackMode.TAMPER_RETURN_CODE,
                   "guarded control transfer (EIO collapse)", ok, note)


def scenario_swap_blocks_on_disk(env: ScenarioEnv) -> ScenarioResult:
    addr_a = env.data_block_of("/docs/a")
    addr_b = env.data_block_of("/docs/b")
    path_a = env.config.device_path(addr_a.device_id)
    path_b = env.config.device_path(addr_b.device_id)
    host_mod.swap_device_slots(path_a, addr_a.block_id, path_b, addr_b.block_id)
    fh = env.c1.open("/docs/a", O_RDONLY)
    try:
        env.c1.read(fh, 0, 4096)
        ok, note = False, "swapped block accepted"
    except FsError as exc:
        ok = exc.errno == _errno.EIO
        note = f"errno {exc.errno}"
    env.c1.release(fh)
    detected = "SwapDetected" in env.alarm_kinds()
    # undo the attack so the final state walk sees the true data
    host_mod.swap_device_slots(path_a, addr_a.block_id, path_b, addr_b.block_id)
    return _result(env, "swap sealed blocks on disk", AttackMode.SWAP_BLOCKS,
                   "address-bound AAD (SwapDetected)", ok and detected, note)


def scenario_replay_old_block(env: ScenarioEnv) -> ScenarioResult:
    addr = env.data_block_of("/docs/a")
    dev = env.config.device_path(addr.device_id)
    stale = host_mod.read_device_slot(dev, addr.block_id)
    fh = env.c1.open("/docs/a", O_RDWR)
    fresh_payload = (MARKERS[0] * 300)[:5000][::-1]
    env.c1.write(fh, 0, fresh_payload)
    env.c1.fsync(fh)
    env.expected["/docs/a"] = fresh_payload
    current = host_mod.read_device_slot(dev, addr.block_id)
    host_mod.write_device_slot(dev, addr.block_id, stale)
    try:
        env.c1.read(fh, 0, 4096)
        ok, note = False, "stale block accepted"
    except FsError as exc:
        ok = exc.errno == _errno.EIO
        note = f"errno {exc.errno}"
    env.c1.release(fh)
    detected = "RollbackDetected" in env.alarm_kinds()
    host_mod.write_device_slot(dev, addr.block_id, current)
    return _result(env, "replay superseded block",
                   AttackMode.REPLAY_OLD_BLOCK,
                   "Merkle leaf freshness (RollbackDetected)",
                   ok and detected, note)


def scenario_rollback_tree_region(env: ScenarioEnv) -> ScenarioResult:
    config = env.config
    env.dep.shutdown()  # checkpoint #1
    old_region = host_mod.snapshot_file(config.merkle_region_path)
    old_root = host_mod.snapshot_file(config.root_seal_path)
    dep2 = Deployment.open(config)
    c1 = dep2.client(1, uid=1000, gid=100)
    fh = c1.open("/docs/a", O_RDWR)
    newer = b"NEWER-EPOCH-" * 400
    c1.write(fh, 0, newer[:4800])
    c1.release(fh)
    env.expected["/docs/a"] = newer[:4800] + env.expected["/docs/a"][4800:]
    dep2.shutdown()  # checkpoint #2
    # Host restores yesterday's tree region AND yesterday's sealed root.
    current_region = host_mod.snapshot_file(config.merkle_region_path)
    current_root = host_mod.snapshot_file(config.root_seal_path)
    host_mod.restore_file(config.merkle_region_path, old_region)
    host_mod.restore_file(config.root_seal_path, old_root)
    try:
        Deployment.open(config)
        ok, note = False, "rolled-back tree accepted at boot"
    except RollbackDetected as exc:
        ok, note = True, f"boot refused: {exc}"
    # restore reality and verify the data survived
    host_mod.restore_file(config.merkle_region_path, current_region)
    host_mod.restore_file(config.root_seal_path, current_root)
    dep3 = Deployment.open(config)
    result = _result(env, "rollback persisted tree across restart",
                     AttackMode.ROLLBACK_TREE_REGION,
                     "monotonic generation counter", ok, note,
                     reopened=dep3)
    dep3.shutdown()
    return result


SCENARIOS = [
    scenario_corrupt_file_request,
    scenario_corrupt_file_response,
    scenario_swap_file_envelopes,
    scenario_replay_file_request,
    scenario_reorder_file_writeback,
    scenario_drop_file_request,
    scenario_recast_opcode,
    scenario_corrupt_block_request,
    scenario_corrupt_block_response,
    scenario_swap_block_envelopes,
    scenario_replay_block_envelope,
    scenario_drop_block_acks,
    scenario_tamper_return_code,
    scenario_swap_blocks_on_disk,
    scenario_replay_old_block,
    scenario_rollback_tree_region,
]


def run_attack_suite(base_dir: str) -> SuiteReport:
    """Run the full catalog; raises SuiteFailure if an attack goes undetected
    or any enum mode lacks coverage."""
    report = SuiteReport()
    covered: set[AttackMode] = set()
    for scenario in SCENARIOS:
        env = ScenarioEnv(base_dir, scenario.__name__)
        try:
            result = scenario(env)
        finally:
            env.close()
        report.results.append(result)
        covered.add(result.mode)
    missing = set(AttackMode) - covered - {AttackMode.NONE}
    if missing:
        raise SuiteFailure(f"attack modes without a scenario: {missing}")
    if not report.passed:
        failed = [r.line() for r in report.results if not r.passed]
        raise SuiteFailure("undetected or corrupting attacks: " +
                           "; ".join(failed))
    return report


def run_baseline(base_dir: str) -> SuiteReport:
    """AttackConfig=None control: full populate, zero integrity alarms."""
    env = ScenarioEnv(base_dir, "baseline-none")
    try:
        problems = env.verify_state()
        leaks = env.verify_confidentiality()
        alarms = env.dep.alarms.count()
        sent = len(env.dep.runtime.trace)
        passed = not problems and not leaks and alarms == 0 and sent > 0
        result = ScenarioResult("baseline (no attack)", AttackMode.NONE,
                                "n/a", passed,
                                f"{sent} frames, {alarms} alarms")
    finally:
        env.close()
    report = SuiteReport(results=[result])
    if not report.passed:
        raise SuiteFailure("baseline run raised alarms or corrupted state")
    return report
