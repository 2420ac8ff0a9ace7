"""Randomized multi-client workloads checked against the reference model.

Every operation runs against both the deployed stack and the in-memory
model; return codes, data, and listings must agree exactly. Used by the
no-false-alarm baseline, the attack suite's canonical phases, and the
macro benchmarks' oracle checks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .client import O_RDONLY, O_RDWR, O_WRONLY, ClientSession
from .deploy import Deployment
from .errors import FsError
from .model import ModelFs

WRITE_SIZES = (100, 1000, 4096, 5000, 12288, 16384, 40000)
MODE_POOL = (0o644, 0o644, 0o666, 0o640, 0o755, 0o755, 0o600, 0o700,
             0o444, 0o750)
DIR_MODE_POOL = (0o755, 0o755, 0o777, 0o775, 0o750, 0o700)
MAX_OPEN_PER_CLIENT = 8


@dataclass
class WorkloadClient:
    client_id: int
    uid: int
    gid: int


DEFAULT_CLIENTS = (
    WorkloadClient(1, 1000, 100),
    WorkloadClient(2, 2000, 100),
    WorkloadClient(3, 3000, 300),
    WorkloadClient(4, 0, 0),
)


@dataclass
class Mismatch:
    op_index: int
    op: str
    impl: object
    model: object


@dataclass
class RunReport:
    ops: int = 0
    errors_seen: dict = field(default_factory=dict)
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches


def _impl_call(fn, *args):
    try:
        return ("ok", fn(*args))
    except FsError as exc:
        return ("err", exc.errno)


class WorkloadRunner:
    """Applies one op stream to the stack and the model, comparing results."""

    def __init__(self, deployment: Deployment, seed: int,
                 clients=DEFAULT_CLIENTS, caching: bool = False):
        self.deployment = deployment
        self.rng = random.Random(seed)
        self.clients = list(clients)
        self.sessions: dict[int, ClientSession] = {}
        for wc in self.clients:
            self.sessions[wc.client_id] = deployment.client(
                wc.client_id, wc.uid, wc.gid, caching=caching)
        core = deployment.core
        self.model = ModelFs(free_blocks=core.sb.free_block_count,
                             free_inodes=core.sb.free_inode_count)
        # Tracked namespace, updated from results the two sides agreed on.
        self.dirs: list[str] = ["/"]
        self.files: list[str] = []
        self.owner: dict[str, int] = {}
        self.open_files: dict[int, list[tuple[int, str]]] = \
            {wc.client_id: [] for wc in self.clients}
        self.open_dirs: dict[int, list[int]] = \
            {wc.client_id: [] for wc in self.clients}
        self._name_counter = 0
        self.report = RunReport()

    # -- naming -----------------------------------------------------------------

    def _fresh_name(self, prefix: str) -> str:
        self._name_counter += 1
        return f"{prefix}{self._name_counter:04d}"

    def _pick_dir(self) -> str:
        return self.rng.choice(self.dirs)

    def _pick_file(self, client_id: int, own_bias: float = 0.75) -> str:
        own = [p for p in self.files if self.owner.get(p) == client_id]
        if own and self.rng.random() < own_bias:
            return self.rng.choice(own)
        return self.rng.choice(self.files)

    def _join(self, parent: str, name: str) -> str:
        return parent.rstrip("/") + "/" + name

    # -- op execution -------------------------------------------------------------

    def _both(self, label: str, impl_fn, model_fn, impl_args: tuple,
              model_args: tuple):
        impl = _impl_call(impl_fn, *impl_args)
        model = _impl_call(model_fn, *model_args)
        self.report.ops += 1
        if impl[0] == "err":
            self.report.errors_seen[impl[1]] = \
                self.report.errors_seen.get(impl[1], 0) + 1
        if impl != model:
            self.report.mismatches.append(
                Mismatch(self.report.ops, label, impl, model))
            return None
        return impl

    def step(self) -> None:
        wc = self.rng.choice(self.clients)
        session = self.sessions[wc.client_id]
        model = self.model
        roll = self.rng.random()

        if roll < 0.10:  # create
            parent = self._pick_dir()
            name = self._fresh_name("f")
            path = self._join(parent, name)
            mode = self.rng.choice(MODE_POOL)
            out = self._both(
                f"create {path}",
                session.create, model.create,
                (path, mode), (wc.uid, wc.gid, wc.client_id, path, mode))
            if out and out[0] == "ok":
                self.files.append(path)
                self.owner[path] = wc.client_id
                self._track_open(wc.client_id, out[1], path)
        elif roll < 0.16:  # mkdir
            parent = self._pick_dir()
            path = self._join(parent, self._fresh_name("d"))
            mode = self.rng.choice(DIR_MODE_POOL)
            out = self._both(f"mkdir {path}", session.mkdir, model.mkdir,
                             (path, mode), (wc.uid, wc.gid, path, mode))
            if out and out[0] == "ok":
                self.dirs.append(path)
        elif roll < 0.26:  # open existing
            if not self.files:
                return
            path = self._pick_file(wc.client_id)
            flags = self.rng.choice((O_RDONLY, O_WRONLY, O_RDWR))
            out = self._both(f"open {path}", session.open, model.open,
                             (path, flags),
                             (wc.uid, wc.gid, wc.client_id, path, flags))
            if out and out[0] == "ok":
                self._track_open(wc.client_id, out[1], path)
        elif roll < 0.44:  # write
            handles = self.open_files[wc.client_id]
            if not handles:
                return
            fh, path = self.rng.choice(handles)
            size = self.rng.choice(WRITE_SIZES)
            offset = self.rng.randrange(0, 60000)
            data = self.rng.randbytes(min(size, 2048))
            data = (data * (size // len(data) + 1))[:size]
            self._both(f"write {path}@{offset}+{size}",
                       session.write, model.write,
                       (fh, offset, data),
                       (wc.uid, wc.gid, wc.client_id, fh, offset, data))
        elif roll < 0.62:  # read
            handles = self.open_files[wc.client_id]
            if not handles:
                return
            fh, path = self.rng.choice(handles)
            offset = self.rng.randrange(0, 70000)
            size = self.rng.choice((512, 4096, 10000, 65536))
            self._both(f"read {path}@{offset}", session.read, model.read,
                       (fh, offset, size),
                       (wc.uid, wc.gid, wc.client_id, fh, offset, size))
        elif roll < 0.68:  # release
            handles = self.open_files[wc.client_id]
            if not handles:
                return
            fh, path = handles.pop(self.rng.randrange(len(handles)))
            self._both(f"release {path}", session.release, model.release,
                       (fh,), (wc.client_id, fh))
        elif roll < 0.74:  # getattr (sometimes on a missing path)
            if self.rng.random() < 0.15 or not self.files:
                path = self._join(self._pick_dir(), "nope")
            else:
                path = self.rng.choice(self.files + self.dirs)
            self._both(f"getattr {path}",
                       lambda p: _attr_tuple(session.getattr(p)),
                       lambda u, g, p: _model_attr_tuple(model.getattr(u, g, p)),
                       (path,), (wc.uid, wc.gid, path))
        elif roll < 0.80:  # readdir cycle
            path = self._pick_dir()
            out = self._both(f"opendir {path}", session.opendir, model.opendir,
                             (path,), (wc.uid, wc.gid, wc.client_id, path))
            if not out or out[0] != "ok":
                return
            dh = out[1]
            self._both(f"readdir {path}",
                       lambda d: sorted(n for n, _ in session.readdir(d)),
                       lambda u, g, s, d: sorted(
                           n for n, _ in model.readdir(u, g, s, d)),
                       (dh,), (wc.uid, wc.gid, wc.client_id, dh))
            self._both(f"releasedir {path}", session.releasedir,
                       model.releasedir, (dh,), (wc.client_id, dh))
        elif roll < 0.85:  # chmod
            if not self.files and not self.dirs:
                return
            if self.files and self.rng.random() < 0.8:
                path = self._pick_file(wc.client_id)
            else:
                path = self.rng.choice(self.files + self.dirs)
            mode = self.rng.choice(DIR_MODE_POOL if path in self.dirs
                                   else MODE_POOL)
            self._both(f"chmod {path}", session.chmod, model.chmod,
                       (path, mode), (wc.uid, wc.gid, path, mode))
        elif roll < 0.88:  # setacl
            if not self.files:
                return
            path = self._pick_file(wc.client_id)
            entries = []
            if self.rng.random() < 0.8:
                grantee = self.rng.choice(self.clients)
                entries = [(grantee.uid, self.rng.choice((4, 6, 7)))]
            self._both(f"setacl {path}", session.setacl, model.setacl,
                       (path, entries), (wc.uid, wc.gid, path, entries))
        elif roll < 0.93:  # rename
            if not self.files:
                return
            old = self._pick_file(wc.client_id)
            new_parent = self._pick_dir()
            if self.rng.random() < 0.2 and len(self.files) > 1:
                new = self.rng.choice([f for f in self.files if f != old])
            else:
                new = self._join(new_parent, self._fresh_name("r"))
            out = self._both(f"rename {old} -> {new}", session.rename,
                             model.rename, (old, new),
                             (wc.uid, wc.gid, old, new))
            if out and out[0] == "ok":
                self._apply_rename(old, new)
        elif roll < 0.97:  # unlink
            if not self.files:
                return
            path = self._pick_file(wc.client_id)
            out = self._both(f"unlink {path}", session.unlink, model.unlink,
                             (path,), (wc.uid, wc.gid, path))
            if out and out[0] == "ok" and path in self.files:
                self.files.remove(path)
        elif roll < 0.99:  # rmdir
            if len(self.dirs) <= 1:
                return
            path = self.rng.choice(self.dirs[1:])
            out = self._both(f"rmdir {path}", session.rmdir, model.rmdir,
                             (path,), (wc.uid, wc.gid, path))
            if out and out[0] == "ok":
                self.dirs.remove(path)
        else:  # fsync
            handles = self.open_files[wc.client_id]
            if not handles:
                return
            fh, path = self.rng.choice(handles)
            self._both(f"fsync {path}", session.fsync, model.fsync,
                       (fh,), (wc.client_id, fh))

    def _track_open(self, client_id: int, fh: int, path: str) -> None:
        handles = self.open_files[client_id]
        handles.append((fh, path))
        if len(handles) > MAX_OPEN_PER_CLIENT:
            old_fh, old_path = handles.pop(0)
            self._both(f"release-lru {old_path}",
                       self.sessions[client_id].release, self.model.release,
                       (old_fh,), (client_id, old_fh))

    def _apply_rename(self, old: str, new: str) -> None:
        if old in self.files:
            self.files.remove(old)
        if new not in self.files:
            self.files.append(new)
        self.owner[new] = self.owner.pop(old, None)
        # handles keep working on the renamed inode; tracked paths are labels

    def run(self, n_ops: int) -> RunReport:
        for _ in range(n_ops):
            self.step()
            if self.report.mismatches:
                break  # divergence compounds; stop at the first
        return self.report

    # -- final deep comparison -------------------------------------------------------

    def compare_tree(self) -> list[str]:
        """Recursive comparison of listings, attributes, and file contents.

        Walks as the admin uid with the audit policy enabled on both sides so
        permission bits cannot hide divergence. Terminal: replaces client 1's
        session.
        """
        problems: list[str] = []
        admin = self.deployment.client(1, 0, 0, caching=False)
        admin.set_policy(b"audit_allowed=true\n")
        model = self.model
        model.set_policy(0, b"audit_allowed=true\n")

        def walk(path: str, model_ino: int) -> None:
            dh = admin.opendir(path)
            impl_names = sorted(n for n, _ in admin.readdir(dh)
                                if n not in (".", ".."))
            admin.releasedir(dh)
            node = model.nodes[model_ino]
            model_names = sorted(node.entries)
            if impl_names != model_names:
                problems.append(
                    f"{path}: listing {impl_names} != model {model_names}")
                return
            for name in impl_names:
                child_path = path.rstrip("/") + "/" + name
                child = model.nodes[node.entries[name]]
                attr = admin.getattr(child_path)
                if _attr_tuple(attr) != _model_attr_tuple({
                        "mode": child.mode, "uid": child.uid,
                        "gid": child.gid, "size": child.size,
                        "nlink": child.nlink}):
                    problems.append(f"{child_path}: attrs differ")
                    continue
                if child.is_dir:
                    walk(child_path, child.ino)
                else:
                    fh = admin.open(child_path, O_RDONLY)
                    content = bytearray()
                    pos = 0
                    while pos < child.size:
                        chunk = admin.read(fh, pos, 65536)
                        if not chunk:
                            break
                        content += chunk
                        pos += len(chunk)
                    admin.release(fh)
                    if bytes(content) != bytes(child.data):
                        problems.append(f"{child_path}: contents differ")

        walk("/", model.root)
        admin.unmount()
        return problems


def _attr_tuple(attr) -> tuple:
    return (attr.mode, attr.uid, attr.gid, attr.size, attr.nlink)


def _model_attr_tuple(d: dict) -> tuple:
    return (d["mode"], d["uid"], d["gid"], d["size"], d["nlink"])
