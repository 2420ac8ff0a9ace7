"""In-memory reference file system: plain maps, no crypto, no blocks.

Mirrors the trusted core's externally visible semantics exactly (same check
order, same error codes, same space accounting) so randomized workloads can
be compared result-for-result against it.
"""

from __future__ import annotations

import errno
from dataclasses import dataclass, field

from .errors import FsError, PolicyRejected
from .fs import (
    DIRECT_POINTERS,
    MAX_ACL_ENTRIES,
    MAX_FILE_SIZE,
    MAX_IO,
    PERM_MASK,
    R_OK,
    S_IFDIR,
    S_IFREG,
    W_OK,
    X_OK,
    Policy,
    blocks_for_size,
    dir_entry_size,
    valid_name,
)

BLOCK = 4096


@dataclass
class ModelNode:
    ino: int
    mode: int
    uid: int
    gid: int
    nlink: int
    data: bytearray = field(default_factory=bytearray)      # files
    entries: dict[str, int] = field(default_factory=dict)   # dirs, ordered
    acl: dict[int, int] = field(default_factory=dict)

    @property
    def is_dir(self) -> bool:
        return bool(self.mode & S_IFDIR)

    @property
    def size(self) -> int:
        if self.is_dir:
            return sum(dir_entry_size(n) for n in self.entries) + \
                dir_entry_size(".") + dir_entry_size("..")
        return len(self.data)


def _file_cost(size: int) -> int:
    n = blocks_for_size(size)
    return n + (1 if n > DIRECT_POINTERS else 0)


class ModelFs:
    """Reference implementation sharing the trusted core's contracts."""

    def __init__(self, free_blocks: int, free_inodes: int):
        """Counters are the freshly formatted core's free counts."""
        self.nodes: dict[int, ModelNode] = {}
        self.parent: dict[int, int] = {}
        self._next_ino = 1
        self.free_inodes = free_inodes + 1  # _new_node debits the root below
        root = self._new_node(S_IFDIR | 0o777, 0, 0, nlink=2)
        self.root = root.ino
        self.parent[root.ino] = root.ino
        self.free_blocks = free_blocks
        self.policy = Policy()
        self.handles: dict[int, dict[int, tuple[str, int]]] = {}
        self._next_fh: dict[int, int] = {}

    def _new_node(self, mode: int, uid: int, gid: int, nlink: int) -> ModelNode:
        node = ModelNode(ino=self._next_ino, mode=mode, uid=uid, gid=gid,
                         nlink=nlink)
        self.nodes[node.ino] = node
        self._next_ino += 1
        self.free_inodes -= 1
        return node

    # -- permissions (same rules as the trusted core) ---------------------------

    def _effective(self, node: ModelNode, uid: int, gid: int) -> int:
        if uid == node.uid:
            base = (node.mode >> 6) & 7
        elif gid == node.gid:
            base = (node.mode >> 3) & 7
        else:
            base = node.mode & 7
        return base | node.acl.get(uid, 0)

    def _check(self, node: ModelNode, uid: int, gid: int, want: int) -> None:
        if self._effective(node, uid, gid) & want == want:
            return
        if uid == 0 and self.policy.audit_allowed and not (want & W_OK):
            return
        raise FsError(errno.EACCES)

    # -- resolution ---------------------------------------------------------------

    @staticmethod
    def _components(path: str) -> list[str]:
        if not path.startswith("/"):
            raise FsError(errno.EINVAL)
        return [c for c in path.split("/") if c]

    def _dir_lookup(self, node: ModelNode, name: str) -> int | None:
        if name == ".":
            return node.ino
        if name == "..":
            return self.parent[node.ino]
        return node.entries.get(name)

    def _resolve(self, path: str, uid: int, gid: int) -> ModelNode:
        node = self.nodes[self.root]
        for name in self._components(path):
            if not node.is_dir:
                raise FsError(errno.ENOTDIR)
            self._check(node, uid, gid, X_OK)
            child = self._dir_lookup(node, name)
            if child is None:
                raise FsError(errno.ENOENT)
            node = self.nodes[child]
        return node

    def _resolve_parent(self, path: str, uid: int,
                        gid: int) -> tuple[ModelNode, str]:
        parts = self._components(path)
        if not parts:
            raise FsError(errno.EINVAL)
        parent = self.nodes[self.root]
        for comp in parts[:-1]:
            if not parent.is_dir:
                raise FsError(errno.ENOTDIR)
            self._check(parent, uid, gid, X_OK)
            child = self._dir_lookup(parent, comp)
            if child is None:
                raise FsError(errno.ENOENT)
            parent = self.nodes[child]
        if not parent.is_dir:
            raise FsError(errno.ENOTDIR)
        return parent, parts[-1]

    # -- space accounting ----------------------------------------------------------

    def _dir_growth(self, parent: ModelNode, name: str) -> int:
        return blocks_for_size(parent.size + dir_entry_size(name)) - \
            blocks_for_size(parent.size)

    def _require(self, blocks: int, inodes: int) -> None:
        if self.free_inodes < inodes or self.free_blocks < blocks:
            raise FsError(errno.ENOSPC)

    def _release_node_storage(self, node: ModelNode) -> None:
        if node.is_dir:
            self.free_blocks += blocks_for_size(node.size)
        else:
            self.free_blocks += _file_cost(len(node.data))
        if node.acl:
            self.free_blocks += 1
        self.free_inodes += 1
        del self.nodes[node.ino]
        self.parent.pop(node.ino, None)

    # -- handle bookkeeping ----------------------------------------------------------

    def _handles(self, session: int) -> dict[int, tuple[str, int]]:
        return self.handles.setdefault(session, {})

    def _open_handle(self, session: int, kind: str, ino: int) -> int:
        fh = self._next_fh.get(session, 0) + 1
        self._next_fh[session] = fh
        self._handles(session)[fh] = (kind, ino)
        return fh

    # -- operations (mirrors of the trusted handlers) ----------------------------------

    def getattr(self, uid: int, gid: int, path: str) -> dict:
        node = self._resolve(path, uid, gid)
        return {"mode": node.mode, "uid": node.uid, "gid": node.gid,
                "size": node.size, "nlink": node.nlink}

    def _prepare_entry(self, uid: int, gid: int,
                       path: str) -> tuple[ModelNode, str]:
        parent, name = self._resolve_parent(path, uid, gid)
        if not valid_name(name):
            raise FsError(errno.EINVAL)
        self._check(parent, uid, gid, W_OK | X_OK)
        if self._dir_lookup(parent, name) is not None:
            raise FsError(errno.EEXIST)
        return parent, name

    def create(self, uid: int, gid: int, session: int, path: str,
               mode: int) -> int:
        parent, name = self._prepare_entry(uid, gid, path)
        self._require(self._dir_growth(parent, name), 1)
        self.free_blocks -= self._dir_growth(parent, name)
        node = self._new_node(S_IFREG | (mode & PERM_MASK), uid, gid, 1)
        parent.entries[name] = node.ino
        self.parent[node.ino] = parent.ino
        return self._open_handle(session, "file", node.ino)

    def mkdir(self, uid: int, gid: int, path: str, mode: int) -> None:
        parent, name = self._prepare_entry(uid, gid, path)
        self._require(1 + self._dir_growth(parent, name), 1)
        self.free_blocks -= 1 + self._dir_growth(parent, name)
        node = self._new_node(S_IFDIR | (mode & PERM_MASK), uid, gid, 2)
        parent.entries[name] = node.ino
        self.parent[node.ino] = parent.ino
        parent.nlink += 1

    def open(self, uid: int, gid: int, session: int, path: str,
             flags: int) -> int:
        node = self._resolve(path, uid, gid)
        if node.is_dir:
            raise FsError(errno.EISDIR)
        want = {0: R_OK, 1: W_OK, 2: R_OK | W_OK}.get(flags & 3)
        if want is None:
            raise FsError(errno.EINVAL)
        self._check(node, uid, gid, want)
        return self._open_handle(session, "file", node.ino)

    def _file_handle(self, session: int, fh: int) -> ModelNode:
        kind_ino = self._handles(session).get(fh)
        if kind_ino is None or kind_ino[0] != "file":
            raise FsError(errno.EBADF)
        node = self.nodes.get(kind_ino[1])
        if node is None:
            raise FsError(errno.EBADF)  # handle went stale at unlink
        return node

    def read(self, uid: int, gid: int, session: int, fh: int, offset: int,
             size: int) -> bytes:
        node = self._file_handle(session, fh)
        self._check(node, uid, gid, R_OK)
        if size > MAX_IO:
            raise FsError(errno.EINVAL)
        return bytes(node.data[offset:offset + size])

    def write(self, uid: int, gid: int, session: int, fh: int, offset: int,
              data: bytes) -> int:
        node = self._file_handle(session, fh)
        self._check(node, uid, gid, W_OK)
        if len(data) > MAX_IO:
            raise FsError(errno.EINVAL)
        if not data:
            return 0
        end = offset + len(data)
        if end > MAX_FILE_SIZE:
            raise FsError(errno.EFBIG)
        cost = _file_cost(max(len(node.data), end)) - _file_cost(len(node.data))
        self._require(cost, 0)
        self.free_blocks -= cost
        if offset > len(node.data):
            node.data.extend(b"\x00" * (offset - len(node.data)))
        node.data[offset:end] = data
        return len(data)

    def release(self, session: int, fh: int) -> None:
        kind_ino = self._handles(session).pop(fh, None)
        if kind_ino is None or kind_ino[0] != "file":
            if kind_ino is not None:
                self._handles(session)[fh] = kind_ino
            raise FsError(errno.EBADF)

    def fsync(self, session: int, fh: int) -> None:
        self._file_handle(session, fh)

    def unlink(self, uid: int, gid: int, path: str) -> None:
        parent, name = self._resolve_parent(path, uid, gid)
        if not valid_name(name):
            raise FsError(errno.EINVAL)
        self._check(parent, uid, gid, W_OK | X_OK)
        ino = self._dir_lookup(parent, name)
        if ino is None:
            raise FsError(errno.ENOENT)
        node = self.nodes[ino]
        if node.is_dir:
            raise FsError(errno.EISDIR)
        shrink = blocks_for_size(parent.size) - \
            blocks_for_size(parent.size - dir_entry_size(name))
        del parent.entries[name]
        self.free_blocks += shrink
        node.nlink -= 1
        if node.nlink == 0:
            self._release_node_storage(node)

    def rmdir(self, uid: int, gid: int, path: str) -> None:
        parts = self._components(path)
        if not parts:
            raise FsError(errno.EBUSY)
        parent, name = self._resolve_parent(path, uid, gid)
        if not valid_name(name):
            raise FsError(errno.EINVAL)
        self._check(parent, uid, gid, W_OK | X_OK)
        ino = self._dir_lookup(parent, name)
        if ino is None:
            raise FsError(errno.ENOENT)
        node = self.nodes[ino]
        if not node.is_dir:
            raise FsError(errno.ENOTDIR)
        if node.entries:
            raise FsError(errno.ENOTEMPTY)
        shrink = blocks_for_size(parent.size) - \
            blocks_for_size(parent.size - dir_entry_size(name))
        del parent.entries[name]
        self.free_blocks += shrink
        parent.nlink -= 1
        self._release_node_storage(node)

    def rename(self, uid: int, gid: int, old_path: str, new_path: str) -> None:
        old_parent, old_name = self._resolve_parent(old_path, uid, gid)
        if not valid_name(old_name):
            raise FsError(errno.EINVAL)
        new_parent, new_name = self._resolve_parent(new_path, uid, gid)
        if not valid_name(new_name):
            raise FsError(errno.EINVAL)
        self._check(old_parent, uid, gid, W_OK | X_OK)
        self._check(new_parent, uid, gid, W_OK | X_OK)
        ino = self._dir_lookup(old_parent, old_name)
        if ino is None:
            raise FsError(errno.ENOENT)
        node = self.nodes[ino]
        if node.is_dir and self._inside_subtree(node, new_parent):
            raise FsError(errno.EINVAL)
        if old_parent.ino == new_parent.ino and old_name == new_name:
            return
        target_ino = self._dir_lookup(new_parent, new_name)
        target = self.nodes[target_ino] if target_ino is not None else None
        if target is not None:
            if node.is_dir and not target.is_dir:
                raise FsError(errno.ENOTDIR)
            if not node.is_dir and target.is_dir:
                raise FsError(errno.EISDIR)
            if target.is_dir and target.entries:
                raise FsError(errno.ENOTEMPTY)
        growth = 0 if target is not None else \
            self._dir_growth(new_parent, new_name)
        self._require(growth, 0)
        new_parent_before = blocks_for_size(new_parent.size)
        old_parent_before = blocks_for_size(old_parent.size)
        if target is not None:
            del new_parent.entries[new_name]
            if target.is_dir:
                new_parent.nlink -= 1
                self._release_node_storage(target)
            else:
                target.nlink -= 1
                if target.nlink == 0:
                    self._release_node_storage(target)
        del old_parent.entries[old_name]
        new_parent.entries[new_name] = node.ino
        self.parent[node.ino] = new_parent.ino
        if node.is_dir and old_parent.ino != new_parent.ino:
            old_parent.nlink -= 1
            new_parent.nlink += 1
        # Net payload-block change for the affected directories.
        self.free_blocks += new_parent_before - blocks_for_size(new_parent.size)
        if old_parent.ino != new_parent.ino:
            self.free_blocks += old_parent_before - \
                blocks_for_size(old_parent.size)

    def _inside_subtree(self, root: ModelNode, candidate: ModelNode) -> bool:
        if root.ino == candidate.ino:
            return True
        stack = [root.ino]
        while stack:
            cur = self.nodes[stack.pop()]
            for child_ino in cur.entries.values():
                if child_ino == candidate.ino:
                    return True
                child = self.nodes[child_ino]
                if child.is_dir:
                    stack.append(child_ino)
        return False

    def chmod(self, uid: int, gid: int, path: str, mode: int) -> None:
        node = self._resolve(path, uid, gid)
        if uid != 0 and uid != node.uid:
            raise FsError(errno.EPERM)
        node.mode = (node.mode & ~PERM_MASK) | (mode & PERM_MASK)

    def setacl(self, uid: int, gid: int, path: str,
               entries: list[tuple[int, int]]) -> None:
        node = self._resolve(path, uid, gid)
        if uid != 0 and uid != node.uid:
            raise FsError(errno.EPERM)
        if len(entries) > MAX_ACL_ENTRIES:
            raise FsError(errno.EINVAL)
        if any(perms > 7 for _, perms in entries):
            raise FsError(errno.EINVAL)
        if entries and not node.acl:
            self._require(1, 0)
            self.free_blocks -= 1
        if not entries and node.acl:
            self.free_blocks += 1
        node.acl = {u: p for u, p in entries}

    def opendir(self, uid: int, gid: int, session: int, path: str) -> int:
        node = self._resolve(path, uid, gid)
        if not node.is_dir:
            raise FsError(errno.ENOTDIR)
        self._check(node, uid, gid, R_OK)
        return self._open_handle(session, "dir", node.ino)

    def readdir(self, uid: int, gid: int, session: int,
                dh: int) -> list[tuple[str, int]]:
        kind_ino = self._handles(session).get(dh)
        if kind_ino is None or kind_ino[0] != "dir":
            raise FsError(errno.EBADF)
        node = self.nodes.get(kind_ino[1])
        if node is None:
            raise FsError(errno.EBADF)
        self._check(node, uid, gid, R_OK)
        return [(".", node.ino), ("..", self.parent[node.ino])] + \
            [(n, i) for n, i in node.entries.items()]

    def releasedir(self, session: int, dh: int) -> None:
        kind_ino = self._handles(session).pop(dh, None)
        if kind_ino is None or kind_ino[0] != "dir":
            if kind_ino is not None:
                self._handles(session)[dh] = kind_ino
            raise FsError(errno.EBADF)

    def set_policy(self, uid: int, blob: bytes) -> None:
        if uid != 0:
            raise PolicyRejected("set_policy requires the admin uid")
        self.policy = Policy.from_blob(blob)
