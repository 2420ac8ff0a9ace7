"""Static audits: boundary minimality, key isolation, module hygiene.

These inspect the installed sources, so they hold for the code actually
running, not a description of it.
"""

from __future__ import annotations

import ast
import inspect
import os

from .host import BOUNDARY_FUNCTIONS, HostBoundary

_PKG_DIR = os.path.dirname(os.path.abspath(__file__))

# Names whose presence in an untrusted module would break key isolation.
_KEY_MATERIAL_NAMES = {
    "aead_encrypt", "aead_decrypt", "SecureChannel", "SymmetricKey",
    "KeyRing", "AESGCM", "seal_persistent_key", "unseal_persistent_key",
    "generate_key", "key_from_material", "read_key_file", "seal_block",
    "open_block",
}


def _module_tree(module_file: str) -> ast.AST:
    with open(os.path.join(_PKG_DIR, module_file), "r", encoding="utf-8") as f:
        return ast.parse(f.read(), filename=module_file)


def _imported_names(tree: ast.AST) -> set[str]:
    names: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            names.update(alias.name for alias in node.names)
        elif isinstance(node, ast.ImportFrom):
            names.update(alias.name for alias in node.names)
            if node.module:
                names.add(node.module)
    return names


def _attribute_names_on(tree: ast.AST, holder: str) -> set[str]:
    """Attribute names accessed on any identifier or attribute called
    `holder` (e.g. `boundary.send_file_msg`, `self.boundary.recv_file_msg`)."""
    found: set[str] = set()
    for node in ast.walk(tree):
        if not isinstance(node, ast.Attribute):
            continue
        value = node.value
        if isinstance(value, ast.Name) and value.id == holder:
            found.add(node.attr)
        elif isinstance(value, ast.Attribute) and value.attr == holder:
            found.add(node.attr)
    return found


def boundary_surface() -> list[str]:
    """Public callables exposed by the host boundary object."""
    return sorted(name for name, member in inspect.getmembers(HostBoundary)
                  if callable(member) and not name.startswith("_"))


def audit_boundary_minimality() -> list[str]:
    """Empty list when exactly the four boundary functions exist and the
    trusted modules call nothing else on the boundary."""
    problems = []
    surface = boundary_surface()
    if surface != sorted(BOUNDARY_FUNCTIONS):
        problems.append(f"boundary surface is {surface}, expected "
                        f"{sorted(BOUNDARY_FUNCTIONS)}")
    for module_file in ("blocks.py", "server.py", "fs.py", "crypto.py",
                        "wire.py"):
        used = _attribute_names_on(_module_tree(module_file), "boundary")
        extra = used - set(BOUNDARY_FUNCTIONS)
        if extra:
            problems.append(f"{module_file} crosses the boundary via {extra}")
    return problems


def boundary_functions_used() -> set[str]:
    used: set[str] = set()
    for module_file in ("blocks.py", "server.py"):
        used |= _attribute_names_on(_module_tree(module_file), "boundary")
    return used & set(BOUNDARY_FUNCTIONS)


def audit_host_obliviousness() -> list[str]:
    """The host module must have no path to keys or plaintext."""
    problems = []
    imports = _imported_names(_module_tree("host.py"))
    banned = imports & (_KEY_MATERIAL_NAMES | {"crypto", ".crypto",
                                               "shieldfs.crypto"})
    if banned:
        problems.append(f"host.py imports key material: {sorted(banned)}")
    tree = _module_tree("host.py")
    for holder in ("crypto",):
        if _attribute_names_on(tree, holder):
            problems.append("host.py touches the crypto module")
    return problems


def audit_storage_isolation() -> list[str]:
    """Storage nodes hold only their session key: no sealing, no key ring."""
    problems = []
    imports = _imported_names(_module_tree("storage.py"))
    banned = imports & {"KeyRing", "seal_persistent_key",
                        "unseal_persistent_key", "seal_block", "open_block",
                        "generate_key"}
    if banned:
        problems.append(f"storage.py references {sorted(banned)}")
    return problems


def audit_client_key_hygiene() -> list[str]:
    """Clients manage no persistent secrets."""
    problems = []
    imports = _imported_names(_module_tree("client.py"))
    banned = imports & {"KeyRing", "seal_persistent_key",
                        "unseal_persistent_key", "MonotonicCounter",
                        "seal_block", "open_block"}
    if banned:
        problems.append(f"client.py references {sorted(banned)}")
    return problems


def run_all_audits() -> dict[str, list[str]]:
    return {
        "boundary_minimality": audit_boundary_minimality(),
        "host_obliviousness": audit_host_obliviousness(),
        "storage_isolation": audit_storage_isolation(),
        "client_key_hygiene": audit_client_key_hygiene(),
    }
