"""Self-contained AES-128-GCM oracle used to cross-check the product crypto.

Implemented from the block-cipher definition up (GF(2^8) S-box, key schedule,
GHASH over GF(2^128)) with no dependency on the library the package uses, so
the two sides of every fixed-vector comparison are independent. Slow, for
test vectors only.
"""

from __future__ import annotations

import struct

# --- AES-128 (encrypt-only) -------------------------------------------------


def _xtime(a: int) -> int:
    a <<= 1
    if a & 0x100:
        a ^= 0x11B
    return a & 0xFF


def _gf_mul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a = _xtime(a)
        b >>= 1
    return out


def _build_sbox() -> list[int]:
    # Multiplicative inverse in GF(2^8) followed by the affine transform.
    inv = [0] * 256
    for x in range(1, 256):
        for y in range(1, 256):
            if _gf_mul(x, y) == 1:
                inv[x] = y
                break
    sbox = []
    for x in range(256):
        b = inv[x]
        r = 0
        for i in range(8):
            bit = ((b >> i) ^ (b >> ((i + 4) % 8)) ^ (b >> ((i + 5) % 8))
                   ^ (b >> ((i + 6) % 8)) ^ (b >> ((i + 7) % 8))) & 1
            r |= bit << i
        sbox.append(r ^ 0x63)
    return sbox


_SBOX = _build_sbox()


def _key_expansion(key: bytes) -> list[list[int]]:
    assert len(key) == 16
    words = [list(key[i:i + 4]) for i in range(0, 16, 4)]
    rcon = 1
    for i in range(4, 44):
        temp = list(words[i - 1])
        if i % 4 == 0:
            temp = temp[1:] + temp[:1]
            temp = [_SBOX[b] for b in temp]
            temp[0] ^= rcon
            rcon = _xtime(rcon)
        words.append([a ^ b for a, b in zip(words[i - 4], temp)])
    return [sum(words[4 * r:4 * r + 4], []) for r in range(11)]


def _aes128_encrypt_block(round_keys: list[list[int]], block: bytes) -> bytes:
    # State held column-major as in the standard: s[r][c] = byte[4*c + r].
    s = [[block[4 * c + r] for c in range(4)] for r in range(4)]

    def add_round_key(rk):
        for c in range(4):
            for r in range(4):
                s[r][c] ^= rk[4 * c + r]

    def sub_bytes():
        for r in range(4):
            for c in range(4):
                s[r][c] = _SBOX[s[r][c]]

    def shift_rows():
        for r in range(1, 4):
            s[r] = s[r][r:] + s[r][:r]

    def mix_columns():
        for c in range(4):
            a = [s[r][c] for r in range(4)]
            s[0][c] = _gf_mul(a[0], 2) ^ _gf_mul(a[1], 3) ^ a[2] ^ a[3]
            s[1][c] = a[0] ^ _gf_mul(a[1], 2) ^ _gf_mul(a[2], 3) ^ a[3]
            s[2][c] = a[0] ^ a[1] ^ _gf_mul(a[2], 2) ^ _gf_mul(a[3], 3)
            s[3][c] = _gf_mul(a[0], 3) ^ a[1] ^ a[2] ^ _gf_mul(a[3], 2)

    add_round_key(round_keys[0])
    for rnd in range(1, 10):
        sub_bytes()
        shift_rows()
        mix_columns()
        add_round_key(round_keys[rnd])
    sub_bytes()
    shift_rows()
    add_round_key(round_keys[10])
    return bytes(s[r][c] for c in range(4) for r in range(4))


# --- GHASH and GCM ----------------------------------------------------------

_R = 0xE1 << 120


def _gf128_mul(x: int, y: int) -> int:
    z = 0
    v = x
    for i in range(127, -1, -1):
        if (y >> i) & 1:
            z ^= v
        if v & 1:
            v = (v >> 1) ^ _R
        else:
            v >>= 1
    return z


def _ghash(h: int, data: bytes) -> int:
    z = 0
    for i in range(0, len(data), 16):
        block = data[i:i + 16].ljust(16, b"\x00")
        z = _gf128_mul(z ^ int.from_bytes(block, "big"), h)
    return z


def _pad16(data: bytes) -> bytes:
    rem = len(data) % 16
    return data + (b"\x00" * (16 - rem) if rem else b"")


def _inc32(block: bytes) -> bytes:
    prefix, ctr = block[:12], int.from_bytes(block[12:], "big")
    return prefix + ((ctr + 1) & 0xFFFFFFFF).to_bytes(4, "big")


def gcm_encrypt(key: bytes, nonce: bytes, plaintext: bytes,
                aad: bytes = b"") -> tuple[bytes, bytes]:
    """AES-128-GCM with a 96-bit nonce; returns (ciphertext, 16-byte tag)."""
    assert len(nonce) == 12, "oracle supports 96-bit nonces only"
    rk = _key_expansion(key)
    h = int.from_bytes(_aes128_encrypt_block(rk, b"\x00" * 16), "big")
    j0 = nonce + b"\x00\x00\x00\x01"

    ctr = j0
    ct = bytearray()
    for i in range(0, len(plaintext), 16):
        ctr = _inc32(ctr)
        keystream = _aes128_encrypt_block(rk, ctr)
        chunk = plaintext[i:i + 16]
        ct += bytes(a ^ b for a, b in zip(chunk, keystream))

    lengths = struct.pack(">QQ", len(aad) * 8, len(ct) * 8)
    s = _ghash(h, _pad16(aad) + _pad16(bytes(ct)) + lengths)
    tag_block = _aes128_encrypt_block(rk, j0)
    tag = bytes(a ^ b for a, b in zip(s.to_bytes(16, "big"), tag_block))
    return bytes(ct), tag


def gcm_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes,
                aad: bytes = b"") -> bytes:
    """Verify and decrypt; raises ValueError on tag mismatch."""
    rk = _key_expansion(key)
    h = int.from_bytes(_aes128_encrypt_block(rk, b"\x00" * 16), "big")
    j0 = nonce + b"\x00\x00\x00\x01"
    lengths = struct.pack(">QQ", len(aad) * 8, len(ciphertext) * 8)
    s = _ghash(h, _pad16(aad) + _pad16(ciphertext) + lengths)
    tag_block = _aes128_encrypt_block(rk, j0)
    expect = bytes(a ^ b for a, b in zip(s.to_bytes(16, "big"), tag_block))
    if expect != tag:
        raise ValueError("oracle tag mismatch")
    ctr = j0
    pt = bytearray()
    for i in range(0, len(ciphertext), 16):
        ctr = _inc32(ctr)
        keystream = _aes128_encrypt_block(rk, ctr)
        chunk = ciphertext[i:i + 16]
        pt += bytes(a ^ b for a, b in zip(chunk, keystream))
    return bytes(pt)
