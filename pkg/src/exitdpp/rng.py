"""Counter-based normal variates (Philox4x32-10) keyed by (seed, stream, path, step).

Every variate is a pure function of its counter, so any subset of paths or
steps can be generated independently and in any order. This is what makes
Monte Carlo results independent of the worker count.
"""

import numpy as np

_M32 = np.uint64(0xFFFFFFFF)
_MUL0 = np.uint64(0xD2511F53)
_MUL1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)

# stream tags (counter word 3)
BROWNIAN = 0
BRIDGE = 1
NESTED = 2
SAMPLING = 3

_TWO_PI = 2.0 * np.pi
_2M53 = 2.0 ** -53


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function, vectorized over leading axes.

    ``counter`` is a sequence of four uint32-valued arrays (broadcastable),
    ``key`` a pair of ints. Returns four uint64 arrays holding 32-bit words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _M32 for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _M32
            k1 = (k1 + _W1) & _M32
        p0 = c0 * _MUL0
        p1 = c2 * _MUL1
        c0, c1, c2, c3 = ((p1 >> np.uint64(32)) ^ c1 ^ k0, p1 & _M32,
                          (p0 >> np.uint64(32)) ^ c3 ^ k1, p0 & _M32)
    return c0, c1, c2, c3


def split_seed(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _to_unit(hi, lo):
    # 53-bit uniform in (0, 1]
    bits = ((hi << np.uint64(21)) | (lo >> np.uint64(11))) & np.uint64((1 << 53) - 1)
    return (bits.astype(np.float64) + 1.0) * _2M53


def uniforms(seed, stream, paths, steps, lane=0):
    """Uniform(0,1] variates with shape ``(len(paths), len(steps))``."""
    paths = np.asarray(paths, dtype=np.uint64)[:, None]
    steps = np.asarray(steps, dtype=np.uint64)[None, :]
    w = philox4x32((steps, paths, np.uint64(lane), np.uint64(stream)), split_seed(seed))
    return _to_unit(w[0], w[1])


def normals(seed, stream, paths, steps, dim):
    """Standard normals with shape ``(len(paths), len(steps), dim)``.

    Component ``j`` of the (path, step) vector comes from lane ``j // 2`` of
    the counter; each Philox block yields two Box-Muller variates.
    """
    paths = np.asarray(paths, dtype=np.uint64)[:, None]
    steps = np.asarray(steps, dtype=np.uint64)[None, :]
    key = split_seed(seed)
    out = np.empty((paths.shape[0], steps.shape[1], dim))
    for lane in range((dim + 1) // 2):
        w = philox4x32((steps, paths, np.uint64(lane), np.uint64(stream)), key)
        u1 = _to_unit(w[0], w[1])
        u2 = _to_unit(w[2], w[3])
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = _TWO_PI * u2
        out[:, :, 2 * lane] = rad * np.cos(ang)
        if 2 * lane + 1 < dim:
            out[:, :, 2 * lane + 1] = rad * np.sin(ang)
    return out


def derive_seed(seed, *labels):
    """Derive a 64-bit child seed from a parent seed and string/int labels."""
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return int.from_bytes(h.digest(), "little")
