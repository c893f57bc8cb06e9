"""Compiled inner loops for the multiresolution hash encoding.

The numpy reference in ``field.hash_encode_reference`` computes the same thing and is
what the tests compare against.
"""

import numba as nb
import numpy as np

PRIME_Y = 2654435761
PRIME_Z = 805459861


@nb.njit(cache=True)
def corner_index(cx, cy, cz, res, dense, mask):
    if dense:
        return np.int64(cx + cy * res + cz * res * res)
    # Only the low bits survive the mask, so 64-bit products give the uint32 hash.
    h = np.int64(cx) ^ (np.int64(cy) * PRIME_Y) ^ (np.int64(cz) * PRIME_Z)
    return h & mask


@nb.njit(cache=True)
def hash_encode_forward(u, tables, resolutions, dense, out, idx, wts):
    """u: (M, 3) in [0, 1]; tables: (L, T, F); out: (M, L*F); idx/wts: (M, L, 8)."""
    M = u.shape[0]
    L, T, F = tables.shape
    mask = np.int64(T - 1)
    for m in range(M):
        for lvl in range(L):
            r = resolutions[lvl]
            px = min(max(u[m, 0], 0.0), 1.0) * (r - 1)
            py = min(max(u[m, 1], 0.0), 1.0) * (r - 1)
            pz = min(max(u[m, 2], 0.0), 1.0) * (r - 1)
            ix = min(int(np.floor(px)), r - 2)
            iy = min(int(np.floor(py)), r - 2)
            iz = min(int(np.floor(pz)), r - 2)
            fx = px - ix
            fy = py - iy
            fz = pz - iz
            base = lvl * F
            for f in range(F):
                out[m, base + f] = 0.0
            for c in range(8):
                ox = c & 1
                oy = (c >> 1) & 1
                oz = (c >> 2) & 1
                h = corner_index(ix + ox, iy + oy, iz + oz, r, dense[lvl], mask)
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                idx[m, lvl, c] = h
                wts[m, lvl, c] = w
                for f in range(F):
                    out[m, base + f] += w * tables[lvl, h, f]


@nb.njit(cache=True)
def hash_encode_backward(idx, wts, d_out, grad_tables):
    """Accumulate d(loss)/d(table entries) in a fixed sequential order."""
    M = idx.shape[0]
    L, T, F = grad_tables.shape
    for m in range(M):
        for lvl in range(L):
            base = lvl * F
            for c in range(8):
                h = idx[m, lvl, c]
                w = wts[m, lvl, c]
                for f in range(F):
                    grad_tables[lvl, h, f] += w * d_out[m, base + f]
