"""Compiled insertion kernel for the epsilon-pruned control store.

Entries live in flat arrays; a uniform grid over (dx, dy) with cell size
``eps_E`` holds singly linked lists of entry ids (``head``/``nxt``). Removed
entries stay linked but are flagged dead and skipped.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _wrap_abs(a):
    d = math.pi - ((math.pi - a) % (2.0 * math.pi))
    return abs(d)


@njit(cache=True)
def insert_batch(
    keys, durs, ctrl,
    ekeys, edurs, ectrl, alive, nxt, head, ncmp,
    count, grid, eps, has_vel, count_comparisons,
):
    """Insert candidates in order under the shorter-duration-wins rule.

    ``grid`` = (x0, y0, cell, nx, ny); ``eps`` = (eps_E, eps_R, eps_V).
    ``count`` is a 1-element array holding the number of slots used.
    Returns the number of candidates that were kept.
    """
    x0, y0, cell = grid[0], grid[1], grid[2]
    nx, ny = int(grid[3]), int(grid[4])
    eE, eR, eV = eps[0], eps[1], eps[2]
    kept = 0
    conflicts = np.empty(4096, dtype=np.int64)
    for c in range(keys.shape[0]):
        kx, ky, kt = keys[c, 0], keys[c, 1], keys[c, 2]
        d = durs[c]
        ci = int(math.floor((kx - x0) / cell))
        cj = int(math.floor((ky - y0) / cell))
        ci = min(max(ci, 0), nx - 1)
        cj = min(max(cj, 0), ny - 1)
        blocked = False
        nconf = 0
        best = -1
        best_d = 1e300
        for ii in range(max(ci - 1, 0), min(ci + 2, nx)):
            for jj in range(max(cj - 1, 0), min(cj + 2, ny)):
                e = head[ii * ny + jj]
                while e >= 0:
                    if alive[e]:
                        de = math.hypot(ekeys[e, 0] - kx, ekeys[e, 1] - ky)
                        if de < best_d:
                            best_d = de
                            best = e
                        if de < eE and _wrap_abs(ekeys[e, 2] - kt) < eR:
                            ok = True
                            if has_vel:
                                dv = math.hypot(ekeys[e, 3] - keys[c, 3], ekeys[e, 4] - keys[c, 4])
                                ok = dv < eV
                            if ok:
                                if count_comparisons:
                                    ncmp[e] += 1
                                if edurs[e] <= d:
                                    blocked = True
                                elif nconf < conflicts.shape[0]:
                                    conflicts[nconf] = e
                                    nconf += 1
                                else:
                                    blocked = True
                    e = nxt[e]
        if count_comparisons and best >= 0:
            # the nearest stored target was consulted even when outside eps
            inside = best_d < eE and _wrap_abs(ekeys[best, 2] - kt) < eR
            if inside and has_vel:
                inside = math.hypot(ekeys[best, 3] - keys[c, 3], ekeys[best, 4] - keys[c, 4]) < eV
            if not inside:
                ncmp[best] += 1
        if blocked:
            continue
        for k in range(nconf):
            alive[conflicts[k]] = False
        slot = count[0]
        count[0] += 1
        for q in range(keys.shape[1]):
            ekeys[slot, q] = keys[c, q]
        edurs[slot] = d
        ectrl[slot, 0] = ctrl[c, 0]
        ectrl[slot, 1] = ctrl[c, 1]
        alive[slot] = True
        ncmp[slot] = 0
        h = ci * ny + cj
        nxt[slot] = head[h]
        head[h] = slot
        kept += 1
    return kept
