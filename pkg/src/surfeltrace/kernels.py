"""Numba kernels: ray gathering, sorted alpha compositing, transport, adjoint.

Conventions shared by every kernel:
  * hits are sorted ascending by (t, primitive index) so summation order is
    canonical; exhaustive queries traverse a one-leaf node table through the
    same gather and composite code as accelerated ones and therefore agree
    bitwise;
  * rays are rows [ox, oy, oz, dx, dy, dz, t_min];
  * trace output rows are 15 wide:
      [A, T_final, Nx, Ny, Nz, D, Rr, Rg, Rb, E, Pr, Pg, Pb, n_hits, truncated];
  * adjoint rows are 12 wide: [gA, gNx, gNy, gNz, gD, gRr, gRg, gRb, gE,
    gPr, gPg, gPb].

All kernels are single-threaded and allocation-free inside the per-ray loop,
so results are independent of scheduling and worker count.
"""

import math

import numpy as np
from numba import njit

from .rng import key_uniform

OUT_WIDTH = 15
ADJ_WIDTH = 12
MAX_CANDIDATES = 4096
STACK_DEPTH = 128


# ---------------------------------------------------------------------------
# gathering and compositing


@njit(cache=True, inline="always", fastmath=True)
def _intersect_prim(ox, oy, oz, dx, dy, dz, t_min, i, tab, r_cut2):
    """Returns (hit, t, alpha, sign). sign orients the normal against the ray.

    Inlined into a single gather loop that serves both the accelerated and
    exhaustive query modes (the latter traverses a one-leaf node table), so
    fast-math value changes such as FMA contraction are applied once and both
    modes see identical results.
    """
    nx = tab[i, 3]
    ny = tab[i, 4]
    nz = tab[i, 5]
    den = dx * nx + dy * ny + dz * nz
    if abs(den) < 1e-9:
        return False, 0.0, 0.0, 0.0
    t = ((tab[i, 0] - ox) * nx + (tab[i, 1] - oy) * ny + (tab[i, 2] - oz) * nz) / den
    if t <= t_min:
        return False, 0.0, 0.0, 0.0
    ddx = ox + t * dx - tab[i, 0]
    ddy = oy + t * dy - tab[i, 1]
    ddz = oz + t * dz - tab[i, 2]
    u = (ddx * tab[i, 6] + ddy * tab[i, 7] + ddz * tab[i, 8]) * tab[i, 12]
    v = (ddx * tab[i, 9] + ddy * tab[i, 10] + ddz * tab[i, 11]) * tab[i, 13]
    m2 = u * u + v * v
    if m2 > r_cut2:
        return False, 0.0, 0.0, 0.0
    a = tab[i, 14] * math.exp(-0.5 * m2)
    sign = 1.0 if den < 0.0 else -1.0
    return True, t, a, sign


@njit(cache=True, inline="always", fastmath=True)
def _aabb_hit(ox, oy, oz, idx, idy, idz, bmin, bmax, j, t_lo, t_hi):
    t0 = (bmin[j, 0] - ox) * idx
    t1 = (bmax[j, 0] - ox) * idx
    if t0 > t1:
        t0, t1 = t1, t0
    lo = t0 if t0 > t_lo else t_lo
    hi = t1 if t1 < t_hi else t_hi
    t0 = (bmin[j, 1] - oy) * idy
    t1 = (bmax[j, 1] - oy) * idy
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > lo:
        lo = t0
    if t1 < hi:
        hi = t1
    t0 = (bmin[j, 2] - oz) * idz
    t1 = (bmax[j, 2] - oz) * idz
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > lo:
        lo = t0
    if t1 < hi:
        hi = t1
    return lo <= hi, lo


@njit(cache=True, inline="always", fastmath=True)
def _insert_hit(n_hits, t, i, a, sgn, hit_t, hit_idx, hit_a, hit_sgn):
    """Sorted insert by (t, index); on overflow the farthest hit is dropped."""
    if n_hits == MAX_CANDIDATES:
        last = n_hits - 1
        if hit_t[last] < t or (hit_t[last] == t and hit_idx[last] < i):
            return n_hits  # new hit is the farthest: ignore it
        n_hits = last
    j = n_hits - 1
    while j >= 0 and (hit_t[j] > t or (hit_t[j] == t and hit_idx[j] > i)):
        hit_t[j + 1] = hit_t[j]
        hit_idx[j + 1] = hit_idx[j]
        hit_a[j + 1] = hit_a[j]
        hit_sgn[j + 1] = hit_sgn[j]
        j -= 1
    hit_t[j + 1] = t
    hit_idx[j + 1] = i
    hit_a[j + 1] = a
    hit_sgn[j + 1] = sgn
    return n_hits + 1


@njit(cache=True, inline="always", fastmath=True)
def _termination_bound(n_hits, hit_t, hit_a, tau_scan, max_hits):
    """Depth beyond which no hit can still enter the composited prefix.

    Conservative twin of the composite loop: it stops only once transmittance
    falls below tau_scan (half the real cutoff, so rounding differences can
    never prune a hit the composite loop would have used) or the hit budget
    is exhausted. While hits are still being gathered the list only grows, so
    the bound shrinks monotonically toward the true termination depth.
    """
    T = 1.0
    for k in range(n_hits):
        T *= 1.0 - hit_a[k]
        if T < tau_scan or k + 1 >= max_hits:
            return hit_t[k]
    return np.inf


@njit(cache=True, inline="always", fastmath=True)
def _gather_hits(ox, oy, oz, dx, dy, dz, t_min,
                 tab, r_cut2, tau_T, max_hits,
                 node_min, node_max, node_child, node_leaf, prim_order,
                 hit_t, hit_idx, hit_a, hit_sgn, stack):
    """Collect hits sorted by (t, index), pruning past guaranteed termination.

    Exhaustive enumeration is expressed as traversal of a one-leaf node table
    (Scene.flat_args), so every query mode executes this same machine code
    and compositing is bitwise independent of the acceleration structure.
    ``tab`` rows are stored in ``prim_order`` (traversal) order so leaf scans
    read sequential memory; ``prim_order[k]`` recovers the primitive id.
    Candidates are pruned with an exact ``t <= t_cut`` test; node rejection
    additionally pads the bound, because the slab intervals are computed in
    fast-math and may round an entry depth a few ulps past the exact hit
    depth of a primitive the node contains.
    """
    n_hits = 0
    t_cut = np.inf
    tau_scan = 0.5 * tau_T
    idx = 1.0 / dx if dx != 0.0 else np.inf
    idy = 1.0 / dy if dy != 0.0 else np.inf
    idz = 1.0 / dz if dz != 0.0 else np.inf
    t_node = np.inf
    hit0, _ = _aabb_hit(ox, oy, oz, idx, idy, idz, node_min, node_max, 0,
                        t_min, t_node)
    sp = 0
    if hit0:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        j = stack[sp]
        if node_leaf[j]:
            updated = False
            # only very large leaves (the one-leaf exhaustive table) tighten
            # the bound inside the loop; small leaves batch it at the end
            big = node_child[j, 1] - node_child[j, 0] > 64
            for k in range(node_child[j, 0], node_child[j, 1]):
                ok, t, a, sgn = _intersect_prim(
                    ox, oy, oz, dx, dy, dz, t_min, k, tab, r_cut2)
                if ok and t <= t_cut:
                    # rows follow traversal order; fetch the identity only
                    # for accepted hits
                    i = prim_order[k]
                    n_hits = _insert_hit(n_hits, t, i, a,
                                         sgn, hit_t, hit_idx, hit_a, hit_sgn)
                    updated = True
                    if big:
                        t_cut = _termination_bound(n_hits, hit_t, hit_a,
                                                   tau_scan, max_hits)
            if updated:
                t_cut = _termination_bound(n_hits, hit_t, hit_a,
                                           tau_scan, max_hits)
                t_node = t_cut * 1.000001 + 1e-6
        else:
            # visit the nearer child first so the termination bound
            # tightens before the far subtree is considered
            c0 = node_child[j, 0]
            c1 = node_child[j, 1]
            h0, lo0 = _aabb_hit(ox, oy, oz, idx, idy, idz,
                                node_min, node_max, c0, t_min, t_node)
            h1, lo1 = _aabb_hit(ox, oy, oz, idx, idy, idz,
                                node_min, node_max, c1, t_min, t_node)
            if h0 and h1:
                if lo0 <= lo1:
                    stack[sp] = c1
                    stack[sp + 1] = c0
                else:
                    stack[sp] = c0
                    stack[sp + 1] = c1
                sp += 2
            elif h0:
                stack[sp] = c0
                sp += 1
            elif h1:
                stack[sp] = c1
                sp += 1
    # hits past the final bound were only retained because the bound was
    # looser when they were examined; dropping them makes the returned list a
    # pure function of the ray, independent of examination order
    while n_hits > 0 and hit_t[n_hits - 1] > t_cut:
        n_hits -= 1
    return n_hits


@njit(cache=True, inline="always", fastmath=True)
def _composite(n_hits, hit_t, hit_idx, hit_a, hit_sgn, stab,
               tau_T, max_hits, out, row):
    T = 1.0
    Nx = 0.0
    Ny = 0.0
    Nz = 0.0
    D = 0.0
    Rr = 0.0
    Rg = 0.0
    Rb = 0.0
    E = 0.0
    Pr = 0.0
    Pg = 0.0
    Pb = 0.0
    n_comp = 0
    truncated = 0.0
    for k in range(n_hits):
        if n_comp >= max_hits:
            truncated = 1.0
            break
        i = hit_idx[k]
        a = hit_a[k]
        w = T * a
        s = hit_sgn[k]
        Nx += w * s * stab[i, 0]
        Ny += w * s * stab[i, 1]
        Nz += w * s * stab[i, 2]
        D += w * hit_t[k]
        Rr += w * stab[i, 3]
        Rg += w * stab[i, 4]
        Rb += w * stab[i, 5]
        E += w * stab[i, 6]
        Pr += w * stab[i, 7]
        Pg += w * stab[i, 8]
        Pb += w * stab[i, 9]
        T = T * (1.0 - a)
        n_comp += 1
        if T < tau_T:
            break
    if n_comp >= max_hits and T >= tau_T:
        # budget exhausted while still transmissive: the gather prunes past
        # the max_hits-th hit, so the list may be incomplete
        truncated = 1.0
    out[row, 0] = 1.0 - T
    out[row, 1] = T
    out[row, 2] = Nx
    out[row, 3] = Ny
    out[row, 4] = Nz
    out[row, 5] = D
    out[row, 6] = Rr
    out[row, 7] = Rg
    out[row, 8] = Rb
    out[row, 9] = E
    out[row, 10] = Pr
    out[row, 11] = Pg
    out[row, 12] = Pb
    out[row, 13] = n_comp
    out[row, 14] = truncated


@njit(cache=True, fastmath=True)
def trace_rays_kernel(rays, tab, stab, r_cut, tau_T, max_hits,
                      node_min, node_max, node_child, node_leaf,
                      prim_order, out):
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    for r in range(rays.shape[0]):
        n = _gather_hits(rays[r, 0], rays[r, 1], rays[r, 2],
                         rays[r, 3], rays[r, 4], rays[r, 5], rays[r, 6],
                         tab, r_cut2,
                         tau_T, max_hits, node_min, node_max, node_child,
                         node_leaf, prim_order,
                         hit_t, hit_idx, hit_a, hit_sgn, stack)
        _composite(n, hit_t, hit_idx, hit_a, hit_sgn, stab,
                   tau_T, max_hits, out, r)


# ---------------------------------------------------------------------------
# sampling helpers (bit-identical twins of camera.py)


@njit(cache=True, inline="always", fastmath=True)
def _cosine_dir(nx, ny, nz, u1, u2):
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    lx = r * math.cos(phi)
    ly = r * math.sin(phi)
    lz = math.sqrt(max(1.0 - u1, 1e-12))
    s = math.copysign(1.0, nz)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    b1x = 1.0 + s * nx * nx * a
    b1y = s * b
    b1z = -s * nx
    b2x = b
    b2y = s + ny * ny * a
    b2z = -ny
    dx = lx * b1x + ly * b2x + lz * nx
    dy = lx * b1y + ly * b2y + lz * ny
    dz = lx * b1z + ly * b2z + lz * nz
    return dx, dy, dz


@njit(cache=True, inline="always", fastmath=True)
def _pixel_dir(px, py, fx, fy, cx, cy, rot):
    dcx = (px - cx) / fx
    dcy = (py - cy) / fy
    dx = rot[0, 0] * dcx + rot[0, 1] * dcy + rot[0, 2]
    dy = rot[1, 0] * dcx + rot[1, 1] * dcy + rot[1, 2]
    dz = rot[2, 0] * dcx + rot[2, 1] * dcy + rot[2, 2]
    inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
    return dx * inv, dy * inv, dz * inv


# ---------------------------------------------------------------------------
# image-level transport


@njit(cache=True, fastmath=True)
def radiant_kernel(width, height, fx, fy, cx, cy, rot, ocx, ocy, ocz,
                   spp, seed, t_min,
                   tab, stab, r_cut, tau_T, max_hits,
                   node_min, node_max, node_child, node_leaf, prim_order,
                   out_rgb, out_aux):
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    out = np.empty((1, OUT_WIDTH), dtype=np.float64)
    inv_spp = 1.0 / spp
    for iy in range(height):
        for ix in range(width):
            pix = iy * width + ix
            for s in range(spp):
                if spp == 1:
                    px = ix + 0.5
                    py = iy + 0.5
                else:
                    px = ix + key_uniform(seed, pix, s, 0, 0)
                    py = iy + key_uniform(seed, pix, s, 0, 1)
                dx, dy, dz = _pixel_dir(px, py, fx, fy, cx, cy, rot)
                n = _gather_hits(ocx, ocy, ocz, dx, dy, dz, t_min,
                                 tab, r_cut2,
                                 tau_T, max_hits, node_min, node_max,
                                 node_child, node_leaf, prim_order,
                                 hit_t, hit_idx, hit_a, hit_sgn, stack)
                _composite(n, hit_t, hit_idx, hit_a, hit_sgn, stab,
                           tau_T, max_hits, out, 0)
                out_rgb[iy, ix, 0] += out[0, 6] * inv_spp
                out_rgb[iy, ix, 1] += out[0, 7] * inv_spp
                out_rgb[iy, ix, 2] += out[0, 8] * inv_spp
                for c in range(OUT_WIDTH):
                    out_aux[iy, ix, c] += out[0, c] * inv_spp


@njit(cache=True, fastmath=True)
def path_trace_kernel(width, height, fx, fy, cx, cy, rot, ocx, ocy, ocz,
                      spp, seed, t_min, tau_B, tau_E, a_min,
                      tab, stab, r_cut, tau_T, max_hits,
                      node_min, node_max, node_child, node_leaf, prim_order,
                      out_rgb, out_aux, out_stats):
    """Multi-bounce path tracing, Eq-9 style termination.

    out_stats rows: [escaped paths, bounce-limit discards, invalid normals].
    """
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    out = np.empty((1, OUT_WIDTH), dtype=np.float64)
    inv_spp = 1.0 / spp
    for iy in range(height):
        for ix in range(width):
            pix = iy * width + ix
            # center-ray primary trace for auxiliary channels
            px = ix + 0.5
            py = iy + 0.5
            dx, dy, dz = _pixel_dir(px, py, fx, fy, cx, cy, rot)
            n = _gather_hits(ocx, ocy, ocz, dx, dy, dz, t_min,
                             tab, r_cut2,
                             tau_T, max_hits, node_min, node_max, node_child,
                             node_leaf, prim_order,
                             hit_t, hit_idx, hit_a, hit_sgn, stack)
            _composite(n, hit_t, hit_idx, hit_a, hit_sgn, stab,
                       tau_T, max_hits, out, 0)
            for c in range(OUT_WIDTH):
                out_aux[iy, ix, c] = out[0, c]
            for s in range(spp):
                if spp == 1:
                    px = ix + 0.5
                    py = iy + 0.5
                else:
                    px = ix + key_uniform(seed, pix, s, 0, 0)
                    py = iy + key_uniform(seed, pix, s, 0, 1)
                dx, dy, dz = _pixel_dir(px, py, fx, fy, cx, cy, rot)
                ox = ocx
                oy = ocy
                oz = ocz
                tmin_cur = t_min
                thr = 1.0
                thg = 1.0
                thb = 1.0
                for b in range(1, tau_B + 1):
                    n = _gather_hits(ox, oy, oz, dx, dy, dz, tmin_cur,
                                     tab, r_cut2,
                                     tau_T, max_hits, node_min,
                                     node_max, node_child,
                                     node_leaf, prim_order,
                                     hit_t, hit_idx, hit_a, hit_sgn, stack)
                    _composite(n, hit_t, hit_idx, hit_a, hit_sgn, stab,
                               tau_T, max_hits, out, 0)
                    A = out[0, 0]
                    if A < a_min:
                        out_stats[0] += 1
                        break
                    if out[0, 9] > tau_E:
                        out_rgb[iy, ix, 0] += thr * out[0, 6] * inv_spp
                        out_rgb[iy, ix, 1] += thg * out[0, 7] * inv_spp
                        out_rgb[iy, ix, 2] += thb * out[0, 8] * inv_spp
                        break
                    if b == tau_B:
                        out_stats[1] += 1
                        break
                    nn = math.sqrt(out[0, 2] ** 2 + out[0, 3] ** 2 + out[0, 4] ** 2)
                    if nn < 1e-9:
                        out_stats[2] += 1
                        break
                    nhx = out[0, 2] / nn
                    nhy = out[0, 3] / nn
                    nhz = out[0, 4] / nn
                    dt = out[0, 5] / A
                    ox = ox + dt * dx
                    oy = oy + dt * dy
                    oz = oz + dt * dz
                    u1 = key_uniform(seed, pix, s, b, 0)
                    u2 = key_uniform(seed, pix, s, b, 1)
                    dx, dy, dz = _cosine_dir(nhx, nhy, nhz, u1, u2)
                    thr *= out[0, 10]
                    thg *= out[0, 11]
                    thb *= out[0, 12]
                    tmin_cur = t_min


@njit(cache=True, fastmath=True)
def secondary_mean_kernel(origins, normals, valid, spp, seed, key_pixel,
                          bounce_key, t_min, tau_E,
                          tab, stab, r_cut, tau_T, max_hits,
                          node_min, node_max, node_child, node_leaf, prim_order,
                          out_mean):
    """Mean composited radiance over cosine-sampled secondary rays.

    Used both by single-bounce shading (radiance-cache lookup, Eq-7 style
    estimator: with the cosine pdf the cos/pdf weight cancels to pi and the
    diffuse BRDF P/pi leaves a plain mean) and by the surfel radiosity solve.
    """
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    out = np.empty((1, OUT_WIDTH), dtype=np.float64)
    inv_spp = 1.0 / spp
    for r in range(origins.shape[0]):
        if not valid[r]:
            continue
        nhx = normals[r, 0]
        nhy = normals[r, 1]
        nhz = normals[r, 2]
        pix = key_pixel[r]
        for s in range(spp):
            u1 = key_uniform(seed, pix, s, bounce_key, 0)
            u2 = key_uniform(seed, pix, s, bounce_key, 1)
            dx, dy, dz = _cosine_dir(nhx, nhy, nhz, u1, u2)
            n = _gather_hits(origins[r, 0], origins[r, 1], origins[r, 2],
                             dx, dy, dz, t_min,
                             tab, r_cut2,
                             tau_T, max_hits, node_min, node_max, node_child,
                             node_leaf, prim_order,
                             hit_t, hit_idx, hit_a, hit_sgn, stack)
            _composite(n, hit_t, hit_idx, hit_a, hit_sgn, stab,
                       tau_T, max_hits, out, 0)
            out_mean[r, 0] += out[0, 6] * inv_spp
            out_mean[r, 1] += out[0, 7] * inv_spp
            out_mean[r, 2] += out[0, 8] * inv_spp


# ---------------------------------------------------------------------------
# adjoint of gather + composite


@njit(cache=True, fastmath=True)
def backward_kernel(rays, adjoints, pos, t_u, t_v, nrm, scale, opacity,
                    radiance, emission, albedo, quat, tab,
                    r_cut, tau_T, max_hits,
                    node_min, node_max, node_child, node_leaf,
                    prim_order,
                    g_pos, g_scale, g_quat, g_opa, g_rad, g_emis, g_alb):
    """Exact reverse-mode of the composite over every parameter.

    The transmittance chain is handled without divisions: for hit i the
    downstream sensitivity is accumulated as suffix recurrences
      Q <- c_i * a_i + (1 - a_i) * Q,   U <- (1 - a_i) * U
    so grad(a_i) = T_{i-1} * (c_i - Q_i + gA * U_i) stays finite even for
    fully opaque hits.
    """
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    t_prev = np.empty(MAX_CANDIDATES, dtype=np.float64)
    alphas = np.empty(MAX_CANDIDATES, dtype=np.float64)
    cvals = np.empty(MAX_CANDIDATES, dtype=np.float64)
    for r in range(rays.shape[0]):
        ox = rays[r, 0]
        oy = rays[r, 1]
        oz = rays[r, 2]
        dx = rays[r, 3]
        dy = rays[r, 4]
        dz = rays[r, 5]
        n = _gather_hits(ox, oy, oz, dx, dy, dz, rays[r, 6],
                         tab, r_cut2,
                         tau_T, max_hits, node_min, node_max, node_child,
                         node_leaf, prim_order,
                         hit_t, hit_idx, hit_a, hit_sgn, stack)

        gA = adjoints[r, 0]
        gNx = adjoints[r, 1]
        gNy = adjoints[r, 2]
        gNz = adjoints[r, 3]
        gD = adjoints[r, 4]
        gRr = adjoints[r, 5]
        gRg = adjoints[r, 6]
        gRb = adjoints[r, 7]
        gE = adjoints[r, 8]
        gPr = adjoints[r, 9]
        gPg = adjoints[r, 10]
        gPb = adjoints[r, 11]

        # forward replay: composited prefix, per-hit alpha and weight factor
        T = 1.0
        n_used = 0
        for k in range(n):
            if n_used >= max_hits:
                break
            i = hit_idx[k]
            a = hit_a[k]
            t_prev[k] = T
            alphas[k] = a
            cvals[k] = (gRr * radiance[i, 0] + gRg * radiance[i, 1]
                        + gRb * radiance[i, 2]
                        + gE * emission[i]
                        + gPr * albedo[i, 0] + gPg * albedo[i, 1]
                        + gPb * albedo[i, 2]
                        + hit_sgn[k] * (gNx * nrm[i, 0] + gNy * nrm[i, 1]
                                        + gNz * nrm[i, 2])
                        + gD * hit_t[k])
            T = T * (1.0 - a)
            n_used += 1
            if T < tau_T:
                break

        Q = 0.0
        U = 1.0
        for k in range(n_used - 1, -1, -1):
            i = hit_idx[k]
            a = alphas[k]
            w = t_prev[k] * a
            grad_a = t_prev[k] * (cvals[k] - Q + gA * U)
            Q = cvals[k] * a + (1.0 - a) * Q
            U = (1.0 - a) * U

            # direct per-quantity contributions
            g_rad[i, 0] += w * gRr
            g_rad[i, 1] += w * gRg
            g_rad[i, 2] += w * gRb
            g_emis[i] += w * gE
            g_alb[i, 0] += w * gPr
            g_alb[i, 1] += w * gPg
            g_alb[i, 2] += w * gPb
            gg = grad_a * opacity[i]
            gt_scalar = w * gD
            s = hit_sgn[k]
            gn_x = w * s * gNx
            gn_y = w * s * gNy
            gn_z = w * s * gNz

            # geometry chain: recompute intersection quantities
            nx = nrm[i, 0]
            ny = nrm[i, 1]
            nz = nrm[i, 2]
            den = dx * nx + dy * ny + dz * nz
            t = hit_t[k]
            ddx = ox + t * dx - pos[i, 0]
            ddy = oy + t * dy - pos[i, 1]
            ddz = oz + t * dz - pos[i, 2]
            su = scale[i, 0]
            sv = scale[i, 1]
            tux = t_u[i, 0]
            tuy = t_u[i, 1]
            tuz = t_u[i, 2]
            tvx = t_v[i, 0]
            tvy = t_v[i, 1]
            tvz = t_v[i, 2]
            u = (ddx * tux + ddy * tuy + ddz * tuz) / su
            v = (ddx * tvx + ddy * tvy + ddz * tvz) / sv
            g = math.exp(-0.5 * (u * u + v * v))
            g_opa[i] += grad_a * g

            gu = -gg * g * u / su
            gv = -gg * g * v / sv
            g_scale[i, 0] += gg * g * u * u / su
            g_scale[i, 1] += gg * g * v * v / sv

            # u = d.t_u / s_u; gu above is d(L)/d(u*s_u)-style: fold 1/s here
            gdx = (gu * tux + gv * tvx)
            gdy = (gu * tuy + gv * tvy)
            gdz = (gu * tuz + gv * tvz)
            g_tu_x = gu * ddx
            g_tu_y = gu * ddy
            g_tu_z = gu * ddz
            g_tv_x = gv * ddx
            g_tv_y = gv * ddy
            g_tv_z = gv * ddz

            gt_total = gt_scalar + gdx * dx + gdy * dy + gdz * dz
            inv_den = 1.0 / den
            g_pos[i, 0] += gt_total * nx * inv_den - gdx
            g_pos[i, 1] += gt_total * ny * inv_den - gdy
            g_pos[i, 2] += gt_total * nz * inv_den - gdz
            gn_tx = gn_x - gt_total * ddx * inv_den
            gn_ty = gn_y - gt_total * ddy * inv_den
            gn_tz = gn_z - gt_total * ddz * inv_den

            # frame -> quaternion
            qw = quat[i, 0]
            qx = quat[i, 1]
            qy = quat[i, 2]
            qz = quat[i, 3]
            gq_w = (2 * qz * g_tu_y - 2 * qy * g_tu_z
                    - 2 * qz * g_tv_x + 2 * qx * g_tv_z
                    + 2 * qy * gn_tx - 2 * qx * gn_ty)
            gq_x = (2 * qy * g_tu_y + 2 * qz * g_tu_z
                    + 2 * qy * g_tv_x - 4 * qx * g_tv_y + 2 * qw * g_tv_z
                    + 2 * qz * gn_tx - 2 * qw * gn_ty - 4 * qx * gn_tz)
            gq_y = (-4 * qy * g_tu_x + 2 * qx * g_tu_y - 2 * qw * g_tu_z
                    + 2 * qx * g_tv_x + 2 * qz * g_tv_z
                    + 2 * qw * gn_tx + 2 * qz * gn_ty - 4 * qy * gn_tz)
            gq_z = (-4 * qz * g_tu_x + 2 * qw * g_tu_y + 2 * qx * g_tu_z
                    - 2 * qw * g_tv_x - 4 * qz * g_tv_y + 2 * qy * g_tv_z
                    + 2 * qx * gn_tx + 2 * qy * gn_ty)
            # project out the radial component (unit-norm reparameterization)
            dot = qw * gq_w + qx * gq_x + qy * gq_y + qz * gq_z
            g_quat[i, 0] += gq_w - qw * dot
            g_quat[i, 1] += gq_x - qx * dot
            g_quat[i, 2] += gq_y - qy * dot
            g_quat[i, 3] += gq_z - qz * dot


# ---------------------------------------------------------------------------
# cached primary-hit weight lists (frozen-geometry optimization passes)


@njit(cache=True, fastmath=True)
def count_hits_kernel(rays, tab, r_cut, tau_T, max_hits,
                      node_min, node_max, node_child, node_leaf, prim_order,
                      counts):
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    for r in range(rays.shape[0]):
        n = _gather_hits(rays[r, 0], rays[r, 1], rays[r, 2],
                         rays[r, 3], rays[r, 4], rays[r, 5], rays[r, 6],
                         tab, r_cut2,
                         tau_T, max_hits, node_min, node_max, node_child,
                         node_leaf, prim_order,
                         hit_t, hit_idx, hit_a, hit_sgn, stack)
        T = 1.0
        used = 0
        for k in range(n):
            if used >= max_hits:
                break
            a = hit_a[k]
            T = T * (1.0 - a)
            used += 1
            if T < tau_T:
                break
        counts[r] = used


@njit(cache=True, fastmath=True)
def fill_hits_kernel(rays, tab, r_cut, tau_T, max_hits,
                     node_min, node_max, node_child, node_leaf, prim_order,
                     offsets, out_prim, out_w):
    r_cut2 = r_cut * r_cut
    hit_t = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_idx = np.empty(MAX_CANDIDATES, dtype=np.int64)
    hit_a = np.empty(MAX_CANDIDATES, dtype=np.float64)
    hit_sgn = np.empty(MAX_CANDIDATES, dtype=np.float64)
    stack = np.empty(STACK_DEPTH, dtype=np.int64)
    for r in range(rays.shape[0]):
        n = _gather_hits(rays[r, 0], rays[r, 1], rays[r, 2],
                         rays[r, 3], rays[r, 4], rays[r, 5], rays[r, 6],
                         tab, r_cut2,
                         tau_T, max_hits, node_min, node_max, node_child,
                         node_leaf, prim_order,
                         hit_t, hit_idx, hit_a, hit_sgn, stack)
        T = 1.0
        o = offsets[r]
        used = 0
        for k in range(n):
            if used >= max_hits:
                break
            i = hit_idx[k]
            a = hit_a[k]
            out_prim[o + used] = i
            out_w[o + used] = T * a
            T = T * (1.0 - a)
            used += 1
            if T < tau_T:
                break


@njit(cache=True, fastmath=True)
def weights_forward_kernel(offsets, counts, prim, w, values, out):
    """Sparse composite: out[r] = sum_k w_k * values[prim_k] (3-channel)."""
    for r in range(offsets.shape[0]):
        o = offsets[r]
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for k in range(counts[r]):
            i = prim[o + k]
            wk = w[o + k]
            a0 += wk * values[i, 0]
            a1 += wk * values[i, 1]
            a2 += wk * values[i, 2]
        out[r, 0] = a0
        out[r, 1] = a1
        out[r, 2] = a2


@njit(cache=True, fastmath=True)
def weights_backward_kernel(offsets, counts, prim, w, adj, g_values):
    """Transpose of weights_forward_kernel: scatter per-ray adjoints."""
    for r in range(offsets.shape[0]):
        o = offsets[r]
        for k in range(counts[r]):
            i = prim[o + k]
            wk = w[o + k]
            g_values[i, 0] += wk * adj[r, 0]
            g_values[i, 1] += wk * adj[r, 1]
            g_values[i, 2] += wk * adj[r, 2]
