"""Compiled evaluation of the branch-product wave and the RK4 flow stepper.

The field arrays come from field.state_arrays: packet rows are
(cx_ref, cy_ref, t_ref, dir_x, dir_y, theta_ref), shared k = s and ell, all
packets born at t = 0.  Envelope exponents below -80 are treated as exact
zeros; that error is ~1e-35 of the packet peak, far under the density floor.

All scratch is allocated once per trajectory and threaded through; the
inner loops are free of allocations and of complex library calls.

Status codes returned by the stepper: 0 reached the interval end, 2 density
fell below the floor, 3 the step collapsed or the step budget ran out.
"""
import math

import numpy as np
from numba import njit, prange

STATUS_OK = 0
STATUS_NODE = 2
STATUS_STUCK = 3

_ENV_CUTOFF = -80.0

# scratch rows: value, grad_x, grad_y, partner sum (per side)
_NSCRATCH = 8


@njit(cache=True)
def eval_field(x1, y1, x2, y2, t, pa, pb, tia, tib, tc, k, ell, sc):
    """Density, 4-current, and the per-particle branch-overlap ratio.

    The ratio is (second-largest / largest) single-particle branch weight,
    maximized over the two particles; it switches the stepper to the fine
    cap inside interference zones.  sc is (8, >=max packets) complex scratch.
    """
    w = complex(ell * ell, t)
    invw = 1.0 / w
    pref = (ell * ell * invw) / math.sqrt(math.pi * ell * ell)
    na = pa.shape[0]
    nb = pb.shape[0]
    for side in range(2):
        if side == 0:
            rows, x, y, n, base = pa, x1, y1, na, 0
        else:
            rows, x, y, n, base = pb, x2, y2, nb, 3
        for p in range(n):
            dt_ref = t - rows[p, 2]
            ux = rows[p, 3]
            uy = rows[p, 4]
            dx = x - (rows[p, 0] + ux * k * dt_ref)
            dy = y - (rows[p, 1] + uy * k * dt_ref)
            env = -(dx * dx + dy * dy) * (0.5 * invw)
            if env.real < _ENV_CUTOFF:
                sc[base + 0, p] = 0.0j
                sc[base + 1, p] = 0.0j
                sc[base + 2, p] = 0.0j
            else:
                ph = env.imag + k * (dx * ux + dy * uy) + rows[p, 5] \
                    + 0.5 * k * k * dt_ref
                mag = math.exp(env.real)
                e = complex(mag * math.cos(ph), mag * math.sin(ph))
                v = pref * e
                sc[base + 0, p] = v
                sc[base + 1, p] = v * (-dx * invw + 1j * k * ux)
                sc[base + 2, p] = v * (-dy * invw + 1j * k * uy)

    psi = 0.0j
    g1x = 0.0j
    g1y = 0.0j
    g2x = 0.0j
    g2y = 0.0j
    for p in range(na):
        sc[6, p] = 0.0j
    for p in range(nb):
        sc[7, p] = 0.0j
    for m in range(tc.size):
        ia = tia[m]
        ib = tib[m]
        c = tc[m]
        ca = sc[0, ia]
        cb = sc[3, ib]
        psi += c * ca * cb
        g1x += c * cb * sc[1, ia]
        g1y += c * cb * sc[2, ia]
        g2x += c * ca * sc[4, ib]
        g2y += c * ca * sc[5, ib]
        sc[6, ia] += c * cb
        sc[7, ib] += c * ca
    rho = psi.real * psi.real + psi.imag * psi.imag
    cpsi = psi.conjugate()
    j1x = (cpsi * g1x).imag
    j1y = (cpsi * g1y).imag
    j2x = (cpsi * g2x).imag
    j2y = (cpsi * g2y).imag

    ratio = 0.0
    for side in range(2):
        best = 0.0
        second = 0.0
        n = na if side == 0 else nb
        for p in range(n):
            if side == 0:
                wgt = abs(sc[0, p]) * abs(sc[6, p])
            else:
                wgt = abs(sc[3, p]) * abs(sc[7, p])
            if wgt > best:
                second = best
                best = wgt
            elif wgt > second:
                second = wgt
        if best > 0.0 and second / best > ratio:
            ratio = second / best
    return rho, j1x, j1y, j2x, j2y, ratio


@njit(cache=True)
def _rk4_step(pos, t, dt, pa, pb, tia, tib, tc, k, ell, floor, out, kx, cur,
              sc):
    """One classic RK4 step of dr/dt = J/rho from pos at t.

    Writes the endpoint into out; returns False if any stage density falls
    below the floor (caller halves dt).
    """
    for stage in range(4):
        if stage == 0:
            tt = t
            for i in range(4):
                cur[i] = pos[i]
        elif stage == 1 or stage == 2:
            tt = t + 0.5 * dt
            for i in range(4):
                cur[i] = pos[i] + 0.5 * dt * kx[stage - 1, i]
        else:
            tt = t + dt
            for i in range(4):
                cur[i] = pos[i] + dt * kx[2, i]
        rho, j1x, j1y, j2x, j2y, _ = eval_field(
            cur[0], cur[1], cur[2], cur[3], tt,
            pa, pb, tia, tib, tc, k, ell, sc)
        if rho < floor:
            return False
        kx[stage, 0] = j1x / rho
        kx[stage, 1] = j1y / rho
        kx[stage, 2] = j2x / rho
        kx[stage, 3] = j2y / rho
    for i in range(4):
        out[i] = pos[i] + dt / 6.0 * (kx[0, i] + 2.0 * kx[1, i]
                                      + 2.0 * kx[2, i] + kx[3, i])
    return True


@njit(cache=True)
def advance_one(pos, t0, t1, pa, pb, tia, tib, tc, k, ell,
                fine_cap, coarse_cap, switch_ratio, floor,
                max_halvings, max_steps, rec_times, rec_rows):
    """Advance one trajectory over [t0, t1], recording at times in (t0, t1].

    pos is updated in place; rec_rows[i] receives the position at
    rec_times[i].  Returns (status, steps_taken).
    """
    t = t0
    ri = 0
    nrec = rec_times.size
    out = np.empty(4)
    kx = np.empty((4, 4))
    cur = np.empty(4)
    nmax = max(pa.shape[0], pb.shape[0])
    sc = np.empty((_NSCRATCH, nmax), np.complex128)
    steps = 0
    while True:
        while ri < nrec and rec_times[ri] <= t:
            for i in range(4):
                rec_rows[ri, i] = pos[i]
            ri += 1
        if t >= t1:
            return STATUS_OK, steps
        if steps >= max_steps:
            return STATUS_STUCK, steps
        rho, j1x, j1y, j2x, j2y, ratio = eval_field(
            pos[0], pos[1], pos[2], pos[3], t, pa, pb, tia, tib, tc, k, ell,
            sc)
        if rho < floor:
            return STATUS_NODE, steps
        v1 = math.hypot(j1x, j1y) / rho
        v2 = math.hypot(j2x, j2y) / rho
        vmax = v1 if v1 > v2 else v2
        if vmax < 1e-300:
            vmax = 1e-300
        cap = fine_cap if ratio > switch_ratio else coarse_cap
        dt = cap / vmax
        next_stop = t1 if ri >= nrec else rec_times[ri]
        land = False
        if dt >= next_stop - t:
            dt = next_stop - t
            land = True
        vnorm = math.sqrt(v1 * v1 + v2 * v2)
        ok = False
        for _ in range(max_halvings + 1):
            if _rk4_step(pos, t, dt, pa, pb, tia, tib, tc, k, ell, floor,
                         out, kx, cur, sc):
                dsq = 0.0
                for i in range(4):
                    d = out[i] - pos[i]
                    dsq += d * d
                if math.sqrt(dsq) <= 1.5 * vnorm * dt + 1e-300:
                    ok = True
                    break
            dt *= 0.5
            land = False
        if not ok:
            return STATUS_NODE, steps
        if dt <= 1e-14 * coarse_cap:
            return STATUS_STUCK, steps
        for i in range(4):
            pos[i] = out[i]
        t = next_stop if land else t + dt
        steps += 1


@njit(cache=True, parallel=True)
def advance_ensemble(pos, alive, t0, t1, pa, pb, tia, tib, tc, k, ell,
                     fine_cap, coarse_cap, switch_ratio, floor,
                     max_halvings, max_steps, rec_times, rec_store,
                     status, steps_out):
    """Advance all alive trajectories over one interval (embarrassingly
    parallel; bitwise deterministic regardless of thread count)."""
    for i in prange(pos.shape[0]):
        if alive[i] == 0:
            continue
        st, steps = advance_one(
            pos[i], t0, t1, pa, pb, tia, tib, tc, k, ell, fine_cap,
            coarse_cap, switch_ratio, floor, max_halvings, max_steps,
            rec_times, rec_store[i])
        steps_out[i] += steps
        if st != STATUS_OK:
            status[i] = st
            alive[i] = 0
