"""Compiled pair loops for the discrete collision operator.

All loops run over ordered velocity pairs (i, j) and angular nodes.  Node
coordinates are handled in index units: the velocity of node k along an
axis is (k + 1/2 - n/2) h, so differences of nodes are integer multiples
of h and post-collision positions are fractional indices.

The post-collision velocity v' = v_i + delta with
delta = (-q + |q| sigma) / 2, q = v_i - v_j, and v'_* = v_j - delta.
"""

import math

import numpy as np
from numba import njit

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@njit(cache=True, nogil=True, inline="always")
def _lagrange4(t, n):
    """Base index and cubic Lagrange weights at fractional index t, stencil
    clamped to the grid (one-sided near the edges)."""
    b = int(math.floor(t)) - 1
    if b < 0:
        b = 0
    if b > n - 4:
        b = n - 4
    s = t - b
    w0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
    w1 = s * (s - 2.0) * (s - 3.0) / 2.0
    w2 = -s * (s - 1.0) * (s - 3.0) / 2.0
    w3 = s * (s - 1.0) * (s - 2.0) / 6.0
    return b, w0, w1, w2, w3


@njit(cache=True, nogil=True, inline="always")
def _inside(t, n):
    return t >= -0.5 and t <= n - 0.5


@njit(cache=True, nogil=True, inline="always")
def _canon_normal(c0, c1, c2):
    """Unit vector orthogonal to (c0, c1, c2), c0 >= c1 >= c2 >= 0, lying on a
    mirror normal of the signed-permutation group whenever (c0, c1, c2) sits on
    a mirror plane."""
    if c2 == 0.0:
        return 0.0, 0.0, 1.0
    if c1 == c2:
        return 0.0, _SQRT1_2, -_SQRT1_2
    if c0 == c1:
        return _SQRT1_2, -_SQRT1_2, 0.0
    nrm2 = c0 * c0 + c1 * c1 + c2 * c2
    h0 = c0 / nrm2
    x = 1.0 - h0 * c0
    y = -h0 * c1
    z = -h0 * c2
    en = math.sqrt(x * x + y * y + z * z)
    return x / en, y / en, z / en


@njit(cache=True, nogil=True)
def frame3(q0, q1, q2):
    """Orthonormal frame (qhat, e1, e2) for an integer offset q, chosen so that
    the frame of R q is R applied to the frame of q for every signed
    permutation R, up to a symmetry of the azimuthal node set.

    Returns qhat, e1, e2 as nine scalars followed by |q|."""
    a0 = abs(q0)
    a1 = abs(q1)
    a2 = abs(q2)
    # stable descending sort of (a0, a1, a2) -> positions p0, p1, p2
    p0, p1, p2 = 0, 1, 2
    v0, v1, v2 = a0, a1, a2
    if v0 < v1:
        v0, v1 = v1, v0
        p0, p1 = p1, p0
    if v1 < v2:
        v1, v2 = v2, v1
        p1, p2 = p2, p1
    if v0 < v1:
        v0, v1 = v1, v0
        p0, p1 = p1, p0
    c0, c1, c2 = _canon_normal(v0, v1, v2)
    e10 = 0.0
    e11 = 0.0
    e12 = 0.0
    # scatter canonical components back: e1[p_k] = sign(q[p_k]) * c_k
    for k in range(3):
        if k == 0:
            ck = c0
            pk = p0
        elif k == 1:
            ck = c1
            pk = p1
        else:
            ck = c2
            pk = p2
        if pk == 0:
            e10 = -ck if q0 < 0 else ck
        elif pk == 1:
            e11 = -ck if q1 < 0 else ck
        else:
            e12 = -ck if q2 < 0 else ck
    qn = math.sqrt(q0 * q0 + q1 * q1 + q2 * q2)
    h0 = q0 / qn
    h1 = q1 / qn
    h2 = q2 / qn
    e20 = h1 * e12 - h2 * e11
    e21 = h2 * e10 - h0 * e12
    e22 = h0 * e11 - h1 * e10
    return h0, h1, h2, e10, e11, e12, e20, e21, e22, qn


# --------------------------------------------------------------------------
# adjoint (deposition) form


@njit(cache=True, nogil=True)
def adjoint3(fh, fg, nzh, nzg, n, idx, i_list, ct, st, cp, sp, wsig, gamma, h, gain, loss):
    """Q(g, h) in the adjoint form, d = 3, batched over the last axis.

    For each ordered pair (i, j) and angular node, the rate
    r = h_i g_j |q|^gamma w_sigma h^3 is removed at i and deposited at v'
    with cubic Lagrange weights.  Pairs whose v' or v'_* leaves the box are
    dropped as a whole, so 1, v and |v|^2 are conserved exactly."""
    N = idx.shape[0]
    M = ct.shape[0]
    B = fh.shape[1]
    n2 = n * n
    lim = n - 0.5
    tmp = np.empty(B)
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for ii in range(i_list.shape[0]):
        i = i_list[ii]
        if not nzh[i]:
            continue
        i0 = idx[i, 0]
        i1 = idx[i, 1]
        i2 = idx[i, 2]
        for j in range(N):
            if j == i or not nzg[j]:
                continue
            j0 = idx[j, 0]
            j1 = idx[j, 1]
            j2 = idx[j, 2]
            qh0, qh1, qh2, e10, e11, e12, e20, e21, e22, qn = frame3(
                float(i0 - j0), float(i1 - j1), float(i2 - j2))
            kin = (h * qn) ** gamma * h * h * h
            c0 = 0.5 * (i0 + j0)
            c1 = 0.5 * (i1 + j1)
            c2 = 0.5 * (i2 + j2)
            hq = 0.5 * qn
            for m in range(M):
                pa = st[m] * cp[m]
                pb = st[m] * sp[m]
                pc = ct[m]
                s0 = pc * qh0 + pa * e10 + pb * e20
                s1 = pc * qh1 + pa * e11 + pb * e21
                s2 = pc * qh2 + pa * e12 + pb * e22
                t0 = c0 + hq * s0
                t1 = c1 + hq * s1
                t2 = c2 + hq * s2
                u0 = c0 - hq * s0
                u1 = c1 - hq * s1
                u2 = c2 - hq * s2
                if t0 < -0.5 or t0 > lim or t1 < -0.5 or t1 > lim or t2 < -0.5 or t2 > lim:
                    continue
                if u0 < -0.5 or u0 > lim or u1 < -0.5 or u1 > lim or u2 < -0.5 or u2 > lim:
                    continue
                W = kin * wsig[m]
                b0, wx[0], wx[1], wx[2], wx[3] = _lagrange4(t0, n)
                b1, wy[0], wy[1], wy[2], wy[3] = _lagrange4(t1, n)
                b2, wz[0], wz[1], wz[2], wz[3] = _lagrange4(t2, n)
                if B == 1:
                    r = fh[i, 0] * fg[j, 0] * W
                    loss[i, 0] += r
                    for p in range(4):
                        rp = r * wx[p]
                        for q in range(4):
                            rq = rp * wy[q]
                            base = (b0 + p) * n2 + (b1 + q) * n + b2
                            gain[base, 0] += rq * wz[0]
                            gain[base + 1, 0] += rq * wz[1]
                            gain[base + 2, 0] += rq * wz[2]
                            gain[base + 3, 0] += rq * wz[3]
                else:
                    for bb in range(B):
                        r = fh[i, bb] * fg[j, bb] * W
                        tmp[bb] = r
                        loss[i, bb] += r
                    for p in range(4):
                        for q in range(4):
                            wpq = wx[p] * wy[q]
                            base = (b0 + p) * n2 + (b1 + q) * n + b2
                            for c in range(4):
                                w = wpq * wz[c]
                                k = base + c
                                for bb in range(B):
                                    gain[k, bb] += w * tmp[bb]


@njit(cache=True, nogil=True)
def adjoint2(fh, fg, nzh, nzg, n, idx, i_list, ct, st, wsig, gamma, h, gain, loss):
    """d = 2 analogue of adjoint3; sigma = rotation of qhat by +-theta."""
    N = idx.shape[0]
    M = ct.shape[0]
    B = fh.shape[1]
    lim = n - 0.5
    tmp = np.empty(B)
    wx = np.empty(4)
    wy = np.empty(4)
    for ii in range(i_list.shape[0]):
        i = i_list[ii]
        if not nzh[i]:
            continue
        i0 = idx[i, 0]
        i1 = idx[i, 1]
        for j in range(N):
            if j == i or not nzg[j]:
                continue
            j0 = idx[j, 0]
            j1 = idx[j, 1]
            d0 = float(i0 - j0)
            d1 = float(i1 - j1)
            qn = math.sqrt(d0 * d0 + d1 * d1)
            h0 = d0 / qn
            h1 = d1 / qn
            kin = (h * qn) ** gamma * h * h
            c0 = 0.5 * (i0 + j0)
            c1 = 0.5 * (i1 + j1)
            hq = 0.5 * qn
            for m in range(M):
                s0 = ct[m] * h0 - st[m] * h1
                s1 = st[m] * h0 + ct[m] * h1
                t0 = c0 + hq * s0
                t1 = c1 + hq * s1
                u0 = c0 - hq * s0
                u1 = c1 - hq * s1
                if t0 < -0.5 or t0 > lim or t1 < -0.5 or t1 > lim:
                    continue
                if u0 < -0.5 or u0 > lim or u1 < -0.5 or u1 > lim:
                    continue
                W = kin * wsig[m]
                for bb in range(B):
                    r = fh[i, bb] * fg[j, bb] * W
                    tmp[bb] = r
                    loss[i, bb] += r
                b0, wx[0], wx[1], wx[2], wx[3] = _lagrange4(t0, n)
                b1, wy[0], wy[1], wy[2], wy[3] = _lagrange4(t1, n)
                for p in range(4):
                    base = (b0 + p) * n + b1
                    for q in range(4):
                        w = wx[p] * wy[q]
                        k = base + q
                        for bb in range(B):
                            gain[k, bb] += w * tmp[bb]


# --------------------------------------------------------------------------
# strong (interpolated) form


@njit(cache=True, nogil=True, inline="always")
def _interp3(f, n, t0, t1, t2, bb):
    if not (_inside(t0, n) and _inside(t1, n) and _inside(t2, n)):
        return 0.0
    b0, x0, x1, x2, x3 = _lagrange4(t0, n)
    b1, y0, y1, y2, y3 = _lagrange4(t1, n)
    b2, z0, z1, z2, z3 = _lagrange4(t2, n)
    wx = (x0, x1, x2, x3)
    wy = (y0, y1, y2, y3)
    wz = (z0, z1, z2, z3)
    acc = 0.0
    for a in range(4):
        for b in range(4):
            wab = wx[a] * wy[b]
            base = (b0 + a) * n * n + (b1 + b) * n + b2
            for c in range(4):
                acc += wab * wz[c] * f[base + c, bb]
    return acc


@njit(cache=True, nogil=True, inline="always")
def _interp2(f, n, t0, t1, bb):
    if not (_inside(t0, n) and _inside(t1, n)):
        return 0.0
    b0, x0, x1, x2, x3 = _lagrange4(t0, n)
    b1, y0, y1, y2, y3 = _lagrange4(t1, n)
    wx = (x0, x1, x2, x3)
    wy = (y0, y1, y2, y3)
    acc = 0.0
    for a in range(4):
        for b in range(4):
            acc += wx[a] * wy[b] * f[(b0 + a) * n + b1 + b, bb]
    return acc


@njit(cache=True, nogil=True)
def strong3(fh, fg, n, idx, i_list, ct, st, cp, sp, wsig, gamma, h, gain, loss):
    """Strong form: gain_i = sum W h(v') g(v'_*) with interpolated values
    (zero outside the box), loss_i = h_i sum W g_j."""
    N = idx.shape[0]
    M = ct.shape[0]
    B = fh.shape[1]
    for ii in range(i_list.shape[0]):
        i = i_list[ii]
        i0 = idx[i, 0]
        i1 = idx[i, 1]
        i2 = idx[i, 2]
        for j in range(N):
            if j == i:
                continue
            d0 = i0 - idx[j, 0]
            d1 = i1 - idx[j, 1]
            d2 = i2 - idx[j, 2]
            qh0, qh1, qh2, e10, e11, e12, e20, e21, e22, qn = frame3(
                float(d0), float(d1), float(d2))
            kin = (h * qn) ** gamma * h * h * h
            for m in range(M):
                s0 = ct[m] * qh0 + st[m] * (cp[m] * e10 + sp[m] * e20)
                s1 = ct[m] * qh1 + st[m] * (cp[m] * e11 + sp[m] * e21)
                s2 = ct[m] * qh2 + st[m] * (cp[m] * e12 + sp[m] * e22)
                dl0 = 0.5 * (qn * s0 - d0)
                dl1 = 0.5 * (qn * s1 - d1)
                dl2 = 0.5 * (qn * s2 - d2)
                W = kin * wsig[m]
                for bb in range(B):
                    loss[i, bb] += W * fh[i, bb] * fg[j, bb]
                    hp = _interp3(fh, n, i0 + dl0, i1 + dl1, i2 + dl2, bb)
                    if hp != 0.0:
                        gp = _interp3(fg, n, idx[j, 0] - dl0, idx[j, 1] - dl1,
                                      idx[j, 2] - dl2, bb)
                        gain[i, bb] += W * hp * gp


@njit(cache=True, nogil=True)
def strong2(fh, fg, n, idx, i_list, ct, st, wsig, gamma, h, gain, loss):
    N = idx.shape[0]
    M = ct.shape[0]
    B = fh.shape[1]
    for ii in range(i_list.shape[0]):
        i = i_list[ii]
        i0 = idx[i, 0]
        i1 = idx[i, 1]
        for j in range(N):
            if j == i:
                continue
            d0 = float(i0 - idx[j, 0])
            d1 = float(i1 - idx[j, 1])
            qn = math.sqrt(d0 * d0 + d1 * d1)
            h0 = d0 / qn
            h1 = d1 / qn
            kin = (h * qn) ** gamma * h * h
            for m in range(M):
                s0 = ct[m] * h0 - st[m] * h1
                s1 = st[m] * h0 + ct[m] * h1
                dl0 = 0.5 * (qn * s0 - d0)
                dl1 = 0.5 * (qn * s1 - d1)
                W = kin * wsig[m]
                for bb in range(B):
                    loss[i, bb] += W * fh[i, bb] * fg[j, bb]
                    hp = _interp2(fh, n, i0 + dl0, i1 + dl1, bb)
                    if hp != 0.0:
                        gp = _interp2(fg, n, idx[j, 0] - dl0, idx[j, 1] - dl1, bb)
                        gain[i, bb] += W * hp * gp


# --------------------------------------------------------------------------
# scalar pair functionals (single field, no batch)
#
# mode 0: weak form      sum g_j h_i W (f(v') - f_i)
# mode 1: D_g(f)         1/2 sum g_j W (f(v') - f_i)^2
# ln F may exceed its stencil maximum by this much after interpolation; a
# sampled Maxwellian of temperature T exceeds it by at most d h^2 / (8 T)
LOG_OVERSHOOT = 0.5


@njit(cache=True, nogil=True, inline="always")
def _interp3_log(f, n, t0, t1, t2):
    """Cubic interpolation of ln F capped at the stencil maximum plus LOG_OVERSHOOT.
    Undershoots are harmless (exp stays small) and are kept."""
    b0, x0, x1, x2, x3 = _lagrange4(t0, n)
    b1, y0, y1, y2, y3 = _lagrange4(t1, n)
    b2, z0, z1, z2, z3 = _lagrange4(t2, n)
    wx = (x0, x1, x2, x3)
    wy = (y0, y1, y2, y3)
    wz = (z0, z1, z2, z3)
    acc = 0.0
    hi = -math.inf
    for a in range(4):
        for b in range(4):
            wab = wx[a] * wy[b]
            base = (b0 + a) * n * n + (b1 + b) * n + b2
            for c in range(4):
                val = f[base + c]
                acc += wab * wz[c] * val
                hi = max(hi, val)
    return min(acc, hi + LOG_OVERSHOOT)


@njit(cache=True, nogil=True, inline="always")
def _interp2_log(f, n, t0, t1):
    b0, x0, x1, x2, x3 = _lagrange4(t0, n)
    b1, y0, y1, y2, y3 = _lagrange4(t1, n)
    wx = (x0, x1, x2, x3)
    wy = (y0, y1, y2, y3)
    acc = 0.0
    hi = -math.inf
    for a in range(4):
        for b in range(4):
            val = f[(b0 + a) * n + b1 + b]
            acc += wx[a] * wy[b] * val
            hi = max(hi, val)
    return min(acc, hi + LOG_OVERSHOOT)


# mode 2: entropy        1/4 sum W (F'F'_* - F_i F_j) ln(F'F'_* / (F_i F_j)),
#                        with hh = ln F and F' = exp(interpolated ln F)


@njit(cache=True, nogil=True)
def pair_functional(mode, d, g, hh, f, n, idx, i_list, i_mult, ct, st, cp, sp, wsig, gamma, h,
                    floor, out):
    """Accumulates the chosen functional into out[0].
    ``i_mult`` carries orbit multiplicities for symmetric evaluation."""
    N = idx.shape[0]
    M = ct.shape[0]
    vol = h ** d
    acc = 0.0
    fcol = f.reshape(f.shape[0], 1)
    for ii in range(i_list.shape[0]):
        i = i_list[ii]
        mult = i_mult[ii]
        acc_i = 0.0
        for j in range(N):
            if j == i:
                continue
            if d == 3:
                d0 = idx[i, 0] - idx[j, 0]
                d1 = idx[i, 1] - idx[j, 1]
                d2 = idx[i, 2] - idx[j, 2]
                qh0, qh1, qh2, e10, e11, e12, e20, e21, e22, qn = frame3(
                    float(d0), float(d1), float(d2))
            else:
                d0 = idx[i, 0] - idx[j, 0]
                d1 = idx[i, 1] - idx[j, 1]
                d2 = 0
                qn = math.sqrt(float(d0 * d0 + d1 * d1))
                qh0 = d0 / qn
                qh1 = d1 / qn
                qh2 = 0.0
                e10 = e11 = e12 = e20 = e21 = e22 = 0.0
            kin = (h * qn) ** gamma * vol
            for m in range(M):
                if d == 3:
                    s0 = ct[m] * qh0 + st[m] * (cp[m] * e10 + sp[m] * e20)
                    s1 = ct[m] * qh1 + st[m] * (cp[m] * e11 + sp[m] * e21)
                    s2 = ct[m] * qh2 + st[m] * (cp[m] * e12 + sp[m] * e22)
                else:
                    s0 = ct[m] * qh0 - st[m] * qh1
                    s1 = st[m] * qh0 + ct[m] * qh1
                    s2 = 0.0
                dl0 = 0.5 * (qn * s0 - d0)
                dl1 = 0.5 * (qn * s1 - d1)
                dl2 = 0.5 * (qn * s2 - d2)
                t0 = idx[i, 0] + dl0
                t1 = idx[i, 1] + dl1
                u0 = idx[j, 0] - dl0
                u1 = idx[j, 1] - dl1
                if d == 3:
                    t2 = idx[i, 2] + dl2
                    u2 = idx[j, 2] - dl2
                    ok = (_inside(t0, n) and _inside(t1, n) and _inside(t2, n) and _inside(u0, n)
                          and _inside(u1, n) and _inside(u2, n))
                else:
                    t2 = 0.0
                    u2 = 0.0
                    ok = _inside(t0, n) and _inside(t1, n) and _inside(u0, n) and _inside(u1, n)
                if not ok:
                    continue
                W = kin * wsig[m]
                if d == 3:
                    fp = _interp3(fcol, n, t0, t1, t2, 0)
                else:
                    fp = _interp2(fcol, n, t0, t1, 0)
                if mode == 0:
                    acc_i += g[j] * hh[i] * W * (fp - f[i])
                elif mode == 1:
                    df = fp - f[i]
                    acc_i += 0.5 * g[j] * W * df * df
                else:
                    # hh carries ln f; interpolating the logarithm keeps the
                    # post-collision values positive and is exact on Maxwellians
                    if d == 3:
                        lp = _interp3_log(hh, n, t0, t1, t2)
                        ls = _interp3_log(hh, n, u0, u1, u2)
                    else:
                        lp = _interp2_log(hh, n, t0, t1)
                        ls = _interp2_log(hh, n, u0, u1)
                    la = lp + ls
                    lb = hh[i] + hh[j]
                    acc_i += 0.25 * W * (math.exp(la) - math.exp(lb)) * (la - lb)
        acc += mult * acc_i * vol
    out[0] += acc
