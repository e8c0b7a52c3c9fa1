"""Compiled inner loops: box contact generation and the sequential-impulse solver.

Everything here works on flat float64/int64 arrays so a whole 2 s rollout
runs inside one numba call.  Body index -1 denotes the static ground.
"""
import numpy as np
from numba import njit

# Contact ids: face-clip points encode (reference side, reference face,
# incident face, pair of clip lines); edge-edge contacts live above EDGE_ID.
EDGE_ID = 1_000_000
KEY_SHIFT = 1 << 21
MAX_MANIFOLD = 4


@njit(cache=True)
def quat_to_mat(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    r = np.empty((3, 3))
    r[0, 0] = 1 - 2 * (y * y + z * z)
    r[0, 1] = 2 * (x * y - w * z)
    r[0, 2] = 2 * (x * z + w * y)
    r[1, 0] = 2 * (x * y + w * z)
    r[1, 1] = 1 - 2 * (x * x + z * z)
    r[1, 2] = 2 * (y * z - w * x)
    r[2, 0] = 2 * (x * z - w * y)
    r[2, 1] = 2 * (y * z + w * x)
    r[2, 2] = 1 - 2 * (x * x + y * y)
    return r


@njit(cache=True, inline="always")
def _sgn(v):
    return 1.0 if v >= 0.0 else -1.0


@njit(cache=True)
def _reduce_points(pts, pen, ids, count, normal):
    """Pick at most 4 of `count` points: deepest, farthest, then widest on each side."""
    if count <= MAX_MANIFOLD:
        return count
    chosen = np.full(4, -1, np.int64)
    best = 0
    for k in range(1, count):
        if pen[k] > pen[best]:
            best = k
    chosen[0] = best
    far, fd = -1, -1.0
    for k in range(count):
        if k == chosen[0]:
            continue
        dx = pts[k, 0] - pts[best, 0]
        dy = pts[k, 1] - pts[best, 1]
        dz = pts[k, 2] - pts[best, 2]
        dd = dx * dx + dy * dy + dz * dz
        if dd > fd:
            fd, far = dd, k
    chosen[1] = far
    e0 = pts[far] - pts[best]
    hi, hv, lo, lv = -1, 0.0, -1, 0.0
    for k in range(count):
        if k == chosen[0] or k == chosen[1]:
            continue
        e1 = pts[k] - pts[best]
        c0 = e0[1] * e1[2] - e0[2] * e1[1]
        c1 = e0[2] * e1[0] - e0[0] * e1[2]
        c2 = e0[0] * e1[1] - e0[1] * e1[0]
        s = c0 * normal[0] + c1 * normal[1] + c2 * normal[2]
        if s > hv:
            hv, hi = s, k
        if s < lv:
            lv, lo = s, k
    m = 2
    if hi >= 0:
        chosen[m] = hi
        m += 1
    if lo >= 0:
        chosen[m] = lo
        m += 1
    tp = np.empty((m, 3))
    tq = np.empty(m)
    ti = np.empty(m, np.int64)
    for k in range(m):
        tp[k] = pts[chosen[k]]
        tq[k] = pen[chosen[k]]
        ti[k] = ids[chosen[k]]
    for k in range(m):
        pts[k] = tp[k]
        pen[k] = tq[k]
        ids[k] = ti[k]
    return m


@njit(cache=True)
def collide_ground(pos, rot, half, tol, out_p, out_pen, out_id):
    """Corners of one box at or below z = tol; normal is +z (ground toward box)."""
    count = 0
    pts = np.empty((8, 3))
    pen = np.empty(8)
    ids = np.empty(8, np.int64)
    for k in range(8):
        sx = 1.0 if k & 1 else -1.0
        sy = 1.0 if k & 2 else -1.0
        sz = 1.0 if k & 4 else -1.0
        cz = pos[2] + rot[2, 0] * sx * half[0] + rot[2, 1] * sy * half[1] + rot[2, 2] * sz * half[2]
        if cz <= tol:
            pts[count, 0] = pos[0] + rot[0, 0] * sx * half[0] + rot[0, 1] * sy * half[1] + rot[0, 2] * sz * half[2]
            pts[count, 1] = pos[1] + rot[1, 0] * sx * half[0] + rot[1, 1] * sy * half[1] + rot[1, 2] * sz * half[2]
            pts[count, 2] = 0.5 * cz
            pen[count] = -cz
            ids[count] = k
            count += 1
    up = np.array([0.0, 0.0, 1.0])
    count = _reduce_points(pts, pen, ids, count, up)
    for k in range(count):
        out_p[k] = pts[k]
        out_pen[k] = pen[k]
        out_id[k] = ids[k]
    return count


@njit(cache=True)
def _face_contact(pR, rR, hR, pI, rI, hI, axis, refside, tol, pts, pen, ids):
    """Clip the incident face of box I against reference face `axis` of box R."""
    d0 = pI[0] - pR[0]
    d1 = pI[1] - pR[1]
    d2 = pI[2] - pR[2]
    s = _sgn(d0 * rR[0, axis] + d1 * rR[1, axis] + d2 * rR[2, axis])
    n = np.empty(3)
    for c in range(3):
        n[c] = s * rR[c, axis]
    # incident face: most anti-parallel to n
    kbest = 0
    cbest = n[0] * rI[0, 0] + n[1] * rI[1, 0] + n[2] * rI[2, 0]
    for k in range(1, 3):
        ck = n[0] * rI[0, k] + n[1] * rI[1, k] + n[2] * rI[2, k]
        if abs(ck) > abs(cbest) + 1e-12:
            kbest, cbest = k, ck
    fs = -_sgn(cbest)
    u = (kbest + 1) % 3
    v = (kbest + 2) % 3
    poly = np.empty((8, 3))
    lab = np.empty((8, 2), np.int64)
    signs_u = (1.0, -1.0, -1.0, 1.0)
    signs_v = (1.0, 1.0, -1.0, -1.0)
    for m in range(4):
        for c in range(3):
            poly[m, c] = (pI[c] + fs * hI[kbest] * rI[c, kbest]
                          + signs_u[m] * hI[u] * rI[c, u] + signs_v[m] * hI[v] * rI[c, v])
        lab[m, 0] = (m + 3) % 4
        lab[m, 1] = m
    npoly = 4
    ru = (axis + 1) % 3
    rv = (axis + 2) % 3
    out = np.empty((8, 3))
    olab = np.empty((8, 2), np.int64)
    for plane in range(4):
        ax = ru if plane < 2 else rv
        ps = 1.0 if plane % 2 == 0 else -1.0
        pn0 = ps * rR[0, ax]
        pn1 = ps * rR[1, ax]
        pn2 = ps * rR[2, ax]
        off = pn0 * pR[0] + pn1 * pR[1] + pn2 * pR[2] + hR[ax]
        no = 0
        for m in range(npoly):
            prv = (m + npoly - 1) % npoly
            dp = pn0 * poly[prv, 0] + pn1 * poly[prv, 1] + pn2 * poly[prv, 2] - off
            dc = pn0 * poly[m, 0] + pn1 * poly[m, 1] + pn2 * poly[m, 2] - off
            if (dc <= 0.0) != (dp <= 0.0):
                t = dp / (dp - dc)
                if no < 8:
                    for c in range(3):
                        out[no, c] = poly[prv, c] + t * (poly[m, c] - poly[prv, c])
                    if lab[prv, 0] == lab[m, 0] or lab[prv, 0] == lab[m, 1]:
                        common = lab[prv, 0]
                    else:
                        common = lab[prv, 1]
                    olab[no, 0] = common
                    olab[no, 1] = 4 + plane
                    no += 1
            if dc <= 0.0 and no < 8:
                out[no] = poly[m]
                olab[no] = lab[m]
                no += 1
        npoly = no
        for m in range(no):
            poly[m] = out[m]
            lab[m] = olab[m]
        if npoly == 0:
            return 0, n
    ref0 = pR[0] + hR[axis] * n[0]
    ref1 = pR[1] + hR[axis] * n[1]
    ref2 = pR[2] + hR[axis] * n[2]
    code = (refside * 6 + axis * 2 + (1 if s > 0 else 0)) * 6 + kbest * 2 + (1 if fs > 0 else 0)
    count = 0
    for m in range(npoly):
        sep = n[0] * (poly[m, 0] - ref0) + n[1] * (poly[m, 1] - ref1) + n[2] * (poly[m, 2] - ref2)
        if sep <= tol:
            for c in range(3):
                pts[count, c] = poly[m, c] - 0.5 * sep * n[c]
            pen[count] = -sep
            l1 = min(lab[m, 0], lab[m, 1])
            l2 = max(lab[m, 0], lab[m, 1])
            ids[count] = code * 64 + l1 * 8 + l2
            count += 1
    count = _reduce_points(pts, pen, ids, count, n)
    return count, n


@njit(cache=True)
def collide_boxes(pA, rA, hA, pB, rB, hB, tol, out_p, out_pen, out_id):
    """Separating-axis test over 15 axes, then face clipping or edge-edge contact.

    Returns (count, normal) with the normal pointing from A toward B.
    """
    d = pB - pA
    amax, aaxis = -1e30, 0
    for i in range(3):
        da = d[0] * rA[0, i] + d[1] * rA[1, i] + d[2] * rA[2, i]
        rb = 0.0
        for j in range(3):
            rb += hB[j] * abs(rA[0, i] * rB[0, j] + rA[1, i] * rB[1, j] + rA[2, i] * rB[2, j])
        s = abs(da) - hA[i] - rb
        if s > tol:
            return 0, np.zeros(3)
        if s > amax:
            amax, aaxis = s, i
    bmax, baxis = -1e30, 0
    for j in range(3):
        db = d[0] * rB[0, j] + d[1] * rB[1, j] + d[2] * rB[2, j]
        ra = 0.0
        for i in range(3):
            ra += hA[i] * abs(rA[0, i] * rB[0, j] + rA[1, i] * rB[1, j] + rA[2, i] * rB[2, j])
        s = abs(db) - hB[j] - ra
        if s > tol:
            return 0, np.zeros(3)
        if s > bmax:
            bmax, baxis = s, j
    emax, ei, ej = -1e30, -1, -1
    en = np.zeros(3)
    for i in range(3):
        for j in range(3):
            c0 = rA[1, i] * rB[2, j] - rA[2, i] * rB[1, j]
            c1 = rA[2, i] * rB[0, j] - rA[0, i] * rB[2, j]
            c2 = rA[0, i] * rB[1, j] - rA[1, i] * rB[0, j]
            ln = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
            if ln < 1e-6:
                continue
            c0 /= ln
            c1 /= ln
            c2 /= ln
            ra = 0.0
            rb = 0.0
            for k in range(3):
                ra += hA[k] * abs(c0 * rA[0, k] + c1 * rA[1, k] + c2 * rA[2, k])
                rb += hB[k] * abs(c0 * rB[0, k] + c1 * rB[1, k] + c2 * rB[2, k])
            dn = d[0] * c0 + d[1] * c1 + d[2] * c2
            s = abs(dn) - ra - rb
            if s > tol:
                return 0, np.zeros(3)
            if s > emax:
                sg = _sgn(dn)
                emax, ei, ej = s, i, j
                en[0] = sg * c0
                en[1] = sg * c1
                en[2] = sg * c2
    facemax = max(amax, bmax)
    pts = np.empty((8, 3))
    pen = np.empty(8)
    ids = np.empty(8, np.int64)
    if ei >= 0 and 0.95 * emax > facemax + 0.01:
        # edge-edge: closest points of the two supporting edges
        ca = pA.copy()
        for k in range(3):
            if k != ei:
                sk = _sgn(en[0] * rA[0, k] + en[1] * rA[1, k] + en[2] * rA[2, k])
                for c in range(3):
                    ca[c] += sk * hA[k] * rA[c, k]
        cb = pB.copy()
        for k in range(3):
            if k != ej:
                sk = _sgn(en[0] * rB[0, k] + en[1] * rB[1, k] + en[2] * rB[2, k])
                for c in range(3):
                    cb[c] -= sk * hB[k] * rB[c, k]
        ua = rA[:, ei]
        ub = rB[:, ej]
        w = ca - cb
        b = ua[0] * ub[0] + ua[1] * ub[1] + ua[2] * ub[2]
        dd = ua[0] * w[0] + ua[1] * w[1] + ua[2] * w[2]
        e = ub[0] * w[0] + ub[1] * w[1] + ub[2] * w[2]
        den = 1.0 - b * b
        sa = (b * e - dd) / den
        tb = (e - b * dd) / den
        sa = min(max(sa, -hA[ei]), hA[ei])
        tb = min(max(tb, -hB[ej]), hB[ej])
        for c in range(3):
            out_p[0, c] = 0.5 * (ca[c] + sa * ua[c] + cb[c] + tb * ub[c])
        out_pen[0] = -emax
        out_id[0] = EDGE_ID + ei * 3 + ej
        return 1, en
    if 0.95 * bmax > amax + 0.01:
        count, n = _face_contact(pB, rB, hB, pA, rA, hA, baxis, 1, tol, pts, pen, ids)
        normal = -n
    else:
        count, n = _face_contact(pA, rA, hA, pB, rB, hB, aaxis, 0, tol, pts, pen, ids)
        normal = n
    for k in range(count):
        out_p[k] = pts[k]
        out_pen[k] = pen[k]
        out_id[k] = ids[k]
    return count, normal


@njit(cache=True)
def detect(pos, quat, half, tol, c_a, c_b, c_id, c_p, c_n, c_pen):
    """All contacts of the world, sorted by (body pair, feature id). Returns count."""
    nb = pos.shape[0]
    rots = np.empty((nb, 3, 3))
    ext = np.empty((nb, 3))
    for i in range(nb):
        rots[i] = quat_to_mat(quat[i])
        for c in range(3):
            ext[i, c] = (abs(rots[i, c, 0]) * half[i, 0] + abs(rots[i, c, 1]) * half[i, 1]
                         + abs(rots[i, c, 2]) * half[i, 2])
    tp = np.empty((8, 3))
    tq = np.empty(8)
    ti = np.empty(8, np.int64)
    count = 0
    cap = c_a.shape[0]
    for i in range(nb):
        if pos[i, 2] - ext[i, 2] > tol:
            continue
        m = collide_ground(pos[i], rots[i], half[i], tol, tp, tq, ti)
        for k in range(m):
            if count >= cap:
                break
            c_a[count] = -1
            c_b[count] = i
            c_id[count] = ti[k]
            c_p[count] = tp[k]
            c_n[count, 0] = 0.0
            c_n[count, 1] = 0.0
            c_n[count, 2] = 1.0
            c_pen[count] = tq[k]
            count += 1
    for i in range(nb):
        for j in range(i + 1, nb):
            sep = False
            for c in range(3):
                if abs(pos[j, c] - pos[i, c]) > ext[i, c] + ext[j, c] + tol:
                    sep = True
                    break
            if sep:
                continue
            m, nrm = collide_boxes(pos[i], rots[i], half[i], pos[j], rots[j], half[j], tol, tp, tq, ti)
            for k in range(m):
                if count >= cap:
                    break
                c_a[count] = i
                c_b[count] = j
                c_id[count] = ti[k]
                c_p[count] = tp[k]
                c_n[count] = nrm
                c_pen[count] = tq[k]
                count += 1
    keys = np.empty(count, np.int64)
    for k in range(count):
        keys[k] = ((c_a[k] + 1) * (nb + 1) + c_b[k]) * KEY_SHIFT + c_id[k]
    order = np.argsort(keys, kind="mergesort")
    a2 = c_a[:count][order].copy()
    b2 = c_b[:count][order].copy()
    i2 = c_id[:count][order].copy()
    p2 = c_p[:count][order].copy()
    n2 = c_n[:count][order].copy()
    q2 = c_pen[:count][order].copy()
    c_a[:count] = a2
    c_b[:count] = b2
    c_id[:count] = i2
    c_p[:count] = p2
    c_n[:count] = n2
    c_pen[:count] = q2
    return count


@njit(cache=True)
def tangent_basis(n):
    if abs(n[0]) < 0.57735:
        t = np.array([0.0, n[2], -n[1]])  # n x (1,0,0)
    else:
        t = np.array([-n[2], 0.0, n[0]])  # (0,1,0) x n
    ln = np.sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2])
    t /= ln
    t2 = np.array([n[1] * t[2] - n[2] * t[1], n[2] * t[0] - n[0] * t[2], n[0] * t[1] - n[1] * t[0]])
    return t, t2


@njit(cache=True)
def world_inertia(quat, inv_inertia_body):
    nb = quat.shape[0]
    iw = np.empty((nb, 3, 3))
    for i in range(nb):
        r = quat_to_mat(quat[i])
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    acc += r[a, k] * inv_inertia_body[i, k] * r[b, k]
                iw[i, a, b] = acc
    return iw


@njit(cache=True, inline="always")
def _angular_term(iw, r, d):
    c0 = r[1] * d[2] - r[2] * d[1]
    c1 = r[2] * d[0] - r[0] * d[2]
    c2 = r[0] * d[1] - r[1] * d[0]
    return (c0 * (iw[0, 0] * c0 + iw[0, 1] * c1 + iw[0, 2] * c2)
            + c1 * (iw[1, 0] * c0 + iw[1, 1] * c1 + iw[1, 2] * c2)
            + c2 * (iw[2, 0] * c0 + iw[2, 1] * c1 + iw[2, 2] * c2))


@njit(cache=True, inline="always")
def _eff_mass(ima, imb, iwa, iwb, ra, rb, d, a, b):
    k = 0.0
    if a >= 0:
        k += ima + _angular_term(iwa, ra, d)
    if b >= 0:
        k += imb + _angular_term(iwb, rb, d)
    return 1.0 / k if k > 0.0 else 0.0


@njit(cache=True, inline="always")
def _apply(vel, omega, inv_mass, iw, a, b, ra, rb, px, py, pz):
    if a >= 0:
        vel[a, 0] -= inv_mass[a] * px
        vel[a, 1] -= inv_mass[a] * py
        vel[a, 2] -= inv_mass[a] * pz
        t0 = ra[1] * pz - ra[2] * py
        t1 = ra[2] * px - ra[0] * pz
        t2 = ra[0] * py - ra[1] * px
        for r in range(3):
            omega[a, r] -= iw[a, r, 0] * t0 + iw[a, r, 1] * t1 + iw[a, r, 2] * t2
    if b >= 0:
        vel[b, 0] += inv_mass[b] * px
        vel[b, 1] += inv_mass[b] * py
        vel[b, 2] += inv_mass[b] * pz
        t0 = rb[1] * pz - rb[2] * py
        t1 = rb[2] * px - rb[0] * pz
        t2 = rb[0] * py - rb[1] * px
        for r in range(3):
            omega[b, r] += iw[b, r, 0] * t0 + iw[b, r, 1] * t1 + iw[b, r, 2] * t2


@njit(cache=True, inline="always")
def _rel_vel(vel, omega, a, b, ra, rb):
    v0 = 0.0
    v1 = 0.0
    v2 = 0.0
    if b >= 0:
        v0 += vel[b, 0] + omega[b, 1] * rb[2] - omega[b, 2] * rb[1]
        v1 += vel[b, 1] + omega[b, 2] * rb[0] - omega[b, 0] * rb[2]
        v2 += vel[b, 2] + omega[b, 0] * rb[1] - omega[b, 1] * rb[0]
    if a >= 0:
        v0 -= vel[a, 0] + omega[a, 1] * ra[2] - omega[a, 2] * ra[1]
        v1 -= vel[a, 1] + omega[a, 2] * ra[0] - omega[a, 0] * ra[2]
        v2 -= vel[a, 2] + omega[a, 0] * ra[1] - omega[a, 1] * ra[0]
    return v0, v1, v2


@njit(cache=True)
def solve(pos, vel, omega, inv_mass, iw, count, c_a, c_b, c_p, c_n, c_pen,
          lam, dt, mu, iterations, baumgarte, slop):
    """Sequential impulses with friction; `lam` (count, 3) holds warm-start
    impulses (normal, tangent1, tangent2) on entry and final ones on exit."""
    ra = np.empty((count, 3))
    rb = np.empty((count, 3))
    t1 = np.empty((count, 3))
    t2 = np.empty((count, 3))
    mn = np.empty(count)
    mt1 = np.empty(count)
    mt2 = np.empty(count)
    bias = np.empty(count)
    dummy = np.zeros((3, 3))
    for k in range(count):
        a, b = c_a[k], c_b[k]
        for c in range(3):
            ra[k, c] = c_p[k, c] - pos[a, c] if a >= 0 else 0.0
            rb[k, c] = c_p[k, c] - pos[b, c] if b >= 0 else 0.0
        n = c_n[k]
        u1, u2 = tangent_basis(n)
        t1[k] = u1
        t2[k] = u2
        ima = inv_mass[a] if a >= 0 else 0.0
        imb = inv_mass[b] if b >= 0 else 0.0
        iwa = iw[a] if a >= 0 else dummy
        iwb = iw[b] if b >= 0 else dummy
        mn[k] = _eff_mass(ima, imb, iwa, iwb, ra[k], rb[k], n, a, b)
        mt1[k] = _eff_mass(ima, imb, iwa, iwb, ra[k], rb[k], u1, a, b)
        mt2[k] = _eff_mass(ima, imb, iwa, iwb, ra[k], rb[k], u2, a, b)
        pen = c_pen[k]
        if pen > slop:
            bias[k] = baumgarte / dt * (pen - slop)
        elif pen < 0.0:
            bias[k] = pen / dt
        else:
            bias[k] = 0.0
        px = lam[k, 0] * n[0] + lam[k, 1] * u1[0] + lam[k, 2] * u2[0]
        py = lam[k, 0] * n[1] + lam[k, 1] * u1[1] + lam[k, 2] * u2[1]
        pz = lam[k, 0] * n[2] + lam[k, 1] * u1[2] + lam[k, 2] * u2[2]
        if px != 0.0 or py != 0.0 or pz != 0.0:
            _apply(vel, omega, inv_mass, iw, a, b, ra[k], rb[k], px, py, pz)
    for _it in range(iterations):
        for k in range(count):
            a, b = c_a[k], c_b[k]
            n = c_n[k]
            # friction, clamped to the disk of radius mu * lambda_n
            v0, v1, v2 = _rel_vel(vel, omega, a, b, ra[k], rb[k])
            vt1 = v0 * t1[k, 0] + v1 * t1[k, 1] + v2 * t1[k, 2]
            vt2 = v0 * t2[k, 0] + v1 * t2[k, 1] + v2 * t2[k, 2]
            o1, o2 = lam[k, 1], lam[k, 2]
            l1 = o1 - mt1[k] * vt1
            l2 = o2 - mt2[k] * vt2
            lim = mu * lam[k, 0]
            mag = np.sqrt(l1 * l1 + l2 * l2)
            if mag > lim:
                sc = lim / mag if mag > 0.0 else 0.0
                l1 *= sc
                l2 *= sc
            d1, d2 = l1 - o1, l2 - o2
            lam[k, 1], lam[k, 2] = l1, l2
            if d1 != 0.0 or d2 != 0.0:
                _apply(vel, omega, inv_mass, iw, a, b, ra[k], rb[k],
                       d1 * t1[k, 0] + d2 * t2[k, 0], d1 * t1[k, 1] + d2 * t2[k, 1],
                       d1 * t1[k, 2] + d2 * t2[k, 2])
            # normal, accumulated impulse kept non-negative
            v0, v1, v2 = _rel_vel(vel, omega, a, b, ra[k], rb[k])
            vn = v0 * n[0] + v1 * n[1] + v2 * n[2]
            old = lam[k, 0]
            new = max(old + mn[k] * (bias[k] - vn), 0.0)
            lam[k, 0] = new
            dl = new - old
            if dl != 0.0:
                _apply(vel, omega, inv_mass, iw, a, b, ra[k], rb[k], dl * n[0], dl * n[1], dl * n[2])
    # friction saw the previous normal impulse; project onto the final cone
    for k in range(count):
        lim = mu * lam[k, 0]
        o1, o2 = lam[k, 1], lam[k, 2]
        mag = np.sqrt(o1 * o1 + o2 * o2)
        if mag > lim:
            sc = lim / mag
            d1, d2 = o1 * sc - o1, o2 * sc - o2
            lam[k, 1], lam[k, 2] = o1 * sc, o2 * sc
            a, b = c_a[k], c_b[k]
            _apply(vel, omega, inv_mass, iw, a, b, ra[k], rb[k],
                   d1 * t1[k, 0] + d2 * t2[k, 0], d1 * t1[k, 1] + d2 * t2[k, 1],
                   d1 * t1[k, 2] + d2 * t2[k, 2])


@njit(cache=True)
def match_warm(count, c_a, c_b, c_id, nb, prev_count, p_key, p_lam, lam):
    """Copy impulses of contacts whose (pair, feature) key persisted from the previous step."""
    j = 0
    for k in range(count):
        key = ((c_a[k] + 1) * (nb + 1) + c_b[k]) * KEY_SHIFT + c_id[k]
        while j < prev_count and p_key[j] < key:
            j += 1
        if j < prev_count and p_key[j] == key:
            lam[k, 0] = p_lam[j, 0]
            lam[k, 1] = p_lam[j, 1]
            lam[k, 2] = p_lam[j, 2]
        else:
            lam[k, 0] = 0.0
            lam[k, 1] = 0.0
            lam[k, 2] = 0.0


@njit(cache=True)
def integrate(pos, quat, vel, omega, inv_mass, inertia_body, inv_inertia_body, dt):
    """Advance poses; angular velocity is re-expressed so world angular momentum is unchanged."""
    nb = pos.shape[0]
    for i in range(nb):
        if inv_mass[i] == 0.0:
            continue
        r = quat_to_mat(quat[i])
        # body-frame angular momentum L_b = I_b R^T w, world L = R L_b
        lw = np.zeros(3)
        for a in range(3):
            wb = r[0, a] * omega[i, 0] + r[1, a] * omega[i, 1] + r[2, a] * omega[i, 2]
            lb = inertia_body[i, a] * wb
            for c in range(3):
                lw[c] += r[c, a] * lb
        for c in range(3):
            pos[i, c] += dt * vel[i, c]
        w, x, y, z = quat[i, 0], quat[i, 1], quat[i, 2], quat[i, 3]
        ox, oy, oz = omega[i, 0], omega[i, 1], omega[i, 2]
        h = 0.5 * dt
        nw = w + h * (-ox * x - oy * y - oz * z)
        nx = x + h * (ox * w + oy * z - oz * y)
        ny = y + h * (oy * w + oz * x - ox * z)
        nz = z + h * (oz * w + ox * y - oy * x)
        ln = np.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
        quat[i, 0] = nw / ln
        quat[i, 1] = nx / ln
        quat[i, 2] = ny / ln
        quat[i, 3] = nz / ln
        r = quat_to_mat(quat[i])
        for a in range(3):
            lb = r[0, a] * lw[0] + r[1, a] * lw[1] + r[2, a] * lw[2]
            wb = lb * inv_inertia_body[i, a]
            for c in range(3):
                if a == 0:
                    omega[i, c] = r[c, a] * wb
                else:
                    omega[i, c] += r[c, a] * wb


@njit(cache=True)
def step_kernel(pos, quat, vel, omega, half, inv_mass, inertia_body, inv_inertia_body,
                gravity, dt, mu, iterations, baumgarte, slop, tol,
                c_a, c_b, c_id, c_p, c_n, c_pen, lam, p_key, p_lam, prev_count):
    """One semi-implicit Euler step. Returns the new warm-start count."""
    nb = pos.shape[0]
    for i in range(nb):
        if inv_mass[i] > 0.0:
            for c in range(3):
                vel[i, c] += dt * gravity[c]
    count = detect(pos, quat, half, tol, c_a, c_b, c_id, c_p, c_n, c_pen)
    match_warm(count, c_a, c_b, c_id, nb, prev_count, p_key, p_lam, lam)
    iw = world_inertia(quat, inv_inertia_body)
    solve(pos, vel, omega, inv_mass, iw, count, c_a, c_b, c_p, c_n, c_pen,
          lam, dt, mu, iterations, baumgarte, slop)
    integrate(pos, quat, vel, omega, inv_mass, inertia_body, inv_inertia_body, dt)
    for k in range(count):
        p_key[k] = ((c_a[k] + 1) * (nb + 1) + c_b[k]) * KEY_SHIFT + c_id[k]
        p_lam[k, 0] = lam[k, 0]
        p_lam[k, 1] = lam[k, 1]
        p_lam[k, 2] = lam[k, 2]
    return count


@njit(cache=True)
def rollout(pos, quat, vel, omega, half, inv_mass, inertia_body, inv_inertia_body,
            gravity, dt, mu, iterations, baumgarte, slop, tol, steps, record_every, limit):
    """Run `steps` steps in place. Returns (steps_done, diverged, recorded positions)."""
    nb = pos.shape[0]
    cap = 8 * (nb * (nb + 1) // 2) + 8
    c_a = np.empty(cap, np.int64)
    c_b = np.empty(cap, np.int64)
    c_id = np.empty(cap, np.int64)
    c_p = np.empty((cap, 3))
    c_n = np.empty((cap, 3))
    c_pen = np.empty(cap)
    lam = np.zeros((cap, 3))
    p_key = np.empty(cap, np.int64)
    p_lam = np.zeros((cap, 3))
    prev = 0
    nrec = steps // record_every + 1 if record_every > 0 else 1
    rec = np.full((nrec, nb, 3), np.nan)
    rec[0] = pos
    done = 0
    diverged = False
    for s in range(steps):
        prev = step_kernel(pos, quat, vel, omega, half, inv_mass, inertia_body, inv_inertia_body,
                           gravity, dt, mu, iterations, baumgarte, slop, tol,
                           c_a, c_b, c_id, c_p, c_n, c_pen, lam, p_key, p_lam, prev)
        done = s + 1
        bad = False
        for i in range(nb):
            for c in range(3):
                v = pos[i, c]
                if not np.isfinite(v) or abs(v) > limit or not np.isfinite(vel[i, c]) \
                        or not np.isfinite(omega[i, c]):
                    bad = True
        if bad:
            diverged = True
            break
        if record_every > 0 and done % record_every == 0:
            rec[done // record_every] = pos
    return done, diverged, rec
