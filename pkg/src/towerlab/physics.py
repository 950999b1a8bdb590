"""Deterministic rigid-body simulation of cuboid towers on a ground plane.

Semi-implicit Euler at a fixed timestep: integrate velocities under gravity,
resolve contacts with a sequential-impulse solver (Coulomb friction clamped
to mu times the normal impulse, Baumgarte positional stabilization), then
integrate positions and orientations. Collision detection is a separating
axis test over the 15 candidate axes of each box pair with reference-face
clipping for the contact manifold.

Bodies carry angular momentum (not angular velocity) as state, so with
gravity and contacts absent both linear and angular momentum are conserved
bit-exactly over any number of steps, and free tumbling precesses correctly.

The hot loops are numba-jitted and iterate in a fixed order (bodies by
index, contacts in construction order), which makes every simulation a pure
function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .geom import IDENTITY_QUAT, quat_to_mat
from .scenegen import Block, Scene

DENSITY = 600.0  # kg/m^3, as for wooden blocks
GROUND = -1  # body index of the static ground plane in contact records

_MARGIN = 1e-4  # detection margin: kissing contacts are picked up
_SLOP = 1e-4  # penetration allowed before Baumgarte pushes back
_MAX_BIAS = 0.2  # m/s cap on the correction velocity so deep impacts don't pop
_SPEED_LIMIT = 1e3  # m/s; beyond this the solver has blown up
_EDGE_PREFERENCE_BIAS = 1e-8  # face axes win ties against edge cross axes
_SETTLE_LIN = 1e-5  # m/s
_SETTLE_ANG = 1e-3  # rad/s
_SETTLE_STEPS = 50


class NumericalDivergence(RuntimeError):
    """A body exceeded the speed limit; the integration is meaningless."""


@dataclass
class SimConfig:
    dt: float = 0.001
    duration: float = 2.0
    gravity: float = 9.81
    friction_mu: float = 0.5
    restitution: float = 0.0
    solver_iterations: int = 10
    baumgarte_beta: float = 0.2
    settle_early: bool = False  # freeze once every body has been still for 50 steps

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        steps = self.duration / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("duration must be a multiple of dt")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must be in [0, 1]")

    @property
    def num_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class RigidBodyState:
    position: np.ndarray
    orientation: np.ndarray
    linear_velocity: np.ndarray
    angular_velocity: np.ndarray
    mass: float
    inertia: np.ndarray  # principal moments, body frame


@dataclass
class Contact:
    point: np.ndarray
    normal: np.ndarray  # unit, from body A to body B
    penetration: float


@dataclass
class Trajectory:
    scene_id: str
    times: np.ndarray  # (k,)
    positions: np.ndarray  # (k, n_blocks, 3)
    orientations: np.ndarray  # (k, n_blocks, 4)


def block_mass_inertia(half_extents, density: float = DENSITY):
    h = np.asarray(half_extents, dtype=float)
    mass = density * 8.0 * h[0] * h[1] * h[2]
    inertia = (mass / 3.0) * np.array([
        h[1] ** 2 + h[2] ** 2,
        h[0] ** 2 + h[2] ** 2,
        h[0] ** 2 + h[1] ** 2,
    ])
    return mass, inertia


class World:
    """Array-of-bodies state for the jitted kernels."""

    def __init__(self, pos, quat, vel, ang_mom, mass, inertia_body, half_extents):
        self.pos = np.ascontiguousarray(pos, dtype=np.float64)
        self.quat = np.ascontiguousarray(quat, dtype=np.float64)
        self.vel = np.ascontiguousarray(vel, dtype=np.float64)
        self.ang_mom = np.ascontiguousarray(ang_mom, dtype=np.float64)
        self.mass = np.ascontiguousarray(mass, dtype=np.float64)
        self.inertia_body = np.ascontiguousarray(inertia_body, dtype=np.float64)
        self.half_extents = np.ascontiguousarray(half_extents, dtype=np.float64)
        self.inv_mass = 1.0 / self.mass
        self.inv_inertia_body = 1.0 / self.inertia_body

    @property
    def num_bodies(self) -> int:
        return self.pos.shape[0]

    @classmethod
    def from_scene(cls, scene: Scene, density: float = DENSITY) -> "World":
        n = len(scene.blocks)
        pos = np.zeros((n, 3))
        quat = np.zeros((n, 4))
        half = np.zeros((n, 3))
        mass = np.zeros(n)
        inertia = np.zeros((n, 3))
        for i, blk in enumerate(scene.blocks):
            pos[i] = blk.position
            quat[i] = blk.orientation
            half[i] = blk.half_extents
            mass[i], inertia[i] = block_mass_inertia(blk.half_extents, density)
        return cls(pos, quat, np.zeros((n, 3)), np.zeros((n, 3)), mass, inertia, half)

    @classmethod
    def from_states(cls, states, half_extents) -> "World":
        n = len(states)
        pos = np.array([s.position for s in states], dtype=float)
        quat = np.array([s.orientation for s in states], dtype=float)
        vel = np.array([s.linear_velocity for s in states], dtype=float)
        mass = np.array([s.mass for s in states], dtype=float)
        inertia = np.array([s.inertia for s in states], dtype=float)
        ang_mom = np.zeros((n, 3))
        for i, s in enumerate(states):
            rot = quat_to_mat(s.orientation)
            iw = rot @ np.diag(inertia[i]) @ rot.T
            ang_mom[i] = iw @ np.asarray(s.angular_velocity, dtype=float)
        return cls(pos, quat, vel, ang_mom, mass, inertia,
                   np.asarray(half_extents, dtype=float))

    def states(self):
        out = []
        for i in range(self.num_bodies):
            rot = quat_to_mat(self.quat[i])
            iw_inv = rot @ np.diag(self.inv_inertia_body[i]) @ rot.T
            out.append(RigidBodyState(
                position=self.pos[i].copy(),
                orientation=self.quat[i].copy(),
                linear_velocity=self.vel[i].copy(),
                angular_velocity=iw_inv @ self.ang_mom[i],
                mass=float(self.mass[i]),
                inertia=self.inertia_body[i].copy(),
            ))
        return out


# ---------------------------------------------------------------------------
# jitted kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _q2m(q, m):
    w, x, y, z = q[0], q[1], q[2], q[3]
    xx = x * x; yy = y * y; zz = z * z
    xy = x * y; xz = x * z; yz = y * z
    wx = w * x; wy = w * y; wz = w * z
    m[0, 0] = 1.0 - 2.0 * (yy + zz); m[0, 1] = 2.0 * (xy - wz); m[0, 2] = 2.0 * (xz + wy)
    m[1, 0] = 2.0 * (xy + wz); m[1, 1] = 1.0 - 2.0 * (xx + zz); m[1, 2] = 2.0 * (yz - wx)
    m[2, 0] = 2.0 * (xz - wy); m[2, 1] = 2.0 * (yz + wx); m[2, 2] = 1.0 - 2.0 * (xx + yy)


@njit(cache=True)
def _box_proj(rot, half, ax, ay, az):
    # projection radius of an oriented box onto a unit axis
    p = 0.0
    for k in range(3):
        p += half[k] * abs(ax * rot[0, k] + ay * rot[1, k] + az * rot[2, k])
    return p


@njit(cache=True)
def _box_box(pa, ra, ha, pb, rb, hb, margin, pts, pens, nrm):
    """Contact manifold between two oriented boxes.

    Returns the number of contact points written into pts/pens; nrm is the
    shared unit normal pointing from box A to box B. Zero means separated
    beyond the margin.
    """
    dx = pb[0] - pa[0]; dy = pb[1] - pa[1]; dz = pb[2] - pa[2]

    best_face = -1.0e30
    bf_owner = -1
    bf_axis = -1
    best_edge = -1.0e30
    be_i = -1
    be_j = -1
    bex = 0.0; bey = 0.0; bez = 0.0

    # six face axes
    for owner in range(2):
        for i in range(3):
            if owner == 0:
                ax = ra[0, i]; ay = ra[1, i]; az = ra[2, i]
            else:
                ax = rb[0, i]; ay = rb[1, i]; az = rb[2, i]
            proj = _box_proj(ra, ha, ax, ay, az) + _box_proj(rb, hb, ax, ay, az)
            sep = abs(ax * dx + ay * dy + az * dz) - proj
            if sep > margin:
                return 0
            if sep > best_face:
                best_face = sep
                bf_owner = owner
                bf_axis = i

    # nine edge-edge cross axes
    for i in range(3):
        for j in range(3):
            cx = ra[1, i] * rb[2, j] - ra[2, i] * rb[1, j]
            cy = ra[2, i] * rb[0, j] - ra[0, i] * rb[2, j]
            cz = ra[0, i] * rb[1, j] - ra[1, i] * rb[0, j]
            ln = np.sqrt(cx * cx + cy * cy + cz * cz)
            if ln < 1e-9:
                continue
            cx /= ln; cy /= ln; cz /= ln
            proj = _box_proj(ra, ha, cx, cy, cz) + _box_proj(rb, hb, cx, cy, cz)
            sep = abs(cx * dx + cy * dy + cz * dz) - proj
            if sep > margin:
                return 0
            if sep > best_edge:
                best_edge = sep
                be_i = i
                be_j = j
                bex = cx; bey = cy; bez = cz

    if best_edge > best_face + _EDGE_PREFERENCE_BIAS:
        # edge-edge: single contact at the midpoint of the closest points
        nx, ny, nz = bex, bey, bez
        if nx * dx + ny * dy + nz * dz < 0.0:
            nx = -nx; ny = -ny; nz = -nz
        # supporting edge centers: corner offsets along the non-edge axes
        p1x = pa[0]; p1y = pa[1]; p1z = pa[2]
        for k in range(3):
            if k == be_i:
                continue
            d = nx * ra[0, k] + ny * ra[1, k] + nz * ra[2, k]
            s = 1.0 if d >= 0.0 else -1.0
            p1x += s * ha[k] * ra[0, k]; p1y += s * ha[k] * ra[1, k]; p1z += s * ha[k] * ra[2, k]
        p2x = pb[0]; p2y = pb[1]; p2z = pb[2]
        for k in range(3):
            if k == be_j:
                continue
            d = nx * rb[0, k] + ny * rb[1, k] + nz * rb[2, k]
            s = -1.0 if d >= 0.0 else 1.0
            p2x += s * hb[k] * rb[0, k]; p2y += s * hb[k] * rb[1, k]; p2z += s * hb[k] * rb[2, k]
        u1x = ra[0, be_i]; u1y = ra[1, be_i]; u1z = ra[2, be_i]
        u2x = rb[0, be_j]; u2y = rb[1, be_j]; u2z = rb[2, be_j]
        rx = p2x - p1x; ry = p2y - p1y; rz = p2z - p1z
        b = u1x * u2x + u1y * u2y + u1z * u2z
        d1 = u1x * rx + u1y * ry + u1z * rz
        e1 = u2x * rx + u2y * ry + u2z * rz
        den = 1.0 - b * b
        if den < 1e-12:
            s_par = 0.0
        else:
            s_par = (d1 - b * e1) / den
        t_par = b * s_par - e1
        c1x = p1x + s_par * u1x; c1y = p1y + s_par * u1y; c1z = p1z + s_par * u1z
        c2x = p2x + t_par * u2x; c2y = p2y + t_par * u2y; c2z = p2z + t_par * u2z
        pts[0, 0] = 0.5 * (c1x + c2x)
        pts[0, 1] = 0.5 * (c1y + c2y)
        pts[0, 2] = 0.5 * (c1z + c2z)
        pens[0] = -best_edge if best_edge < 0.0 else 0.0
        nrm[0] = nx; nrm[1] = ny; nrm[2] = nz
        return 1

    # face contact: clip the incident face against the reference face sides
    # normal from A to B along the winning face axis
    if bf_owner == 0:
        nx = ra[0, bf_axis]; ny = ra[1, bf_axis]; nz = ra[2, bf_axis]
    else:
        nx = rb[0, bf_axis]; ny = rb[1, bf_axis]; nz = rb[2, bf_axis]
    if nx * dx + ny * dy + nz * dz < 0.0:
        nx = -nx; ny = -ny; nz = -nz
    nrm[0] = nx; nrm[1] = ny; nrm[2] = nz

    # reference box quantities (outward normal towards the incident box)
    if bf_owner == 0:
        onx = nx; ony = ny; onz = nz
    else:
        onx = -nx; ony = -ny; onz = -nz

    if bf_owner == 0:
        rr = ra; hr = ha; prx = pa[0]; pry = pa[1]; prz = pa[2]
        ri = rb; hi = hb; pix = pb[0]; piy = pb[1]; piz = pb[2]
    else:
        rr = rb; hr = hb; prx = pb[0]; pry = pb[1]; prz = pb[2]
        ri = ra; hi = ha; pix = pa[0]; piy = pa[1]; piz = pa[2]

    sr = 1.0 if (onx * rr[0, bf_axis] + ony * rr[1, bf_axis] + onz * rr[2, bf_axis]) >= 0.0 else -1.0
    fcx = prx + sr * hr[bf_axis] * rr[0, bf_axis]
    fcy = pry + sr * hr[bf_axis] * rr[1, bf_axis]
    fcz = prz + sr * hr[bf_axis] * rr[2, bf_axis]
    a1 = (bf_axis + 1) % 3
    a2 = (bf_axis + 2) % 3
    e1 = hr[a1]
    e2 = hr[a2]

    # incident face: the face of the other box most opposed to the ref normal
    bi = 0
    bd = -1.0
    for k in range(3):
        d = abs(onx * ri[0, k] + ony * ri[1, k] + onz * ri[2, k])
        if d > bd:
            bd = d
            bi = k
    si = -1.0 if (onx * ri[0, bi] + ony * ri[1, bi] + onz * ri[2, bi]) >= 0.0 else 1.0
    icx = pix + si * hi[bi] * ri[0, bi]
    icy = piy + si * hi[bi] * ri[1, bi]
    icz = piz + si * hi[bi] * ri[2, bi]
    b1 = (bi + 1) % 3
    b2 = (bi + 2) % 3

    # polygon buffers: columns u, v (ref-face coords), x, y, z
    poly = np.empty((8, 5))
    tmp = np.empty((8, 5))
    sgn1 = np.empty(4)
    sgn2 = np.empty(4)
    sgn1[0] = 1.0; sgn2[0] = 1.0
    sgn1[1] = 1.0; sgn2[1] = -1.0
    sgn1[2] = -1.0; sgn2[2] = -1.0
    sgn1[3] = -1.0; sgn2[3] = 1.0
    for c in range(4):
        wx = icx + sgn1[c] * hi[b1] * ri[0, b1] + sgn2[c] * hi[b2] * ri[0, b2]
        wy = icy + sgn1[c] * hi[b1] * ri[1, b1] + sgn2[c] * hi[b2] * ri[1, b2]
        wz = icz + sgn1[c] * hi[b1] * ri[2, b1] + sgn2[c] * hi[b2] * ri[2, b2]
        qx = wx - fcx; qy = wy - fcy; qz = wz - fcz
        poly[c, 0] = qx * rr[0, a1] + qy * rr[1, a1] + qz * rr[2, a1]
        poly[c, 1] = qx * rr[0, a2] + qy * rr[1, a2] + qz * rr[2, a2]
        poly[c, 2] = wx; poly[c, 3] = wy; poly[c, 4] = wz
    n_poly = 4

    # Sutherland-Hodgman against u <= e1, u >= -e1, v <= e2, v >= -e2
    for plane in range(4):
        if plane == 0:
            col = 0; lim = e1; sign = 1.0
        elif plane == 1:
            col = 0; lim = e1; sign = -1.0
        elif plane == 2:
            col = 1; lim = e2; sign = 1.0
        else:
            col = 1; lim = e2; sign = -1.0
        m = 0
        for k in range(n_poly):
            k2 = (k + 1) % n_poly
            d1 = lim - sign * poly[k, col]
            d2 = lim - sign * poly[k2, col]
            if d1 >= 0.0:
                for cc in range(5):
                    tmp[m, cc] = poly[k, cc]
                m += 1
            if (d1 >= 0.0) != (d2 >= 0.0):
                t = d1 / (d1 - d2)
                for cc in range(5):
                    tmp[m, cc] = poly[k, cc] + t * (poly[k2, cc] - poly[k, cc])
                m += 1
            if m >= 8:
                break
        n_poly = m
        for k in range(m):
            for cc in range(5):
                poly[k, cc] = tmp[k, cc]
        if n_poly == 0:
            return 0

    count = 0
    for k in range(n_poly):
        qx = poly[k, 2] - fcx; qy = poly[k, 3] - fcy; qz = poly[k, 4] - fcz
        sep = qx * onx + qy * ony + qz * onz
        if sep <= margin:
            pts[count, 0] = poly[k, 2] - 0.5 * sep * onx
            pts[count, 1] = poly[k, 3] - 0.5 * sep * ony
            pts[count, 2] = poly[k, 4] - 0.5 * sep * onz
            pens[count] = -sep if sep < 0.0 else 0.0
            count += 1
            if count >= 8:
                break
    return count


_CORNERS = np.array([
    [-1.0, -1.0, -1.0], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, 1.0], [-1.0, 1.0, 1.0],
])


@njit(cache=True)
def _collect_contacts(pos, rot, half, margin, ca, cb, cfid, cpt, cnr, cpen,
                      pts, pens, nrm):
    """Ground contacts (body corners at or below z=margin) then pair contacts.

    cfid is a stable feature id (corner index / manifold slot) used to match
    contacts across steps for impulse warm starting.
    """
    n = pos.shape[0]
    nc = 0
    for i in range(n):
        for c in range(8):
            lx = _CORNERS[c, 0] * half[i, 0]
            ly = _CORNERS[c, 1] * half[i, 1]
            lz = _CORNERS[c, 2] * half[i, 2]
            wx = pos[i, 0] + rot[i, 0, 0] * lx + rot[i, 0, 1] * ly + rot[i, 0, 2] * lz
            wy = pos[i, 1] + rot[i, 1, 0] * lx + rot[i, 1, 1] * ly + rot[i, 1, 2] * lz
            wz = pos[i, 2] + rot[i, 2, 0] * lx + rot[i, 2, 1] * ly + rot[i, 2, 2] * lz
            if wz <= margin:
                ca[nc] = -1
                cb[nc] = i
                cfid[nc] = c
                cpt[nc, 0] = wx; cpt[nc, 1] = wy; cpt[nc, 2] = wz
                cnr[nc, 0] = 0.0; cnr[nc, 1] = 0.0; cnr[nc, 2] = 1.0
                cpen[nc] = -wz if wz < 0.0 else 0.0
                nc += 1
    for i in range(n):
        # world-space AABB radius per axis for a cheap overlap pre-check
        for j in range(i + 1, n):
            ok = True
            for ax in range(3):
                r_i = (half[i, 0] * abs(rot[i, ax, 0]) + half[i, 1] * abs(rot[i, ax, 1])
                       + half[i, 2] * abs(rot[i, ax, 2]))
                r_j = (half[j, 0] * abs(rot[j, ax, 0]) + half[j, 1] * abs(rot[j, ax, 1])
                       + half[j, 2] * abs(rot[j, ax, 2]))
                if abs(pos[j, ax] - pos[i, ax]) > r_i + r_j + margin:
                    ok = False
                    break
            if not ok:
                continue
            cnt = _box_box(pos[i], rot[i], half[i], pos[j], rot[j], half[j],
                           margin, pts, pens, nrm)
            for k in range(cnt):
                ca[nc] = i
                cb[nc] = j
                cfid[nc] = k
                cpt[nc, 0] = pts[k, 0]; cpt[nc, 1] = pts[k, 1]; cpt[nc, 2] = pts[k, 2]
                cnr[nc, 0] = nrm[0]; cnr[nc, 1] = nrm[1]; cnr[nc, 2] = nrm[2]
                cpen[nc] = pens[k]
                nc += 1
    return nc


@njit(cache=True)
def _step_world(pos, quat, vel, angm, inv_mass, inv_inertia_body, half,
                dt, gravity, mu, restitution, iterations, beta,
                rot, iw_inv, omega,
                ca, cb, cfid, cpt, cnr, cpen,
                r_a, r_b, t1, t2, kn, kt1, kt2, bias,
                jn, jt1, jt2, pts, pens, nrm,
                prev_n, prev_a, prev_b, prev_f, prev_jn, prev_jt1, prev_jt2):
    """One timestep; returns the maximum body speed after the step.

    prev_* carry the previous step's accumulated impulses keyed by
    (body a, body b, feature id); matched contacts are warm started, which
    is what keeps tall resting stacks from random-walking.
    """
    n = pos.shape[0]
    for i in range(n):
        _q2m(quat[i], rot[i])
        for r in range(3):
            for c in range(3):
                s = 0.0
                for k in range(3):
                    s += rot[i, r, k] * inv_inertia_body[i, k] * rot[i, c, k]
                iw_inv[i, r, c] = s
        for r in range(3):
            omega[i, r] = (iw_inv[i, r, 0] * angm[i, 0] + iw_inv[i, r, 1] * angm[i, 1]
                           + iw_inv[i, r, 2] * angm[i, 2])

    for i in range(n):
        vel[i, 2] -= gravity * dt

    nc = _collect_contacts(pos, rot, half, _MARGIN, ca, cb, cfid, cpt, cnr, cpen,
                           pts, pens, nrm)

    # per-contact setup
    for c in range(nc):
        a = ca[c]
        b = cb[c]
        nx = cnr[c, 0]; ny = cnr[c, 1]; nz = cnr[c, 2]
        # tangent basis: cross the normal with its smallest component axis
        axx = abs(nx); axy = abs(ny); axz = abs(nz)
        if axx <= axy and axx <= axz:
            tx = 0.0; ty = -nz; tz = ny
        elif axy <= axz:
            tx = nz; ty = 0.0; tz = -nx
        else:
            tx = -ny; ty = nx; tz = 0.0
        ln = np.sqrt(tx * tx + ty * ty + tz * tz)
        tx /= ln; ty /= ln; tz /= ln
        t1[c, 0] = tx; t1[c, 1] = ty; t1[c, 2] = tz
        t2[c, 0] = ny * tz - nz * ty
        t2[c, 1] = nz * tx - nx * tz
        t2[c, 2] = nx * ty - ny * tx

        k_n = 0.0
        k_t1 = 0.0
        k_t2 = 0.0
        vn0 = 0.0
        if a >= 0:
            r_a[c, 0] = cpt[c, 0] - pos[a, 0]
            r_a[c, 1] = cpt[c, 1] - pos[a, 1]
            r_a[c, 2] = cpt[c, 2] - pos[a, 2]
        else:
            r_a[c, 0] = 0.0; r_a[c, 1] = 0.0; r_a[c, 2] = 0.0
        r_b[c, 0] = cpt[c, 0] - pos[b, 0]
        r_b[c, 1] = cpt[c, 1] - pos[b, 1]
        r_b[c, 2] = cpt[c, 2] - pos[b, 2]

        for axis in range(3):
            if axis == 0:
                ux, uy, uz = nx, ny, nz
            elif axis == 1:
                ux, uy, uz = t1[c, 0], t1[c, 1], t1[c, 2]
            else:
                ux, uy, uz = t2[c, 0], t2[c, 1], t2[c, 2]
            k = 0.0
            if a >= 0:
                rcx = r_a[c, 1] * uz - r_a[c, 2] * uy
                rcy = r_a[c, 2] * ux - r_a[c, 0] * uz
                rcz = r_a[c, 0] * uy - r_a[c, 1] * ux
                wx = iw_inv[a, 0, 0] * rcx + iw_inv[a, 0, 1] * rcy + iw_inv[a, 0, 2] * rcz
                wy = iw_inv[a, 1, 0] * rcx + iw_inv[a, 1, 1] * rcy + iw_inv[a, 1, 2] * rcz
                wz = iw_inv[a, 2, 0] * rcx + iw_inv[a, 2, 1] * rcy + iw_inv[a, 2, 2] * rcz
                k += inv_mass[a] + (wy * r_a[c, 2] - wz * r_a[c, 1]) * ux \
                    + (wz * r_a[c, 0] - wx * r_a[c, 2]) * uy \
                    + (wx * r_a[c, 1] - wy * r_a[c, 0]) * uz
            rcx = r_b[c, 1] * uz - r_b[c, 2] * uy
            rcy = r_b[c, 2] * ux - r_b[c, 0] * uz
            rcz = r_b[c, 0] * uy - r_b[c, 1] * ux
            wx = iw_inv[b, 0, 0] * rcx + iw_inv[b, 0, 1] * rcy + iw_inv[b, 0, 2] * rcz
            wy = iw_inv[b, 1, 0] * rcx + iw_inv[b, 1, 1] * rcy + iw_inv[b, 1, 2] * rcz
            wz = iw_inv[b, 2, 0] * rcx + iw_inv[b, 2, 1] * rcy + iw_inv[b, 2, 2] * rcz
            k += inv_mass[b] + (wy * r_b[c, 2] - wz * r_b[c, 1]) * ux \
                + (wz * r_b[c, 0] - wx * r_b[c, 2]) * uy \
                + (wx * r_b[c, 1] - wy * r_b[c, 0]) * uz
            if axis == 0:
                k_n = k
            elif axis == 1:
                k_t1 = k
            else:
                k_t2 = k
        kn[c] = k_n
        kt1[c] = k_t1
        kt2[c] = k_t2

        # pre-solve normal velocity for restitution
        rvx = vel[b, 0] + omega[b, 1] * r_b[c, 2] - omega[b, 2] * r_b[c, 1]
        rvy = vel[b, 1] + omega[b, 2] * r_b[c, 0] - omega[b, 0] * r_b[c, 2]
        rvz = vel[b, 2] + omega[b, 0] * r_b[c, 1] - omega[b, 1] * r_b[c, 0]
        if a >= 0:
            rvx -= vel[a, 0] + omega[a, 1] * r_a[c, 2] - omega[a, 2] * r_a[c, 1]
            rvy -= vel[a, 1] + omega[a, 2] * r_a[c, 0] - omega[a, 0] * r_a[c, 2]
            rvz -= vel[a, 2] + omega[a, 0] * r_a[c, 1] - omega[a, 1] * r_a[c, 0]
        vn0 = rvx * nx + rvy * ny + rvz * nz

        pen_err = cpen[c] - _SLOP
        b_pos = beta / dt * pen_err if pen_err > 0.0 else 0.0
        if b_pos > _MAX_BIAS:
            b_pos = _MAX_BIAS
        b_res = -restitution * vn0 if vn0 < 0.0 else 0.0
        bias[c] = b_pos if b_pos > b_res else b_res

        # warm start from the matching contact of the previous step
        jn[c] = 0.0
        jt1[c] = 0.0
        jt2[c] = 0.0
        for p in range(prev_n[0]):
            if prev_a[p] == a and prev_b[p] == b and prev_f[p] == cfid[c]:
                jn[c] = prev_jn[p]
                jt1[c] = prev_jt1[p]
                jt2[c] = prev_jt2[p]
                break
        if jn[c] != 0.0 or jt1[c] != 0.0 or jt2[c] != 0.0:
            px = jn[c] * nx + jt1[c] * t1[c, 0] + jt2[c] * t2[c, 0]
            py = jn[c] * ny + jt1[c] * t1[c, 1] + jt2[c] * t2[c, 1]
            pz = jn[c] * nz + jt1[c] * t1[c, 2] + jt2[c] * t2[c, 2]
            _apply_impulse(vel, omega, angm, iw_inv, inv_mass, a, b,
                           r_a[c], r_b[c], px, py, pz)

    # sequential impulse iterations, fixed order
    for _ in range(iterations):
        for c in range(nc):
            a = ca[c]
            b = cb[c]
            nx = cnr[c, 0]; ny = cnr[c, 1]; nz = cnr[c, 2]

            rvx = vel[b, 0] + omega[b, 1] * r_b[c, 2] - omega[b, 2] * r_b[c, 1]
            rvy = vel[b, 1] + omega[b, 2] * r_b[c, 0] - omega[b, 0] * r_b[c, 2]
            rvz = vel[b, 2] + omega[b, 0] * r_b[c, 1] - omega[b, 1] * r_b[c, 0]
            if a >= 0:
                rvx -= vel[a, 0] + omega[a, 1] * r_a[c, 2] - omega[a, 2] * r_a[c, 1]
                rvy -= vel[a, 1] + omega[a, 2] * r_a[c, 0] - omega[a, 0] * r_a[c, 2]
                rvz -= vel[a, 2] + omega[a, 0] * r_a[c, 1] - omega[a, 1] * r_a[c, 0]
            vn = rvx * nx + rvy * ny + rvz * nz
            dj = (bias[c] - vn) / kn[c]
            j_old = jn[c]
            j_new = j_old + dj
            if j_new < 0.0:
                j_new = 0.0
            jn[c] = j_new
            dj = j_new - j_old
            if dj != 0.0:
                px = dj * nx; py = dj * ny; pz = dj * nz
                _apply_impulse(vel, omega, angm, iw_inv, inv_mass, a, b,
                               r_a[c], r_b[c], px, py, pz)

            jmax = mu * jn[c]
            for t_axis in range(2):
                if t_axis == 0:
                    ux, uy, uz = t1[c, 0], t1[c, 1], t1[c, 2]
                    kt = kt1[c]
                else:
                    ux, uy, uz = t2[c, 0], t2[c, 1], t2[c, 2]
                    kt = kt2[c]
                rvx = vel[b, 0] + omega[b, 1] * r_b[c, 2] - omega[b, 2] * r_b[c, 1]
                rvy = vel[b, 1] + omega[b, 2] * r_b[c, 0] - omega[b, 0] * r_b[c, 2]
                rvz = vel[b, 2] + omega[b, 0] * r_b[c, 1] - omega[b, 1] * r_b[c, 0]
                if a >= 0:
                    rvx -= vel[a, 0] + omega[a, 1] * r_a[c, 2] - omega[a, 2] * r_a[c, 1]
                    rvy -= vel[a, 1] + omega[a, 2] * r_a[c, 0] - omega[a, 0] * r_a[c, 2]
                    rvz -= vel[a, 2] + omega[a, 0] * r_a[c, 1] - omega[a, 1] * r_a[c, 0]
                vt = rvx * ux + rvy * uy + rvz * uz
                dj = -vt / kt
                if t_axis == 0:
                    j_old = jt1[c]
                    j_new = j_old + dj
                    if j_new > jmax:
                        j_new = jmax
                    elif j_new < -jmax:
                        j_new = -jmax
                    jt1[c] = j_new
                else:
                    j_old = jt2[c]
                    j_new = j_old + dj
                    if j_new > jmax:
                        j_new = jmax
                    elif j_new < -jmax:
                        j_new = -jmax
                    jt2[c] = j_new
                dj = j_new - j_old
                if dj != 0.0:
                    px = dj * ux; py = dj * uy; pz = dj * uz
                    _apply_impulse(vel, omega, angm, iw_inv, inv_mass, a, b,
                                   r_a[c], r_b[c], px, py, pz)

    # stash accumulated impulses for next-step warm starting
    prev_n[0] = nc
    for c in range(nc):
        prev_a[c] = ca[c]
        prev_b[c] = cb[c]
        prev_f[c] = cfid[c]
        prev_jn[c] = jn[c]
        prev_jt1[c] = jt1[c]
        prev_jt2[c] = jt2[c]

    # integrate positions and orientations
    max_speed = 0.0
    for i in range(n):
        pos[i, 0] += vel[i, 0] * dt
        pos[i, 1] += vel[i, 1] * dt
        pos[i, 2] += vel[i, 2] * dt
        ox = omega[i, 0]; oy = omega[i, 1]; oz = omega[i, 2]
        qw = quat[i, 0]; qx = quat[i, 1]; qy = quat[i, 2]; qz = quat[i, 3]
        dw = -0.5 * (ox * qx + oy * qy + oz * qz)
        dx = 0.5 * (ox * qw + oy * qz - oz * qy)
        dy = 0.5 * (oy * qw + oz * qx - ox * qz)
        dz = 0.5 * (oz * qw + ox * qy - oy * qx)
        qw += dw * dt; qx += dx * dt; qy += dy * dt; qz += dz * dt
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        quat[i, 0] = qw / qn; quat[i, 1] = qx / qn
        quat[i, 2] = qy / qn; quat[i, 3] = qz / qn
        sp = np.sqrt(vel[i, 0] ** 2 + vel[i, 1] ** 2 + vel[i, 2] ** 2)
        if sp > max_speed:
            max_speed = sp
    return max_speed


@njit(cache=True)
def _apply_impulse(vel, omega, angm, iw_inv, inv_mass, a, b, ra, rb, px, py, pz):
    vel[b, 0] += px * inv_mass[b]
    vel[b, 1] += py * inv_mass[b]
    vel[b, 2] += pz * inv_mass[b]
    lx = rb[1] * pz - rb[2] * py
    ly = rb[2] * px - rb[0] * pz
    lz = rb[0] * py - rb[1] * px
    angm[b, 0] += lx; angm[b, 1] += ly; angm[b, 2] += lz
    omega[b, 0] += iw_inv[b, 0, 0] * lx + iw_inv[b, 0, 1] * ly + iw_inv[b, 0, 2] * lz
    omega[b, 1] += iw_inv[b, 1, 0] * lx + iw_inv[b, 1, 1] * ly + iw_inv[b, 1, 2] * lz
    omega[b, 2] += iw_inv[b, 2, 0] * lx + iw_inv[b, 2, 1] * ly + iw_inv[b, 2, 2] * lz
    if a >= 0:
        vel[a, 0] -= px * inv_mass[a]
        vel[a, 1] -= py * inv_mass[a]
        vel[a, 2] -= pz * inv_mass[a]
        lx = ra[1] * pz - ra[2] * py
        ly = ra[2] * px - ra[0] * pz
        lz = ra[0] * py - ra[1] * px
        angm[a, 0] -= lx; angm[a, 1] -= ly; angm[a, 2] -= lz
        omega[a, 0] -= iw_inv[a, 0, 0] * lx + iw_inv[a, 0, 1] * ly + iw_inv[a, 0, 2] * lz
        omega[a, 1] -= iw_inv[a, 1, 0] * lx + iw_inv[a, 1, 1] * ly + iw_inv[a, 1, 2] * lz
        omega[a, 2] -= iw_inv[a, 2, 0] * lx + iw_inv[a, 2, 1] * ly + iw_inv[a, 2, 2] * lz


@njit(cache=True)
def _run_sim(pos, quat, vel, angm, inv_mass, inv_inertia_body, half,
             dt, n_steps, gravity, mu, restitution, iterations, beta,
             settle_early, rec_steps, rec_pos, rec_quat):
    n = pos.shape[0]
    cap = 8 * n + 8 * (n * (n - 1) // 2)
    rot = np.empty((n, 3, 3))
    iw_inv = np.empty((n, 3, 3))
    omega = np.empty((n, 3))
    ca = np.empty(cap, dtype=np.int64)
    cb = np.empty(cap, dtype=np.int64)
    cfid = np.empty(cap, dtype=np.int64)
    cpt = np.empty((cap, 3))
    cnr = np.empty((cap, 3))
    cpen = np.empty(cap)
    r_a = np.empty((cap, 3))
    r_b = np.empty((cap, 3))
    t1 = np.empty((cap, 3))
    t2 = np.empty((cap, 3))
    kn = np.empty(cap)
    kt1 = np.empty(cap)
    kt2 = np.empty(cap)
    bias = np.empty(cap)
    jn = np.empty(cap)
    jt1 = np.empty(cap)
    jt2 = np.empty(cap)
    pts = np.empty((8, 3))
    pens = np.empty(8)
    nrm = np.empty(3)
    prev_n = np.zeros(1, dtype=np.int64)
    prev_a = np.empty(cap, dtype=np.int64)
    prev_b = np.empty(cap, dtype=np.int64)
    prev_f = np.empty(cap, dtype=np.int64)
    prev_jn = np.empty(cap)
    prev_jt1 = np.empty(cap)
    prev_jt2 = np.empty(cap)

    ri = 0
    if rec_steps[0] == 0:
        rec_pos[0] = pos
        rec_quat[0] = quat
        ri = 1
    calm = 0
    frozen = False
    for s in range(1, n_steps + 1):
        if not frozen:
            ms = _step_world(pos, quat, vel, angm, inv_mass, inv_inertia_body, half,
                             dt, gravity, mu, restitution, iterations, beta,
                             rot, iw_inv, omega,
                             ca, cb, cfid, cpt, cnr, cpen,
                             r_a, r_b, t1, t2, kn, kt1, kt2, bias,
                             jn, jt1, jt2, pts, pens, nrm,
                             prev_n, prev_a, prev_b, prev_f,
                             prev_jn, prev_jt1, prev_jt2)
            if ms > _SPEED_LIMIT:
                return -s
            if settle_early:
                mo = 0.0
                for i in range(n):
                    o = np.sqrt(omega[i, 0] ** 2 + omega[i, 1] ** 2 + omega[i, 2] ** 2)
                    if o > mo:
                        mo = o
                if ms < _SETTLE_LIN and mo < _SETTLE_ANG:
                    calm += 1
                    if calm >= _SETTLE_STEPS:
                        frozen = True
                else:
                    calm = 0
        while ri < rec_steps.shape[0] and rec_steps[ri] == s:
            rec_pos[ri] = pos
            rec_quat[ri] = quat
            ri += 1
    return 0


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def detect_contacts(box_a: Block, box_b: Block, margin: float = 1e-9):
    """Contact manifold between two oriented boxes; empty when separated.

    Returns a list of Contact with the normal pointing from box_a to box_b.
    """
    ra = quat_to_mat(box_a.orientation)
    rb = quat_to_mat(box_b.orientation)
    pts = np.empty((8, 3))
    pens = np.empty(8)
    nrm = np.empty(3)
    cnt = _box_box(np.asarray(box_a.position, dtype=float), ra,
                   np.asarray(box_a.half_extents, dtype=float),
                   np.asarray(box_b.position, dtype=float), rb,
                   np.asarray(box_b.half_extents, dtype=float),
                   margin, pts, pens, nrm)
    return [Contact(point=pts[k].copy(), normal=nrm.copy(), penetration=float(pens[k]))
            for k in range(cnt)]


def step(world: World, config: SimConfig) -> World:
    """Advance the world by one timestep in place."""
    n = world.num_bodies
    cap = 8 * n + 8 * (n * (n - 1) // 2)
    scratch = dict(
        rot=np.empty((n, 3, 3)), iw_inv=np.empty((n, 3, 3)), omega=np.empty((n, 3)),
        ca=np.empty(cap, dtype=np.int64), cb=np.empty(cap, dtype=np.int64),
        cfid=np.empty(cap, dtype=np.int64),
        cpt=np.empty((cap, 3)), cnr=np.empty((cap, 3)), cpen=np.empty(cap),
        r_a=np.empty((cap, 3)), r_b=np.empty((cap, 3)),
        t1=np.empty((cap, 3)), t2=np.empty((cap, 3)),
        kn=np.empty(cap), kt1=np.empty(cap), kt2=np.empty(cap), bias=np.empty(cap),
        jn=np.empty(cap), jt1=np.empty(cap), jt2=np.empty(cap),
        pts=np.empty((8, 3)), pens=np.empty(8), nrm=np.empty(3),
        prev_n=np.zeros(1, dtype=np.int64),
        prev_a=np.empty(cap, dtype=np.int64), prev_b=np.empty(cap, dtype=np.int64),
        prev_f=np.empty(cap, dtype=np.int64),
        prev_jn=np.empty(cap), prev_jt1=np.empty(cap), prev_jt2=np.empty(cap),
    )
    ms = _step_world(world.pos, world.quat, world.vel, world.ang_mom,
                     world.inv_mass, world.inv_inertia_body, world.half_extents,
                     config.dt, config.gravity, config.friction_mu,
                     config.restitution, config.solver_iterations,
                     config.baumgarte_beta, **scratch)
    if ms > _SPEED_LIMIT:
        raise NumericalDivergence(f"speed {ms:.3g} m/s exceeds limit")
    return world


def simulate(scene: Scene, config: Optional[SimConfig] = None,
             record_every: int = 0) -> Trajectory:
    """Run the full simulation and record block poses.

    record_every=0 keeps only the start and end snapshots; k > 0 additionally
    records every k-th step. Deterministic: identical inputs give
    bit-identical trajectories.
    """
    if config is None:
        config = SimConfig()
    world = World.from_scene(scene)
    n_steps = config.num_steps
    if record_every > 0:
        steps = list(range(0, n_steps, record_every))
        if steps[-1] != n_steps:
            steps.append(n_steps)
    else:
        steps = [0, n_steps]
    rec_steps = np.asarray(steps, dtype=np.int64)
    k = rec_steps.shape[0]
    n = world.num_bodies
    rec_pos = np.empty((k, n, 3))
    rec_quat = np.empty((k, n, 4))
    ret = _run_sim(world.pos, world.quat, world.vel, world.ang_mom,
                   world.inv_mass, world.inv_inertia_body, world.half_extents,
                   config.dt, n_steps, config.gravity, config.friction_mu,
                   config.restitution, config.solver_iterations,
                   config.baumgarte_beta, config.settle_early,
                   rec_steps, rec_pos, rec_quat)
    if ret < 0:
        raise NumericalDivergence(
            f"scene {scene.id}: speed limit exceeded at step {-ret}")
    times = rec_steps.astype(np.float64) * config.dt
    return Trajectory(scene_id=scene.id, times=times,
                      positions=rec_pos, orientations=rec_quat)


def trajectory_to_csv(traj: Trajectory) -> str:
    """CSV dump, one row per block per recorded step."""
    lines = ["t,block,px,py,pz,qw,qx,qy,qz"]
    k, n, _ = traj.positions.shape
    for ti in range(k):
        t = traj.times[ti]
        for b in range(n):
            p = traj.positions[ti, b]
            q = traj.orientations[ti, b]
            lines.append(f"{t!r},{b},{p[0]!r},{p[1]!r},{p[2]!r},"
                         f"{q[0]!r},{q[1]!r},{q[2]!r},{q[3]!r}")
    return "\n".join(lines) + "\n"
