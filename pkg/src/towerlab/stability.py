"""Stability labels for towers, from simulation and from static analysis.

A tower is Unstable when any block's center moves more than a displacement
threshold between the start and the end of the simulation. Two analytic
oracles are provided that never run the simulator: a linear-feasibility
check of static equilibrium (contact forces inside linearized friction
pyramids balancing gravity on every block), and a fast prefix-center-of-mass
test valid only for single-column towers.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .geom import box_vertices, rect_overlap
from .physics import SimConfig, Trajectory, block_mass_inertia, detect_contacts, simulate
from .scenegen import Scene

_TOUCH_TOL = 1e-6


class StabilityLabel(enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class StabilityConfig:
    tau: float = 0.02  # meters of center displacement that count as movement

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


class MissingEndpoint(ValueError):
    """Trajectory lacks the start or end snapshot."""


class DegenerateContact(RuntimeError):
    """A zero-area support interface makes the feasibility problem ill-posed."""


class NotAChain(RuntimeError):
    """The support graph is not a single bottom-up column."""


def label_from_trajectory(traj: Trajectory,
                          cfg: StabilityConfig = StabilityConfig()) -> StabilityLabel:
    """Unstable iff any block center moved more than tau, start to end."""
    if traj.positions is None or traj.positions.shape[0] < 2:
        raise MissingEndpoint("trajectory needs snapshots at t=0 and t=T")
    disp = np.linalg.norm(traj.positions[-1] - traj.positions[0], axis=1)
    return StabilityLabel.UNSTABLE if float(np.max(disp)) > cfg.tau else StabilityLabel.STABLE


def label_scene(scene: Scene, sim_config: Optional[SimConfig] = None,
                cfg: StabilityConfig = StabilityConfig()) -> StabilityLabel:
    """Simulate and label in one call."""
    return label_from_trajectory(simulate(scene, sim_config), cfg)


def _gather_static_contacts(scene: Scene):
    """Contact points and normals for the scene as placed.

    Returns a list of (body_a, body_b, points (k,3), normal (3,)) with
    body index -1 meaning the ground plane. Ground contacts are the box
    corners at z=0; block-block contacts reuse the collision manifold with
    a touch tolerance.
    """
    contacts = []
    blocks = scene.blocks
    for i, blk in enumerate(blocks):
        verts = box_vertices(blk.position, blk.orientation, blk.half_extents)
        low = verts[np.abs(verts[:, 2]) <= _TOUCH_TOL]
        if low.shape[0] > 0:
            pts = low.copy()
            pts[:, 2] = 0.0
            contacts.append((-1, i, pts, np.array([0.0, 0.0, 1.0])))
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            manifold = detect_contacts(blocks[i], blocks[j], margin=_TOUCH_TOL)
            if not manifold:
                continue
            pts = np.array([c.point for c in manifold])
            normal = manifold[0].normal
            if pts.shape[0] >= 3:
                area = _polygon_area(pts, normal)
            else:
                area = 0.0
            if area < 1e-12:
                raise DegenerateContact(
                    f"zero-area interface between blocks {i} and {j}")
            contacts.append((i, j, pts, normal))
    return contacts


def _polygon_area(pts: np.ndarray, normal: np.ndarray) -> float:
    center = pts.mean(axis=0)
    area = 0.0
    rel = pts - center
    k = pts.shape[0]
    for a in range(k):
        cross = np.cross(rel[a], rel[(a + 1) % k])
        area += 0.5 * abs(float(np.dot(cross, normal)))
    return area


def static_equilibrium_check(scene: Scene, mu: float = 0.5) -> StabilityLabel:
    """Linear feasibility of static equilibrium under gravity.

    Unknowns are a normal force (>= 0) and two tangential forces (inside a
    four-sided friction pyramid |t| <= mu * n) at every contact point; the
    scene is Stable iff some assignment balances force and torque on every
    block. Solved with an LP with a zero objective.
    """
    blocks = scene.blocks
    n_blocks = len(blocks)
    if n_blocks == 0:
        return StabilityLabel.STABLE
    contacts = _gather_static_contacts(scene)
    points = []  # (body_a, body_b, point, normal, t1, t2)
    for a, b, pts, normal in contacts:
        t1, t2 = _tangent_basis(normal)
        for p in pts:
            points.append((a, b, p, normal, t1, t2))
    n_pts = len(points)
    if n_pts == 0:
        return StabilityLabel.UNSTABLE  # nothing touches the ground

    g = 9.81
    n_vars = 3 * n_pts  # (n, u, v) per contact point
    a_eq = np.zeros((6 * n_blocks, n_vars))
    b_eq = np.zeros(6 * n_blocks)
    for bi, blk in enumerate(blocks):
        mass, _ = block_mass_inertia(blk.half_extents)
        b_eq[6 * bi + 2] = mass * g  # contact forces must carry the weight
    for k, (a, b, p, normal, t1, t2) in enumerate(points):
        for body, sign in ((a, -1.0), (b, 1.0)):
            if body < 0:
                continue
            com = blocks[body].position
            arm = p - com
            for col, direction in ((3 * k, normal), (3 * k + 1, t1), (3 * k + 2, t2)):
                f = sign * direction
                a_eq[6 * body:6 * body + 3, col] = f
                a_eq[6 * body + 3:6 * body + 6, col] = np.cross(arm, f)
    # friction pyramid: +-u <= mu n, +-v <= mu n
    a_ub = np.zeros((4 * n_pts, n_vars))
    for k in range(n_pts):
        for r, (col, s) in enumerate(((3 * k + 1, 1.0), (3 * k + 1, -1.0),
                                      (3 * k + 2, 1.0), (3 * k + 2, -1.0))):
            a_ub[4 * k + r, col] = s
            a_ub[4 * k + r, 3 * k] = -mu
    bounds = []
    for k in range(n_pts):
        bounds.extend([(0, None), (None, None), (None, None)])
    res = linprog(np.zeros(n_vars), A_ub=a_ub, b_ub=np.zeros(4 * n_pts),
                  A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status == 0:
        return StabilityLabel.STABLE
    if res.status == 2:
        return StabilityLabel.UNSTABLE
    raise RuntimeError(f"equilibrium LP failed with status {res.status}: {res.message}")


def _tangent_basis(normal: np.ndarray):
    a = np.abs(normal)
    if a[0] <= a[1] and a[0] <= a[2]:
        t1 = np.array([0.0, -normal[2], normal[1]])
    elif a[1] <= a[2]:
        t1 = np.array([normal[2], 0.0, -normal[0]])
    else:
        t1 = np.array([-normal[1], normal[0], 0.0])
    t1 = t1 / np.linalg.norm(t1)
    return t1, np.cross(normal, t1)


def com_support_check(scene: Scene) -> StabilityLabel:
    """Prefix center-of-mass test for single-column towers.

    Valid only when every block has exactly one support and the supports
    form a chain; raises NotAChain otherwise. Stable iff at every interface
    the combined center of mass of everything above projects strictly
    inside the contact rectangle.
    """
    blocks = scene.blocks
    n = len(blocks)
    if n == 0:
        return StabilityLabel.STABLE
    support = [None] * n  # -1 ground, else block index
    for i, blk in enumerate(blocks):
        bottom = blk.position[2] - blk.half_extents[2]
        found = []
        if abs(bottom) <= _TOUCH_TOL:
            found.append(-1)
        fi = _xy_rect(blk)
        for j, other in enumerate(blocks):
            if j == i:
                continue
            top = other.position[2] + other.half_extents[2]
            if abs(top - bottom) <= _TOUCH_TOL and rect_overlap(fi, _xy_rect(other)):
                found.append(j)
        if len(found) != 1:
            raise NotAChain(f"block {i} has {len(found)} supports")
        support[i] = found[0]
    children = {}
    for i, sup in enumerate(support):
        if sup in children:
            raise NotAChain(f"support {sup} carries more than one block")
        children[sup] = i
    if -1 not in children:
        raise NotAChain("no block rests on the ground")

    order = [children[-1]]
    while order[-1] in children:
        order.append(children[order[-1]])
    if len(order) != n:
        raise NotAChain("support graph is not a single column")

    masses = np.array([block_mass_inertia(b.half_extents)[0] for b in blocks])
    for idx, i in enumerate(order):
        above = order[idx:]
        m = masses[above]
        com = (m[:, None] * np.array([blocks[k].position for k in above])).sum(axis=0) / m.sum()
        sup = support[i]
        rect = _xy_rect(blocks[i]) if sup == -1 else rect_overlap(
            _xy_rect(blocks[i]), _xy_rect(blocks[sup]))
        if rect is None:
            raise DegenerateContact(f"empty interface under block {i}")
        if not (rect[0] < com[0] < rect[1] and rect[2] < com[1] < rect[3]):
            return StabilityLabel.UNSTABLE
    return StabilityLabel.STABLE


def _xy_rect(blk):
    p, h = blk.position, blk.half_extents
    return p[0] - h[0], p[0] + h[0], p[1] - h[1], p[1] + h[1]
