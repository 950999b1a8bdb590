"""Procedural generation of block-tower scenes.

Scenes come in 16 groups: block count {4, 6, 10, 14} x stacking depth
{2D, 3D} x block size {Uni, NonUni}. Blocks are rectangular cuboids placed
bottom-up: each one rests flat on the ground or on the top face of an
earlier block, with a strictly positive footprint overlap and no
interpenetration anywhere. 2D scenes are confined to the y = 0 plane.

Blocks stay axis-aligned; a lying block is realized by permuting its half
extents rather than storing a rotated quaternion, which keeps every contact
manifold a plain axis-aligned rectangle.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .geom import IDENTITY_QUAT, box_separation, box_vertices

# Canonical block: 0.2 m x 0.2 m x 0.6 m full extents, stored as halves.
CANONICAL_HALF = np.array([0.1, 0.1, 0.3])
GROUND_HALF = 0.6  # placement area is a 1.2 m square centered on the origin

BLOCK_COUNTS = (4, 6, 10, 14)
DEPTH_MODES = ("2D", "3D")
SIZE_MODES = ("Uni", "NonUni")

# Balancing policies for generate_group
BALANCE_NONE = None
FIFTY_FIFTY = "fifty_fifty"
_MINORITY_FLOOR = 0.45

_CONTACT_TOL = 1e-6
_MAX_PLACEMENT_ATTEMPTS = 1000

# Placement mixture. Each scene draws a messiness m: half the scenes are
# tidy (m near 0: offsets pulled back toward the sub-tower root, which stops
# block positions random-walking outward with height), half are messy
# (m up to 1: offsets anywhere with positive footprint overlap). Purely
# uniform offsets leave tall groups with essentially zero stable towers,
# which makes class balancing unreachable.
_TIDY_BAND = 0.5  # tidy offsets stay within this fraction of the support half-extent
_TIDY_SIGMA = 0.3  # spread of the offset around its aim point, as a band fraction


class PlacementExhausted(RuntimeError):
    """Raised when a block cannot be placed after the attempt budget."""


class BalanceUnreachable(RuntimeError):
    """Raised when rejection sampling cannot reach the class-balance floor."""


@dataclass(frozen=True)
class SizeJitterParams:
    """Truncated-normal size jitter: N(1, sigma^2) clipped to [1-delta, 1+delta]."""

    sigma: float = 0.1
    delta: float = 0.2

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")


@dataclass(frozen=True)
class SceneParams:
    num_blocks: int
    depth_mode: str
    size_mode: str
    seed: int

    def __post_init__(self):
        if self.num_blocks not in BLOCK_COUNTS:
            raise ValueError(f"num_blocks must be one of {BLOCK_COUNTS}")
        if self.depth_mode not in DEPTH_MODES:
            raise ValueError(f"depth_mode must be one of {DEPTH_MODES}")
        if self.size_mode not in SIZE_MODES:
            raise ValueError(f"size_mode must be one of {SIZE_MODES}")

    @property
    def group(self) -> str:
        return group_tag(self.num_blocks, self.depth_mode, self.size_mode)


def group_tag(num_blocks: int, depth_mode: str, size_mode: str) -> str:
    return f"{num_blocks}B-{depth_mode}-{size_mode}"


def parse_group_tag(tag: str):
    blocks, depth, size = tag.split("-")
    return int(blocks[:-1]), depth, size


# Canonical ordering: block count major, then Uni before NonUni, 2D before 3D.
ALL_GROUPS = tuple(
    group_tag(n, d, s) for n in BLOCK_COUNTS for s in SIZE_MODES for d in DEPTH_MODES
)


@dataclass
class Block:
    half_extents: np.ndarray
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __eq__(self, other):
        return (isinstance(other, Block)
                and np.array_equal(self.half_extents, other.half_extents)
                and np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))


@dataclass
class Scene:
    id: str
    params: Optional[SceneParams]
    blocks: list

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.id == other.id
                and self.params == other.params and self.blocks == other.blocks)


@dataclass(frozen=True)
class Violation:
    kind: str  # "interpenetration" | "unsupported" | "below_ground"
    blocks: tuple
    detail: str = ""


def _truncated_scale(jitter: SizeJitterParams, rng: np.random.Generator) -> float:
    # Rejection sampling keeps the exact truncated-normal shape.
    while True:
        s = rng.normal(1.0, jitter.sigma)
        if 1.0 - jitter.delta <= s <= 1.0 + jitter.delta:
            return s


def sample_block_dims(size_mode: str, jitter: SizeJitterParams,
                      rng: np.random.Generator) -> np.ndarray:
    """Local-frame half extents (short, short, long).

    NonUni scales the first short extent and the long extent; the second
    short extent stays canonical so 2D scenes keep a canonical depth.
    """
    if size_mode == "Uni":
        return CANONICAL_HALF.copy()
    if size_mode != "NonUni":
        raise ValueError(f"unknown size_mode {size_mode!r}")
    sx = _truncated_scale(jitter, rng)
    sz = _truncated_scale(jitter, rng)
    return np.array([CANONICAL_HALF[0] * sx, CANONICAL_HALF[1], CANONICAL_HALF[2] * sz])


def _orient_extents(local: np.ndarray, depth_mode: str,
                    rng: np.random.Generator) -> np.ndarray:
    """Assign local extents (a, b, c) to world axes by choosing the long axis.

    b (the unjittered short extent) always lands on an axis that keeps 2D
    scenes canonical along depth. All permutations are realizable by
    rotations of the box, so the stored quaternion stays the identity.
    """
    a, b, c = local
    if depth_mode == "2D":
        choices = ((a, b, c),  # upright
                   (c, b, a))  # long axis along width
        return np.array(choices[int(rng.integers(2))])
    choices = ((a, b, c),  # upright
               (c, b, a),  # long axis along width
               (a, c, b))  # long axis along depth
    return np.array(choices[int(rng.integers(3))])


def _footprint(block: Block):
    p, h = block.position, block.half_extents
    return p[0] - h[0], p[0] + h[0], p[1] - h[1], p[1] + h[1]


def _collides(blocks: Sequence[Block], pos: np.ndarray, he: np.ndarray) -> bool:
    for other in blocks:
        gaps = np.abs(pos - other.position) - (he + other.half_extents)
        if np.all(gaps < -1e-9):
            return True
    return False


def _exposed_supports(blocks: Sequence[Block]):
    """Candidate supports: ground (-1) plus every block whose top face is not
    fully covered by a single block resting on it."""
    candidates = [-1]
    for j, blk in enumerate(blocks):
        top = blk.position[2] + blk.half_extents[2]
        fj = _footprint(blk)
        covered = False
        for k, other in enumerate(blocks):
            if k == j:
                continue
            bottom = other.position[2] - other.half_extents[2]
            if abs(bottom - top) < _CONTACT_TOL:
                fk = _footprint(other)
                if fk[0] <= fj[0] and fk[1] >= fj[1] and fk[2] <= fj[2] and fk[3] >= fj[3]:
                    covered = True
                    break
        if not covered:
            candidates.append(j)
    return candidates


def generate_scene(params: SceneParams, rng: Optional[np.random.Generator] = None,
                   jitter: SizeJitterParams = SizeJitterParams()) -> Scene:
    """Build one tower bottom-up under the non-overlap constraint.

    Deterministic: with rng omitted, the stream is seeded from params.seed.
    Raises PlacementExhausted if a block cannot be placed in 1000 attempts.
    """
    if rng is None:
        rng = np.random.default_rng(params.seed)
    two_d = params.depth_mode == "2D"
    # scene-level messiness: tidy scenes cluster near m=0, messy spread to 1
    if rng.random() < 0.5:
        mess = 0.25 * rng.random() ** 2
    else:
        mess = 0.3 + 0.7 * rng.random()
    blocks: list[Block] = []
    roots: list[int] = []  # ground ancestor of each block's support chain
    for i in range(params.num_blocks):
        placed = False
        for _ in range(_MAX_PLACEMENT_ATTEMPTS):
            local = sample_block_dims(params.size_mode, jitter, rng)
            he = _orient_extents(local, params.depth_mode, rng)
            candidates = _exposed_supports(blocks)
            sup_idx = candidates[int(rng.integers(len(candidates)))]
            if sup_idx < 0:
                x = rng.uniform(-GROUND_HALF + he[0], GROUND_HALF - he[0])
                y = 0.0 if two_d else rng.uniform(-GROUND_HALF + he[1], GROUND_HALF - he[1])
                z = he[2]
                root = i
            else:
                sup = blocks[sup_idx]
                root = roots[sup_idx]
                x, span_x = _draw_offset(rng, sup, blocks[root], he, 0, mess)
                if span_x - abs(x - sup.position[0]) <= 1e-9:
                    continue  # zero-width footprint overlap
                if two_d:
                    y = 0.0
                else:
                    y, span_y = _draw_offset(rng, sup, blocks[root], he, 1, mess)
                    if span_y - abs(y - sup.position[1]) <= 1e-9:
                        continue
                z = sup.position[2] + sup.half_extents[2] + he[2]
            pos = np.array([x, y, z])
            if not _collides(blocks, pos, he):
                blocks.append(Block(he, pos))
                roots.append(root)
                placed = True
                break
        if not placed:
            raise PlacementExhausted(
                f"could not place block {i} of {params.group} seed={params.seed}")
    return Scene(id=f"{params.group}-seed{params.seed}", params=params, blocks=blocks)


def _draw_offset(rng, sup: Block, root: Block, he: np.ndarray, axis: int, mess: float):
    """Center coordinate for a block stacked on `sup` along one horizontal axis.

    Tidy placements aim at the sub-tower root inside a narrow band over the
    support; messy placements widen toward the full positive-overlap span.
    """
    hs = sup.half_extents[axis]
    span = hs + he[axis]
    tidy_half = _TIDY_BAND * hs
    band = (1.0 - mess) * tidy_half + mess * span
    aim = (1.0 - mess) * float(np.clip(root.position[axis],
                                       sup.position[axis] - tidy_half,
                                       sup.position[axis] + tidy_half)) \
        + mess * sup.position[axis]
    v = aim + rng.normal(0.0, (_TIDY_SIGMA + 0.3 * mess) * band)
    v = float(np.clip(v, sup.position[axis] - band, sup.position[axis] + band))
    return v, span


def validate_scene(scene: Scene) -> list:
    """Check the scene invariants; returns one Violation per breach."""
    violations = []
    blocks = scene.blocks
    for i, blk in enumerate(blocks):
        if np.min(_world_vertices_z(blk)) < -_CONTACT_TOL:
            violations.append(Violation("below_ground", (i,), "vertex below z=0"))
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            sep = box_separation(
                blocks[i].position, blocks[i].orientation, blocks[i].half_extents,
                blocks[j].position, blocks[j].orientation, blocks[j].half_extents)
            if sep < -_CONTACT_TOL:
                violations.append(Violation(
                    "interpenetration", (i, j), f"overlap {-sep:.2e} m"))
    verts = [box_vertices(b.position, b.orientation, b.half_extents) for b in blocks]
    for i, blk in enumerate(blocks):
        bottom = float(np.min(verts[i][:, 2]))
        if abs(bottom) <= _CONTACT_TOL:
            continue  # rests on the ground plane
        fi = _aabb_footprint(verts[i])
        supported = False
        for j, other in enumerate(blocks):
            if j == i:
                continue
            top = float(np.max(verts[j][:, 2]))
            if abs(top - bottom) <= _CONTACT_TOL:
                fo = _aabb_footprint(verts[j])
                ox = min(fi[1], fo[1]) - max(fi[0], fo[0])
                oy = min(fi[3], fo[3]) - max(fi[2], fo[2])
                if ox > 1e-9 and oy > 1e-9:
                    supported = True
                    break
        if not supported:
            violations.append(Violation("unsupported", (i,), "no positive footprint overlap"))
    return violations


def _aabb_footprint(verts: np.ndarray):
    return (float(np.min(verts[:, 0])), float(np.max(verts[:, 0])),
            float(np.min(verts[:, 1])), float(np.max(verts[:, 1])))


def _world_vertices_z(blk: Block) -> np.ndarray:
    return box_vertices(blk.position, blk.orientation, blk.half_extents)[:, 2]


def derive_seed(base_seed: int, tag: str, index: int) -> int:
    """Stable 64-bit sub-seed; independent of numpy's hashing."""
    digest = hashlib.blake2b(f"{base_seed}:{tag}:{index}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generate_group(num_blocks: int, depth_mode: str, size_mode: str, count: int,
                   balance: Optional[str] = FIFTY_FIFTY,
                   labeler: Optional[Callable[[Scene], object]] = None,
                   base_seed: int = 0,
                   jitter: SizeJitterParams = SizeJitterParams()) -> list:
    """Generate `count` scenes for one group, ids "<tag>-0000".. in order.

    With balance=FIFTY_FIFTY and a labeler, candidates are rejection-sampled
    until each label class holds at least 45% of the result. Raises
    BalanceUnreachable after 50 * count candidates.
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    tag = group_tag(num_blocks, depth_mode, size_mode)
    balancing = balance == FIFTY_FIFTY and labeler is not None
    floor_n = math.ceil(_MINORITY_FLOOR * count)
    cap = count - floor_n
    accepted: list[Scene] = []
    class_counts: dict = {}
    candidate = 0
    budget = 50 * count
    while len(accepted) < count:
        if candidate >= budget:
            raise BalanceUnreachable(
                f"{tag}: {len(accepted)}/{count} after {budget} candidates")
        seed = derive_seed(base_seed, tag, candidate)
        candidate += 1
        try:
            scene = generate_scene(
                SceneParams(num_blocks, depth_mode, size_mode, seed), jitter=jitter)
        except PlacementExhausted:
            continue
        if balancing:
            label = labeler(scene)
            if class_counts.get(label, 0) >= cap:
                continue
            class_counts[label] = class_counts.get(label, 0) + 1
        elif labeler is not None:
            labeler(scene)
        accepted.append(scene)
    return [replace(s, id=f"{tag}-{i:04d}") for i, s in enumerate(accepted)]


def scene_to_dict(scene: Scene) -> dict:
    d = {
        "id": scene.id,
        "params": None if scene.params is None else {
            "num_blocks": scene.params.num_blocks,
            "depth_mode": scene.params.depth_mode,
            "size_mode": scene.params.size_mode,
            "seed": scene.params.seed,
        },
        "blocks": [
            {
                "half_extents": [float(v) for v in b.half_extents],
                "position": [float(v) for v in b.position],
                "orientation": [float(v) for v in b.orientation],
            }
            for b in scene.blocks
        ],
    }
    return d


def scene_to_json(scene: Scene) -> str:
    # json emits floats via repr: exact round-trip, well past 9 significant digits
    return json.dumps(scene_to_dict(scene))


def scene_from_dict(d: dict) -> Scene:
    params = None
    if d.get("params") is not None:
        p = d["params"]
        params = SceneParams(p["num_blocks"], p["depth_mode"], p["size_mode"], p["seed"])
    blocks = [
        Block(np.array(b["half_extents"], dtype=float),
              np.array(b["position"], dtype=float),
              np.array(b["orientation"], dtype=float))
        for b in d["blocks"]
    ]
    return Scene(id=d["id"], params=params, blocks=blocks)


def scene_from_json(text: str) -> Scene:
    return scene_from_dict(json.loads(text))
