"""Median-split bounding volume hierarchy over truncated surfel supports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .gaussians import DEFAULT_R_CUT, GaussianCloud

LEAF_SIZE = 8


@dataclass
class Bvh:
    node_min: np.ndarray
    node_max: np.ndarray
    node_child: np.ndarray  # internal: [left, right]; leaf: [start, end) into prim_order
    node_leaf: np.ndarray
    prim_order: np.ndarray

    @property
    def n_nodes(self):
        return self.node_min.shape[0]


def build_bvh(aabb_min: np.ndarray, aabb_max: np.ndarray) -> Bvh:
    n = aabb_min.shape[0]
    centroids = 0.5 * (aabb_min + aabb_max)
    order = np.arange(n, dtype=np.int64)

    node_min = []
    node_max = []
    node_child = []
    node_leaf = []

    # iterative build; each task is (node slot, start, end) over `order`
    node_min.append(None)
    node_max.append(None)
    node_child.append([0, 0])
    node_leaf.append(0)
    tasks = [(0, 0, n)]
    while tasks:
        slot, start, end = tasks.pop()
        idx = order[start:end]
        bmin = aabb_min[idx].min(axis=0)
        bmax = aabb_max[idx].max(axis=0)
        node_min[slot] = bmin
        node_max[slot] = bmax
        if end - start <= LEAF_SIZE:
            node_leaf[slot] = 1
            node_child[slot] = [start, end]
            continue
        axis = int(np.argmax(bmax - bmin))
        key = centroids[idx, axis]
        local = np.argsort(key, kind="stable")
        order[start:end] = idx[local]
        mid = start + (end - start) // 2
        left = len(node_min)
        right = left + 1
        for _ in range(2):
            node_min.append(None)
            node_max.append(None)
            node_child.append([0, 0])
            node_leaf.append(0)
        node_child[slot] = [left, right]
        tasks.append((left, start, mid))
        tasks.append((right, mid, end))

    return Bvh(
        node_min=np.ascontiguousarray(np.stack(node_min), dtype=np.float64),
        node_max=np.ascontiguousarray(np.stack(node_max), dtype=np.float64),
        node_child=np.ascontiguousarray(np.array(node_child, dtype=np.int64)),
        node_leaf=np.ascontiguousarray(np.array(node_leaf, dtype=np.uint8)),
        prim_order=np.ascontiguousarray(order),
    )


@dataclass
class Scene:
    """Immutable-during-render surfel collection plus its acceleration structure."""

    gaussians: GaussianCloud
    r_cut: float = DEFAULT_R_CUT
    bvh: Bvh = field(default=None, repr=False)
    bounds_min: np.ndarray = None
    bounds_max: np.ndarray = None
    # lazily built packed kernel tables; valid because Scene instances are
    # replaced, never mutated, when the primitive set changes
    _tab: np.ndarray = field(default=None, repr=False, compare=False)
    _tab_trav: np.ndarray = field(default=None, repr=False, compare=False)
    _stab: np.ndarray = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.gaussians)

    def tables(self):
        """Packed per-primitive tables read by the kernels.

        Returns (tab, tab_trav, stab): the intersection table
        [pos(3), normal(3), t_u(3), t_v(3), 1/s_u, 1/s_v, opacity] in
        primitive-id order and in traversal (prim_order) order, and the
        shading table [normal(3), radiance(3), emission, albedo(3)] in id
        order. Scales are stored as reciprocals so the per-candidate test
        multiplies instead of divides; everything else is a plain copy.
        """
        if self._tab is None:
            g = self.gaussians
            tab = np.hstack([g.pos, g.normal, g.t_u, g.t_v, 1.0 / g.scale,
                             g.opacity[:, None]])
            self._tab = np.ascontiguousarray(tab)
            self._tab_trav = np.ascontiguousarray(tab[self.bvh.prim_order])
            self._stab = np.ascontiguousarray(
                np.hstack([g.normal, g.radiance, g.emission[:, None],
                           g.albedo]))
        return self._tab, self._tab_trav, self._stab

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds_max - self.bounds_min))

    def kernel_args(self):
        _, tab_trav, stab = self.tables()
        return (tab_trav, stab)

    def bvh_args(self):
        b = self.bvh
        return (b.node_min, b.node_max, b.node_child, b.node_leaf, b.prim_order)

    def flat_args(self):
        """Single-leaf node table spanning every primitive in index order.

        Traversing this degenerate tree enumerates all primitives through the
        same compiled gather loop as the real tree, so exhaustive queries are
        bitwise identical to accelerated ones by construction while still
        exercising none of the culling logic they are used to check.
        """
        n = len(self.gaussians)
        return (self.bvh.node_min[:1], self.bvh.node_max[:1],
                np.array([[0, n]], dtype=np.int64),
                np.ones(1, dtype=np.uint8),
                np.arange(n, dtype=np.int64))

    def rebuilt(self, gaussians: GaussianCloud = None) -> "Scene":
        return build_accel(self.gaussians if gaussians is None else gaussians,
                           self.r_cut)


def build_accel(gaussians: GaussianCloud, r_cut: float = DEFAULT_R_CUT) -> Scene:
    """Build a traversable scene whose ray queries return a superset of true hits."""
    if not isinstance(gaussians, GaussianCloud):
        gaussians = GaussianCloud.from_gaussians(gaussians)
    if len(gaussians) == 0:
        raise InvalidInputError("cannot build acceleration structure over empty scene")
    if r_cut <= 0 or not np.isfinite(r_cut):
        raise InvalidInputError("r_cut must be positive and finite")
    amin, amax = gaussians.support_aabbs(r_cut)
    bvh = build_bvh(amin, amax)
    return Scene(
        gaussians=gaussians,
        r_cut=float(r_cut),
        bvh=bvh,
        bounds_min=amin.min(axis=0),
        bounds_max=amax.max(axis=0),
    )
