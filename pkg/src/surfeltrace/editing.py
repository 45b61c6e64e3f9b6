"""Declarative scene editing and emission-mask generation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .bvh import Scene, build_accel
from .errors import FormatError, InvalidInputError
from .gaussians import GaussianCloud

DEFAULT_TAU_R_PRESETS = (1.0, 1.5, 2.0)


# ---------------------------------------------------------------------------
# selections (membership by primitive center only)


@dataclass
class Selection:
    kind: str  # "all" | "box" | "sphere"
    box_min: Optional[np.ndarray] = None
    box_max: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    invert: bool = False

    def __post_init__(self):
        if self.kind not in ("all", "box", "sphere"):
            raise InvalidInputError(f"unknown selection kind {self.kind!r}")
        if self.kind == "box":
            self.box_min = np.asarray(self.box_min, dtype=np.float64).reshape(3)
            self.box_max = np.asarray(self.box_max, dtype=np.float64).reshape(3)
            if np.any(self.box_min > self.box_max):
                raise InvalidInputError("selection box has min > max")
        if self.kind == "sphere":
            self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
            if self.radius <= 0:
                raise InvalidInputError("selection sphere radius must be > 0")

    def mask(self, cloud: GaussianCloud) -> np.ndarray:
        p = cloud.pos
        if self.kind == "all":
            m = np.ones(len(cloud), dtype=bool)
        elif self.kind == "box":
            m = np.all((p >= self.box_min) & (p <= self.box_max), axis=1)
        else:
            m = np.linalg.norm(p - self.center, axis=1) <= self.radius
        return ~m if self.invert else m

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "box":
            d["box_min"] = self.box_min.tolist()
            d["box_max"] = self.box_max.tolist()
        elif self.kind == "sphere":
            d["center"] = self.center.tolist()
            d["radius"] = self.radius
        if self.invert:
            d["invert"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Selection":
        return cls(kind=d["kind"], box_min=d.get("box_min"),
                   box_max=d.get("box_max"), center=d.get("center"),
                   radius=float(d.get("radius", 0.0)),
                   invert=bool(d.get("invert", False)))


def select_all() -> Selection:
    return Selection(kind="all")


def select_box(box_min, box_max) -> Selection:
    return Selection(kind="box", box_min=box_min, box_max=box_max)


def select_sphere(center, radius) -> Selection:
    return Selection(kind="sphere", center=center, radius=radius)


# ---------------------------------------------------------------------------
# rigid transforms


def _rotation_from_dict(d) -> np.ndarray:
    rot = np.asarray(d, dtype=np.float64).reshape(3, 3)
    if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
        raise InvalidInputError("transform rotation is not orthonormal")
    if np.linalg.det(rot) < 0:
        raise InvalidInputError("transform rotation is a reflection")
    return rot


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (w, x, y, z) quaternion rows."""
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def _quat_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a proper rotation matrix."""
    tr = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (rot[2, 1] - rot[1, 2]) / s,
                      (rot[0, 2] - rot[2, 0]) / s,
                      (rot[1, 0] - rot[0, 1]) / s])
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
        q = np.array([(rot[2, 1] - rot[1, 2]) / s, 0.25 * s,
                      (rot[0, 1] + rot[1, 0]) / s,
                      (rot[0, 2] + rot[2, 0]) / s])
    elif rot[1, 1] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
        q = np.array([(rot[0, 2] - rot[2, 0]) / s,
                      (rot[0, 1] + rot[1, 0]) / s, 0.25 * s,
                      (rot[1, 2] + rot[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
        q = np.array([(rot[1, 0] - rot[0, 1]) / s,
                      (rot[0, 2] + rot[2, 0]) / s,
                      (rot[1, 2] + rot[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


@dataclass
class RigidTransform:
    """x -> scale * R x + t, with uniform scale only."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = _rotation_from_dict(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0 or not np.isfinite(self.scale):
            raise InvalidInputError("transform scale must be positive and finite")

    def apply_to(self, cloud: GaussianCloud, mask: np.ndarray) -> None:
        cloud.pos[mask] = (cloud.pos[mask] @ self.rotation.T) * self.scale \
            + self.translation
        cloud.scale[mask] *= self.scale
        rq = _quat_from_rotation(self.rotation)
        q = _quat_multiply(np.broadcast_to(rq, (int(mask.sum()), 4)).copy(),
                           cloud.quat[mask])
        cloud.quat[mask] = q / np.linalg.norm(q, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist(),
                "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(
            rotation=np.asarray(d.get("rotation", np.eye(3).reshape(-1)),
                                dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d.get("translation", np.zeros(3)),
                                   dtype=np.float64),
            scale=float(d.get("scale", 1.0)),
        )


# ---------------------------------------------------------------------------
# operations


@dataclass
class EditOp:
    op: str
    selection: Optional[Selection] = None
    transform: Optional[RigidTransform] = None
    rho: Optional[np.ndarray] = None
    e: Optional[float] = None
    r: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    count: int = 0
    path: Optional[str] = None

    _KNOWN = ("delete", "duplicate", "transform", "set_albedo",
              "set_emission", "insert_sphere_emitter", "import")

    def __post_init__(self):
        if self.op not in self._KNOWN:
            raise InvalidInputError(f"unknown edit op {self.op!r}")
        if self.op in ("delete", "duplicate", "transform", "set_albedo",
                       "set_emission") and self.selection is None:
            raise InvalidInputError(f"{self.op} requires a selection")
        if self.op in ("duplicate", "transform") and self.transform is None:
            self.transform = RigidTransform()
        if self.op == "set_albedo":
            self.rho = np.broadcast_to(
                np.asarray(self.rho, dtype=np.float64), (3,)).copy()
            if np.any(self.rho < 0) or np.any(self.rho > 1):
                raise InvalidInputError("albedo must lie in [0, 1]")
        if self.op == "set_emission":
            if self.e is None or self.r is None:
                raise InvalidInputError("set_emission requires both e and r")
            if not (0.0 <= self.e <= 1.0):
                raise InvalidInputError("emission must lie in [0, 1]")
            self.r = np.broadcast_to(
                np.asarray(self.r, dtype=np.float64), (3,)).copy()
            if np.any(self.r < 0):
                raise InvalidInputError("radiance must be non-negative")
        if self.op == "insert_sphere_emitter":
            if self.radius <= 0:
                raise InvalidInputError("emitter radius must be > 0")
            if self.count < 16:
                raise InvalidInputError("emitter needs at least 16 primitives")
            self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
            self.r = np.broadcast_to(
                np.asarray(self.r, dtype=np.float64), (3,)).copy()
        if self.op == "import" and not self.path:
            raise InvalidInputError("import requires a scene path")

    def to_dict(self) -> dict:
        d = {"op": self.op}
        if self.selection is not None:
            d["selection"] = self.selection.to_dict()
        if self.transform is not None:
            d["transform"] = self.transform.to_dict()
        if self.rho is not None:
            d["rho"] = self.rho.tolist()
        if self.e is not None:
            d["e"] = self.e
        if self.r is not None:
            d["r"] = self.r.tolist()
        if self.center is not None:
            d["center"] = self.center.tolist()
        if self.radius:
            d["radius"] = self.radius
        if self.count:
            d["count"] = self.count
        if self.path:
            d["path"] = self.path
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditOp":
        return cls(
            op=d["op"],
            selection=Selection.from_dict(d["selection"]) if "selection" in d else None,
            transform=RigidTransform.from_dict(d["transform"]) if "transform" in d else None,
            rho=d.get("rho"), e=d.get("e"), r=d.get("r"),
            center=d.get("center"), radius=float(d.get("radius", 0.0)),
            count=int(d.get("count", 0)), path=d.get("path"),
        )


@dataclass
class EditScript:
    ops: List[EditOp] = field(default_factory=list)
    name: str = ""
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name, "seed": self.seed,
            "ops": [op.to_dict() for op in self.ops],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EditScript":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"edit script is not valid JSON: {exc}") from exc
        if not isinstance(d.get("ops", None), list):
            raise FormatError("edit script must contain an 'ops' list")
        return cls(ops=[EditOp.from_dict(o) for o in d["ops"]],
                   name=d.get("name", ""), seed=int(d.get("seed", 0)))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "EditScript":
        with open(path) as f:
            return cls.from_json(f.read())


def make_sphere_emitter(center, radius: float, count: int, radiance,
                        overlap: float = 2.0, seed: int = 0) -> GaussianCloud:
    """Emitter shell: primitives on a spherical Fibonacci lattice.

    Each primitive faces radially outward with s = overlap * radius / sqrt(count)
    so neighbouring supports overlap into a closed surface; sigma = 1, e = 1,
    rho = 0 (emitters do not reflect).
    """
    if radius <= 0:
        raise InvalidInputError("radius must be > 0")
    if count < 16:
        raise InvalidInputError("count must be >= 16")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    radiance = np.broadcast_to(np.asarray(radiance, dtype=np.float64), (3,))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    k = np.arange(count, dtype=np.float64)
    # deterministic placement; the seed only de-phases the spiral
    phi = golden * k + (seed % 997) * (2.0 * math.pi / 997.0)
    z = 1.0 - (2.0 * k + 1.0) / count
    rho_xy = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    n = np.stack([rho_xy * np.cos(phi), rho_xy * np.sin(phi), z], axis=1)
    pos = center + radius * n

    # outward normal n; build quaternions rotating +z onto n
    quat = np.empty((count, 4))
    up = np.array([0.0, 0.0, 1.0])
    for i in range(count):
        d = float(np.dot(up, n[i]))
        if d > 1.0 - 1e-12:
            quat[i] = (1.0, 0.0, 0.0, 0.0)
        elif d < -1.0 + 1e-12:
            quat[i] = (0.0, 1.0, 0.0, 0.0)
        else:
            axis = np.cross(up, n[i])
            axis /= np.linalg.norm(axis)
            half = 0.5 * math.acos(max(-1.0, min(1.0, d)))
            quat[i] = (math.cos(half), *(math.sin(half) * axis))

    s = overlap * radius / math.sqrt(count)
    return GaussianCloud(
        pos=pos, scale=np.full((count, 2), s), quat=quat,
        opacity=np.ones(count),
        radiance=np.tile(radiance, (count, 1)),
        emission=np.ones(count),
        albedo=np.zeros((count, 3)),
    )


def _concat_clouds(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    return GaussianCloud(
        pos=np.concatenate([a.pos, b.pos]),
        scale=np.concatenate([a.scale, b.scale]),
        quat=np.concatenate([a.quat, b.quat]),
        opacity=np.concatenate([a.opacity, b.opacity]),
        radiance=np.concatenate([a.radiance, b.radiance]),
        emission=np.concatenate([a.emission, b.emission]),
        albedo=np.concatenate([a.albedo, b.albedo]),
    )


def _subset(cloud: GaussianCloud, mask: np.ndarray) -> GaussianCloud:
    return GaussianCloud(
        pos=cloud.pos[mask].copy(), scale=cloud.scale[mask].copy(),
        quat=cloud.quat[mask].copy(), opacity=cloud.opacity[mask].copy(),
        radiance=cloud.radiance[mask].copy(),
        emission=cloud.emission[mask].copy(),
        albedo=cloud.albedo[mask].copy(),
    )


def apply_edits(scene: Scene, script: EditScript) -> Scene:
    """Apply the script's ops in order; the input scene is left untouched."""
    from .formats import scene_read  # local import to avoid a cycle

    cloud = scene.gaussians.copy()
    for op in script.ops:
        if op.selection is not None:
            mask = op.selection.mask(cloud)
            if op.op in ("delete", "duplicate", "transform", "set_albedo",
                         "set_emission") and not mask.any():
                warnings.warn(f"edit op {op.op!r} selected no primitives")
                continue
        if op.op == "delete":
            # an empty cloud is allowed mid-script (e.g. before an insert)
            cloud = _subset(cloud, ~mask)
        elif op.op == "duplicate":
            dup = _subset(cloud, mask)
            op.transform.apply_to(dup, np.ones(len(dup.pos), dtype=bool))
            cloud = _concat_clouds(cloud, dup)
        elif op.op == "transform":
            op.transform.apply_to(cloud, mask)
        elif op.op == "set_albedo":
            cloud.albedo[mask] = op.rho
        elif op.op == "set_emission":
            cloud.emission[mask] = op.e
            cloud.radiance[mask] = op.r
            if op.e > 0:
                cloud.albedo[mask] = 0.0  # emitters do not reflect
        elif op.op == "insert_sphere_emitter":
            ball = make_sphere_emitter(op.center, op.radius, op.count, op.r,
                                       seed=script.seed)
            cloud = _concat_clouds(cloud, ball) if len(cloud.pos) else ball
        elif op.op == "import":
            imported = scene_read(op.path).copy()
            if op.transform is not None:
                op.transform.apply_to(
                    imported, np.ones(len(imported.pos), dtype=bool))
            cloud = _concat_clouds(cloud, imported) if len(cloud.pos) else imported
    if len(cloud.pos) == 0:
        raise InvalidInputError("edit script removed every primitive")
    return build_accel(cloud, scene.r_cut)


def threshold_emission_mask(image: np.ndarray, tau_R: float,
                            user_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Binary emissive-pixel mask: max linear channel above tau_R, union user mask."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError("expected an HxWx3 linear radiance image")
    mask = (image.max(axis=2) > tau_R)
    if user_mask is not None:
        user_mask = np.asarray(user_mask)
        if user_mask.shape != mask.shape:
            raise InvalidInputError("user mask shape mismatch")
        mask = mask | (user_mask > 0)
    return mask.astype(np.float64)
