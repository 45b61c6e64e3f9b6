"""Bit-exact file formats: scene container, float images, previews, manifests."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import FormatError, InvalidInputError
from .gaussians import GaussianCloud

SCENE_MAGIC = b"SGS2"
SCENE_VERSION = 1

# per-primitive record: 17 little-endian float32, in this declaration order
SCENE_ATTRIBUTES = (
    "p_x", "p_y", "p_z",
    "s_u", "s_v",
    "q_w", "q_x", "q_y", "q_z",
    "sigma",
    "r_r", "r_g", "r_b",
    "e",
    "rho_r", "rho_g", "rho_b",
)
RECORD_BYTES = 4 * len(SCENE_ATTRIBUTES)  # 68


def atomic_write_bytes(path, data: bytes):
    """Write via a sibling temp file + rename so readers never see a torn file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def scene_to_bytes(cloud: GaussianCloud) -> bytes:
    n = len(cloud)
    parts = [SCENE_MAGIC, struct.pack("<II", SCENE_VERSION, n)]
    table = "\n".join(SCENE_ATTRIBUTES).encode("ascii")
    parts.append(struct.pack("<I", len(table)))
    parts.append(table)
    body = np.empty((n, len(SCENE_ATTRIBUTES)), dtype="<f4")
    body[:, 0:3] = cloud.pos
    body[:, 3:5] = cloud.scale
    body[:, 5:9] = cloud.quat
    body[:, 9] = cloud.opacity
    body[:, 10:13] = cloud.radiance
    body[:, 13] = cloud.emission
    body[:, 14:17] = cloud.albedo
    parts.append(body.tobytes())
    return b"".join(parts)


def scene_write(path, cloud: GaussianCloud):
    atomic_write_bytes(path, scene_to_bytes(cloud))


def scene_from_bytes(data: bytes) -> GaussianCloud:
    if len(data) < 12:
        raise FormatError("scene file truncated before header (offset 0)")
    if data[:4] != SCENE_MAGIC:
        raise FormatError(
            f"bad scene magic at offset 0: {data[:4]!r}, expected {SCENE_MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != SCENE_VERSION:
        raise FormatError(
            f"unsupported scene version {version} at offset 4 "
            f"(expected {SCENE_VERSION})")
    (table_len,) = struct.unpack_from("<I", data, 12)
    table_start = 16
    body_start = table_start + table_len
    if len(data) < body_start:
        raise FormatError(f"scene file truncated in attribute table "
                          f"(offset {table_start})")
    try:
        names = tuple(data[table_start:body_start].decode("ascii").split("\n"))
    except UnicodeDecodeError as exc:
        raise FormatError(
            f"attribute table at offset {table_start} is not ascii") from exc
    if names != SCENE_ATTRIBUTES:
        raise FormatError(
            f"attribute table mismatch at offset {table_start}: got {names}")
    expected = body_start + RECORD_BYTES * count
    if len(data) != expected:
        raise FormatError(
            f"scene body has {len(data) - body_start} bytes at offset "
            f"{body_start}, expected {RECORD_BYTES * count}")
    body = np.frombuffer(data, dtype="<f4", offset=body_start).reshape(
        count, len(SCENE_ATTRIBUTES)).astype(np.float64)
    return GaussianCloud(
        pos=body[:, 0:3], scale=body[:, 3:5], quat=body[:, 5:9],
        opacity=body[:, 9], radiance=body[:, 10:13], emission=body[:, 13],
        albedo=body[:, 14:17],
    )


def scene_read(path) -> GaussianCloud:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read scene file {path}: {exc}") from exc
    return scene_from_bytes(data)


def snap_to_storage(cloud: GaussianCloud) -> GaussianCloud:
    """Round every field to the container's float32 grid.

    Scenes produced by generators are snapped so that write -> read is the
    identity on the in-memory arrays too, not just on the byte stream.
    """
    def f32(a):
        return a.astype("<f4").astype(np.float64)

    return GaussianCloud(
        pos=f32(cloud.pos), scale=f32(cloud.scale), quat=f32(cloud.quat),
        opacity=f32(cloud.opacity), radiance=f32(cloud.radiance),
        emission=f32(cloud.emission), albedo=f32(cloud.albedo),
    )


# ---------------------------------------------------------------------------
# portable float map images (PFM, little-endian)


def image_write(path, image: np.ndarray):
    """3-channel (PF) or single-channel (Pf) portable float map, scale -1.0."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf\n"
        data = image[::-1, :]
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF\n"
        data = image[::-1, :, :]
    else:
        raise InvalidInputError(f"unsupported image shape {image.shape}")
    h, w = image.shape[:2]
    payload = header + f"{w} {h}\n-1.0\n".encode("ascii") \
        + data.astype("<f4").tobytes()
    atomic_write_bytes(path, payload)


def image_read(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    try:
        nl1 = data.index(b"\n")
        nl2 = data.index(b"\n", nl1 + 1)
        nl3 = data.index(b"\n", nl2 + 1)
        kind = data[:nl1]
        w, h = (int(x) for x in data[nl1 + 1:nl2].split())
        scale = float(data[nl2 + 1:nl3])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed float-map header in {path}") from exc
    if kind not in (b"PF", b"Pf"):
        raise FormatError(f"unknown float-map kind {kind!r} in {path}")
    if scale > 0:
        raise FormatError(f"big-endian float map not supported ({path})")
    channels = 3 if kind == b"PF" else 1
    body = data[nl3 + 1:]
    expected = w * h * channels * 4
    if len(body) != expected:
        raise FormatError(
            f"float-map body has {len(body)} bytes, expected {expected} ({path})")
    arr = np.frombuffer(body, dtype="<f4")
    if channels == 3:
        arr = arr.reshape(h, w, 3)[::-1, :, :]
    else:
        arr = arr.reshape(h, w)[::-1, :]
    return np.ascontiguousarray(arr, dtype=np.float64)


def linear_to_srgb(image: np.ndarray) -> np.ndarray:
    """Display transfer used for previews and sRGB metrics: clip then gamma."""
    return np.clip(image, 0.0, 1.0) ** (1.0 / 2.2)


def preview_write(path, image: np.ndarray):
    """8-bit preview of a linear image (values above 1 clip to white)."""
    srgb = linear_to_srgb(np.asarray(image, dtype=np.float64))
    u8 = np.round(srgb * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def mask_write(path, mask: np.ndarray):
    """Single-channel 8-bit mask; 255 marks emissive pixels."""
    u8 = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def mask_read(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        raise FormatError(f"mask {path} is not single-channel 8-bit")
    return (np.asarray(img) >= 128).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class ViewRecord:
    camera: Camera
    image: str
    normal: Optional[str] = None
    mask: Optional[str] = None
    split: str = "train"

    def to_dict(self) -> dict:
        d = {"camera": self.camera.to_dict(), "image": self.image,
             "split": self.split}
        if self.normal:
            d["normal"] = self.normal
        if self.mask:
            d["mask"] = self.mask
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViewRecord":
        return cls(camera=Camera.from_dict(d["camera"]), image=d["image"],
                   normal=d.get("normal"), mask=d.get("mask"),
                   split=d.get("split", "train"))


@dataclass
class DatasetManifest:
    views: List[ViewRecord] = field(default_factory=list)
    scene: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def save(self, path):
        payload = json.dumps({
            "scene": self.scene, "meta": self.meta,
            "views": [v.to_dict() for v in self.views],
        }, indent=2).encode("ascii")
        atomic_write_bytes(path, payload)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
        return cls(views=[ViewRecord.from_dict(v) for v in d["views"]],
                   scene=d.get("scene"), meta=d.get("meta", {}))

    def resolve(self, base) -> "DatasetManifest":
        """Return a copy with all relative paths resolved against `base`."""
        base = Path(base)
        out = DatasetManifest(scene=self.scene, meta=dict(self.meta))
        if self.scene:
            out.scene = str(base / self.scene)
        for v in self.views:
            out.views.append(ViewRecord(
                camera=v.camera, image=str(base / v.image),
                normal=str(base / v.normal) if v.normal else None,
                mask=str(base / v.mask) if v.mask else None,
                split=v.split))
        return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class PsnrResult:
    psnr_db: float
    mse: float
    exact: bool


def metrics_psnr(a: np.ndarray, b: np.ndarray, space: str = "srgb") -> PsnrResult:
    """Peak signal-to-noise ratio after the selected transfer and clipping."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if space == "srgb":
        a = linear_to_srgb(a)
        b = linear_to_srgb(b)
    elif space == "linear":
        a = np.clip(a, 0.0, 1.0)
        b = np.clip(b, 0.0, 1.0)
    else:
        raise InvalidInputError(f"unknown metric space {space!r}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrResult(psnr_db=math.inf, mse=0.0, exact=True)
    return PsnrResult(psnr_db=10.0 * math.log10(1.0 / mse), mse=mse, exact=False)
