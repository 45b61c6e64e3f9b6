import math
import struct

import numpy as np
import pytest

from conftest import random_cloud
from surfeltrace import (Camera, DatasetManifest, FormatError,
                         InvalidInputError, ViewRecord, image_read,
                         image_write, mask_read, mask_write, metrics_psnr,
                         preview_write, scene_read, scene_write)
from surfeltrace.formats import (RECORD_BYTES, SCENE_ATTRIBUTES, SCENE_MAGIC,
                                 SCENE_VERSION, linear_to_srgb,
                                 scene_from_bytes, scene_to_bytes,
                                 snap_to_storage)
from surfeltrace.gaussians import GaussianCloud

# serialized form of _golden_cloud() below, frozen so any layout change is
# caught even if write and read drift together
GOLDEN_SCENE_HEX = (
    "53475332010000000100000049000000705f780a705f790a705f7a0a735f750a735f76"
    "0a715f770a715f780a715f790a715f7a0a7369676d610a725f720a725f670a725f620a"
    "650a72686f5f720a72686f5f670a72686f5f620000003f0000a0bf000000400000403f"
    "0000003f0000803f0000000000000000000000000000603f0000803f00000040000080"
    "400000803e0000003e0000c03e0000203f"
)


def _golden_cloud():
    # every value is exactly representable in float32
    return GaussianCloud(
        pos=np.array([[0.5, -1.25, 2.0]]), scale=np.array([[0.75, 0.5]]),
        quat=np.array([[1.0, 0.0, 0.0, 0.0]]), opacity=np.array([0.875]),
        radiance=np.array([[1.0, 2.0, 4.0]]), emission=np.array([0.25]),
        albedo=np.array([[0.125, 0.375, 0.625]]))


def test_golden_scene_bytes():
    assert scene_to_bytes(_golden_cloud()).hex() == GOLDEN_SCENE_HEX


def test_golden_scene_layout_by_hand():
    # rebuild the expected stream with struct, independently of the writer
    table = "\n".join(SCENE_ATTRIBUTES).encode("ascii")
    expected = SCENE_MAGIC + struct.pack("<II", SCENE_VERSION, 1) \
        + struct.pack("<I", len(table)) + table \
        + struct.pack("<17f", 0.5, -1.25, 2.0, 0.75, 0.5, 1, 0, 0, 0,
                      0.875, 1, 2, 4, 0.25, 0.125, 0.375, 0.625)
    assert scene_to_bytes(_golden_cloud()) == expected


def test_record_size_arithmetic():
    assert RECORD_BYTES == 68
    header = 16 + len("\n".join(SCENE_ATTRIBUTES))
    total = header + 68 * 500_000
    assert total / 1e6 == pytest.approx(34.0, rel=0.001)


def test_scene_round_trip_bitwise(tmp_path):
    cloud = snap_to_storage(random_cloud(np.random.default_rng(0), 37))
    path = tmp_path / "scene.sgs"
    scene_write(path, cloud)
    back = scene_read(path)
    assert scene_to_bytes(back) == scene_to_bytes(cloud)
    for name in ("pos", "scale", "quat", "opacity", "radiance", "emission",
                 "albedo"):
        assert np.array_equal(getattr(back, name), getattr(cloud, name)), name


def test_corrupted_magic_names_offset():
    data = bytearray(bytes.fromhex(GOLDEN_SCENE_HEX))
    data[0] = 0x58
    with pytest.raises(FormatError, match="offset 0"):
        scene_from_bytes(bytes(data))


def test_corrupted_version_names_offset():
    data = bytearray(bytes.fromhex(GOLDEN_SCENE_HEX))
    data[4] = 9
    with pytest.raises(FormatError, match="offset 4"):
        scene_from_bytes(bytes(data))


def test_corrupted_attribute_table_names_offset():
    data = bytearray(bytes.fromhex(GOLDEN_SCENE_HEX))
    data[20] ^= 0xFF  # inside the attribute table
    with pytest.raises(FormatError, match="offset 16"):
        scene_from_bytes(bytes(data))


def test_truncated_body_reports_offsets():
    data = bytes.fromhex(GOLDEN_SCENE_HEX)[:-4]
    with pytest.raises(FormatError, match="expected 68"):
        scene_from_bytes(data)


def test_pfm_round_trip_three_channel(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [4.0, 0.25, 2.0]],
                    [[1.5, 0.0, 0.5], [0.125, 8.0, 1.0]]])
    path = tmp_path / "im.pfm"
    image_write(path, img)
    back = image_read(path)
    assert np.array_equal(back, img)  # all values float32-exact


def test_pfm_round_trip_single_channel(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 4.0]])
    path = tmp_path / "im.pfm"
    image_write(path, img)
    assert np.array_equal(image_read(path), img)


def test_pfm_header_fields(tmp_path):
    path = tmp_path / "im.pfm"
    image_write(path, np.zeros((3, 5, 3)))
    raw = path.read_bytes()
    assert raw.startswith(b"PF\n5 3\n-1.0\n")
    assert len(raw) == 12 + 3 * 5 * 3 * 4


def test_pfm_rows_stored_bottom_up(tmp_path):
    img = np.zeros((2, 1))
    img[0, 0] = 7.0  # top row in memory
    path = tmp_path / "im.pfm"
    image_write(path, img)
    body = path.read_bytes().split(b"\n", 3)[3]
    first, second = np.frombuffer(body, dtype="<f4")
    assert first == 0.0 and second == 7.0  # bottom row comes first on disk


def test_pfm_malformed_rejected(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"P6\n2 2\n-1.0\n" + b"\0" * 16)
    with pytest.raises(FormatError):
        image_read(path)
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 7)
    with pytest.raises(FormatError, match="expected 16"):
        image_read(path)


def test_preview_clips_to_white(tmp_path):
    from PIL import Image
    img = np.zeros((1, 3, 3))
    img[0, 0] = 1.0
    img[0, 1] = 4.0   # above peak: clips, does not wrap
    img[0, 2] = 0.5
    path = tmp_path / "p.png"
    preview_write(path, img)
    px = np.asarray(Image.open(path))
    assert tuple(px[0, 0]) == (255, 255, 255)
    assert tuple(px[0, 1]) == (255, 255, 255)
    expect = round(0.5 ** (1 / 2.2) * 255)
    assert tuple(px[0, 2]) == (expect,) * 3


def test_mask_round_trip(tmp_path):
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    path = tmp_path / "m.png"
    mask_write(path, mask)
    assert np.array_equal(mask_read(path), mask)
    from PIL import Image
    assert np.asarray(Image.open(path)).max() == 255


def test_manifest_round_trip_and_resolve(tmp_path):
    cam = Camera(width=8, height=6, fx=4, fy=4, cx=4, cy=3,
                 rotation=np.eye(3), center=np.array([1.0, 2.0, 3.0]))
    man = DatasetManifest(
        scene="scene.sgs", meta={"seed": 3},
        views=[ViewRecord(camera=cam, image="view_000.pfm",
                          normal="normal_000.pfm", mask="mask_000.png",
                          split="test")])
    path = tmp_path / "manifest.json"
    man.save(path)
    back = DatasetManifest.load(path)
    assert back.scene == "scene.sgs"
    assert back.meta == {"seed": 3}
    v = back.views[0]
    assert (v.image, v.normal, v.mask, v.split) == \
        ("view_000.pfm", "normal_000.pfm", "mask_000.png", "test")
    assert np.allclose(v.camera.rotation, np.eye(3))
    assert np.allclose(v.camera.center, [1, 2, 3])
    resolved = back.resolve(tmp_path)
    assert resolved.views[0].image == str(tmp_path / "view_000.pfm")
    assert resolved.scene == str(tmp_path / "scene.sgs")


def test_manifest_bad_json_rejected(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        DatasetManifest.load(path)


def test_psnr_known_values():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    # linear space: MSE = 0.01 -> exactly 20 dB
    res = metrics_psnr(a, b, space="linear")
    assert res.psnr_db == pytest.approx(20.0, abs=1e-12)
    assert not res.exact
    # srgb space applies the display transfer first
    d = 0.1 ** (1 / 2.2)
    res = metrics_psnr(a, b, space="srgb")
    assert res.psnr_db == pytest.approx(10 * math.log10(1 / d ** 2), abs=1e-9)


def test_psnr_exact_match_flag():
    a = np.random.default_rng(0).uniform(0, 1, (4, 4, 3))
    res = metrics_psnr(a, a.copy())
    assert res.exact and math.isinf(res.psnr_db) and res.mse == 0.0
    with pytest.raises(InvalidInputError):
        metrics_psnr(a, a[:2])
    with pytest.raises(InvalidInputError):
        metrics_psnr(a, a, space="hsv")


def test_srgb_transfer_clips_negative_and_above_one():
    x = np.array([-0.5, 0.0, 1.0, 2.0])
    y = linear_to_srgb(x)
    assert np.array_equal(y, [0.0, 0.0, 1.0, 1.0])
