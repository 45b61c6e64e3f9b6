"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 I/O error.
Progress goes to standard error; result values and paths to standard output.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .bvh import build_accel
from .editing import EditScript, threshold_emission_mask
from .errors import FormatError, InvalidInputError, NumericFailure
from .formats import (DatasetManifest, image_read, image_write, mask_read,
                      mask_write, metrics_psnr, preview_write, scene_read,
                      scene_write, snap_to_storage)
from .synthetic import BoxSpec, gen_box_scene, gen_dataset, load_views
from .training import (DEFAULT_BAKE_ITERS, DEFAULT_STAGE1_ITERS, TrainConfig,
                       bake_radiance, init_cloud_from_points,
                       stage0_train, stage1_recover_albedo)
from .transport import (RenderConfig, render_path_traced, render_radiant,
                        render_single_bounce)


def _fail(code: int, msg: str):
    print(f"error: {msg}", file=sys.stderr)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvalidInputError as exc:
            _fail(2, str(exc))
        except NumericFailure as exc:
            _fail(3, str(exc))
        except (FormatError, OSError) as exc:
            _fail(4, str(exc))
    return wrapper


def _load_config(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _render_config(cfg_file: dict, **overrides) -> RenderConfig:
    """Config-file values override defaults; CLI flags override both."""
    merged = {k: v for k, v in cfg_file.get("render", {}).items()}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RenderConfig(**merged)


@click.group()
def main():
    """Emission-aware surfel scene toolkit."""


_config_opt = click.option("--config", type=click.Path(exists=True),
                           default=None, help="JSON config file with defaults.")


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--budget", default=20000, show_default=True,
              help="Primitive budget for the box scene.")
@click.option("--size", default=2.0, show_default=True)
@click.option("--views", "n_views", default=16, show_default=True)
@click.option("--spp", default=256, show_default=True)
@click.option("--width", default=64, show_default=True)
@click.option("--height", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--tau-r", default=2.0, show_default=True,
              help="Emission mask threshold on linear radiance.")
@click.option("--albedos", default="0.5,0.5,0.5,0.5,0.5,0.5",
              show_default=True, help="Six comma-separated wall albedos.")
@click.option("--emitter-radiance", default="4,4,4", show_default=True)
@click.option("--previews/--no-previews", default=False, show_default=True)
@handle_errors
def gen(out, budget, size, n_views, spp, width, height, seed, tau_r,
        albedos, emitter_radiance, previews):
    """Generate a synthetic box scene and path-traced dataset."""
    walls = tuple(float(x) for x in albedos.split(","))
    if len(walls) != 6:
        raise InvalidInputError("--albedos needs exactly six values")
    l_e = tuple(float(x) for x in emitter_radiance.split(","))
    spec = BoxSpec(size=size, budget=budget, wall_albedos=walls,
                   emitter_radiance=l_e, seed=seed)
    click.echo(f"generating box scene ({budget} primitive budget)", err=True)
    scene, _ = gen_box_scene(spec)
    click.echo(f"rendering {n_views} views at {width}x{height}, spp {spp}",
               err=True)
    gen_dataset(scene, out, size, n_views=n_views, spp=spp, seed=seed,
                width=width, height=height, tau_R=tau_r,
                write_previews=previews)
    click.echo(str(Path(out) / "manifest.json"))


def _dataset_views(dataset, split=None):
    manifest = DatasetManifest.load(Path(dataset) / "manifest.json")
    views = load_views(manifest, dataset)
    if split:
        views = [v for v in views if v.split == split]
    if not views:
        raise InvalidInputError(f"dataset has no {split or ''} views")
    return manifest, views


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--iters", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--init-stride", default=4, show_default=True,
              help="Pixel stride when sampling the init point cloud.")
@_config_opt
@handle_errors
def train(dataset, out, iters, seed, init_stride, config):
    """Stage 0: fit a radiant scene to a dataset."""
    from .synthetic import sample_init_points

    cfg_file = _load_config(config)
    manifest, views = _dataset_views(dataset, split="train")
    size = float(manifest.meta.get("size", 2.0))
    pts, cols = sample_init_points(views, size, stride=init_stride, seed=seed)
    init = init_cloud_from_points(pts, cols, seed=seed)
    click.echo(f"stage 0: {len(views)} views, {len(init)} initial primitives, "
               f"{iters} iterations", err=True)
    tcfg = TrainConfig(iters=iters, **cfg_file.get("train", {}))
    trained, _ = stage0_train(init, views, tcfg)
    scene_write(out, snap_to_storage(trained))
    click.echo(out)


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--iters", default=DEFAULT_STAGE1_ITERS, show_default=True)
@click.option("--spp", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_config_opt
@handle_errors
def recover(scene_path, dataset, out, iters, spp, seed, config):
    """Stage 1: recover diffuse albedo against the frozen radiance cache."""
    cfg_file = _load_config(config)
    _, views = _dataset_views(dataset, split="train")
    scene = build_accel(scene_read(scene_path))
    rcfg = _render_config(cfg_file, spp=spp, seed=seed)
    tcfg = TrainConfig(**cfg_file.get("train", {}))
    recovered, _ = stage1_recover_albedo(scene, views, tcfg, rcfg, iters=iters)
    scene_write(out, snap_to_storage(recovered))
    click.echo(out)


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="Dataset providing the camera to render from.")
@click.option("--view", default=0, show_default=True)
@click.option("--mode", type=click.Choice(["radiant", "single", "path"]),
              default="radiant", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--preview", type=click.Path(), default=None)
@click.option("--spp", default=None, type=int,
              help="Samples per pixel (default 1 radiant, 256 otherwise).")
@click.option("--tau-b", default=None, type=int, help="Bounce limit (default 7).")
@click.option("--seed", default=0, show_default=True)
@click.option("--denoise/--no-denoise", default=False, show_default=True)
@_config_opt
@handle_errors
def render(scene_path, dataset, view, mode, out, preview, spp, tau_b, seed,
           denoise, config):
    """Render a scene from a dataset camera."""
    cfg_file = _load_config(config)
    manifest = DatasetManifest.load(Path(dataset) / "manifest.json")
    if not (0 <= view < len(manifest.views)):
        raise InvalidInputError(f"view {view} out of range "
                                f"(dataset has {len(manifest.views)})")
    cam = manifest.views[view].camera
    scene = build_accel(scene_read(scene_path))
    if spp is None:
        spp = 1 if mode == "radiant" else 256
    rcfg = _render_config(cfg_file, spp=spp, tau_B=tau_b, seed=seed,
                          denoise=denoise)
    click.echo(f"rendering {mode}, {cam.width}x{cam.height}, spp {rcfg.spp}",
               err=True)
    if mode == "radiant":
        img = render_radiant(scene, cam, rcfg)
    elif mode == "single":
        img = render_single_bounce(scene, cam, rcfg)
    else:
        img = render_path_traced(scene, cam, rcfg)
    image_write(out, img.rgb)
    if preview:
        preview_write(preview, img.rgb)
    click.echo(out)


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--script", "script_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@handle_errors
def edit(scene_path, script_path, out):
    """Apply a declarative edit script to a scene file."""
    from .editing import apply_edits

    scene = build_accel(scene_read(scene_path))
    script = EditScript.load(script_path)
    edited = apply_edits(scene, script)
    scene_write(out, snap_to_storage(edited.gaussians))
    click.echo(out)


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True))
@click.option("--targets", required=True, type=click.Path(exists=True),
              help="Dataset directory of path-traced target images.")
@click.option("--out", required=True, type=click.Path())
@click.option("--iters", default=DEFAULT_BAKE_ITERS, show_default=True)
@_config_opt
@handle_errors
def bake(scene_path, targets, out, iters, config):
    """Re-fit per-primitive radiance to path-traced targets."""
    cfg_file = _load_config(config)
    _, views = _dataset_views(targets, split="train")
    scene = build_accel(scene_read(scene_path))
    tcfg = TrainConfig(**cfg_file.get("train", {}))
    rcfg = _render_config(cfg_file)
    baked, _ = bake_radiance(scene, views, tcfg, rcfg, iters=iters)
    scene_write(out, snap_to_storage(baked))
    click.echo(out)


@main.command()
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True), help="Linear float-map image.")
@click.option("--tau-r", default=1.5, show_default=True,
              help="Documented presets: 1.0, 1.5, 2.0.")
@click.option("--user-mask", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def mask(image_path, tau_r, user_mask, out):
    """Threshold a linear image into an emission mask."""
    img = image_read(image_path)
    user = mask_read(user_mask) if user_mask else None
    m = threshold_emission_mask(img, tau_r, user)
    mask_write(out, m)
    click.echo(out)


@main.command("eval")
@click.option("--a", "path_a", required=True, type=click.Path(exists=True))
@click.option("--b", "path_b", required=True, type=click.Path(exists=True))
@click.option("--space", type=click.Choice(["srgb", "linear"]),
              default="srgb", show_default=True)
@handle_errors
def eval_cmd(path_a, path_b, space):
    """PSNR between two linear float-map images."""
    a = image_read(path_a)
    b = image_read(path_b)
    res = metrics_psnr(a, b, space)
    if res.exact:
        click.echo("psnr inf exact-match")
    else:
        click.echo(f"psnr {res.psnr_db:.4f} dB")


if __name__ == "__main__":
    main()
