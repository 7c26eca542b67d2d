"""On-disk layout of simulated clips.

    <data_dir>/clip_000/scene.json              world, trajectories, camera, config echo
    <data_dir>/clip_000/frames/tick_0005.json   points, density map, mask of a sampled tick
    <data_dir>/clip_000/frames/tick_0005.npy    feature grid (H, W, D), float64

Feature grids and densities are pure functions of the scene file, so loaders
re-render from ``scene.json`` and use the frame files only as a consistency
check.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .config import Config, substream
from .grid import DensityMap
from .simulator import ID_STRIDE, WorldScene, generate_scene, render_frame, sampled_ticks


class DataError(ValueError):
    pass


RENDER_FIELDS = (
    "downsample", "sigma", "tau", "dim", "r_lab", "offset_scale", "frame_width", "frame_height",
)


def clip_seed(seed: int, k: int) -> int:
    return int(substream(seed, "clip", k).integers(2**31))


def simulate_clips(cfg: Config, n_clips: int | None = None, seed: int | None = None) -> list[WorldScene]:
    seed = cfg.seed if seed is None else seed
    n = cfg.n_clips if n_clips is None else n_clips
    return [generate_scene(cfg, clip_seed(seed, k), id_offset=k * ID_STRIDE) for k in range(n)]


def _dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def write_clip(directory, scene: WorldScene, cfg: Config, features: bool = True, manifest: str | None = None) -> list[str]:
    """Write one clip; returns the paths written."""
    frames_dir = os.path.join(directory, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    written = []
    scene_record = scene.to_dict()
    if manifest:
        scene_record["manifest"] = manifest
    path = os.path.join(directory, "scene.json")
    _dump(path, scene_record)
    written.append(path)
    for t in sampled_ticks(scene.n_ticks, cfg.eval_interval):
        frame = render_frame(scene, t, cfg)
        stem = os.path.join(frames_dir, f"tick_{t:04d}")
        _dump(stem + ".json", {
            "tick": t,
            "points": [{"id": p.id, "x": p.x, "y": p.y} for p in frame.points],
            "density": frame.density.to_dict(),
            "mask": frame.mask.to_dict(),
        })
        written.append(stem + ".json")
        if features:
            np.save(stem + ".npy", frame.features, allow_pickle=False)
            written.append(stem + ".npy")
    return written


def clip_dirs(data_dir) -> list[str]:
    if not os.path.isdir(data_dir):
        raise DataError(f"{data_dir}: no such data directory")
    names = sorted(n for n in os.listdir(data_dir) if os.path.isfile(os.path.join(data_dir, n, "scene.json")))
    return [os.path.join(data_dir, n) for n in names]


def load_scene(directory) -> WorldScene:
    try:
        with open(os.path.join(directory, "scene.json")) as fh:
            return WorldScene.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{directory}: unreadable scene file ({exc})") from None


def scene_config(scene: WorldScene) -> Config:
    try:
        return Config(**scene.config)
    except (TypeError, ValueError) as exc:
        raise DataError(f"scene config echo is invalid: {exc}") from None


def check_clip(directory, scene: WorldScene, cfg: Config) -> None:
    """Compare stored frame annotations with a fresh rendering."""
    frames_dir = os.path.join(directory, "frames")
    if not os.path.isdir(frames_dir):
        return
    for name in sorted(os.listdir(frames_dir)):
        if not name.endswith(".json"):
            continue
        with open(os.path.join(frames_dir, name)) as fh:
            rec = json.load(fh)
        tick = int(rec["tick"])
        if not 0 <= tick < scene.n_ticks:
            raise DataError(f"{directory}/{name}: tick {tick} outside the scene")
        frame = render_frame(scene, tick, cfg)
        ids = [p["id"] for p in rec["points"]]
        if ids != [p.id for p in frame.points]:
            raise DataError(f"{directory}/{name}: annotated identities disagree with the scene")
        if not np.array_equal(DensityMap.from_dict(rec["density"]).values, frame.density.values):
            raise DataError(f"{directory}/{name}: density map disagrees with the scene")


def load_clips(data_dir, cfg: Config | None = None, check: bool = True) -> tuple[list[str], list[WorldScene], Config]:
    """Scenes of every clip under ``data_dir`` and the config they were rendered with.

    With ``cfg`` given, its rendering fields are replaced by the clips' own so
    evaluation settings come from ``cfg`` while features match the data.
    """
    dirs = clip_dirs(data_dir)
    if not dirs:
        raise DataError(f"{data_dir}: no clips found")
    scenes = [load_scene(d) for d in dirs]
    data_cfg = scene_config(scenes[0])
    for d, s in zip(dirs, scenes):
        other = scene_config(s)
        if any(getattr(other, f) != getattr(data_cfg, f) for f in RENDER_FIELDS):
            raise DataError(f"{d}: rendered with different grid/feature settings than the other clips")
    if cfg is not None:
        data_cfg = cfg.replace(**{f: getattr(data_cfg, f) for f in RENDER_FIELDS})
    if check:
        for d, s in zip(dirs, scenes):
            check_clip(d, s, data_cfg)
    return [os.path.basename(d) for d in dirs], scenes, data_cfg
