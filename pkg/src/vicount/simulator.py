"""Synthetic moving-camera crowd scenes with ground-truth identities.

A scene is a world of walking pedestrians plus a camera window translating
across it. Rendering a tick gives point annotations, the ground-truth density
map, and a synthetic feature grid in which every head cell carries
``gain * (identity_embedding + offset_code) + noise``; background cells carry
noise only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config, substream
from .grid import BinaryMask, DensityMap, PointAnnotation, mask_from_density, render_density
from .labels import MatchLabels, cell_owners, center_cells, extend_labels

# Disjoint identity ranges per clip.
ID_STRIDE = 1_000_000


@dataclass
class Pedestrian:
    id: int
    entry: int  # first tick alive
    positions: np.ndarray  # (ticks alive, 2) world coordinates

    @property
    def exit(self) -> int:
        return self.entry + len(self.positions)

    def at(self, tick: int):
        if self.entry <= tick < self.exit:
            return self.positions[tick - self.entry]
        return None


@dataclass
class CameraPath:
    width: int
    height: int
    origins: np.ndarray  # (n_ticks, 2) top-left corner in world coordinates
    speed: float = 0.0
    heading: float = 0.0

    def contains(self, point, tick: int) -> bool:
        ox, oy = self.origins[tick]
        return 0 <= point[0] - ox < self.width and 0 <= point[1] - oy < self.height


@dataclass
class WorldScene:
    seed: int
    world_width: float
    world_height: float
    n_ticks: int
    pedestrians: list[Pedestrian]
    camera: CameraPath
    gain: float = 1.0
    noise: float = 0.0
    crowd: float = 0.0
    id_offset: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "id_offset": self.id_offset,
            "world": [self.world_width, self.world_height],
            "n_ticks": self.n_ticks,
            "appearance": {"gain": self.gain, "noise": self.noise, "crowd": self.crowd},
            "camera": {
                "width": self.camera.width,
                "height": self.camera.height,
                "speed": self.camera.speed,
                "heading": self.camera.heading,
                "origins": self.camera.origins.tolist(),
            },
            "pedestrians": [
                {"id": p.id, "entry": p.entry, "positions": p.positions.tolist()} for p in self.pedestrians
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> WorldScene:
        cam = d["camera"]
        return cls(
            seed=d["seed"],
            world_width=d["world"][0],
            world_height=d["world"][1],
            n_ticks=d["n_ticks"],
            pedestrians=[
                Pedestrian(p["id"], p["entry"], np.asarray(p["positions"], dtype=np.float64).reshape(-1, 2))
                for p in d["pedestrians"]
            ],
            camera=CameraPath(
                cam["width"], cam["height"], np.asarray(cam["origins"], dtype=np.float64).reshape(-1, 2),
                cam["speed"], cam["heading"],
            ),
            gain=d["appearance"]["gain"],
            noise=d["appearance"]["noise"],
            crowd=d["appearance"]["crowd"],
            id_offset=d["id_offset"],
            config=d["config"],
        )

    def visible(self, tick: int, camera: CameraPath | None = None) -> list[PointAnnotation]:
        """Pedestrians inside the window at ``tick``, in frame coordinates, by id."""
        camera = camera or self.camera
        ox, oy = camera.origins[tick]
        out = []
        for p in self.pedestrians:
            pos = p.at(tick)
            if pos is not None and camera.contains(pos, tick):
                out.append(PointAnnotation(p.id, float(pos[0] - ox), float(pos[1] - oy)))
        return sorted(out, key=lambda a: a.id)


def _reflect(v: float, hi: float) -> float:
    if v < 0:
        v = -v
    if v > hi:
        v = 2 * hi - v
    return min(max(v, 0.0), hi)


def _camera_path(cfg: Config, rng: np.random.Generator, tries: int = 64) -> CameraPath:
    """Constant-velocity window; headings that would leave the world are redrawn."""
    free_x = cfg.world_width - cfg.frame_width
    free_y = cfg.world_height - cfg.frame_height
    if free_x < 0 or free_y < 0:
        raise ValueError("camera window larger than the world")
    for _ in range(tries):
        speed = rng.uniform(cfg.camera_speed_min, cfg.camera_speed_max)
        heading = rng.uniform(0.0, 2 * math.pi)
        span = speed * (cfg.n_ticks - 1)
        dx, dy = span * math.cos(heading), span * math.sin(heading)
        if abs(dx) <= free_x and abs(dy) <= free_y:
            break
    else:
        raise ValueError(
            f"a camera moving {cfg.camera_speed_min} px/tick for {cfg.n_ticks} ticks cannot stay "
            f"inside the free world area ({free_x}, {free_y})"
        )
    x0 = rng.uniform(max(0.0, -dx), free_x - max(0.0, dx))
    y0 = rng.uniform(max(0.0, -dy), free_y - max(0.0, dy))
    t = np.arange(cfg.n_ticks, dtype=np.float64)
    origins = np.stack([x0 + t * speed * math.cos(heading), y0 + t * speed * math.sin(heading)], axis=1)
    # guard against rounding pushing the window a hair outside the world
    origins[:, 0] = np.clip(origins[:, 0], 0.0, free_x)
    origins[:, 1] = np.clip(origins[:, 1], 0.0, free_y)
    return CameraPath(cfg.frame_width, cfg.frame_height, origins, speed, heading)


def generate_scene(cfg: Config, seed: int, id_offset: int = 0) -> WorldScene:
    """Seeded world: spawning, wandering, despawning pedestrians and a camera path.

    Pedestrians keep at least ``cfg.min_spacing`` apart: a step that would
    violate the spacing is refused and the walker turns around. A pedestrian
    who has been inside the camera window and then leaves it is retired, so
    no identity re-enters the view.
    """
    if cfg.frame_width > cfg.world_width or cfg.frame_height > cfg.world_height:
        raise ValueError("camera window larger than the world")
    rng = substream(seed, "scene")
    camera = _camera_path(cfg, rng)
    crowd = rng.uniform(cfg.crowd_min, cfg.crowd_max)
    gain = rng.uniform(cfg.gain_min, cfg.gain_max)
    noise = rng.uniform(cfg.noise_min, cfg.noise_max)
    W, H = float(cfg.world_width), float(cfg.world_height)
    area_ratio = (W * H) / (cfg.frame_width * cfg.frame_height)
    population = int(rng.poisson(crowd * area_ratio)) if crowd > 0 else 0
    churn = cfg.mean_lifetime > 0
    spawn_rate = population / cfg.mean_lifetime if churn else 0.0
    exit_prob = 1.0 / cfg.mean_lifetime if churn else 0.0
    spacing2 = cfg.min_spacing**2

    alive: dict[int, dict] = {}
    finished: list[Pedestrian] = []
    next_id = 0

    def try_spawn(tick: int) -> None:
        nonlocal next_id
        others = np.array([a["pos"] for a in alive.values()]).reshape(-1, 2)
        for _ in range(20):
            pos = np.array([rng.uniform(0, W), rng.uniform(0, H)])
            if len(others) == 0 or ((others - pos) ** 2).sum(axis=1).min() >= spacing2:
                alive[next_id] = {
                    "pos": pos,
                    "entry": tick,
                    "track": [pos.copy()],
                    "speed": rng.uniform(cfg.speed_min, cfg.speed_max),
                    "heading": rng.uniform(0, 2 * math.pi),
                    "seen": camera.contains(pos, tick),
                }
                next_id += 1
                return

    for _ in range(population):
        try_spawn(0)

    for tick in range(1, cfg.n_ticks):
        for ident in sorted(alive):
            if churn and rng.random() < exit_prob:
                a = alive.pop(ident)
                finished.append(Pedestrian(id_offset + ident, a["entry"], np.array(a["track"])))
        order = sorted(alive)
        current = np.array([alive[k]["pos"] for k in order]).reshape(-1, 2)
        for slot, ident in enumerate(order):
            a = alive[ident]
            if tick % cfg.segment_ticks == 0:
                a["heading"] += rng.normal(0.0, cfg.heading_jitter)
            step = a["speed"] * np.array([math.cos(a["heading"]), math.sin(a["heading"])])
            new = np.array([_reflect(a["pos"][0] + step[0], W), _reflect(a["pos"][1] + step[1], H)])
            d2 = ((current - new) ** 2).sum(axis=1)
            d2[slot] = np.inf
            if len(d2) > 1 and d2.min() < spacing2:
                new = a["pos"]
                a["heading"] += math.pi
            a["pos"] = new
            current[slot] = new
            a["track"].append(new.copy())
        for ident in order:
            a = alive[ident]
            if camera.contains(a["pos"], tick):
                a["seen"] = True
            elif a["seen"]:
                alive.pop(ident)
                finished.append(Pedestrian(id_offset + ident, a["entry"], np.array(a["track"][:-1])))
        if churn:
            for _ in range(int(rng.poisson(spawn_rate))):
                try_spawn(tick)

    for ident, a in alive.items():
        finished.append(Pedestrian(id_offset + ident, a["entry"], np.array(a["track"])))
    finished.sort(key=lambda p: p.id)
    return WorldScene(
        seed=seed,
        world_width=W,
        world_height=H,
        n_ticks=cfg.n_ticks,
        pedestrians=finished,
        camera=camera,
        gain=float(gain),
        noise=float(noise),
        crowd=float(crowd),
        id_offset=id_offset,
        config=cfg.to_dict(),
    )


class Appearance:
    """Seeded identity embeddings and the shared offset code table."""

    def __init__(self, dim: int, reach: int, offset_scale: float, seed: int = 0):
        self.dim = dim
        self.reach = reach
        self.seed = seed
        rng = substream(seed, "offset-code")
        side = 2 * reach + 1
        self.offset_codes = rng.normal(0.0, offset_scale / math.sqrt(dim), size=(side, side, dim))
        self._cache: dict[int, np.ndarray] = {}

    def embedding(self, ident: int) -> np.ndarray:
        e = self._cache.get(ident)
        if e is None:
            e = substream(self.seed, "identity", ident).normal(size=self.dim)
            e /= np.linalg.norm(e)  # unit norm: identities differ in direction only
            self._cache[ident] = e
        return e


@dataclass
class RenderedFrame:
    tick: int
    points: list[PointAnnotation]
    density: DensityMap
    mask: BinaryMask
    features: np.ndarray  # (H, W, D)
    owners: np.ndarray  # (H, W) owning identity or -1

    @property
    def ids(self) -> set[int]:
        return {p.id for p in self.points}

    def centers(self, downsample: int) -> dict[int, tuple[int, int]]:
        return center_cells(self.points, downsample)


@dataclass
class RenderedPair:
    a: RenderedFrame
    b: RenderedFrame
    shared: set[int]
    inflow: set[int]
    outflow: set[int]
    labels: MatchLabels


_APPEARANCE_CACHE: dict[tuple, Appearance] = {}


def appearance_for(cfg: Config) -> Appearance:
    # the offset code table is shared by all clips so it can be learned
    key = (cfg.dim, cfg.r_lab - 1, cfg.offset_scale)
    if key not in _APPEARANCE_CACHE:
        _APPEARANCE_CACHE[key] = Appearance(cfg.dim, cfg.r_lab - 1, cfg.offset_scale)
    return _APPEARANCE_CACHE[key]


def render_frame(scene: WorldScene, tick: int, cfg: Config, camera: CameraPath | None = None) -> RenderedFrame:
    if not 0 <= tick < scene.n_ticks:
        raise ValueError(f"tick {tick} outside the scene's {scene.n_ticks} ticks")
    points = scene.visible(tick, camera)
    gw, gh = cfg.grid_width, cfg.grid_height
    density = render_density(points, cfg.sigma, gw, gh, cfg.downsample)
    mask = mask_from_density(density, cfg.tau)
    centers = center_cells(points, cfg.downsample)
    owners = cell_owners(centers, (gh, gw), cfg.r_lab)

    app = appearance_for(cfg)
    noise_rng = substream(scene.seed, "feature-noise", tick, scene.id_offset % (2**31))
    features = noise_rng.normal(0.0, scene.noise / math.sqrt(cfg.dim), size=(gh, gw, cfg.dim))
    reach = cfg.r_lab - 1
    ys, xs = np.nonzero(owners >= 0)
    for y, x in zip(ys.tolist(), xs.tolist()):
        ident = int(owners[y, x])
        cx, cy = centers[ident]
        code = app.offset_codes[y - cy + reach, x - cx + reach]
        features[y, x] += scene.gain * (app.embedding(ident) + code)
    return RenderedFrame(tick, points, density, mask, features, owners)


def flows(ids_a: set[int], ids_b: set[int]) -> tuple[set[int], set[int], set[int]]:
    """(shared, inflow, outflow) identity sets for a frame pair."""
    return ids_a & ids_b, ids_b - ids_a, ids_a - ids_b


def render_pair(scene: WorldScene, t: int, delta: int, cfg: Config, camera: CameraPath | None = None) -> RenderedPair:
    if delta < 0 or not (0 <= t and t + delta < scene.n_ticks):
        raise ValueError(f"frames {t} and {t + delta} not both inside the scene")
    fa = render_frame(scene, t, cfg, camera)
    fb = render_frame(scene, t + delta, cfg, camera)
    shared, inflow, outflow = flows(fa.ids, fb.ids)
    labels = extend_labels(fa.points, fb.points, fa.mask, fb.mask, cfg.r_lab, cfg.downsample)
    return RenderedPair(fa, fb, shared, inflow, outflow, labels)


def sampled_ticks(n_ticks: int, interval: int, start: int = 0) -> list[int]:
    if interval < 1:
        raise ValueError("sample interval must be >= 1")
    return list(range(start, n_ticks, interval))


@dataclass
class CountTruth:
    unique: int
    first_frame: int
    inflow: list[int]
    outflow: list[int]
    ticks: list[int]


def ground_truth_counts(scene: WorldScene, sample_interval: int, camera: CameraPath | None = None,
                        start: int = 0) -> CountTruth:
    ticks = sampled_ticks(scene.n_ticks, sample_interval, start)
    id_sets = [{p.id for p in scene.visible(t, camera)} for t in ticks]
    seen = set().union(*id_sets) if id_sets else set()
    inflow, outflow = [], []
    for prev, cur in zip(id_sets, id_sets[1:]):
        _, fin, fout = flows(prev, cur)
        inflow.append(len(fin))
        outflow.append(len(fout))
    return CountTruth(len(seen), len(id_sets[0]) if id_sets else 0, inflow, outflow, ticks)
