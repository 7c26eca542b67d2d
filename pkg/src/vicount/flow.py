"""Shared/inflow/outflow decomposition of density maps and counting metrics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorSet
from .grid import DensityMap, density_sum


@dataclass
class FlowDecomposition:
    shared: DensityMap
    residual: DensityMap
    direction: str  # "outflow" for frame t, "inflow" for frame t+delta


def decompose(global_map: DensityMap, descs: DescriptorSet, matches, direction: str = "outflow") -> FlowDecomposition:
    """Split the density under each descriptor into shared (matched) or residual."""
    matches = np.asarray(matches, dtype=np.int64)
    if len(matches) != len(descs):
        raise ValueError(f"{len(matches)} match entries for {len(descs)} descriptors")
    xs, ys = descs.coords[:, 0], descs.coords[:, 1]
    if len(descs) and (xs.min() < 0 or ys.min() < 0 or xs.max() >= global_map.width or ys.max() >= global_map.height):
        raise ValueError("descriptor coordinate outside the density map")
    shared = np.zeros_like(global_map.values)
    residual = np.zeros_like(global_map.values)
    matched = matches != -1
    shared[ys[matched], xs[matched]] = global_map.values[ys[matched], xs[matched]]
    residual[ys[~matched], xs[~matched]] = global_map.values[ys[~matched], xs[~matched]]
    ds = global_map.downsample
    return FlowDecomposition(DensityMap(shared, ds), DensityMap(residual, ds), direction)


def video_count(first_global: DensityMap, inflows: list[DensityMap]) -> float:
    return density_sum(first_global) + math.fsum(density_sum(d) for d in inflows)


@dataclass
class ClipResult:
    name: str
    truth: float
    predicted: float
    frames: int


@dataclass
class CountingReport:
    mae: float
    rmse: float
    wrae: float  # percent
    miae: float
    moae: float
    clips: list[ClipResult] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "MAE": self.mae,
            "RMSE": self.rmse,
            "WRAE": self.wrae,
            "MIAE": self.miae,
            "MOAE": self.moae,
            "clips": len(self.clips),
            "definitions": {
                "WRAE": "100 * sum_i (T_i / sum_j T_j) * |y_i - yhat_i| / y_i, T_i = sampled frames",
                "MIAE": "mean |in - in_hat| over all adjacent sampled frame pairs of all clips",
                "MOAE": "mean |out - out_hat| over all adjacent sampled frame pairs of all clips",
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["clip", "truth", "predicted", "frames", "abs_error"])
        for c in self.clips:
            writer.writerow([c.name, c.truth, f"{c.predicted:.6f}", c.frames, f"{abs(c.truth - c.predicted):.6f}"])
        return buf.getvalue()


def counting_metrics(clips, pairs=(), names=None) -> CountingReport:
    """MAE, RMSE, WRAE over clips ``(y, yhat, T)``; MIAE/MOAE over pairs
    ``(in, in_hat, out, out_hat)``."""
    clips = [(float(y), float(p), int(t)) for y, p, t in clips]
    if not clips:
        raise ValueError("no clips to evaluate")
    if any(y <= 0 for y, _, _ in clips):
        raise ValueError("WRAE needs a positive ground-truth count for every clip")
    errors = [abs(y - p) for y, p, _ in clips]
    n = len(clips)
    mae = math.fsum(errors) / n
    rmse = math.sqrt(math.fsum(e * e for e in errors) / n)
    total_frames = sum(t for _, _, t in clips)
    wrae = 100.0 * math.fsum((t / total_frames) * e / y for (y, _, t), e in zip(clips, errors))
    pairs = list(pairs)
    if pairs:
        miae = math.fsum(abs(i - ih) for i, ih, _, _ in pairs) / len(pairs)
        moae = math.fsum(abs(o - oh) for _, _, o, oh in pairs) / len(pairs)
    else:
        miae = moae = 0.0
    names = names or [f"clip{k:03d}" for k in range(n)]
    table = [ClipResult(nm, y, p, t) for nm, (y, p, t) in zip(names, clips)]
    return CountingReport(mae, rmse, wrae, miae, moae, table)
