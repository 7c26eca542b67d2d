"""End-to-end clip evaluation: video counting and descriptor-voting tracking.

A matcher here is anything that turns a frame pair into hard matches for both
frames. Three are provided: the learned model, the simulator oracle, and the
match-everything ablation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .descriptors import DescriptorSet, extract_descriptors
from .flow import counting_metrics, decompose, video_count
from .grid import DensityMap, density_sum, local_maxima
from .labels import oracle_matches
from .simulator import RenderedFrame, WorldScene, ground_truth_counts, render_frame, sampled_ticks
from .tracker import TrackSet, build_votes, hungarian, propagate_ids, tracking_metrics


class OracleMatcher:
    name = "oracle"

    def __call__(self, fa: RenderedFrame, fb: RenderedFrame, sa: DescriptorSet, sb: DescriptorSet, cfg: Config):
        ca, cb = fa.centers(cfg.downsample), fb.centers(cfg.downsample)
        m_a = oracle_matches(fa.owners, fb.owners, sa.coords, sb.coords, ca, cb)
        m_b = oracle_matches(fb.owners, fa.owners, sb.coords, sa.coords, cb, ca)
        return m_a, m_b, None


class MatchAllMatcher:
    """Ablation: every descriptor is declared matched."""

    name = "match-all"

    def __call__(self, fa, fb, sa, sb, cfg):
        return np.zeros(len(sa), dtype=np.int64), np.zeros(len(sb), dtype=np.int64), None


class LearnedMatcher:
    name = "learned"

    def __init__(self, model):
        self.model = model

    def __call__(self, fa, fb, sa, sb, cfg):
        c_a, c_b, plan = self.model.match(sa, sb, fa.mask.bits.shape)
        return c_a, c_b, plan.diagnostics()


def _pair_matches(matcher, fa, fb, sa, sb, cfg):
    # an empty frame has nothing to match against
    if len(sa) == 0 or len(sb) == 0:
        return np.full(len(sa), -1, dtype=np.int64), np.full(len(sb), -1, dtype=np.int64), None
    return matcher(fa, fb, sa, sb, cfg)


def masked(d: DensityMap, bits: np.ndarray) -> DensityMap:
    return DensityMap(np.where(bits, d.values, 0.0), d.downsample)


@dataclass
class PairFlow:
    t: int
    delta: int
    inflow: int
    outflow: int
    inflow_hat: float
    outflow_hat: float
    diagnostics: dict | None = None


@dataclass
class ClipCount:
    name: str
    truth: int
    predicted: float
    ticks: list[int]
    pairs: list[PairFlow] = field(default_factory=list)


def count_clip(scene: WorldScene, cfg: Config, matcher, interval: int | None = None, name: str = "clip") -> ClipCount:
    """Video-level count: first-frame density sum plus every pair's inflow."""
    interval = interval or cfg.eval_interval
    truth = ground_truth_counts(scene, interval)
    frames = [render_frame(scene, t, cfg) for t in truth.ticks]
    sets = [extract_descriptors(f.features, f.mask, str(f.tick)) for f in frames]
    inflow_maps, pairs = [], []
    for k in range(len(frames) - 1):
        fa, fb, sa, sb = frames[k], frames[k + 1], sets[k], sets[k + 1]
        m_a, m_b, diag = _pair_matches(matcher, fa, fb, sa, sb, cfg)
        out = decompose(masked(fa.density, fa.mask.bits), sa, m_a, "outflow")
        inn = decompose(masked(fb.density, fb.mask.bits), sb, m_b, "inflow")
        inflow_maps.append(inn.residual)
        pairs.append(PairFlow(fa.tick, fb.tick - fa.tick, truth.inflow[k], truth.outflow[k],
                              density_sum(inn.residual), density_sum(out.residual), diag))
    predicted = video_count(frames[0].density, inflow_maps)
    return ClipCount(name, truth.unique, predicted, truth.ticks, pairs)


def counting_report(results: list[ClipCount]):
    clips = [(r.truth, r.predicted, len(r.ticks)) for r in results]
    pairs = [(p.inflow, p.inflow_hat, p.outflow, p.outflow_hat) for r in results for p in r.pairs]
    return counting_metrics(clips, pairs, [r.name for r in results])


def frame_peaks(frame: RenderedFrame, cfg: Config) -> list[tuple[int, int]]:
    return local_maxima(frame.density, cfg.peak_min, cfg.peak_radius)


def _cell_center(peak) -> tuple[float, float]:
    return (peak[0] + 0.5, peak[1] + 0.5)


def track_clip(scene: WorldScene, cfg: Config, matcher, interval: int | None = None,
               frame_offset: int = 0) -> tuple[TrackSet, TrackSet]:
    """Predicted and ground-truth tracks on the sampled frames of one clip.

    Positions are in grid units: peaks at their cell centers, ground truth at
    the exact projected head position.
    """
    interval = interval or cfg.eval_interval
    ticks = sampled_ticks(scene.n_ticks, interval)
    gt = TrackSet()
    for t in ticks:
        for p in scene.visible(t):
            gt.add(frame_offset + t, p.id, (p.x / cfg.downsample, p.y / cfg.downsample))

    gate = cfg.vote_gate if cfg.vote_gate > 0 else None
    prev_frame = render_frame(scene, ticks[0], cfg)
    prev_peaks = frame_peaks(prev_frame, cfg)
    pred = TrackSet.start([_cell_center(p) for p in prev_peaks], frame_offset + ticks[0])
    prev_set = extract_descriptors(prev_frame.features, prev_frame.mask)
    for t in ticks[1:]:
        frame = render_frame(scene, t, cfg)
        peaks = frame_peaks(frame, cfg)
        cur_set = extract_descriptors(frame.features, frame.mask)
        assignment = []
        if prev_peaks and peaks:
            m_a, m_b, _ = _pair_matches(matcher, prev_frame, frame, prev_set, cur_set, cfg)
            votes = build_votes(prev_set, cur_set, m_a, m_b, prev_peaks, peaks, gate)
            assignment = hungarian(votes)
        propagate_ids(assignment, pred, [_cell_center(p) for p in peaks], frame_offset + t)
        prev_frame, prev_peaks, prev_set = frame, peaks, cur_set
    return pred, gt


def track_clips(scenes, cfg: Config, matcher, interval: int | None = None):
    """Tracks over several clips, merged with disjoint frame ranges and track ids."""
    pred_all, gt_all = TrackSet(), TrackSet()
    for k, scene in enumerate(scenes):
        pred, gt = track_clip(scene, cfg, matcher, interval, frame_offset=k * scene.n_ticks)
        base = pred_all.next_id
        for ident, points in pred.tracks.items():
            for frame, point in points:
                pred_all.add(frame, base + ident, point)
        for ident, points in gt.tracks.items():
            for frame, point in points:
                gt_all.add(frame, ident, point)
    return pred_all, gt_all


def tracking_scores(scenes, cfg: Config, matcher, interval: int | None = None):
    pred, gt = track_clips(scenes, cfg, matcher, interval)
    return tracking_metrics(pred, gt, cfg.track_gate)
