"""Descriptor-voting tracker and point-based MOT metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .descriptors import DescriptorSet


def _as_points(peaks) -> np.ndarray:
    return np.asarray(peaks, dtype=np.float64).reshape(-1, 2)


def nearest_pedestrian(coord, peaks) -> int:
    peaks = _as_points(peaks)
    if len(peaks) == 0:
        raise ValueError("no pedestrian peaks to choose from")
    d2 = ((peaks - np.asarray(coord, dtype=np.float64)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def nearest_pedestrians(coords, peaks) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized nearest peak index and distance for each coordinate."""
    peaks = _as_points(peaks)
    coords = _as_points(coords)
    if len(peaks) == 0:
        raise ValueError("no pedestrian peaks to choose from")
    d2 = ((coords[:, None, :] - peaks[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(coords)), idx])


def build_votes(
    descs_a: DescriptorSet,
    descs_b: DescriptorSet,
    matches_ab,
    matches_ba,
    peaks_a,
    peaks_b,
    gate: float | None = None,
) -> np.ndarray:
    """Pedestrian-pair vote matrix from descriptor matches in both directions.

    Every matched descriptor of either frame adds one vote to the cell of the
    peaks nearest its own and its partner's position. With ``gate`` set,
    votes whose endpoints lie farther than ``gate`` cells from their peaks are
    dropped.
    """
    peaks_a, peaks_b = _as_points(peaks_a), _as_points(peaks_b)
    votes = np.zeros((len(peaks_a), len(peaks_b)), dtype=np.int64)
    if len(peaks_a) == 0 or len(peaks_b) == 0:
        return votes
    matches_ab = np.asarray(matches_ab, dtype=np.int64)
    matches_ba = np.asarray(matches_ba, dtype=np.int64)
    if len(matches_ab) != len(descs_a) or len(matches_ba) != len(descs_b):
        raise ValueError("match arrays must be sized to their descriptor sets")

    ia = np.nonzero(matches_ab != -1)[0]
    jb = np.nonzero(matches_ba != -1)[0]
    # endpoints (A-side descriptor, B-side descriptor) of every vote
    a_idx = np.concatenate([ia, matches_ba[jb]])
    b_idx = np.concatenate([matches_ab[ia], jb])
    if len(a_idx) == 0:
        return votes
    ka, da = nearest_pedestrians(descs_a.coords[a_idx], peaks_a)
    kb, db = nearest_pedestrians(descs_b.coords[b_idx], peaks_b)
    if gate is not None:
        keep = (da <= gate) & (db <= gate)
        ka, kb = ka[keep], kb[keep]
    np.add.at(votes, (ka, kb), 1)
    return votes


def hungarian(votes) -> list[tuple[int, int]]:
    """Maximum-vote one-to-one assignment; zero-vote pairs are dropped."""
    votes = np.asarray(votes)
    if votes.size == 0:
        return []
    rows, cols = linear_sum_assignment(votes, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if votes[r, c] > 0]


@dataclass
class TrackSet:
    tracks: dict[int, list[tuple[int, tuple[float, float]]]] = field(default_factory=dict)
    next_id: int = 0
    current_ids: list[int] = field(default_factory=list)

    @classmethod
    def start(cls, peaks, frame: int) -> TrackSet:
        ts = cls()
        ts.current_ids = [ts._add(frame, p) for p in _as_points(peaks)]
        return ts

    def _add(self, frame: int, point, ident: int | None = None) -> int:
        if ident is None:
            ident = self.next_id
            self.next_id += 1
        self.tracks.setdefault(ident, []).append((int(frame), (float(point[0]), float(point[1]))))
        return ident

    def add(self, frame: int, ident: int, point) -> None:
        """Insert a detection with a known identity (ground truth, file loading)."""
        self._add(frame, point, ident)
        self.next_id = max(self.next_id, ident + 1)

    def by_frame(self) -> dict[int, dict[int, tuple[float, float]]]:
        frames: dict[int, dict[int, tuple[float, float]]] = {}
        for ident in sorted(self.tracks):
            for frame, point in self.tracks[ident]:
                frames.setdefault(frame, {})[ident] = point
        return frames

    def frames(self) -> list[int]:
        return sorted(self.by_frame())

    def to_jsonl(self) -> str:
        lines = []
        for frame, dets in sorted(self.by_frame().items()):
            for ident, (x, y) in sorted(dets.items()):
                lines.append(json.dumps({"frame": frame, "id": ident, "x": x, "y": y}))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> TrackSet:
        ts = cls()
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                ts.add(int(rec["frame"]), int(rec["id"]), (rec["x"], rec["y"]))
        return ts


def propagate_ids(assignment, prev: TrackSet, peaks_b, frame: int) -> TrackSet:
    """Carry identities from the previous frame's peaks to ``peaks_b``.

    ``assignment`` pairs (index into prev.current_ids, index into peaks_b).
    Unassigned peaks get fresh identities. ``prev`` is extended in place.
    """
    peaks_b = _as_points(peaks_b)
    new_ids: list[int | None] = [None] * len(peaks_b)
    for r, c in assignment:
        if new_ids[c] is not None:
            raise ValueError(f"peak {c} assigned twice")
        new_ids[c] = prev.current_ids[r]
    prev.current_ids = [prev._add(frame, p, ident) for p, ident in zip(peaks_b, new_ids)]
    return prev


@dataclass
class TrackingScores:
    mota: float
    idf1: float
    idsw: int
    fp: int
    fn: int
    gt_detections: int
    pred_detections: int

    def to_dict(self) -> dict:
        return {
            "MOTA": self.mota,
            "IDF1": self.idf1,
            "IDSW": self.idsw,
            "FP": self.fp,
            "FN": self.fn,
            "GT": self.gt_detections,
            "PRED": self.pred_detections,
        }


def _gated_matches(gt_pts: np.ndarray, pr_pts: np.ndarray, threshold: float):
    if len(gt_pts) == 0 or len(pr_pts) == 0:
        return []
    dist = np.sqrt(((gt_pts[:, None, :] - pr_pts[None, :, :]) ** 2).sum(axis=2))
    cost = np.where(dist <= threshold, dist, threshold * 10 + 1e6)
    rows, cols = linear_sum_assignment(cost)
    return [(r, c) for r, c in zip(rows, cols) if dist[r, c] <= threshold]


def tracking_metrics(pred: TrackSet, gt: TrackSet, dist_threshold: float = 4.0) -> TrackingScores:
    pred_frames, gt_frames = pred.by_frame(), gt.by_frame()
    frames = sorted(set(pred_frames) | set(gt_frames))
    fp = fn = idsw = 0
    n_gt = sum(len(v) for v in gt_frames.values())
    n_pred = sum(len(v) for v in pred_frames.values())
    last_match: dict[int, int] = {}

    gt_ids = sorted(gt.tracks)
    pr_ids = sorted(pred.tracks)
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pr_ids)}
    overlap = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)

    for frame in frames:
        g = gt_frames.get(frame, {})
        p = pred_frames.get(frame, {})
        g_ids, p_ids = list(g), list(p)
        g_pts = np.array([g[i] for i in g_ids], dtype=np.float64).reshape(-1, 2)
        p_pts = np.array([p[i] for i in p_ids], dtype=np.float64).reshape(-1, 2)
        matches = _gated_matches(g_pts, p_pts, dist_threshold)
        fn += len(g_ids) - len(matches)
        fp += len(p_ids) - len(matches)
        for r, c in matches:
            gid, pid = g_ids[r], p_ids[c]
            if gid in last_match and last_match[gid] != pid:
                idsw += 1
            last_match[gid] = pid
        # identity-level overlap counts every gated pair, independent of the
        # per-frame assignment
        if len(g_pts) and len(p_pts):
            dist = np.sqrt(((g_pts[:, None, :] - p_pts[None, :, :]) ** 2).sum(axis=2))
            for r, c in zip(*np.nonzero(dist <= dist_threshold)):
                overlap[gi[g_ids[r]], pi[p_ids[c]]] += 1

    mota = 1.0 - (fn + fp + idsw) / n_gt if n_gt else float("nan")
    idtp = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        idtp = int(overlap[rows, cols].sum())
    denom = n_gt + n_pred
    idf1 = 2.0 * idtp / denom if denom else 1.0
    return TrackingScores(mota, idf1, idsw, fp, fn, n_gt, n_pred)
