"""Pixel-level correspondence labels extended from head-center annotations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BinaryMask, PointAnnotation


@dataclass
class MatchLabels:
    """Labeled descriptor index sets of a frame pair.

    ``matched`` is one-to-one. ``fringe`` holds completion pairs (see
    ``complete_labels``), which may share an endpoint with other pairs.
    """

    matched: list[tuple[int, int]] = field(default_factory=list)
    unmatched_a: list[int] = field(default_factory=list)
    unmatched_b: list[int] = field(default_factory=list)
    fringe: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.matched) + len(self.unmatched_a) + len(self.unmatched_b) + len(self.fringe)

    def swapped(self) -> MatchLabels:
        return MatchLabels(
            sorted((j, i) for i, j in self.matched),
            list(self.unmatched_b),
            list(self.unmatched_a),
            sorted((j, i) for i, j in self.fringe),
        )


def center_cells(points, downsample: int) -> dict[int, tuple[int, int]]:
    return {p.id: (int(p.x // downsample), int(p.y // downsample)) for p in points}


def cell_owners(centers: dict[int, tuple[int, int]], shape: tuple[int, int], r_lab: int) -> np.ndarray:
    """Identity owning each cell, or -1.

    A cell is claimed by every center within Chebyshev distance ``< r_lab``;
    the Euclidean-nearest claimant wins, ties going to the lower identity.
    """
    height, width = shape
    owner = np.full(shape, -1, dtype=np.int64)
    best = np.full(shape, np.inf)
    reach = r_lab - 1
    for ident in sorted(centers):
        cx, cy = centers[ident]
        x0, x1 = max(cx - reach, 0), min(cx + reach, width - 1)
        y0, y1 = max(cy - reach, 0), min(cy + reach, height - 1)
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        closer = d2 < best[y0 : y1 + 1, x0 : x1 + 1]
        best[y0 : y1 + 1, x0 : x1 + 1][closer] = d2[closer]
        owner[y0 : y1 + 1, x0 : x1 + 1][closer] = ident
    return owner


def descriptor_index(mask: BinaryMask) -> np.ndarray:
    """Row-major descriptor index of every retained cell, -1 elsewhere."""
    index = np.full(mask.bits.shape, -1, dtype=np.int64)
    index[mask.bits] = np.arange(int(mask.bits.sum()))
    return index


def extend_labels(
    points_a: list[PointAnnotation],
    points_b: list[PointAnnotation],
    mask_a: BinaryMask,
    mask_b: BinaryMask,
    r_lab: int,
    downsample: int,
) -> MatchLabels:
    """Label descriptor pairs sharing a local offset from the same head center.

    For an identity seen in both frames with grid centers q_a and q_b, every
    offset d with max(|dx|, |dy|) < r_lab such that q_a + d and q_b + d are
    retained cells owned by that identity yields a matched pair. Retained cells
    owned by identities seen in only one frame go to the unmatched sets.
    """
    if r_lab < 1:
        raise ValueError("r_lab must be >= 1")
    ca, cb = center_cells(points_a, downsample), center_cells(points_b, downsample)
    own_a = cell_owners(ca, mask_a.bits.shape, r_lab)
    own_b = cell_owners(cb, mask_b.bits.shape, r_lab)
    idx_a, idx_b = descriptor_index(mask_a), descriptor_index(mask_b)
    ha, wa = mask_a.bits.shape
    hb, wb = mask_b.bits.shape

    matched = []
    reach = r_lab - 1
    for ident in sorted(set(ca) & set(cb)):
        (ax, ay), (bx, by) = ca[ident], cb[ident]
        for dy in range(-reach, reach + 1):
            for dx in range(-reach, reach + 1):
                pa = (ax + dx, ay + dy)
                pb = (bx + dx, by + dy)
                if not (0 <= pa[0] < wa and 0 <= pa[1] < ha and 0 <= pb[0] < wb and 0 <= pb[1] < hb):
                    continue
                i, j = idx_a[pa[1], pa[0]], idx_b[pb[1], pb[0]]
                if i >= 0 and j >= 0 and own_a[pa[1], pa[0]] == ident and own_b[pb[1], pb[0]] == ident:
                    matched.append((int(i), int(j)))

    only_a = np.array(sorted(set(ca) - set(cb)), dtype=np.int64)
    only_b = np.array(sorted(set(cb) - set(ca)), dtype=np.int64)
    un_a = idx_a[(idx_a >= 0) & np.isin(own_a, only_a)]
    un_b = idx_b[(idx_b >= 0) & np.isin(own_b, only_b)]
    return MatchLabels(sorted(matched), sorted(un_a.tolist()), sorted(un_b.tolist()))


def complete_labels(
    labels: MatchLabels,
    points_a: list[PointAnnotation],
    points_b: list[PointAnnotation],
    mask_a: BinaryMask,
    mask_b: BinaryMask,
    r_lab: int,
    downsample: int,
) -> MatchLabels:
    """Label the retained cells of shared identities that have no same-offset partner.

    When a head moves by a fraction of a cell its retained footprint changes
    shape, so some of its cells in either frame have no counterpart at the same
    offset. Each such cell is paired with the cell of the same identity in the
    other frame whose offset from the center is closest (ties to the lower
    index). The pairs go to ``fringe``; other fields are unchanged.
    """
    ca, cb = center_cells(points_a, downsample), center_cells(points_b, downsample)
    own_a = cell_owners(ca, mask_a.bits.shape, r_lab)
    own_b = cell_owners(cb, mask_b.bits.shape, r_lab)
    idx_a, idx_b = descriptor_index(mask_a), descriptor_index(mask_b)
    used_a = {i for i, _ in labels.matched}
    used_b = {j for _, j in labels.matched}

    def cells(own, idx, center, ident):
        ys, xs = np.nonzero((own == ident) & (idx >= 0))
        return idx[ys, xs], np.stack([xs - center[0], ys - center[1]], axis=1)

    extra = set()
    for ident in sorted(set(ca) & set(cb)):
        ia, off_a = cells(own_a, idx_a, ca[ident], ident)
        ib, off_b = cells(own_b, idx_b, cb[ident], ident)
        if len(ia) == 0 or len(ib) == 0:
            continue
        d2 = ((off_a[:, None, :] - off_b[None, :, :]) ** 2).sum(axis=2)
        for r, i in enumerate(ia.tolist()):
            if i not in used_a:
                extra.add((i, int(ib[np.argmin(d2[r])])))
        for c, j in enumerate(ib.tolist()):
            if j not in used_b:
                extra.add((int(ia[np.argmin(d2[:, c])]), j))
    if not extra:
        return labels
    return MatchLabels(list(labels.matched), list(labels.unmatched_a), list(labels.unmatched_b), sorted(extra))


def oracle_matches(owners_a, owners_b, coords_a, coords_b, centers_a, centers_b) -> np.ndarray:
    """Ground-truth hard matches for frame-A descriptors (-1 = no counterpart).

    A descriptor owned by an identity present in both frames is matched to the
    frame-B descriptor of that identity with the closest local offset;
    everything else is unmatched.
    """
    out = np.full(len(coords_a), -1, dtype=np.int64)
    if len(coords_b) == 0:
        return out
    own_a = owners_a[coords_a[:, 1], coords_a[:, 0]]
    own_b = owners_b[coords_b[:, 1], coords_b[:, 0]]
    for i, ident in enumerate(own_a.tolist()):
        if ident < 0 or ident not in centers_b or ident not in centers_a:
            continue
        cand = np.nonzero(own_b == ident)[0]
        if len(cand) == 0:
            continue
        off_a = coords_a[i] - np.asarray(centers_a[ident])
        off_b = coords_b[cand] - np.asarray(centers_b[ident])
        d2 = ((off_b - off_a) ** 2).sum(axis=1)
        out[i] = int(cand[np.argmin(d2)])
    return out
