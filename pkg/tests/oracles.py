"""Independent reference implementations used only to check the library.

Each oracle recomputes a result through a different route than the
production code (explicit loops, rasterized pixel counting, exhaustive
search, finite differences) so agreement is meaningful.
"""

from __future__ import annotations

import numpy as np
import torch

from mitodet.geometry import BoundingBox, Detection, Point


def iou_by_pixel_counting(a: BoundingBox, b: BoundingBox, scale: int = 1) -> float:
    """Rasterize integer-coordinate boxes onto a canvas and count pixels."""
    w = int(max(a.x_max, b.x_max) * scale) + 1
    h = int(max(a.y_max, b.y_max) * scale) + 1
    canvas_a = np.zeros((h, w), dtype=bool)
    canvas_b = np.zeros((h, w), dtype=bool)
    canvas_a[int(a.y_min * scale) : int(a.y_max * scale), int(a.x_min * scale) : int(a.x_max * scale)] = True
    canvas_b[int(b.y_min * scale) : int(b.y_max * scale), int(b.x_min * scale) : int(b.x_max * scale)] = True
    inter = np.logical_and(canvas_a, canvas_b).sum()
    union = np.logical_or(canvas_a, canvas_b).sum()
    return float(inter) / float(union) if union else 0.0


def greedy_nms_bruteforce(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """O(n^2) greedy suppression with plain loops and the documented tie-break."""

    def pair_iou(p: Detection, q: Detection) -> float:
        ix = min(p.box.x_max, q.box.x_max) - max(p.box.x_min, q.box.x_min)
        iy = min(p.box.y_max, q.box.y_max) - max(p.box.y_min, q.box.y_min)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (p.box.area + q.box.area - inter)

    remaining = sorted(dets, key=lambda d: (-d.score, d.box.x_min, d.box.y_min))
    kept: list[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if pair_iou(best, d) <= iou_threshold]
    return kept


def max_bipartite_matching(
    dets: list[Point], truths: list[Point], radius: float
) -> int:
    """Optimal (maximum-cardinality) matching size via augmenting paths."""
    adj = [
        [j for j, t in enumerate(truths) if d.distance_to(t) <= radius]
        for d in dets
    ]
    match_of_truth = [-1] * len(truths)

    def try_assign(i: int, visited: set[int]) -> bool:
        for j in adj[i]:
            if j in visited:
                continue
            visited.add(j)
            if match_of_truth[j] < 0 or try_assign(match_of_truth[j], visited):
                match_of_truth[j] = i
                return True
        return False

    count = 0
    for i in range(len(dets)):
        if try_assign(i, set()):
            count += 1
    return count


def is_well_separated(dets: list[Point], truths: list[Point], radius: float) -> bool:
    """All det-truth distances either below radius/2 or above 2*radius."""
    for d in dets:
        for t in truths:
            dist = d.distance_to(t)
            if radius / 2.0 <= dist <= 2.0 * radius:
                return False
    return True


def coverage_holes(grid_tiles, extent: tuple[int, int]) -> int:
    """Number of pixels in the extent not covered by any tile."""
    w, h = extent
    covered = np.zeros((h, w), dtype=bool)
    for spec in grid_tiles:
        x0, y0 = int(spec.origin.x), int(spec.origin.y)
        covered[max(y0, 0) : y0 + spec.size, max(x0, 0) : x0 + spec.size] = True
    return int((~covered).sum())


def reflect_index_scalar(i: int, n: int) -> int:
    """Mirror index without edge duplication, one scalar at a time."""
    if n == 1:
        return 0
    period = 2 * n - 2
    i = i % period
    return i if i < n else period - i


def crop_by_reflected_indices(image: np.ndarray, x0: int, y0: int, size: int) -> np.ndarray:
    """Reference mirror-filled crop built with explicit per-pixel loops."""
    h, w = image.shape[:2]
    out = np.empty((size, size) + image.shape[2:], dtype=image.dtype)
    for r in range(size):
        for c in range(size):
            out[r, c] = image[
                reflect_index_scalar(y0 + r, h), reflect_index_scalar(x0 + c, w)
            ]
    return out


def finite_difference_gradients(
    loss_fn, params: list[torch.Tensor], eps: float = 1e-6
) -> list[torch.Tensor]:
    """Central finite differences of a scalar loss w.r.t. float64 tensors."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(loss_fn())
            flat[i] = orig - eps
            lo = float(loss_fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[torch.Tensor], numeric: list[torch.Tensor]) -> float:
    """Largest elementwise |a - n| / max(1e-8, |a| + |n|) across tensors."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.abs(a) + torch.abs(n), min=1e-8)
        worst = max(worst, float((torch.abs(a - n) / denom).max()))
    return worst
