"""Set-level segmentation metrics: GED (squared, 1 - IoU kernel), S_NCC, D_max, mean Dice."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .uncertainty import pixelwise_stats


def _flat_sets(pred, gt):
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("prediction and ground-truth sets must be nonempty")
    P = np.stack([np.asarray(m).ravel() for m in pred]).astype(bool)
    G = np.stack([np.asarray(m).ravel() for m in gt]).astype(bool)
    if P.shape[1] != G.shape[1]:
        raise ValueError(f"mask size mismatch: {np.shape(pred[0])} vs {np.shape(gt[0])}")
    return P, G


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def dice(a, b) -> float:
    a, b = _check_pair(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def iou_distance(a, b) -> float:
    a, b = _check_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return 1.0 - int((a & b).sum()) / union


def _inter(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return A.astype(np.int64) @ B.astype(np.int64).T


def dice_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    inter = _inter(A, B)
    denom = A.sum(1)[:, None] + B.sum(1)[None, :]
    return np.where(denom == 0, 1.0, 2.0 * inter / np.maximum(denom, 1))


def iou_distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    inter = _inter(A, B)
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    return np.where(union == 0, 0.0, 1.0 - inter / np.maximum(union, 1))


def _pair_mean(D: np.ndarray, self_pairs: bool) -> float:
    n = D.shape[0]
    if self_pairs or n == 1:
        return float(D.mean())
    return float((D.sum() - np.trace(D)) / (n * (n - 1)))


def ged(pred, gt, self_pairs: bool = True) -> float:
    """Squared generalized energy distance, clamped at 0.

    ``self_pairs=False`` drops i == j terms from the within-set means (a set of
    one mask keeps its single self-pair).
    """
    P, G = _flat_sets(pred, gt)
    cross = float(iou_distance_matrix(P, G).mean())
    d2 = 2.0 * cross - _pair_mean(iou_distance_matrix(P, P), self_pairs) - _pair_mean(
        iou_distance_matrix(G, G), self_pairs
    )
    return max(d2, 0.0)


def d_max(pred, gt) -> float:
    """Mean over predictions of the best Dice against any annotation."""
    P, G = _flat_sets(pred, gt)
    return float(dice_matrix(P, G).max(axis=1).mean())


def mean_dice(pred, gt) -> float:
    P, G = _flat_sets(pred, gt)
    return float(dice_matrix(P, G).mean())


def ncc(u: np.ndarray, v: np.ndarray, tol: float = 1e-12) -> float:
    """Normalized cross-correlation with fixed rules for constant maps."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    cu, cv = u.min() == u.max(), v.min() == v.max()
    if cu and cv:
        return 1.0 if np.all(np.abs(u - v) <= tol) else 0.0
    if cu or cv:
        return 0.0
    su, sv = u.std(), v.std()
    r = float(np.mean((u - u.mean()) * (v - v.mean())) / (su * sv))
    return min(1.0, max(-1.0, r))


def s_ncc(pred, gt) -> float:
    """NCC between the pixel-wise variance maps of the two sets."""
    _flat_sets(pred, gt)
    return ncc(pixelwise_stats(pred).variance, pixelwise_stats(gt).variance)


@dataclass
class MetricsReport:
    image_id: str
    M: int
    E: int
    ged: float
    s_ncc: float
    d_max: float
    dice: float

    FIELDS = ("image_id", "M", "E", "ged", "s_ncc", "d_max", "dice")

    def row(self) -> str:
        d = asdict(self)
        return ",".join(
            str(d[k]) if k in ("image_id", "M", "E") else repr(float(d[k])) for k in self.FIELDS
        )


def evaluate(pred, gt, image_id: str = "", self_pairs: bool = True) -> MetricsReport:
    return MetricsReport(
        image_id,
        len(pred),
        len(gt),
        ged(pred, gt, self_pairs),
        s_ncc(pred, gt),
        d_max(pred, gt),
        mean_dice(pred, gt),
    )


def mean_report(reports: list[MetricsReport], image_id: str = "mean") -> MetricsReport:
    if not reports:
        raise ValueError("no reports to average")
    Ms = {r.M for r in reports}
    Es = {r.E for r in reports}
    return MetricsReport(
        image_id,
        Ms.pop() if len(Ms) == 1 else -1,
        Es.pop() if len(Es) == 1 else -1,
        float(np.mean([r.ged for r in reports])),
        float(np.mean([r.s_ncc for r in reports])),
        float(np.mean([r.d_max for r in reports])),
        float(np.mean([r.dice for r in reports])),
    )


def write_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(MetricsReport.FIELDS) + "\n")
        for r in reports:
            fh.write(r.row() + "\n")
