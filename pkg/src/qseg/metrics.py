"""DSC and NSD evaluation plus the per-case report.

Boundary pixels are foreground pixels with at least one 4-neighbor
background pixel (pixels on the image border count as boundary). NSD uses
the exact Euclidean distance transform with tolerance tau in pixels
(default 2.0). 3D masks are scored slice-wise for NSD and volumetrically
for DSC.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ShapeError


@dataclass
class MetricConfig:
    nsd_tolerance_px: float = 2.0

    def validate(self):
        if self.nsd_tolerance_px <= 0:
            raise ValueError("NSD tolerance must be positive")
        return self


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); both empty -> 1.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"dsc shape mismatch: {pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / (p + g)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor background (border = background)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def nsd(pred: np.ndarray, gt: np.ndarray, tolerance: float = 2.0) -> float:
    """Symmetric fraction of boundary pixels within `tolerance` of the other
    mask's boundary. Both empty -> 1.0; exactly one empty -> 0.0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"nsd shape mismatch: {pred.shape} vs {gt.shape}")
    pe, ge = not pred.any(), not gt.any()
    if pe and ge:
        return 1.0
    if pe or ge:
        return 0.0
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    dist_to_g = distance_transform_edt(~bg)
    dist_to_p = distance_transform_edt(~bp)
    ok_p = int((dist_to_g[bp] <= tolerance).sum())
    ok_g = int((dist_to_p[bg] <= tolerance).sum())
    return (ok_p + ok_g) / (int(bp.sum()) + int(bg.sum()))


def nsd_3d(pred: np.ndarray, gt: np.ndarray, tolerance: float = 2.0) -> float:
    """Slice-wise NSD averaged over z (2D surface semantics per slice)."""
    scores = [nsd(pred[z], gt[z], tolerance) for z in range(pred.shape[0])]
    return float(np.mean(scores))


@dataclass
class CaseScore:
    case_id: str
    modality: str
    box_dsc: list
    box_nsd: list
    runtime_s: float = 0.0

    @property
    def mean_dsc(self):
        return float(np.mean(self.box_dsc))

    @property
    def mean_nsd(self):
        return float(np.mean(self.box_nsd))


def evaluate_case(run_fn, store, volume_id: int, cfg: MetricConfig | None = None) -> CaseScore:
    """Score one case: `run_fn(store, volume_id)` must return per-box masks
    at original resolution (3D cases reassembled per prompt)."""
    cfg = (cfg or MetricConfig()).validate()
    entry = store.entries[volume_id]
    t0 = time.perf_counter()
    masks = run_fn(store, volume_id)
    dt = time.perf_counter() - t0
    box_dsc, box_nsd = [], []
    for i in range(len(entry.boxes)):
        if entry.kind == 0:
            gt = np.stack([store.read_label(volume_id, z) == i + 1
                           for z in range(entry.d)])
            box_dsc.append(dsc(masks[i], gt))
            box_nsd.append(nsd_3d(masks[i], gt, cfg.nsd_tolerance_px))
        else:
            gt = store.read_label(volume_id, 0) == i + 1
            box_dsc.append(dsc(masks[i], gt))
            box_nsd.append(nsd(masks[i], gt, cfg.nsd_tolerance_px))
    return CaseScore(f"vol{volume_id}", entry.modality, box_dsc, box_nsd, dt)


def aggregate(scores: list[CaseScore]):
    """Per-modality mean DSC/NSD rows plus the unweighted overall average."""
    rows = {}
    for s in scores:
        rows.setdefault(s.modality, []).append(s)
    table = []
    for modality in sorted(rows):
        group = rows[modality]
        table.append({
            "modality": modality,
            "dsc": float(np.mean([s.mean_dsc for s in group])),
            "nsd": float(np.mean([s.mean_nsd for s in group])),
            "runtime_s": float(np.mean([s.runtime_s for s in group])),
        })
    avg = {
        "modality": "Average",
        "dsc": float(np.mean([r["dsc"] for r in table])),
        "nsd": float(np.mean([r["nsd"] for r in table])),
        "runtime_s": float(np.mean([r["runtime_s"] for r in table])),
    }
    return table + [avg]


def write_report(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["modality", "dsc", "nsd", "runtime_s"])
        writer.writeheader()
        writer.writerows(rows)


def format_table(rows) -> str:
    lines = [f"{'modality':<14} {'DSC%':>8} {'NSD%':>8} {'runtime s':>10}"]
    for r in rows:
        lines.append(f"{r['modality']:<14} {100 * r['dsc']:>8.2f} "
                     f"{100 * r['nsd']:>8.2f} {r['runtime_s']:>10.3f}")
    return "\n".join(lines)
