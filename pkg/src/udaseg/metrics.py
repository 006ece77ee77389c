"""Overlap (DSC) and surface (NSD) accuracy metrics with per-class aggregation.

Boundary voxels are the mask minus its erosion by the face-connected
structuring element (6-connectivity in 3D, 4 in 2D); voxels on the array
border count as boundary.  Surface distances are centre-to-centre Euclidean
distances in mm.  A boundary voxel is "within tolerance" when its distance is
``<= tolerance + DIST_EPS``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

DIST_EPS = 1e-9


def _binary(pred, gt, cls):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred == cls, gt == cls


def dsc(pred, gt, cls=1) -> float:
    p, g = _binary(pred, gt, cls)
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)


def boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    st = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=st, border_value=0)


def nsd(pred, gt, cls=1, tolerance_mm=1.0, spacing=None) -> float:
    if tolerance_mm < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance_mm}")
    p, g = _binary(pred, gt, cls)
    spacing = (1.0,) * p.ndim if spacing is None else tuple(float(s) for s in spacing)
    if len(spacing) != p.ndim:
        raise ValueError(f"spacing {spacing} does not match {p.ndim}-D masks")
    hp, hg = p.any(), g.any()
    if not hp and not hg:
        return 1.0
    if hp != hg:
        return 0.0
    bp, bg = boundary(p), boundary(g)
    d_to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)
    d_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
    lim = tolerance_mm + DIST_EPS
    ok = int((d_to_g[bp] <= lim).sum()) + int((d_to_p[bg] <= lim).sum())
    return ok / (int(bp.sum()) + int(bg.sum()))


@dataclass
class ClassScore:
    cls: int
    dsc: float
    nsd: float
    present: bool = True


@dataclass
class ClassSummary:
    cls: int
    dsc_mean: float
    dsc_std: float
    nsd_mean: float
    nsd_std: float
    present_cases: int


@dataclass
class MetricsReport:
    classes: list
    cases: list  # [{"case_id": str, "scores": [ClassScore, ...]}]
    summary: list = field(default_factory=list)
    overall_dsc: float = 0.0
    overall_nsd: float = 0.0
    tolerance_mm: float = 1.0
    class_names: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cases = [{"case_id": c["case_id"], "scores": [ClassScore(**s) for s in c["scores"]]} for c in d["cases"]]
        summary = [ClassSummary(**s) for s in d["summary"]]
        names = {int(k): v for k, v in d.get("class_names", {}).items()}
        return cls(d["classes"], cases, summary, d["overall_dsc"], d["overall_nsd"], d["tolerance_mm"], names)

    def name(self, c):
        return self.class_names.get(c, f"class {c}")


def default_tolerance(spacing):
    """One voxel-equivalent: the largest in-plane spacing."""
    return float(max(spacing[-2:])) if spacing is not None else 1.0


def aggregate_report(cases, classes, tolerance_mm=None, spacing=None, class_names=None) -> MetricsReport:
    """Per-class mean/std of DSC and NSD over cases.

    ``cases`` holds ``(pred, gt)``, ``(pred, gt, spacing)`` or
    ``(pred, gt, spacing, case_id)`` tuples.  ``tolerance_mm`` may be a scalar
    or a ``{class: tolerance}`` table.
    """
    if not cases:
        raise ValueError("aggregate_report needs at least one case")
    classes = [int(c) for c in classes]
    rows = []
    for i, case in enumerate(cases):
        pred, gt = case[0], case[1]
        sp = case[2] if len(case) > 2 and case[2] is not None else spacing
        cid = case[3] if len(case) > 3 else f"case{i:03d}"
        scores = []
        for c in classes:
            tol = _tol_for(tolerance_mm, c, sp)
            scores.append(ClassScore(c, dsc(pred, gt, c), nsd(pred, gt, c, tol, sp), bool((np.asarray(gt) == c).any())))
        rows.append({"case_id": str(cid), "scores": scores})
    summary = []
    for j, c in enumerate(classes):
        d = np.array([r["scores"][j].dsc for r in rows])
        n = np.array([r["scores"][j].nsd for r in rows])
        present = sum(r["scores"][j].present for r in rows)
        summary.append(ClassSummary(c, float(d.mean()), float(d.std()), float(n.mean()), float(n.std()), present))
    tol_echo = tolerance_mm if isinstance(tolerance_mm, (int, float)) else _tol_for(tolerance_mm, classes[0], spacing)
    return MetricsReport(
        classes, rows, summary,
        overall_dsc=float(np.mean([s.dsc_mean for s in summary])),
        overall_nsd=float(np.mean([s.nsd_mean for s in summary])),
        tolerance_mm=float(tol_echo),
        class_names=dict(class_names or {}),
    )


def _tol_for(tolerance_mm, c, spacing):
    if tolerance_mm is None:
        return default_tolerance(spacing)
    if isinstance(tolerance_mm, dict):
        return float(tolerance_mm.get(c, tolerance_mm.get(str(c), default_tolerance(spacing))))
    return float(tolerance_mm)


def _pm(mean, std):
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def accuracy_table(report: MetricsReport, delimiter=",") -> str:
    """Per-target DSC/NSD in percent with mean ± std, plus an Average row."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["Target", "DSC (%)", "NSD (%)", "DSC mean", "DSC std", "NSD mean", "NSD std", "Cases present"])
    for s in report.summary:
        w.writerow([report.name(s.cls), _pm(s.dsc_mean, s.dsc_std), _pm(s.nsd_mean, s.nsd_std),
                    f"{100 * s.dsc_mean:.4f}", f"{100 * s.dsc_std:.4f}", f"{100 * s.nsd_mean:.4f}",
                    f"{100 * s.nsd_std:.4f}", s.present_cases])
    case_d = [np.mean([x.dsc for x in r["scores"]]) for r in report.cases]
    case_n = [np.mean([x.nsd for x in r["scores"]]) for r in report.cases]
    w.writerow(["Average", _pm(report.overall_dsc, float(np.std(case_d))),
                _pm(report.overall_nsd, float(np.std(case_n))), f"{100 * report.overall_dsc:.4f}",
                f"{100 * float(np.std(case_d)):.4f}", f"{100 * report.overall_nsd:.4f}",
                f"{100 * float(np.std(case_n)):.4f}", len(report.cases)])
    return buf.getvalue()


def comparison_table(reports: dict, delimiter=",") -> str:
    """Method rows with per-class DSC, average DSC, per-class NSD, average NSD."""
    first = next(iter(reports.values()))
    names = [first.name(c) for c in first.classes]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["Method", *(f"DSC {n}" for n in names), "DSC Avg", *(f"NSD {n}" for n in names), "NSD Avg"])
    for method, rep in reports.items():
        w.writerow([method, *(f"{100 * s.dsc_mean:.2f}" for s in rep.summary), f"{100 * rep.overall_dsc:.2f}",
                    *(f"{100 * s.nsd_mean:.2f}" for s in rep.summary), f"{100 * rep.overall_nsd:.2f}"])
    return buf.getvalue()
