"""Tables and figures for completed runs.

Tables are rendered from the persisted ``metrics.json`` / ``efficiency.json``
files, never recomputed.  Figures: a translation grid with columns
x^a, x^{a->a}, x^{a->b}, x^{a->b->a}; segmentation overlays per arm; training
loss curves and the per-round DSC of self-training.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .metrics import MetricsReport, accuracy_table, comparison_table  # noqa: E402
from .profiling import efficiency_table  # noqa: E402
from .segmentation import predict  # noqa: E402

GRID_COLUMNS = ("x^a", "x^{a→a}", "x^{a→b}", "x^{a→b→a}")
ORGAN_COLORS = ("#e6194b", "#3cb44b", "#4363d8", "#ffe119", "#f58231", "#911eb4", "#46f0f0", "#f032e6")


class MissingRunError(RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing or incomplete runs: " + ", ".join(str(m) for m in self.missing))


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@torch.no_grad()
def translation_grid(model, volumes_a, volumes_b, path, n_rows=3, seed=0):
    """One row per source slice; columns follow ``GRID_COLUMNS``."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_rows):
        va = volumes_a[i % len(volumes_a)]
        vb = volumes_b[int(rng.integers(len(volumes_b)))]
        z = va.shape[0] // 2
        x = torch.from_numpy(np.asarray(va.intensities[z], np.float32))
        s_b = model.encode_style(torch.from_numpy(np.asarray(vb.intensities[z], np.float32)), "B")
        c, s_a = model.encode_content(x), model.encode_style(x, "A")
        x_ab = model.decode(c, s_b)
        x_aba = model.decode(model.encode_content(x_ab), s_a)
        rows.append([x.numpy(), model.decode(c, s_a)[0].numpy(), x_ab[0].numpy(), x_aba[0].numpy()])
    fig, axes = plt.subplots(n_rows, 4, figsize=(8, 2 * n_rows), squeeze=False)
    for r, imgs in enumerate(rows):
        for j, img in enumerate(imgs):
            ax = axes[r][j]
            ax.imshow(img, cmap="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(GRID_COLUMNS[j])
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def overlay_panel(volume, models: dict, path, num_classes):
    """Target slice, ground truth and each model's prediction as colour overlays."""
    z = int(np.argmax([(volume.labels[k] > 0).sum() for k in range(volume.shape[0])]))
    panels = [("image", None), ("ground truth", volume.labels[z])]
    for name, model in models.items():
        panels.append((name, predict(volume, model).labels[z]))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4), squeeze=False)
    cmap = matplotlib.colors.ListedColormap(["black", *ORGAN_COLORS[: num_classes - 1]])
    for ax, (title, lab) in zip(axes[0], panels):
        ax.imshow(volume.intensities[z], cmap="gray")
        if lab is not None:
            ax.imshow(np.ma.masked_equal(lab, 0), cmap=cmap, vmin=0, vmax=num_classes - 1, alpha=0.55,
                      interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def loss_curves(run_dir, path, arms):
    run_dir = Path(run_dir)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    hist = run_dir / "translation" / "translation_history.csv"
    if hist.exists():
        rows = _read_csv(hist)
        it = [int(r["iteration"]) for r in rows]
        for key in ("rec", "total_gen", "total_disc"):
            axes[0].plot(it, [float(r[key]) for r in rows], label=key, linewidth=0.8)
        axes[0].set_xlabel("iteration")
        axes[0].set_title("translation losses")
        axes[0].legend()
    for arm in arms:
        hist = run_dir / "arms" / arm / "segmentation_history.csv"
        if hist.exists():
            rows = _read_csv(hist)
            axes[1].plot([int(r["epoch"]) for r in rows], [float(r["loss"]) for r in rows], label=arm)
    r = 1
    offset = None
    while (run_dir / "arms" / "drl_st" / f"round{r}" / "finetune_history.csv").exists():
        rows = _read_csv(run_dir / "arms" / "drl_st" / f"round{r}" / "finetune_history.csv")
        if offset is None:
            drl = run_dir / "arms" / "drl" / "segmentation_history.csv"
            offset = len(_read_csv(drl)) if drl.exists() else 0
        axes[1].plot([offset + int(x["epoch"]) for x in rows], [float(x["loss"]) for x in rows],
                     marker=".", label=f"drl_st round {r}")
        offset += len(rows)
        r += 1
    axes[1].set_xlabel("epoch")
    axes[1].set_title("segmentation loss")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def dsc_curve(metrics: dict, path):
    """Mean DSC per arm, with the self-training rounds as a line."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(metrics)
    vals = [100 * metrics[a]["overall_dsc"] for a in names]
    ax.bar(names, vals, color="#8aa")
    st = metrics.get("drl_st", {}).get("rounds")
    if st:
        xs = np.linspace(names.index("drl_st") - 0.3, names.index("drl_st") + 0.3, len(st))
        ax.plot(xs, [100 * r["overall_dsc"] for r in st], "k.-", label="per round")
        ax.legend()
    ax.set_ylabel("mean DSC (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def write_report(pipe, figures=True):
    """Emit every table and figure for one run into ``<run>/report``; returns written paths."""
    from .pipeline import provenance, stamp

    out = pipe.out
    arms = list(pipe.cfg.ablation.arms)
    missing = [out / "arms" / a / "metrics.json" for a in arms if not (out / "arms" / a / "metrics.json").exists()]
    if missing:
        raise MissingRunError(missing)
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    metrics = {a: json.loads((out / "arms" / a / "metrics.json").read_text()) for a in arms}
    reports = {a: MetricsReport.from_dict(d) for a, d in metrics.items()}
    written = []
    for a, rep in reports.items():
        p = rdir / f"accuracy_{a}.csv"
        p.write_text(accuracy_table(rep))
        written.append(p)
    p = rdir / "comparison.csv"
    p.write_text(comparison_table(reports))
    written.append(p)
    eff = out / "efficiency" / "efficiency.json"
    if eff.exists():
        p = rdir / "efficiency.csv"
        p.write_text(efficiency_table(json.loads(eff.read_text())["rows"]))
        written.append(p)
    if figures:
        tr_ckpt = out / "translation" / "translation.ckpt"
        if tr_ckpt.exists():
            written.append(translation_grid(pipe.translation_model(), pipe.oracle_volumes("A"),
                                            pipe.target_volumes(), rdir / "translation_grid.png",
                                            seed=pipe.cfg.seed))
        models = {a: pipe.seg_model(a) if a != "drl_st" else pipe.seg_model(a, pipe.st_cfg().rounds) for a in arms}
        written.append(overlay_panel(pipe.oracle_volumes("B")[0], models, rdir / "segmentation_overlays.png",
                                     pipe.cfg.data.num_classes))
        written.append(loss_curves(out, rdir / "loss_curves.png", arms))
        written.append(dsc_curve(metrics, rdir / "dsc_by_arm.png"))
    up = {f"evaluate:{a}": pipe.output_hash(f"evaluate:{a}") for a in arms}
    prov = provenance(pipe.config_hash, "report", up)
    for p in written:
        stamp(p, prov)
    return written
