"""Report artifacts: heatmap overlays, KDE curves, metric tables and figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from . import data as data_mod  # noqa: E402
from . import metrics, scoring  # noqa: E402
from .errors import ValidationError  # noqa: E402


def heatmap_overlay(image, amap, alpha=0.5, cmap="jet"):
    """Colour-mapped, view-normalized map alpha-blended over an image.

    ``image`` is ``3 x H x W`` in ``[0, 1]``; returns ``H x W x 3`` uint8.
    """
    image = np.asarray(image, dtype=np.float64)
    amap = np.asarray(amap, dtype=np.float64)
    if image.shape[1:] != amap.shape:
        raise ValidationError(f"image {image.shape[1:]} and map {amap.shape} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    colour = matplotlib.colormaps[cmap](scoring.normalize_for_view(amap))[..., :3]
    blended = alpha * colour + (1.0 - alpha) * image.transpose(1, 2, 0)
    return np.round(np.clip(blended, 0.0, 1.0) * 255).astype(np.uint8)


def save_overlay(path, image, amap, alpha=0.5, cmap="jet"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_overlay(image, amap, alpha, cmap)).save(path)
    return path


def kde_curves(groups, grid_size=512):
    """``{name: values}`` -> ``{name: (grid, density)}``; groups with fewer than two values are skipped."""
    out = {}
    for name, values in groups.items():
        values = np.asarray(values, dtype=np.float64)
        if values.size < 2:
            continue
        out[name] = metrics.kde(values, grid_size=grid_size)
    return out


def write_kde_csv(path, curves):
    """Long format ``curve,x,density`` with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "x", "density"])
        for name, (grid, dens) in curves.items():
            for x, y in zip(grid, dens):
                w.writerow([name, repr(float(x)), repr(float(y))])
    return path


def read_kde_csv(path):
    curves = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            xs, ys = curves.setdefault(row["curve"], ([], []))
            xs.append(float(row["x"]))
            ys.append(float(row["density"]))
    return {k: (np.array(x), np.array(y)) for k, (x, y) in curves.items()}


def plot_kde(path, curves, title="image score density"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (grid, dens) in curves.items():
        ax.plot(grid, dens, label=name)
    ax.set_xlabel("image score")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_history(path, history):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in history]
    for key in ("loss", "focal", "ce", "soft_iou", "ssim"):
        if key in history[0]:
            ax.plot(epochs, [r[key] for r in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.set_title("training loss")
    return _save(fig, path)


def plot_metrics(path, result, group="all"):
    methods = list(result["methods"])
    cols = [c for c in metrics.COLUMNS if c in result["methods"][methods[0]][group]]
    fig, ax = plt.subplots(figsize=(max(6, len(cols)), 4))
    width = 0.8 / len(methods)
    x = np.arange(len(cols))
    for i, m in enumerate(methods):
        ax.bar(x + i * width, [result["methods"][m][group][c] for c in cols], width, label=m)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(cols, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    ax.set_title(f"metrics ({group})")
    return _save(fig, path)


def plot_lambda_sweep(path, rows):
    fig, ax = plt.subplots(figsize=(5, 4))
    lams = [r["lambda"] for r in rows]
    for col in ("I-AUROC", "P-AUROC"):
        if col in rows[0]:
            ax.plot(lams, [r[col] for r in rows], marker="o", label=col)
    ax.set_xlabel("lambda")
    ax.set_ylabel("AUROC")
    ax.legend()
    ax.set_title("fusion weight sweep")
    return _save(fig, path)


def write_table(path, rows, columns=None):
    """CSV with six-decimal floats; ``columns`` fixes the order (default: first-seen keys)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([f"{r[c]:.6f}" if isinstance(r.get(c), float) else r.get(c, "") for c in columns])
    return path


def metric_rows(result):
    """Flatten an eval ``metrics.json`` into ``method, category, <metrics>`` rows."""
    rows = []
    for m, groups in result["methods"].items():
        for g, values in groups.items():
            rows.append({"method": m, "category": g, **values})
    return rows


def table_columns(rows, lead):
    present = {k for r in rows for k in r}
    cols = list(lead) + [c for c in metrics.COLUMNS if c in present]
    cols += sorted(k for k in present if k not in cols)
    return cols


def plot_heatmap_grid(path, panels, titles):
    """Rows of ``[image, mask, map, map, ...]`` panels."""
    n = len(panels)
    k = len(titles)
    fig, axes = plt.subplots(n, k, figsize=(1.6 * k, 1.6 * n), squeeze=False)
    for i, row in enumerate(panels):
        for j, p in enumerate(row):
            ax = axes[i, j]
            ax.imshow(p, cmap=None if p.ndim == 3 else "gray", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=7)
    return _save(fig, path)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _pick_examples(items, meta, n):
    """Round-robin over defect types (anomalous first, then normal) so every defect is shown."""
    by_defect = {}
    for i in items:
        by_defect.setdefault(meta[i]["defect"], []).append(i)
    order = sorted(by_defect, key=lambda dft: (meta[by_defect[dft][0]]["label"] == 0, dft))
    picked = []
    depth = 0
    while len(picked) < n and any(depth < len(v) for v in by_defect.values()):
        for dft in order:
            if depth < len(by_defect[dft]) and len(picked) < n:
                picked.append(by_defect[dft][depth])
        depth += 1
    return picked


def build_report(pipe, d):
    """All report artifacts for a pipeline whose eval stage is current."""
    rcfg = pipe.cfg["report"]
    maps, masks, meta = pipe.load_maps()
    root = pipe.index().root
    outputs = []

    result = json.loads((pipe.stage_dir("eval") / "metrics.json").read_text())
    rows = metric_rows(result)
    outputs.append(write_table(d / "metrics_table.csv", rows, table_columns(rows, ("method", "category"))))
    outputs.append(plot_metrics(d / "metrics.png", result))

    k = pipe.cfg["infer"]["k"]
    labels = np.array([m["label"] for m in meta])
    groups = {}
    for meth, values in maps.items():
        scores = np.array([scoring.image_score(a, k) for a in values])
        groups[f"{meth}/normal"] = scores[labels == 0]
        groups[f"{meth}/anomalous"] = scores[labels == 1]
    curves = kde_curves(groups, rcfg["kde_grid"])
    outputs.append(write_kde_csv(d / "kde_image_scores.csv", curves))
    outputs.append(plot_kde(d / "kde_image_scores.png", curves))

    hist_path = pipe.stage_dir("train") / "history.csv"
    with hist_path.open() as fh:
        history = [{k2: float(v) for k2, v in r.items() if v != ""} for r in csv.DictReader(fh)]
    if history:
        outputs.append(plot_history(d / "history.png", history))

    panels = []
    show = ("baseline", "filtered", "fused")
    for cat in pipe.categories:
        items = _pick_examples([i for i, m in enumerate(meta) if m["category"] == cat], meta,
                               rcfg["heatmaps_per_category"])
        for i in items:
            img = data_mod.load_image(root / meta[i]["image"])
            stem = f"{cat}_{meta[i]['defect']}_{Path(meta[i]['image']).stem}"
            row = [np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8), masks[i]]
            for meth in show:
                p = save_overlay(d / "heatmaps" / f"{stem}_{meth}.png", img, maps[meth][i], rcfg["alpha"], rcfg["cmap"])
                outputs.append(p)
                row.append(heatmap_overlay(img, maps[meth][i], rcfg["alpha"], rcfg["cmap"]))
            panels.append(row)
    if panels:
        outputs.append(plot_heatmap_grid(d / "heatmaps.png", panels, ["image", "mask", *show]))
    return outputs


def ablation_table(path_stem, results):
    """``{variant: metrics.json dict}`` -> comparable CSV/JSON tables over the ``all`` group."""
    rows = []
    for variant, result in results.items():
        for m in ("filtered", "baseline", "fused"):
            rows.append({"variant": variant, "method": m, **result["methods"][m]["all"]})
    stem = Path(path_stem)
    csv_path = write_table(stem.with_suffix(".csv"), rows, table_columns(rows, ("variant", "method")))
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
