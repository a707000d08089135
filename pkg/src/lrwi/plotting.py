"""Figures: 8-bit PGM heat maps (exact bytes) and matplotlib PNG renderings."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def to_gray(values, vmin=None, vmax=None):
    """Map a 2-D array linearly onto 0..255; non-finite entries become 0."""
    a = np.asarray(values, dtype=float)
    finite = np.isfinite(a)
    if not finite.any():
        return np.zeros(a.shape, dtype=np.uint8)
    lo = float(np.min(a[finite])) if vmin is None else float(vmin)
    hi = float(np.max(a[finite])) if vmax is None else float(vmax)
    span = hi - lo
    scaled = np.zeros(a.shape) if span <= 0 else (a - lo) / span
    out = np.rint(np.clip(scaled, 0.0, 1.0) * 255.0)
    out[~finite] = 0
    return out.astype(np.uint8)


def write_pgm(path, values, vmin=None, vmax=None, scale=1):
    """Binary PGM (P5), first array row at the top; ``scale`` repeats pixels."""
    img = to_gray(values, vmin, vmax)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# --------------------------------------------------------------------------
# matplotlib renderings

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    # no timestamps in the file, so reruns give identical PNGs
    fig.savefig(path, dpi=110, metadata={"Software": None})
    _pyplot().close(fig)


def plot_models(path, grid, panels):
    """Velocity panels side by side; ``panels`` is ``[(title, velocity_values), ...]``."""
    plt = _pyplot()
    vals = [np.asarray(v, dtype=float) for _, v in panels]
    lo = min(float(v.min()) for v in vals)
    hi = max(float(v.max()) for v in vals)
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 2.2 * len(panels)), squeeze=False)
    x0, z0 = grid.extent
    for ax, (title, _), v in zip(axes[:, 0], panels, vals):
        im = ax.imshow(grid.reshape(v), extent=(0, x0, z0, 0), vmin=lo, vmax=hi,
                       cmap="viridis", aspect="auto")
        ax.set_title(title)
        ax.set_ylabel("z (km)")
        fig.colorbar(im, ax=ax, label="v (km/s)")
    axes[-1, 0].set_xlabel("x (km)")
    fig.tight_layout()
    _save(fig, path)


def plot_convergence(path, rows):
    """Objective and relative model error per iteration, bands concatenated."""
    plt = _pyplot()
    obj = [r["objective"] for r in rows]
    err = [r["rel_model_error"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].semilogy(obj, ".-")
    axes[0].set_xlabel("iteration (all bands)")
    axes[0].set_ylabel("objective")
    if all(e != "" for e in err):
        axes[1].plot(err, ".-")
        axes[1].set_ylabel("relative model error")
    axes[1].set_xlabel("iteration (all bands)")
    for b in sorted({r["band"] for r in rows})[1:]:
        k = next(i for i, r in enumerate(rows) if r["band"] == b)
        for ax in axes:
            ax.axvline(k, color="0.7", lw=0.8)
    fig.tight_layout()
    _save(fig, path)


def plot_heatmap(path, values, xticks, yticks, xlabel, ylabel, title, cbar_label):
    plt = _pyplot()
    a = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    im = ax.imshow(np.ma.masked_invalid(a), cmap="magma", aspect="auto")
    ax.set_xticks(range(len(xticks)), [f"{t:g}" for t in xticks])
    ax.set_yticks(range(len(yticks)), [f"{t:g}" for t in yticks])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=cbar_label)
    fig.tight_layout()
    _save(fig, path)


def plot_condition_lines(path, rows):
    """log10 cond versus beta2, one line per beta1, with the A^H A reference."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for b1 in sorted({r[0] for r in rows}):
        pts = sorted((r[1], r[2]) for r in rows if r[0] == b1)
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"beta1={b1:g}")
    ref = rows[0][3]
    ax.axhline(ref, color="C0", ls="--", lw=1, label="cond(A^H A)")
    ax.set_xlabel("beta2")
    ax.set_ylabel("cond")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(path, rows, xlabel):
    """Relative model error versus the swept value, one marker per method."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 4))
    markers = {"fwi": "*", "wri": "o", "lrwi": "x"}
    for method in ("fwi", "wri", "lrwi"):
        pts = [(r[0], r[1]) for r in rows if r[2] == method and math.isfinite(r[1])]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], markers[method] + "-",
                    label=method.upper())
    ax.set_xlabel(xlabel)
    ax.set_ylabel("relative model error")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
