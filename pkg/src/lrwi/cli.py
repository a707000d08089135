"""``lrwi forward|invert|gradcheck|condstudy|betasweep|freqsweep --config F --out D``.

Exit codes: 0 success, 1 numerical failure (or a failed gradient check),
2 configuration or input error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .acquisition import write_data_file
from .config import load_config
from .errors import ConfigError, LrwiError
from .grid import slowness_to_velocity, write_grid_file
from .plotting import (plot_condition_lines, plot_convergence, plot_heatmap, plot_models,
                       plot_sweep, write_pgm)

log = logging.getLogger("lrwi")

COMMANDS = ("forward", "invert", "gradcheck", "condstudy", "betasweep", "freqsweep")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, tuple):
        return " ".join(_cell(x) for x in v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(out: Path, command, cfg, seed, files, extra=None):
    import scipy

    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.canonical(),
        "seed": seed,
        "version": __version__,
        "git": _git_describe(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "outputs": {name: hashlib.sha256((out / name).read_bytes()).hexdigest()
                    for name in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands (each returns (files written, extra manifest fields, exit code))

def cmd_forward(cfg, out, seed):
    setup = ex.build_setup(cfg, seed)
    if setup.m_true is None:
        raise ConfigError("forward needs a model (model.kind)")
    freqs = ex.forward_frequencies(cfg)
    data = ex.observed_data(cfg.with_values(data__file=None), setup, freqs)
    write_data_file(out / "data.txt", data)
    amp = np.abs(data.values[:, :, 0])
    write_pgm(out / "data_amplitude.pgm", amp, scale=4)
    plot_heatmap(out / "data_amplitude.png", amp, range(data.nr), range(data.ns),
                 "receiver", "source", f"|d| at {freqs[0]:g} Hz", "amplitude")
    return ["data.txt", "data_amplitude.pgm", "data_amplitude.png"], {}, 0


def _band_rows(report):
    rows = []
    for b in report.bands:
        rows.append((b["band"], tuple(b["frequencies"]), b.get("mu1", ""), b.get("lam", ""),
                     b.get("mu2", ""), b.get("gamma", ""), b.get("rel_model_error", "")))
    return rows


def cmd_invert(cfg, out, seed):
    try:
        setup, model, report = ex.invert(cfg, seed)
        code = 0
    except LrwiError as exc:
        report = getattr(exc, "report", None)
        if report is None or isinstance(exc, ConfigError):
            raise
        log.error("inversion failed: %s", exc)
        setup, model, code = None, report.model, 1
    files = ["report.csv", "bands.csv"]
    report.write_csv(out / "report.csv")
    write_csv(out / "bands.csv", ("band", "frequencies", "mu1", "lambda", "mu2", "gamma",
                                  "rel_model_error"), _band_rows(report))
    extra = {"failed": report.failed}
    if model is not None:
        vel = slowness_to_velocity(model)
        write_grid_file(out / "model_final.grid", vel)
        write_pgm(out / "model_final.pgm", vel.grid.reshape(vel.values), scale=4)
        files += ["model_final.grid", "model_final.pgm"]
        if setup is not None:
            panels = []
            if setup.m_true is not None:
                panels.append(("true", slowness_to_velocity(setup.m_true).values))
            panels.append(("initial", slowness_to_velocity(setup.m_init).values))
            panels.append(("final", vel.values))
            plot_models(out / "models.png", vel.grid, panels)
            files.append("models.png")
    if report.rows:
        plot_convergence(out / "convergence.png", report.rows)
        files.append("convergence.png")
    if report.rank2 is not None:
        g = report.rank2.grid
        for name, comp in (("rank2_m1.grid", report.rank2.m1), ("rank2_m2.grid", report.rank2.m2)):
            write_grid_file(out / name, _Component(g, comp), "slowness2")
            files.append(name)
        extra["theta"] = report.rank2.theta
    extra["final_rel_model_error"] = report.final_error
    return files, extra, code


class _Component:
    # rank-2 components may leave the positive cone, so they are written
    # without the slowness-model invariant
    def __init__(self, grid, values):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)


def cmd_gradcheck(cfg, out, seed):
    rows, worst = ex.gradcheck(cfg, seed)
    write_csv(out / "gradcheck.csv", ex.GRADCHECK_COLUMNS, rows)
    tol = cfg.get("gradcheck", "tolerance")
    summary = [(m, b1, b2, e, "pass" if e <= tol else "fail")
               for (m, b1, b2), e in worst.items()]
    write_csv(out / "gradcheck_summary.csv", ("method", "beta1", "beta2", "max_rel_err", "status"),
              summary)
    bad = [s for s in summary if s[4] == "fail"]
    for s in bad:
        log.error("gradient check failed: %s beta1=%s beta2=%s max rel err %.3e", *s[:4])
    return ["gradcheck.csv", "gradcheck_summary.csv"], {"tolerance": tol}, 1 if bad else 0


def _grid_of(rows, xs, ys, xi, yi, vi, transform=lambda v: v):
    a = np.full((len(ys), len(xs)), np.nan)
    for r in rows:
        if r[xi] in xs and r[yi] in ys:
            v = r[vi]
            a[ys.index(r[yi]), xs.index(r[xi])] = transform(v) if math.isfinite(v) else np.nan
    return a


def cmd_condstudy(cfg, out, seed):
    rows = ex.condstudy(cfg, seed)
    write_csv(out / "condstudy.csv", ex.CONDSTUDY_COLUMNS, rows)
    files = ["condstudy.csv"]
    if cfg.get("condstudy", "image"):
        b1s = list(cfg.get("condstudy", "beta1"))
        b2s = sorted(cfg.get("condstudy", "beta2"), reverse=True)
        heat = _grid_of(rows, b1s, b2s, 0, 1, 2, math.log10)
        write_pgm(out / "condstudy.pgm", heat, scale=16)
        plot_heatmap(out / "condstudy.png", heat, b1s, b2s, "beta1", "beta2",
                     "log10 cond(S~^H S~)", "log10 cond")
        plot_condition_lines(out / "condstudy_lines.png", rows)
        files += ["condstudy.pgm", "condstudy.png", "condstudy_lines.png"]
    return files, {}, 0


def cmd_betasweep(cfg, out, seed):
    rows = ex.betasweep(cfg, seed)
    write_csv(out / "betasweep.csv", ex.BETASWEEP_COLUMNS, rows)
    b1s = list(cfg.get("betasweep", "beta1"))
    b2s = sorted(cfg.get("betasweep", "beta2"), reverse=True)
    heat = _grid_of([r for r in rows if r[0] == "lrwi"], b1s, b2s, 1, 2, 3)
    write_pgm(out / "betasweep.pgm", heat, scale=16)
    plot_heatmap(out / "betasweep.png", heat, b1s, b2s, "beta1", "beta2",
                 "LRWI relative model error", "error")
    return ["betasweep.csv", "betasweep.pgm", "betasweep.png"], {}, 0


def cmd_freqsweep(cfg, out, seed):
    rows = ex.freqsweep(cfg, seed)
    write_csv(out / "freqsweep.csv", ex.FREQSWEEP_COLUMNS, rows)
    plot_sweep(out / "freqsweep.png", [(r[1], r[2], r[0]) for r in rows], "starting frequency (Hz)")
    return ["freqsweep.csv", "freqsweep.png"], {}, 0


HANDLERS = {
    "forward": cmd_forward,
    "invert": cmd_invert,
    "gradcheck": cmd_gradcheck,
    "condstudy": cmd_condstudy,
    "betasweep": cmd_betasweep,
    "freqsweep": cmd_freqsweep,
}


def build_parser():
    p = argparse.ArgumentParser(prog="lrwi", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat section.key = value file")
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(levelname)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = cfg.get("run", "seed") if args.seed is None else args.seed
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
        files, extra, code = HANDLERS[args.command](cfg, out, seed)
        write_manifest(out, args.command, cfg, seed, files, extra)
        return code
    except LrwiError as exc:
        print(f"lrwi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"lrwi: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
