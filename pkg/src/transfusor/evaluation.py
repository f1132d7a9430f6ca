"""ADE, coverage (c1/c2), coverage tables and KDE density grids."""

import csv
import io
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import align_origin, atomic_write_text, format_float, trajectories_text
from .errors import CoverageUndefinedError, UsageError
from .labels import table_order

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 1.0)


def ade(a, b):
    """Mean Euclidean distance between corresponding points of two equal-length trajectories."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"ADE needs equal-length trajectories, got {a.shape} and {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=-1)).mean())


def pairwise_ade(dataset, generated, chunk=256):
    """``[n_dataset, n_generated]`` matrix of ADE values, evaluated exactly."""
    d = np.asarray(dataset, dtype=np.float64)
    g = np.asarray(generated, dtype=np.float64)
    if d.ndim != 3 or g.ndim != 3 or d.shape[1:] != g.shape[1:]:
        raise UsageError(f"trajectory sets disagree in shape: {d.shape} vs {g.shape}")
    out = np.empty((len(d), len(g)))
    for start in range(0, len(d), chunk):
        block = d[start:start + chunk, None] - g[None]
        out[start:start + chunk] = np.sqrt((block ** 2).sum(axis=-1)).mean(axis=-1)
    return out


def coverage(dataset, generated, threshold):
    """``(c1, c2)``: matched fraction of dataset and of generated trajectories (ADE < threshold)."""
    if len(dataset) == 0:
        raise CoverageUndefinedError("dataset set is empty; c1 undefined")
    if len(generated) == 0:
        raise CoverageUndefinedError("generated set is empty; c2 undefined")
    close = pairwise_ade(dataset, generated) < threshold
    return float(close.any(axis=1).mean()), float(close.any(axis=0).mean())


def coverage_curve(dataset, generated, thresholds):
    dist = pairwise_ade(dataset, generated)
    out = []
    for th in thresholds:
        close = dist < th
        out.append((float(close.any(axis=1).mean()), float(close.any(axis=0).mean())))
    return out


def dispersion(trajectories):
    """Mean pairwise ADE among one set of (origin-aligned) trajectories."""
    t = np.asarray(trajectories, dtype=np.float64)
    if len(t) < 2:
        return 0.0
    dist = pairwise_ade(t, t)
    iu = np.triu_indices(len(t), k=1)
    return float(dist[iu].mean())


@dataclass
class CoverageRow:
    method: str
    label: object
    threshold: float
    c1: float
    c2: float
    n_dataset: int
    n_generated: int

    @property
    def applicable(self):
        return self.n_dataset > 0 and self.n_generated > 0

    def cells(self):
        fmt = (lambda v: f"{v:.4f}") if self.applicable else (lambda v: "NA")
        return [self.method, self.label.vehicle_class, self.label.direction, self.label.aggressiveness,
                f"{self.threshold:g}", fmt(self.c1), fmt(self.c2), self.n_dataset, self.n_generated]


REPORT_HEADER = ["method", "vehicle", "direction", "aggressiveness", "threshold_m", "c1", "c2",
                 "n_dataset", "n_generated"]


@dataclass
class CoverageReport:
    method: str
    thresholds: tuple
    rows: list = field(default_factory=list)
    samples: dict = field(default_factory=dict)

    def row(self, label, threshold):
        for r in self.rows:
            if r.label == label and r.threshold == threshold:
                return r
        raise KeyError((label, threshold))

    def to_text(self, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()


def default_n_gen(n_dataset):
    return max(50, n_dataset)


def table2_report(corpus, sampler, thresholds=DEFAULT_THRESHOLDS, n_gen=None, method="transfusor"):
    """Coverage per category in table order.

    ``sampler(label, n)`` returns ``[n, T, 2]`` trajectories in the corpus
    coordinates (absolute or aligned); both sides are origin-aligned here.
    ``n_gen`` is an int or ``None`` for ``max(50, category size)``.
    """
    thresholds = tuple(sorted(float(t) for t in thresholds))
    groups = corpus.by_category()
    report = CoverageReport(method, thresholds)
    for label in table_order():
        members = groups[label.index]
        if not members:
            for th in thresholds:
                report.rows.append(CoverageRow(method, label, th, float("nan"), float("nan"), 0, 0))
            continue
        data = align_origin(np.stack([t.points for t in members]))
        n = n_gen if n_gen is not None else default_n_gen(len(members))
        gen = align_origin(sampler(label, n))
        report.samples[label.index] = gen
        if len(gen) == 0:
            for th in thresholds:
                report.rows.append(CoverageRow(method, label, th, float("nan"), float("nan"), len(members), 0))
            continue
        for th, (c1, c2) in zip(thresholds, coverage_curve(data, gen, thresholds)):
            report.rows.append(CoverageRow(method, label, th, c1, c2, len(members), len(gen)))
    return report


# kernel density -----------------------------------------------------------------

@dataclass
class KdeGrid:
    xs: np.ndarray
    ys: np.ndarray
    density: np.ndarray  # [len(ys), len(xs)]
    bandwidth: tuple
    step: int = -1  # diffusion step k the points were taken at
    order: int = 0  # position of that step in the exported ladder

    @property
    def cell_area(self):
        return (self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0])

    def integral(self):
        return float(self.density.sum() * self.cell_area)

    def peak(self):
        return float(self.density.max())

    def argmax(self):
        iy, ix = np.unravel_index(np.argmax(self.density), self.density.shape)
        return float(self.xs[ix]), float(self.ys[iy])


def scott_bandwidth(points):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    return n ** (-1.0 / 6.0) * points.std(axis=0, ddof=1)


def kde_grid(points, bandwidth=None, resolution=(100, 100), extent=None, pad=4.0, floor=1e-3, step=-1):
    """Gaussian KDE (diagonal bandwidth, Scott's rule by default) evaluated on a regular grid.

    ``extent`` is ``(xmin, xmax, ymin, ymax)``; by default the data range padded
    by ``pad`` bandwidths per side.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise UsageError("KDE needs at least two points")
    bw = np.asarray(scott_bandwidth(pts) if bandwidth is None else np.broadcast_to(bandwidth, (2,)), dtype=np.float64)
    if np.any(bw < floor):
        warnings.warn(f"bandwidth {bw.tolist()} below floor {floor}; clamped", RuntimeWarning)
        bw = np.maximum(bw, floor)
    if extent is None:
        lo = pts.min(axis=0) - pad * bw
        hi = pts.max(axis=0) + pad * bw
        extent = (lo[0], hi[0], lo[1], hi[1])
    nx, ny = resolution
    xs = np.linspace(extent[0], extent[1], nx)
    ys = np.linspace(extent[2], extent[3], ny)
    # separable kernel: density[j, i] = mean_p Kx(xs[i] - px) Ky(ys[j] - py)
    kx = np.exp(-0.5 * ((xs[None, :] - pts[:, :1]) / bw[0]) ** 2) / (np.sqrt(2 * np.pi) * bw[0])
    ky = np.exp(-0.5 * ((ys[None, :] - pts[:, 1:]) / bw[1]) ** 2) / (np.sqrt(2 * np.pi) * bw[1])
    density = ky.T @ kx / len(pts)
    return KdeGrid(xs, ys, density, (float(bw[0]), float(bw[1])), step)


# exports ---------------------------------------------------------------------

def export_trajectories(path, trajectories_by_category):
    """Write ``{category_index: [n, T, 2]}`` as one origin-aligned trajectory file."""
    items = []
    for cat in sorted(trajectories_by_category):
        arr = np.asarray(trajectories_by_category[cat], dtype=np.float64)
        if arr.size == 0:
            continue
        for pts in align_origin(arr):
            items.append((len(items), cat, pts))
    atomic_write_text(path, trajectories_text(items))


def export_per_category(out_dir, trajectories_by_category, prefix="generated"):
    """One file per category: ``<prefix>_<index>_<vehicle>_<direction>_<aggr>.csv``."""
    from .labels import ConditionLabel

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for cat in sorted(trajectories_by_category):
        lab = ConditionLabel.from_index(cat)
        path = os.path.join(out_dir, f"{prefix}_{cat:02d}_{lab.vehicle_class}_{lab.direction}_{lab.aggressiveness}.csv")
        export_trajectories(path, {cat: trajectories_by_category[cat]})
        paths.append(path)
    return paths


KDE_HEADER = ["step", "k", "x", "y", "density"]


def kde_text(grid):
    buf = io.StringIO()
    buf.write(f"# extent = {format_float(grid.xs[0])} {format_float(grid.xs[-1])} "
              f"{format_float(grid.ys[0])} {format_float(grid.ys[-1])}; resolution = {len(grid.xs)} {len(grid.ys)}; "
              f"bandwidth = {format_float(grid.bandwidth[0])} {format_float(grid.bandwidth[1])}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(KDE_HEADER)
    for j, y in enumerate(grid.ys):
        for i, x in enumerate(grid.xs):
            w.writerow([grid.order, grid.step, format_float(x), format_float(y), format_float(grid.density[j, i])])
    return buf.getvalue()


def export_kde(path, grid):
    atomic_write_text(path, kde_text(grid))


def read_kde(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    rows = [line.split(",") for line in lines[2:] if line]
    xs = np.unique([float(r[2]) for r in rows])
    ys = np.unique([float(r[3]) for r in rows])
    dens = np.array([float(r[4]) for r in rows]).reshape(len(ys), len(xs))
    bw = tuple(float(v) for v in lines[0].split("bandwidth =")[1].split())
    step, order = (int(rows[0][1]), int(rows[0][0])) if rows else (-1, 0)
    return KdeGrid(xs, ys, dens, bw, step, order)


def export_report(path, reports):
    buf = io.StringIO()
    for i, rep in enumerate(reports):
        buf.write(rep.to_text(header=i == 0))
    atomic_write_text(path, buf.getvalue())
