"""
Lane-change extraction from highD-style track tables.

Pipeline: ``ingest_tracks`` -> ``canonicalize_frame`` -> ``detect_cbt`` ->
``extract_fixed_window`` / ``extract_dynamic_window`` -> speed-ratio statistics
per vehicle class -> ``label_aggressiveness`` -> ``downsample`` -> deltas.

Canonical frame: travel along +x, the driver's left is +y. Tracks with the
reversed driving direction are rotated by 180 degrees (x, y, vx, vy negated),
which keeps left on the driver's left.
"""

import csv
import hashlib
import io
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, FormatError, UsageError
from .labels import AGGRESSIVENESS, DIRECTIONS, VEHICLE_CLASSES, ConditionLabel, table_order

logger = logging.getLogger(__name__)

FPS = 25.0
TRACK_COLUMNS = ("frame", "id", "x", "y", "xVelocity", "yVelocity", "laneId", "drivingDirection", "vehicleClass")
METHODS = ("fixed150", "fixed300", "dynamic")
HALF_WINDOWS = {"fixed150": 75, "fixed300": 150}


@dataclass
class Track:
    vehicle_id: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    lane: np.ndarray
    driving_direction: int
    vehicle_class: str
    canonical: bool = False

    def __len__(self):
        return len(self.frames)

    def index_of(self, frame):
        i = int(frame - self.frames[0])
        if not 0 <= i < len(self.frames):
            raise UsageError(f"frame {frame} outside track {self.vehicle_id}")
        return i


class TrackTable(dict):
    """``vehicle id -> Track`` in ascending id order."""

    @property
    def n_vehicles(self):
        return len(self)


def _parse_class(value):
    v = value.strip().lower()
    if v not in VEHICLE_CLASSES:
        raise ValueError(f"vehicle class must be car or truck, got {value!r}")
    return v


def ingest_tracks(path):
    """Read a comma-delimited track file into a :class:`TrackTable`."""
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"cannot open track file: {exc.strerror}", path=path) from None
    with handle:
        return read_tracks(handle, path)


def read_tracks(handle, path="<stream>"):
    reader = csv.reader(handle)
    header = next(reader, None)
    if header is None:
        raise FormatError("missing header row", path=path, line=1)
    header = [h.strip() for h in header]
    missing = [c for c in TRACK_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"missing required column(s) {', '.join(missing)}", path=path, line=1)
    pos = {c: header.index(c) for c in TRACK_COLUMNS}
    converters = {
        "frame": int, "id": int, "x": float, "y": float, "xVelocity": float,
        "yVelocity": float, "laneId": int, "drivingDirection": int, "vehicleClass": _parse_class,
    }
    rows = {}
    meta = {}
    for lineno, raw in enumerate(reader, start=2):
        if not raw or all(not cell.strip() for cell in raw):
            continue
        if len(raw) < len(header):
            raise FormatError(f"expected {len(header)} fields, found {len(raw)}", path=path, line=lineno)
        rec = {}
        for col in TRACK_COLUMNS:
            cell = raw[pos[col]]
            try:
                rec[col] = converters[col](cell)
            except ValueError:
                raise FormatError(f"cannot parse {cell!r}", path=path, line=lineno, column=col) from None
            if isinstance(rec[col], float) and not math.isfinite(rec[col]):
                raise FormatError(f"non-finite value {cell!r}", path=path, line=lineno, column=col)
        vid = rec["id"]
        bucket = rows.setdefault(vid, [])
        if bucket and rec["frame"] <= bucket[-1][0]:
            raise DataError(f"{path}, line {lineno}: frames for vehicle {vid} are not strictly increasing")
        if bucket and rec["frame"] != bucket[-1][0] + 1:
            raise DataError(f"{path}, line {lineno}: vehicle {vid} skips from frame {bucket[-1][0]} to {rec['frame']}")
        if vid in meta and meta[vid] != (rec["drivingDirection"], rec["vehicleClass"]):
            raise DataError(f"{path}, line {lineno}: vehicle {vid} changes direction or class mid-track")
        meta[vid] = (rec["drivingDirection"], rec["vehicleClass"])
        bucket.append((rec["frame"], rec["x"], rec["y"], rec["xVelocity"], rec["yVelocity"], rec["laneId"]))
    table = TrackTable()
    for vid in sorted(rows):
        arr = rows[vid]
        frames = np.array([r[0] for r in arr], dtype=np.int64)
        num = np.array([r[1:5] for r in arr], dtype=np.float64)
        lanes = np.array([r[5] for r in arr], dtype=np.int64)
        direction, vclass = meta[vid]
        table[vid] = Track(vid, frames, num[:, 0], num[:, 1], num[:, 2], num[:, 3], lanes, direction, vclass)
    return table


def write_tracks(table, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACK_COLUMNS)
    for vid in sorted(table):
        t = table[vid]
        for i in range(len(t)):
            w.writerow([int(t.frames[i]), vid, repr(float(t.x[i])), repr(float(t.y[i])), repr(float(t.vx[i])),
                        repr(float(t.vy[i])), int(t.lane[i]), t.driving_direction, t.vehicle_class])
    atomic_write_text(path, buf.getvalue())


def mirror_track(track):
    """Rotate a track by 180 degrees and toggle its canonical flag."""
    return replace(track, x=-track.x, y=-track.y, vx=-track.vx, vy=-track.vy, canonical=not track.canonical)


def canonicalize_frame(table, reversed_direction=2, y_down=False):
    """Bring every track into the canonical frame.

    ``reversed_direction`` names the ``drivingDirection`` code whose traffic
    moves along -x. ``y_down`` first flips y for image-style coordinates.
    """
    out = TrackTable()
    for vid, track in table.items():
        if track.canonical:
            out[vid] = track
            continue
        if track.driving_direction not in (1, 2):
            raise DataError(f"vehicle {vid}: unknown drivingDirection {track.driving_direction}")
        t = track
        if y_down:
            t = replace(t, y=-t.y, vy=-t.vy)
        if t.driving_direction == reversed_direction:
            t = mirror_track(t)
        out[vid] = replace(t, canonical=True)
    return out


def detect_cbt(track, probe=5):
    """Lane-boundary crossings as ``[(frame, direction), ...]``.

    The crossing frame is the first frame carrying the new lane id. Direction
    is the sign of the lateral displacement over ``probe`` frames either side.
    """
    changes = np.nonzero(np.diff(track.lane) != 0)[0] + 1
    events = []
    n = len(track)
    for i in changes:
        dy = track.y[min(i + probe - 1, n - 1)] - track.y[max(i - probe, 0)]
        if dy == 0:
            dy = track.vy[i]
        events.append((int(track.frames[i]), "left" if dy > 0 else "right"))
    return events


@dataclass
class Trajectory:
    points: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    vehicle_id: int = -1
    cbt_frame: int = -1
    start_frame: int = -1
    direction: str = ""
    vehicle_class: str = ""
    fps: float = FPS
    clamped_start: bool = False
    clamped_end: bool = False

    def __len__(self):
        return len(self.points)


@dataclass
class Rejection:
    vehicle_id: int
    cbt_frame: int
    reason: str


def _slice_trajectory(track, lo, hi, cbt, direction, **flags):
    sl = slice(lo, hi)
    pts = np.stack([track.x[sl], track.y[sl]], axis=1)
    return Trajectory(pts, track.vx[sl].copy(), track.vy[sl].copy(), track.vehicle_id, int(cbt),
                      int(track.frames[lo]), direction, track.vehicle_class, **flags)


def extract_fixed_window(track, cbt, half_window=75, direction=""):
    """``half_window`` frames before the crossing plus ``half_window`` from it on."""
    c = int(cbt - track.frames[0])
    lo, hi = c - half_window, c + half_window
    if lo < 0:
        return Rejection(track.vehicle_id, int(cbt), "window underflow")
    if hi > len(track):
        return Rejection(track.vehicle_id, int(cbt), "window overflow")
    return _slice_trajectory(track, lo, hi, cbt, direction)


def extract_dynamic_window(track, cbt, threshold=0.2, interval=25, direction=""):
    """Grow from the crossing until the windowed mean of |vy| drops below ``threshold``.

    Start: latest frame at or before the crossing whose trailing ``interval``
    frames average below the threshold. End: earliest frame at or after the
    crossing whose leading ``interval`` frames do. Missing ends clamp to the
    track edge and set the matching flag.
    """
    c = track.index_of(cbt)
    n = len(track)
    csum = np.concatenate([[0.0], np.cumsum(np.abs(track.vy))])
    # trailing mean at index f covers f-interval+1 .. f
    f_lo = np.arange(interval - 1, c + 1)
    trailing = (csum[f_lo + 1] - csum[f_lo + 1 - interval]) / interval
    quiet = np.nonzero(trailing < threshold)[0]
    if quiet.size:
        start, clamped_start = int(f_lo[quiet[-1]]), False
    else:
        start, clamped_start = 0, True
    f_hi = np.arange(c, n - interval + 1)
    leading = (csum[f_hi + interval] - csum[f_hi]) / interval
    quiet = np.nonzero(leading < threshold)[0]
    if quiet.size:
        end, clamped_end = int(f_hi[quiet[0]]), False
    else:
        end, clamped_end = n - 1, True
    return _slice_trajectory(track, start, end + 1, cbt, direction,
                             clamped_start=clamped_start, clamped_end=clamped_end)


def compute_speed_ratio(vx, vy):
    """``mean(|vy|) / mean(|vx|)``."""
    vx = np.abs(np.asarray(vx, dtype=np.float64))
    vy = np.abs(np.asarray(vy, dtype=np.float64))
    if vx.size == 0 or vx.mean() <= 0:
        raise DataError("no longitudinal motion; speed ratio undefined")
    return float(vy.mean() / vx.mean())


@dataclass
class RatioStats:
    mu: float
    sigma: float
    n: int = 0


def fit_speed_ratio_stats(ratios, classes):
    """Per-class mean and (population) standard deviation of speed ratios."""
    ratios = np.asarray(ratios, dtype=np.float64)
    classes = np.asarray(classes, dtype=object)
    stats = {}
    for cls in VEHICLE_CLASSES:
        sel = ratios[classes == cls]
        if sel.size:
            stats[cls] = RatioStats(float(sel.mean()), float(sel.std()), int(sel.size))
    return stats


def label_aggressiveness(ratio, mu, sigma):
    if ratio > mu + sigma:
        return "over"
    if ratio < mu - sigma:
        return "low"
    return "normal"


def downsample(points, factor=10):
    """Every ``factor``-th row starting at row 0."""
    points = np.asarray(points)
    if factor < 1:
        raise UsageError("downsample factor must be >= 1")
    out = points[::factor]
    if len(out) < 2:
        raise UsageError(f"{len(points)} points are too few to downsample by {factor}")
    return out


def to_deltas(points):
    """Increments between consecutive points (works on ``[..., T, 2]``)."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-2] < 2:
        raise UsageError("need at least two points to form increments")
    return np.diff(points, axis=-2)


def from_deltas(deltas, origin=None):
    """Rebuild points by cumulative summation from ``origin`` (default the zero point)."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if origin is None:
        origin = np.zeros(deltas.shape[:-2] + (1, deltas.shape[-1]))
    else:
        origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), deltas.shape[:-2] + (deltas.shape[-1],))
        origin = origin[..., None, :]
    return np.cumsum(np.concatenate([origin, deltas], axis=-2), axis=-2)


def align_origin(points):
    points = np.asarray(points, dtype=np.float64)
    return points - points[..., :1, :]


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, deltas):
        return (np.asarray(deltas, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_normalization(deltas):
    """Global per-axis mean/std over every increment of ``deltas`` ``[N, T-1, 2]``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise UsageError("cannot fit normalization on an empty corpus")
    flat = deltas.reshape(-1, deltas.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = std == 0
    if degenerate.any():
        warnings.warn(f"zero spread on axis {np.nonzero(degenerate)[0].tolist()}; using std 1", RuntimeWarning)
        std = np.where(degenerate, 1.0, std)
    return Normalizer(mean, std)


# corpus ---------------------------------------------------------------------

@dataclass
class LabeledTrajectory:
    points: np.ndarray
    label: ConditionLabel
    ratio: float = float("nan")
    vehicle_id: int = -1
    cbt_frame: int = -1
    clamped: bool = False


@dataclass
class Corpus:
    trajectories: list
    method: str = "fixed150"
    stats: dict = field(default_factory=dict)
    rejections: list = field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def labels(self):
        return [t.label for t in self.trajectories]

    def points(self):
        lengths = {len(t.points) for t in self.trajectories}
        if len(lengths) > 1:
            raise UsageError(f"trajectories have differing lengths {sorted(lengths)}")
        if not self.trajectories:
            return np.zeros((0, 0, 2))
        return np.stack([t.points for t in self.trajectories])

    def deltas(self):
        return to_deltas(self.points())

    def by_category(self):
        groups = {lab.index: [] for lab in table_order()}
        for t in self.trajectories:
            groups[t.label.index].append(t)
        return groups


def extract_corpus(table, method="fixed150", downsample_factor=10, exclude_overlaps=False,
                   threshold=0.2, interval=25):
    """Run extraction, per-class ratio statistics and labeling over a canonical table."""
    if method not in METHODS:
        raise UsageError(f"unknown extraction method {method!r}; choose from {', '.join(METHODS)}")
    pending = []
    rejections = []
    for vid in sorted(table):
        track = table[vid]
        if not track.canonical:
            raise UsageError(f"vehicle {vid} is not in the canonical frame; call canonicalize_frame first")
        last_end = None
        for cbt, direction in detect_cbt(track):
            if method == "dynamic":
                traj = extract_dynamic_window(track, cbt, threshold, interval, direction)
            else:
                traj = extract_fixed_window(track, cbt, HALF_WINDOWS[method], direction)
            if isinstance(traj, Rejection):
                rejections.append(traj)
                continue
            if exclude_overlaps and last_end is not None and traj.start_frame <= last_end:
                rejections.append(Rejection(vid, cbt, "overlaps previous maneuver"))
                continue
            last_end = traj.start_frame + len(traj) - 1
            try:
                ratio = compute_speed_ratio(traj.vx, traj.vy)
            except DataError as exc:
                rejections.append(Rejection(vid, cbt, str(exc)))
                continue
            pending.append((traj, ratio))
    stats = fit_speed_ratio_stats([r for _, r in pending], [t.vehicle_class for t, _ in pending])
    out = []
    for traj, ratio in pending:
        st = stats[traj.vehicle_class]
        label = ConditionLabel(traj.direction, traj.vehicle_class, label_aggressiveness(ratio, st.mu, st.sigma))
        pts = downsample(traj.points, downsample_factor) if method == "fixed150" else traj.points
        out.append(LabeledTrajectory(pts, label, ratio, traj.vehicle_id, traj.cbt_frame,
                                     traj.clamped_start or traj.clamped_end))
    return Corpus(out, method, stats, rejections)


@dataclass
class GroupStats:
    direction: str
    vehicle_class: str
    count: int = 0
    mean_ratio: float = 0.0
    std_ratio: float = 0.0
    tiers: dict = field(default_factory=lambda: {a: 0 for a in AGGRESSIVENESS})


@dataclass
class CorpusManifest:
    method: str
    groups: list
    total: int

    def rows(self):
        for g in self.groups:
            yield [self.method, g.direction, g.vehicle_class, f"{g.mean_ratio:.6f}", f"{g.std_ratio:.6f}",
                   g.count, g.tiers["low"], g.tiers["normal"], g.tiers["over"]]


STATS_HEADER = ["method", "direction", "vehicle", "avg_speed_ratio", "std_speed_ratio",
                "n_traj", "n_low", "n_normal", "n_over"]


def corpus_stats(corpus):
    """Counts and speed-ratio moments per (direction, vehicle class) and tier."""
    groups = []
    for d in DIRECTIONS:
        for c in VEHICLE_CLASSES:
            members = [t for t in corpus.trajectories if t.label.direction == d and t.label.vehicle_class == c]
            g = GroupStats(d, c, len(members))
            ratios = np.array([t.ratio for t in members if np.isfinite(t.ratio)])
            if ratios.size:
                g.mean_ratio, g.std_ratio = float(ratios.mean()), float(ratios.std())
            for t in members:
                g.tiers[t.label.aggressiveness] += 1
            groups.append(g)
    return CorpusManifest(corpus.method, groups, len(corpus))


# corpus files -----------------------------------------------------------------

TRAJECTORY_HEADER = ["traj_id", "category_index", "point_index", "x", "y"]


def atomic_write_text(path, text):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def format_float(v):
    return repr(float(v))


def trajectories_text(items):
    """``items`` yields ``(traj_id, category_index, points)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for tid, cat, pts in items:
        for i, (x, y) in enumerate(np.asarray(pts)):
            w.writerow([tid, cat, i, format_float(x), format_float(y)])
    return buf.getvalue()


def read_trajectories(path):
    """Parse a trajectory file into ``[(traj_id, category_index, points), ...]``."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise FormatError(f"expected header {','.join(TRAJECTORY_HEADER)}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                tid, cat, idx = int(row[0]), int(row[1]), int(row[2])
                x, y = float(row[3]), float(row[4])
            except (ValueError, IndexError):
                raise FormatError("malformed trajectory row", path=path, line=lineno) from None
            entry = groups.setdefault(tid, [cat, []])
            if idx != len(entry[1]):
                raise FormatError(f"point_index {idx} out of sequence for trajectory {tid}", path=path, line=lineno)
            entry[1].append((x, y))
    return [(tid, cat, np.array(pts)) for tid, (cat, pts) in groups.items()]


def write_kv(pairs):
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def read_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {line!r}", line=lineno)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_corpus(corpus, out_dir):
    """Write ``trajectories.csv``, ``manifest.txt`` and ``rejections.csv``. Returns the fingerprint."""
    os.makedirs(out_dir, exist_ok=True)
    traj_text = trajectories_text((i, t.label.index, t.points) for i, t in enumerate(corpus.trajectories))
    pairs = [("format", "transfusor-corpus 1"), ("method", corpus.method),
             ("n_trajectories", len(corpus)), ("n_rejections", len(corpus.rejections)),
             ("trajectories_sha256", hashlib.sha256(traj_text.encode()).hexdigest())]
    for cls in sorted(corpus.stats):
        st = corpus.stats[cls]
        pairs += [(f"stats.{cls}.mu", format_float(st.mu)), (f"stats.{cls}.sigma", format_float(st.sigma)),
                  (f"stats.{cls}.n", st.n)]
    manifest = corpus_stats(corpus)
    for g in manifest.groups:
        key = f"group.{g.direction}.{g.vehicle_class}"
        pairs += [(f"{key}.count", g.count), (f"{key}.mean_ratio", format_float(g.mean_ratio)),
                  (f"{key}.std_ratio", format_float(g.std_ratio))]
        pairs += [(f"{key}.{a}", g.tiers[a]) for a in AGGRESSIVENESS]
    for i, t in enumerate(corpus.trajectories):
        pairs.append((f"traj.{i}", f"category={t.label.index} label={t.label.symbol()} ratio={format_float(t.ratio)} "
                                   f"vehicle={t.vehicle_id} cbt={t.cbt_frame} clamped={int(t.clamped)}"))
    manifest_text = write_kv(pairs)
    rej = io.StringIO()
    w = csv.writer(rej, lineterminator="\n")
    w.writerow(["vehicle_id", "cbt_frame", "reason"])
    for r in corpus.rejections:
        w.writerow([r.vehicle_id, r.cbt_frame, r.reason])
    atomic_write_text(os.path.join(out_dir, "trajectories.csv"), traj_text)
    atomic_write_text(os.path.join(out_dir, "rejections.csv"), rej.getvalue())
    atomic_write_text(os.path.join(out_dir, "manifest.txt"), manifest_text)
    return hashlib.sha256(manifest_text.encode()).hexdigest()


def corpus_fingerprint(corpus_dir):
    with open(os.path.join(corpus_dir, "manifest.txt"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def read_corpus(corpus_dir):
    manifest_path = os.path.join(corpus_dir, "manifest.txt")
    try:
        with open(manifest_path) as fh:
            kv = read_kv(fh.read())
    except OSError as exc:
        raise FormatError(f"cannot read corpus manifest: {exc.strerror}", path=manifest_path) from None
    traj_path = os.path.join(corpus_dir, "trajectories.csv")
    with open(traj_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if kv.get("trajectories_sha256") not in (None, digest):
        raise DataError(f"{traj_path} does not match its manifest checksum")
    items = read_trajectories(traj_path)
    trajs = []
    for tid, cat, pts in items:
        info = dict(part.split("=", 1) for part in kv.get(f"traj.{tid}", "").split() if "=" in part)
        trajs.append(LabeledTrajectory(pts, ConditionLabel.from_index(cat), float(info.get("ratio", "nan")),
                                       int(info.get("vehicle", -1)), int(info.get("cbt", -1)),
                                       info.get("clamped", "0") == "1"))
    stats = {}
    for cls in VEHICLE_CLASSES:
        if f"stats.{cls}.mu" in kv:
            stats[cls] = RatioStats(float(kv[f"stats.{cls}.mu"]), float(kv[f"stats.{cls}.sigma"]),
                                    int(kv.get(f"stats.{cls}.n", 0)))
    rejections = []
    rej_path = os.path.join(corpus_dir, "rejections.csv")
    if os.path.exists(rej_path):
        with open(rej_path, newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                if row:
                    rejections.append(Rejection(int(row[0]), int(row[1]), row[2]))
    return Corpus(trajs, kv.get("method", "fixed150"), stats, rejections)
