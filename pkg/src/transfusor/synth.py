"""
License-free synthetic lane changes in the ingestion format.

Each vehicle performs one logistic lateral maneuver across a lane boundary
while cruising at a near-constant longitudinal speed. The lateral amplitude is
scaled so that the speed ratio over the 150-frame window around the crossing
hits a per-(class, tier) target; tiers are spaced far enough apart that the
mu +/- sigma rule recovers them.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .data import FPS, HALF_WINDOWS, Corpus, LabeledTrajectory, Track, TrackTable, compute_speed_ratio, downsample
from .data import fit_speed_ratio_stats, mirror_track, read_kv
from .errors import UsageError
from .labels import ConditionLabel, all_labels

LANE_WIDTH = 3.5

# (low, normal, over) speed-ratio targets
RATIO_TARGETS = {"car": (0.012, 0.020, 0.030), "truck": (0.016, 0.025, 0.036)}
# longitudinal speed ranges, m/s
SPEED_RANGES = {
    "car": ((30.0, 33.0), (27.0, 30.0), (24.0, 27.0)),
    "truck": ((23.0, 25.0), (21.0, 23.0), (19.0, 21.0)),
}
# logistic rate of the lateral profile, 1/s
SHARPNESS_RANGES = ((0.8, 1.1), (1.4, 1.8), (2.2, 2.8))


@dataclass
class SynthSpec:
    counts: dict = field(default_factory=lambda: {i: 100 for i in range(12)})
    ratio_jitter: float = 0.04
    speed_jitter: float = 0.05
    lateral_noise: float = 0.01
    lane_width: float = LANE_WIDTH
    margin: int = 160
    margin_spread: int = 40
    fps: float = FPS

    @classmethod
    def uniform(cls, per_category=100, **kw):
        return cls(counts={i: per_category for i in range(12)}, **kw)

    @classmethod
    def from_kv(cls, text):
        """Flat ``key = value`` spec: ``count`` for every category, ``count.<cat>`` overrides."""
        kv = read_kv(text)
        spec = cls.uniform(int(kv.pop("count", 100)))
        for key in list(kv):
            if key.startswith("count."):
                spec.counts[ConditionLabel.parse(key[len("count."):]).index] = int(kv.pop(key))
        for name in ("ratio_jitter", "speed_jitter", "lateral_noise", "lane_width", "fps"):
            if name in kv:
                setattr(spec, name, float(kv.pop(name)))
        for name in ("margin", "margin_spread"):
            if name in kv:
                setattr(spec, name, int(kv.pop(name)))
        kv.pop("seed", None)
        if kv:
            raise UsageError(f"unknown synth spec keys: {', '.join(sorted(kv))}")
        return spec

    def validate(self):
        if not self.counts or sum(self.counts.values()) <= 0:
            raise UsageError("synthetic spec asks for no trajectories")
        if any(c < 0 for c in self.counts.values()):
            raise UsageError("category counts must be >= 0")
        if self.margin < HALF_WINDOWS["fixed300"]:
            raise UsageError(f"margin must cover the 300-frame window ({HALF_WINDOWS['fixed300']} frames)")
        return self


@dataclass
class GroundTruth:
    vehicle_id: int
    label: ConditionLabel
    cbt_frame: int
    crossing_time: float
    amplitude: float
    sharpness: float
    speed: float
    driving_direction: int


def _logistic(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _one_track(vid, label, spec, rng):
    fps = spec.fps
    tier = ("low", "normal", "over").index(label.aggressiveness)
    lo, hi = SPEED_RANGES[label.vehicle_class][tier]
    speed = rng.uniform(lo, hi)
    rate = rng.uniform(*SHARPNESS_RANGES[tier])
    target = RATIO_TARGETS[label.vehicle_class][tier] * (1.0 + rng.uniform(-spec.ratio_jitter, spec.ratio_jitter))
    pre = spec.margin + int(rng.integers(0, spec.margin_spread + 1))
    post = spec.margin + int(rng.integers(0, spec.margin_spread + 1))
    n = pre + post
    first_frame = int(rng.integers(0, 1000))
    # crossing strictly between frames so the lane id switch is unambiguous
    tc = pre - 1 + rng.uniform(0.1, 0.9)
    t = np.arange(n, dtype=np.float64)
    sign = 1.0 if label.direction == "left" else -1.0

    # slowly wandering speed: AR(1) around the cruise value
    wander = np.empty(n)
    state = 0.0
    shocks = rng.normal(n) * spec.speed_jitter
    for i in range(n):
        state = 0.98 * state + shocks[i]
        wander[i] = state
    vx = speed + wander
    x = np.concatenate([[0.0], np.cumsum(vx[:-1] / fps)]) + rng.uniform(0.0, 400.0)

    u = rate * (t - tc) / fps
    unit_vy = rate * _logistic(u) * (1.0 - _logistic(u))
    cbt_index = pre
    win = slice(cbt_index - HALF_WINDOWS["fixed150"], cbt_index + HALF_WINDOWS["fixed150"])
    amplitude = target * np.abs(vx[win]).mean() / unit_vy[win].mean()

    boundary = 2 * spec.lane_width
    y = boundary - sign * amplitude / 2 + sign * amplitude * _logistic(u)
    vy = sign * amplitude * unit_vy + rng.normal(n) * spec.lateral_noise
    lane = np.floor(y / spec.lane_width).astype(np.int64)
    truth_cbt = first_frame + int(np.floor(tc)) + 1
    track = Track(vid, first_frame + np.arange(n), x, y, vx, vy, lane, 1, label.vehicle_class, canonical=True)
    gt = GroundTruth(vid, label, truth_cbt, first_frame + tc, amplitude, rate, speed, 1)
    return track, gt


def synth_tracks(spec, rng):
    """Canonical-frame tracks plus per-vehicle ground truth.

    Returned tracks are canonical; :func:`raw_table` rotates half of them into
    the reversed driving direction for writing.
    """
    spec.validate()
    table = TrackTable()
    truth = []
    vid = 1
    for label in all_labels():
        for _ in range(spec.counts.get(label.index, 0)):
            track, gt = _one_track(vid, label, spec, rng)
            table[vid] = track
            truth.append(gt)
            vid += 1
    return table, truth


def raw_table(table, truth, rng):
    """Assign driving-direction codes at random and express tracks in raw coordinates."""
    raw = TrackTable()
    for gt in truth:
        track = table[gt.vehicle_id]
        code = int(rng.integers(1, 3))
        gt.driving_direction = code
        t = replace(track, driving_direction=code, canonical=False)
        if code == 2:
            t = replace(mirror_track(t), canonical=False)
        raw[gt.vehicle_id] = t
    return raw


def synth_corpus(spec, rng, downsample_factor=10):
    """Synthetic raw tracks, the ground-truth-labeled fixed-150 corpus, and the truth records."""
    table, truth = synth_tracks(spec, rng)
    trajectories = []
    for gt in truth:
        track = table[gt.vehicle_id]
        c = gt.cbt_frame - int(track.frames[0])
        sl = slice(c - HALF_WINDOWS["fixed150"], c + HALF_WINDOWS["fixed150"])
        pts = np.stack([track.x[sl], track.y[sl]], axis=1)
        ratio = compute_speed_ratio(track.vx[sl], track.vy[sl])
        trajectories.append(LabeledTrajectory(downsample(pts, downsample_factor), gt.label, ratio,
                                              gt.vehicle_id, gt.cbt_frame))
    stats = fit_speed_ratio_stats([t.ratio for t in trajectories], [t.label.vehicle_class for t in trajectories])
    raw = raw_table(table, truth, rng)
    return raw, Corpus(trajectories, "fixed150", stats), truth
