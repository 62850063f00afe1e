"""Yin-Yang dataset: geometry, sampling, spike-time encoding, persistence."""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DatasetParseError
from .validation import check_coordinates

YIN, YANG, DOT = 0, 1, 2
CLASS_NAMES = ("yin", "yang", "dot")

# Geometry in one place. Big circle centred at (R_BIG, R_BIG).
R_BIG = 0.5
R_DOT = 0.1
CENTER = (0.5, 0.5)
RIGHT_DOT = (0.75, 0.5)
LEFT_DOT = (0.25, 0.5)

T_MIN = 2
T_MAX = 27
N_INPUTS = 5


@dataclass(frozen=True)
class RawPoint:
    x: float
    y: float
    label: int


@dataclass(frozen=True)
class Sample:
    raw: RawPoint
    spike_steps: tuple

    @property
    def label(self):
        return self.raw.label


def _dist(x, y, c):
    return math.hypot(x - c[0], y - c[1])


def classify_point(x, y):
    """Label of a point inside the big circle.

    Dots take precedence. Otherwise the point is yin when it lies in the
    small half-disc around the right dot, or in the lower half outside the
    small half-disc around the left dot.
    """
    if _dist(x, y, CENTER) > R_BIG:
        raise ValueError(f"point ({x}, {y}) lies outside the Yin-Yang circle")
    d_right = _dist(x, y, RIGHT_DOT)
    d_left = _dist(x, y, LEFT_DOT)
    if min(d_right, d_left) <= R_DOT:
        return DOT
    is_yin = d_right <= 0.5 * R_BIG or (d_left > 0.5 * R_BIG and y <= 0.5)
    return YIN if is_yin else YANG


def _sample_in_circle(rng):
    while True:
        x, y = rng.uniform(0.0, 1.0, size=2)
        if _dist(x, y, CENTER) <= R_BIG:
            return float(x), float(y)


def generate(n, rng, balanced=True):
    """Rejection-sample ``n`` labelled points uniformly from the circle.

    With ``balanced`` the target class cycles yin, yang, dot and points are
    drawn until one of the target class turns up, so class counts differ by
    at most one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    points = []
    for idx in range(n):
        while True:
            x, y = _sample_in_circle(rng)
            label = classify_point(x, y)
            if not balanced or label == idx % 3:
                break
        points.append(RawPoint(x, y, label))
    return points


def _round_half_up(value):
    return int(math.floor(value + 0.5))


def encode_value(c, t_min=T_MIN, t_max=T_MAX):
    return _round_half_up(t_min + c * (t_max - t_min))


def encode(point, t_min=T_MIN, t_max=T_MAX):
    """Spike steps for ``(x, y, 1-x, 1-y)`` followed by a bias spike at 0."""
    if not 0 <= t_min < t_max:
        raise ValueError(f"need 0 <= t_min < t_max, got ({t_min}, {t_max})")
    coords = (point.x, point.y, 1.0 - point.x, 1.0 - point.y)
    return tuple(encode_value(c, t_min, t_max) for c in coords) + (0,)


def make_samples(points, t_min=T_MIN, t_max=T_MAX):
    return [Sample(p, encode(p, t_min, t_max)) for p in points]


def remove_ambiguous(samples):
    """Drop every sample whose spike steps are shared with another label.

    Same-label duplicates are kept. Order is preserved.
    """
    labels_by_steps = {}
    for s in samples:
        labels_by_steps.setdefault(s.spike_steps, set()).add(s.label)
    return [s for s in samples if len(labels_by_steps[s.spike_steps]) == 1]


def make_dataset(n, seed, t_min=T_MIN, t_max=T_MAX, balanced=True, drop_ambiguous=True):
    rng = np.random.default_rng(seed)
    samples = make_samples(generate(n, rng, balanced), t_min, t_max)
    return remove_ambiguous(samples) if drop_ambiguous else samples


def save(samples, path):
    """Write one ``x y label s0 s1 s2 s3 s4`` line per sample."""
    with open(path, "w") as f:
        for s in samples:
            steps = " ".join(str(int(v)) for v in s.spike_steps)
            f.write(f"{s.raw.x!r} {s.raw.y!r} {s.label} {steps}\n")


def load(path):
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 3 + N_INPUTS:
                raise DatasetParseError(
                    path, lineno, f"expected {3 + N_INPUTS} fields, got {len(fields)}")
            try:
                x, y = float(fields[0]), float(fields[1])
                label = int(fields[2])
                steps = tuple(int(v) for v in fields[3:])
            except ValueError as exc:
                raise DatasetParseError(path, lineno, str(exc)) from None
            if label not in (YIN, YANG, DOT):
                raise DatasetParseError(path, lineno, f"invalid label {label}")
            samples.append(Sample(RawPoint(x, y, label), steps))
    return samples


def to_arrays(samples):
    """``(X, y)`` with X the ``(n, 5)`` spike-step matrix."""
    X = np.array([s.spike_steps for s in samples], dtype=np.int64).reshape(-1, N_INPUTS)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def load_or_generate(path, n, seed, t_min=T_MIN, t_max=T_MAX):
    """Load ``path`` if it exists, otherwise generate and (if given) save."""
    if path is not None and Path(path).exists():
        return load(path)
    samples = make_dataset(n, seed, t_min, t_max)
    if path is not None:
        save(samples, path)
    return samples


class YinYangEncoder(TransformerMixin, BaseEstimator):
    """Transform ``(n, 2)`` coordinates into ``(n, 5)`` input spike steps.

    Stateless; ``fit`` only validates input so the encoder can sit at the
    front of a :class:`sklearn.pipeline.Pipeline`.
    """

    def __init__(self, t_min=T_MIN, t_max=T_MAX):
        self.t_min = t_min
        self.t_max = t_max

    def fit(self, X, y=None):
        check_coordinates(X)
        if not 0 <= self.t_min < self.t_max:
            raise ValueError(f"need 0 <= t_min < t_max, got ({self.t_min}, {self.t_max})")
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        X = check_coordinates(X)
        span = self.t_max - self.t_min
        coords = np.column_stack([X, 1.0 - X])
        steps = np.floor(self.t_min + coords * span + 0.5).astype(np.int64)
        bias = np.zeros((X.shape[0], 1), dtype=np.int64)
        return np.hstack([steps, bias])

