"""Label reconciliation, synthetic Large-Grid data, participant splits.

Recorded gaze labels can sit tens of pixels away from the target the
participant was actually fixating. ``kmeans_fit`` + ``relabel`` snap every
label to its nearest cluster center, which removes that jitter when the
clusters line up with the physical targets. ``generate_synthetic``
produces data with exactly this noise structure so the effect is testable
without the original recordings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .dataset import CLUSTER_UNSET, Dataset

__all__ = [
    "CentroidSet",
    "SynthConfig",
    "kmeans_fit",
    "assign_clusters",
    "relabel",
    "grid_targets",
    "generate_synthetic",
    "split_dataset",
    "plus_plus_init",
]


@dataclass
class CentroidSet:
    """Fitted 2-D cluster centers with the Lloyd run's bookkeeping."""

    centroids: np.ndarray          # [k, 2] float64
    inertia: float                 # total within-cluster squared distance
    iterations_run: int
    inertia_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[1] != 2:
            raise ValueError(f"centroids must be [k, 2], got {self.centroids.shape}")
        if self.k < 1:
            raise ValueError("need at least one centroid")
        if self.inertia < 0:
            raise ValueError("inertia cannot be negative")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_clusters(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid ids by squared Euclidean distance.

    Ties break toward the lower centroid index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centroids = np.asarray(centroids, dtype=np.float64)
    return np.argmin(_sq_dists(points, centroids), axis=1)


def plus_plus_init(points: np.ndarray, k: int,
                   rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws without replacement."""
    n = points.shape[0]
    centers = np.empty((k, 2), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            centers[j] = points[rng.integers(n)]
            continue
        centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def kmeans_fit(points, k: int, max_iter: int = 300, tol: float = 1e-6,
               init: Union[str, np.ndarray] = "++",
               seed: int = 0) -> CentroidSet:
    """Lloyd's algorithm over 2-D points.

    ``init`` is either "++" or an explicit [k, 2] array of starting
    centers (pass the known grid targets when you have them).
    ``max_iter=0`` just assigns against the given centers. Stops early
    once the largest centroid move drops below ``tol``. Empty clusters are
    re-seeded at the point farthest from its nearest centroid. The
    recorded inertia trace is non-increasing.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    if max_iter < 0:
        raise ValueError("max_iter must be >= 0")

    rng = np.random.default_rng(seed)
    if isinstance(init, str):
        if init not in ("++", "plus-plus", "plusplus"):
            raise ValueError(f"unknown init {init!r}")
        centers = plus_plus_init(points, k, rng)
    else:
        centers = np.array(init, dtype=np.float64, copy=True)
        if centers.shape != (k, 2):
            raise ValueError(f"init centers must be ({k}, 2), got {centers.shape}")

    assignments = np.argmin(_sq_dists(points, centers), axis=1)
    trace = [float(_sq_dists(points, centers)[np.arange(n), assignments].sum())]
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        new_centers = np.empty_like(centers)
        filled: list = []
        empty: list = []
        for j in range(k):
            members = assignments == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
                filled.append(j)
            else:
                empty.append(j)
        for j in empty:
            # farthest point from its nearest (already placed) centroid
            dn = _sq_dists(points, new_centers[filled]).min(axis=1)
            far = int(np.argmax(dn))
            new_centers[j] = points[far]
            filled.append(j)
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        d2 = _sq_dists(points, centers)
        assignments = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), assignments].sum()))
        if shift < tol:
            break
    return CentroidSet(
        centroids=centers,
        inertia=trace[-1],
        iterations_run=iterations,
        inertia_trace=trace,
    )


def relabel(dataset: Dataset, centroids: CentroidSet) -> Dataset:
    """Snap every label to its nearest centroid and record the cluster id.

    The original coordinates stay in ``orig_x_px``/``orig_y_px``;
    relabeling an already-relabeled dataset with the same centroids is a
    no-op.
    """
    ids = assign_clusters(dataset.labels, centroids.centroids)
    new_labels = centroids.centroids[ids].astype(np.float32)
    return dataset.replace_labels(new_labels, ids.astype(np.int64))


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthConfig:
    """Geometry and noise model for the synthetic 5x5 fixation grid."""

    screen_w: int = 800
    screen_h: int = 600
    grid_rows: int = 5
    grid_cols: int = 5
    margin_frac: float = 0.1
    center_weight: float = 3.0
    jitter_radius_px: float = 40.0
    n_samples: int = 1000
    n_participants: int = 27
    channels: int = 32
    timesteps: int = 128
    noise_std: float = 5.0
    signal_gain: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter_radius_px > 100:
            raise ValueError("jitter_radius_px is capped at 100")
        if self.jitter_radius_px < 0:
            raise ValueError("jitter_radius_px must be >= 0")
        if self.center_weight < 1:
            raise ValueError("center_weight must be >= 1")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid must be at least 1x1")
        if self.n_participants < 1:
            raise ValueError("need at least one participant")
        if self.channels < 1 or self.timesteps < 1:
            raise ValueError("channels and timesteps must be positive")

    @property
    def n_targets(self) -> int:
        return self.grid_rows * self.grid_cols


def grid_targets(cfg: SynthConfig) -> np.ndarray:
    """[k, 2] target positions, row-major over the grid."""
    mx = cfg.margin_frac * cfg.screen_w
    my = cfg.margin_frac * cfg.screen_h
    xs = np.linspace(mx, cfg.screen_w - mx, cfg.grid_cols)
    ys = np.linspace(my, cfg.screen_h - my, cfg.grid_rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _signal_patterns(channels: int, timesteps: int) -> tuple:
    """Two fixed, smooth, linearly independent channel-time patterns."""
    c = (np.arange(channels) + 0.5) / channels
    t = (np.arange(timesteps) + 0.5) / timesteps
    p1 = np.sin(np.pi * c)[:, None] * np.sin(2 * np.pi * t)[None, :]
    p2 = np.cos(np.pi * c)[:, None] * np.sin(4 * np.pi * t)[None, :]
    return p1, p2


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Draw fixations on the target grid and synthesize matching EEG.

    The center target is drawn ``center_weight`` times more often than
    the others. The participant fixates the target itself, so the EEG
    window is gain * (x_norm * P1 + y_norm * P2) + Gaussian noise with
    (x, y) the *target* position. The recorded label is the target plus
    uniform-disk jitter of radius ``jitter_radius_px`` (never more),
    modeling tracker error that is uncorrelated with the recording and
    therefore unlearnable.
    """
    if cfg.n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(cfg.seed)
    targets = grid_targets(cfg)
    k = cfg.n_targets
    weights = np.ones(k)
    weights[k // 2] = cfg.center_weight
    probs = weights / weights.sum()

    n = cfg.n_samples
    target_ids = rng.choice(k, size=n, p=probs)
    fixated = targets[target_ids]
    radius = cfg.jitter_radius_px * np.sqrt(rng.random(n))
    theta = 2 * np.pi * rng.random(n)
    labels = fixated + np.stack(
        [radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    labels[:, 0] = np.clip(labels[:, 0], 0, cfg.screen_w)
    labels[:, 1] = np.clip(labels[:, 1], 0, cfg.screen_h)
    participants = rng.integers(0, cfg.n_participants, size=n)

    p1, p2 = _signal_patterns(cfg.channels, cfg.timesteps)
    x_norm = fixated[:, 0] / cfg.screen_w
    y_norm = fixated[:, 1] / cfg.screen_h
    eeg = cfg.signal_gain * (x_norm[:, None, None] * p1[None]
                             + y_norm[:, None, None] * p2[None])
    if cfg.noise_std > 0:
        eeg = eeg + cfg.noise_std * rng.standard_normal(eeg.shape)

    return Dataset(
        eeg=eeg.astype(np.float32),
        x_px=labels[:, 0],
        y_px=labels[:, 1],
        orig_x_px=labels[:, 0],
        orig_y_px=labels[:, 1],
        participant_id=participants,
        cluster_id=np.full(n, CLUSTER_UNSET),
    )


# ---------------------------------------------------------------- splitting

def split_dataset(dataset: Dataset, fractions: Sequence[float] = (0.7, 0.15, 0.15),
                  seed: int = 0) -> tuple:
    """Partition by participant so no participant spans two splits.

    Participant counts per split follow the largest-remainder rule on
    ``fractions`` (every split gets at least one participant).
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    participants = np.unique(dataset.participant_id)
    n_parts = len(participants)
    n_splits = len(fractions)
    if n_parts < n_splits:
        raise ValueError(
            f"{n_parts} participant(s) cannot fill {n_splits} splits")

    quotas = [f * n_parts for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for _ in range(n_parts - sum(counts)):
        j = int(np.argmax(remainders))
        counts[j] += 1
        remainders[j] = -1.0
    # every split must be populated; steal from the largest
    while min(counts) == 0:
        counts[int(np.argmax(counts))] -= 1
        counts[counts.index(0)] += 1

    order = np.random.default_rng(seed).permutation(participants)
    splits = []
    start = 0
    for c in counts:
        members = set(order[start:start + c].tolist())
        mask = np.array([pid in members for pid in dataset.participant_id])
        splits.append(dataset.subset(mask))
        start += c
    return tuple(splits)
