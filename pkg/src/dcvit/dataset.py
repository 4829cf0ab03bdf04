"""In-memory dataset container: paired EEG windows and gaze labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLUSTER_UNSET = -1


@dataclass
class Dataset:
    """Paired EEG samples [n, C, T] and per-sample gaze labels in pixels.

    ``orig_x_px``/``orig_y_px`` preserve the pre-relabeling coordinates;
    ``cluster_id`` is CLUSTER_UNSET until k-means relabeling assigns one.
    """

    eeg: np.ndarray
    x_px: np.ndarray
    y_px: np.ndarray
    orig_x_px: np.ndarray
    orig_y_px: np.ndarray
    participant_id: np.ndarray
    cluster_id: np.ndarray

    def __post_init__(self):
        self.eeg = np.ascontiguousarray(self.eeg, dtype=np.float32)
        if self.eeg.ndim != 3:
            raise ValueError(f"eeg must be [n, C, T], got shape {self.eeg.shape}")
        n = self.eeg.shape[0]
        for name in ("x_px", "y_px", "orig_x_px", "orig_y_px"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            if n and not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        for name in ("participant_id", "cluster_id"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.eeg.shape[0]

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[1]

    @property
    def n_timesteps(self) -> int:
        return self.eeg.shape[2]

    @property
    def labels(self) -> np.ndarray:
        """[n, 2] array of (x, y) pixel coordinates."""
        return np.stack([self.x_px, self.y_px], axis=1)

    @property
    def orig_labels(self) -> np.ndarray:
        return np.stack([self.orig_x_px, self.orig_y_px], axis=1)

    def subset(self, index) -> "Dataset":
        return Dataset(
            eeg=self.eeg[index],
            x_px=self.x_px[index],
            y_px=self.y_px[index],
            orig_x_px=self.orig_x_px[index],
            orig_y_px=self.orig_y_px[index],
            participant_id=self.participant_id[index],
            cluster_id=self.cluster_id[index],
        )

    def replace_labels(self, labels_px: np.ndarray,
                       cluster_id: np.ndarray) -> "Dataset":
        """New dataset with (x, y) swapped out; provenance fields untouched."""
        return Dataset(
            eeg=self.eeg,
            x_px=labels_px[:, 0],
            y_px=labels_px[:, 1],
            orig_x_px=self.orig_x_px,
            orig_y_px=self.orig_y_px,
            participant_id=self.participant_id,
            cluster_id=cluster_id,
        )

    @classmethod
    def empty(cls, n_channels: int, n_timesteps: int) -> "Dataset":
        z = np.zeros(0)
        return cls(
            eeg=np.zeros((0, n_channels, n_timesteps)),
            x_px=z, y_px=z, orig_x_px=z, orig_y_px=z,
            participant_id=z, cluster_id=z,
        )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bit-exact equality of every field."""
    return (
        a.eeg.shape == b.eeg.shape
        and np.array_equal(a.eeg, b.eeg)
        and np.array_equal(a.x_px, b.x_px)
        and np.array_equal(a.y_px, b.y_px)
        and np.array_equal(a.orig_x_px, b.orig_x_px)
        and np.array_equal(a.orig_y_px, b.orig_y_px)
        and np.array_equal(a.participant_id, b.participant_id)
        and np.array_equal(a.cluster_id, b.cluster_id)
    )
