"""In-memory sample collections shared by synthesis, training and IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNLABELED = 255
DOMAIN_SOURCE = 0
DOMAIN_TARGET = 1

MODE_SPATIAL = "spatial"
MODE_KSPACE = "kspace"


@dataclass
class Dataset:
    """A homogeneous record set: inputs, labels, domain tags, patient ids.

    x is (N, H, W) for spatial mode or (N, 2, H, W) real/imaginary planes
    for k-space mode, stored float32 to mirror the on-disk container.
    """

    mode: str
    x: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    patients: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.domains = np.asarray(self.domains, dtype=np.uint8)
        self.patients = np.asarray(self.patients, dtype=np.uint32)
        if self.mode not in (MODE_SPATIAL, MODE_KSPACE):
            raise ValueError(f"unknown input mode {self.mode!r}")
        want = 3 if self.mode == MODE_SPATIAL else 4
        if self.x.ndim != want:
            raise ValueError(
                f"{self.mode} records must be {want}-D, got {self.x.ndim}-D"
            )
        if self.mode == MODE_KSPACE and self.x.shape[1] != 2:
            raise ValueError("k-space records carry 2 planes (real, imaginary)")
        n = self.x.shape[0]
        for name, arr in (
            ("labels", self.labels),
            ("domains", self.domains),
            ("patients", self.patients),
        ):
            if arr.shape != (n,):
                raise ValueError(f"{name} length {arr.shape} != record count {n}")
        bad = (self.labels > 4) & (self.labels != UNLABELED)
        if bad.any():
            raise ValueError("labels must be in 0..4 or UNLABELED")

    def __len__(self):
        return int(self.x.shape[0])

    @property
    def hw(self):
        return (int(self.x.shape[-2]), int(self.x.shape[-1]))

    @property
    def channels(self):
        return 1 if self.mode == MODE_SPATIAL else 2

    def net_input(self, idx):
        """float64 (len(idx), C, H, W) batch for the networks."""
        xs = self.x[idx].astype(np.float64)
        if self.mode == MODE_SPATIAL:
            xs = xs[:, None, :, :]
        return xs

    def subset(self, mask_or_idx):
        return Dataset(
            self.mode,
            self.x[mask_or_idx],
            self.labels[mask_or_idx],
            self.domains[mask_or_idx],
            self.patients[mask_or_idx],
        )

    def subset_by_patients(self, patient_ids):
        return self.subset(np.isin(self.patients, list(patient_ids)))

    def strip_labels(self):
        """Same records, every label replaced by UNLABELED."""
        return Dataset(
            self.mode,
            self.x.copy(),
            np.full_like(self.labels, UNLABELED),
            self.domains.copy(),
            self.patients.copy(),
        )

    def patient_list(self):
        return sorted(int(p) for p in np.unique(self.patients))

    def class_counts(self):
        counts = {}
        for c in np.unique(self.labels):
            counts[int(c)] = int(np.sum(self.labels == c))
        return counts
