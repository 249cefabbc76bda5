"""Seeded synthetic classification data with controllable class imbalance.

Gaussian blobs stand in for image datasets: the phenomena under study live
in the embedding geometry, and blobs keep every experiment at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InfeasibleConfigError

IMBALANCE_KINDS = ("balanced", "longtail", "step")
DEFAULT_SEPARATION = 2.0


@dataclass
class ImbalanceSpec:
    kind: str = "balanced"
    rho: float = 1.0  # max class size / min class size
    mu: float = 0.5  # fraction of classes that are minority (step only)
    n_max: int = 100

    def validate(self) -> None:
        if self.kind not in IMBALANCE_KINDS:
            raise InfeasibleConfigError(f"unknown imbalance kind {self.kind!r}")
        if self.rho < 1:
            raise InfeasibleConfigError(f"rho must be >= 1, got {self.rho}")
        if self.kind == "step" and not 0 < self.mu < 1:
            raise InfeasibleConfigError(f"mu must lie in (0, 1), got {self.mu}")
        if self.n_max < 2:
            raise InfeasibleConfigError(f"n_max must be >= 2, got {self.n_max}")


def imbalance_counts(k: int, spec: ImbalanceSpec) -> np.ndarray:
    """Per-class sample counts for the requested imbalance profile.

    longtail decays geometrically so class 0 has n_max samples and class
    k-1 has n_max/rho; step gives the first k - ceil(mu*k) classes n_max
    and the remaining ceil(mu*k) classes n_max/rho.
    """
    spec.validate()
    if spec.kind == "balanced":
        counts = np.full(k, spec.n_max, dtype=int)
    elif spec.kind == "longtail":
        i = np.arange(k)
        counts = np.round(spec.n_max * spec.rho ** (-i / (k - 1.0))).astype(int)
    else:
        n_minority = math.ceil(spec.mu * k)
        if n_minority >= k:
            raise InfeasibleConfigError(
                f"step imbalance with mu={spec.mu} leaves no frequent class for k={k}"
            )
        counts = np.full(k, spec.n_max, dtype=int)
        counts[k - n_minority:] = round(spec.n_max / spec.rho)
    if np.any(counts < 1):
        raise InfeasibleConfigError(
            f"imbalance spec rounds a class to zero samples: {counts.tolist()}"
        )
    return counts


@dataclass
class Blobs:
    inputs: np.ndarray  # (N, d_in)
    labels: np.ndarray  # (N,)
    class_means: np.ndarray  # (k, d_in)
    spread: float
    seed: int

    @property
    def k(self) -> int:
        return self.class_means.shape[0]

    @property
    def d_in(self) -> int:
        return self.class_means.shape[1]

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def save(self, directory, stem: str = "blobs") -> None:
        """Two-file format plus a JSON sidecar with the generation params."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / f"{stem}_inputs.csv", self.inputs,
                   delimiter=",", fmt="%.12g")
        np.savetxt(directory / f"{stem}_labels.csv", self.labels, fmt="%d")
        sidecar = {
            "k": int(self.k),
            "d_in": int(self.d_in),
            "counts": [int(c) for c in self.counts()],
            "spread": self.spread,
            "seed": int(self.seed),
        }
        (directory / f"{stem}_meta.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )


def make_blobs(k: int, d_in: int, counts, spread: float, seed: int,
               separation: float = DEFAULT_SEPARATION) -> Blobs:
    """Gaussian blobs around k distinct random unit directions.

    Class means are unit vectors scaled by `separation`; samples add
    isotropic Gaussian noise with standard deviation `spread`. Fully
    determined by the seed. Nearly coincident mean directions are
    resampled so "distinct" holds with some room.
    """
    counts = np.asarray(counts, dtype=int)
    if counts.shape != (k,) or np.any(counts < 1):
        raise InfeasibleConfigError(f"counts must be {k} positive ints, got {counts}")
    if spread <= 0:
        raise InfeasibleConfigError(f"spread must be positive, got {spread}")
    ss = np.random.SeedSequence(seed)
    rng_means, rng_noise = (np.random.default_rng(s) for s in ss.spawn(2))

    means = np.empty((k, d_in))
    placed = 0
    for _ in range(100 * k):
        v = rng_means.normal(size=d_in)
        v /= np.linalg.norm(v)
        if placed and np.max(means[:placed] @ v) > 0.95:
            continue
        means[placed] = v
        placed += 1
        if placed == k:
            break
    if placed < k:
        raise InfeasibleConfigError(
            f"could not place {k} distinct mean directions in {d_in} dimensions"
        )
    means *= separation

    n = int(counts.sum())
    labels = np.repeat(np.arange(k), counts)
    inputs = means[labels] + spread * rng_noise.normal(size=(n, d_in))
    return Blobs(inputs=inputs, labels=labels, class_means=means,
                 spread=spread, seed=seed)


def make_blob_pair(k: int, d_in: int, counts, spread: float, seed: int,
                   test_per_class: int, separation: float = DEFAULT_SEPARATION):
    """A train/test pair sharing class means; the test set is balanced.

    The means, train noise, and test noise come from independent seeded
    streams, so the pair is a pure function of the arguments.
    """
    train = make_blobs(k, d_in, counts, spread, seed, separation)
    ss = np.random.SeedSequence((seed, 0x7E57))
    rng_noise = np.random.default_rng(ss)
    test_counts = np.full(k, test_per_class, dtype=int)
    labels = np.repeat(np.arange(k), test_counts)
    inputs = train.class_means[labels] + spread * rng_noise.normal(
        size=(int(test_counts.sum()), d_in))
    test = Blobs(inputs=inputs, labels=labels, class_means=train.class_means,
                 spread=spread, seed=seed)
    return train, test


def load_blobs(directory, stem: str = "blobs") -> Blobs:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}_meta.json").read_text())
    inputs = np.loadtxt(directory / f"{stem}_inputs.csv", delimiter=",", ndmin=2)
    labels = np.loadtxt(directory / f"{stem}_labels.csv", dtype=int, ndmin=1)
    counts = np.bincount(labels, minlength=meta["k"])
    means = np.empty((meta["k"], meta["d_in"]))
    for j in range(meta["k"]):
        means[j] = inputs[labels == j].mean(axis=0)
    blobs = Blobs(inputs=inputs, labels=labels, class_means=means,
                  spread=meta["spread"], seed=meta["seed"])
    if counts.tolist() != meta["counts"]:
        raise InfeasibleConfigError("labels file does not match sidecar counts")
    return blobs
