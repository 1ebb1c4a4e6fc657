"""Synthetic paired source/target domains with identity structure.

Both domains draw identity centroids inside a shared low-dimensional
identity subspace (the first id_dim coordinates), with isotropic
within-identity noise and per-camera offsets confined to the complementary
"background" coordinates; that shared layout is what lets supervised source
training transfer to the target, as with pretrained re-id features. A slice
of samples per domain has one fixed canonical coordinate block zeroed
("occlusion"), spawning a genuine sub-cluster per identity whose members
look dissimilar to their clean peers. Target samples additionally pass
through a shared random affine distortion, so neither the occlusion block
nor the identity subspace can be read off the raw target coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .errors import ConfigError

MIN_CENTROID_ANGLE_DEG = 15.0


@dataclass
class SynthConfig:
    ids_source: int = 50
    ids_target: int = 50
    per_id: int = 12
    cams: int = 4
    d_in: int = 64
    id_dim: int | None = None  # identity-subspace width; None -> d_in // 2
    intra_sigma: float = 0.11
    shift: float = 0.6
    occl_rate: float = 0.3
    occl_frac: float = 0.28
    cam_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("ids_source", "ids_target", "per_id", "cams"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.d_in < 2:
            raise ConfigError("d_in must be at least 2")
        for name in ("occl_rate", "occl_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 1 <= self.identity_dim <= self.d_in:
            raise ConfigError("id_dim must lie in [1, d_in]")
        if self.block_size >= self.identity_dim:
            raise ConfigError(
                f"d_in={self.d_in} too small for occl_frac={self.occl_frac} block"
            )

    @property
    def identity_dim(self) -> int:
        return self.d_in // 2 if self.id_dim is None else self.id_dim

    @property
    def block_size(self) -> int:
        return int(round(self.occl_frac * self.d_in))


def sample_centroids(rng: np.random.Generator, count: int, dim: int,
                     active_dim: int | None = None,
                     min_angle_deg: float = MIN_CENTROID_ANGLE_DEG) -> np.ndarray:
    """Unit centroids with a rejection-enforced minimum pairwise angle.

    When active_dim is given, centroids live in the span of the first
    active_dim coordinates (the shared identity subspace).
    """
    active = dim if active_dim is None else active_dim
    max_cos = np.cos(np.deg2rad(min_angle_deg))
    centroids = np.zeros((count, dim))
    have = 0
    attempts = 0
    while have < count:
        attempts += 1
        if attempts > 1000 * count:
            raise ConfigError("cannot place centroids with the requested separation")
        c = np.zeros(dim)
        c[:active] = rng.normal(size=active)
        c /= np.linalg.norm(c)
        if have and np.max(centroids[:have] @ c) > max_cos:
            continue
        centroids[have] = c
        have += 1
    return centroids


def build_domain(centroids: np.ndarray, config: SynthConfig,
                 rng: np.random.Generator, shifted: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assemble one domain from given centroids.

    Returns (features, identity index per sample, camera per sample); the
    identity index refers into `centroids`. Occlusion zeroes the first
    block_size canonical coordinates before the (target-only) affine shift.
    """
    ids = centroids.shape[0]
    d = config.d_in
    n = ids * config.per_id
    identity = np.repeat(np.arange(ids), config.per_id)
    camera = rng.integers(0, config.cams, size=n)
    # camera clutter lives off the identity subspace, like backgrounds
    cam_offsets = np.zeros((config.cams, d))
    clutter = d - config.identity_dim
    if clutter > 0:
        cam_offsets[:, config.identity_dim:] = (
            config.cam_sigma * rng.normal(size=(config.cams, clutter)) / np.sqrt(max(clutter, 1))
        )

    x = centroids[identity] + config.intra_sigma * rng.normal(size=(n, d))
    x += cam_offsets[camera]

    occluded = rng.random(n) < config.occl_rate
    if config.block_size > 0:
        x[occluded, :config.block_size] = 0.0

    if shifted:
        mix = np.eye(d) + config.shift * rng.normal(size=(d, d)) / np.sqrt(d)
        x = x @ mix.T

    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ConfigError("degenerate sample: occlusion zeroed an entire feature vector")
    return x / norms, identity, camera


def generate(config: SynthConfig) -> tuple[Dataset, Dataset]:
    """Labeled source and target datasets with disjoint identity spaces.

    Target identity labels are offset by ids_source; they ride along on the
    returned Dataset for the evaluator only and are written to a separate
    ground-truth file by the CLI.
    """
    rng = np.random.default_rng(config.seed)
    src_centroids = sample_centroids(rng, config.ids_source, config.d_in, config.identity_dim)
    tgt_centroids = sample_centroids(rng, config.ids_target, config.d_in, config.identity_dim)

    src_x, src_id, src_cam = build_domain(src_centroids, config, rng, shifted=False)
    tgt_x, tgt_id, tgt_cam = build_domain(tgt_centroids, config, rng, shifted=True)

    source = Dataset(src_x, identities=src_id, cameras=src_cam)
    target = Dataset(tgt_x, identities=tgt_id + config.ids_source, cameras=tgt_cam)
    return source, target
