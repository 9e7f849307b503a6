"""Region-level 2D-to-3D dense distillation with group-balanced re-weighting.

Region targets are pooled from the 2D feature raster per mask region.
An offline pass clusters max-pooled region features into K groups with
k-means; per-group weights shrink for over-represented groups via
k_i = (n_i - n_min) / n_max, tau_i = 1 - k_i, w_i = tau_i / sum(tau).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blobio
from . import tensor as T
from .errors import InconsistencyError, InvalidCountError, InvalidInputError
from .nn import ModelParams
from .tokenizer import TokenSet

MEAN_POOLING = "mean"
MAX_POOLING = "max"

SCALE_MEAN_ONE = "mean-one"
SCALE_PAPER_LITERAL = "paper-literal"


@dataclass
class RegionFeatures2D:
    """Pooled 2D features aligned with a token set's region ordering."""

    features: np.ndarray  # M x L2 float64
    pooling: str
    region_ids: np.ndarray  # M int64


def pool_features_by_region(
    feat2d: np.ndarray, mask: np.ndarray, region_ids: np.ndarray, pooling: str
) -> np.ndarray:
    """Pool raster features over the pixels of each listed mask region."""
    if pooling not in (MEAN_POOLING, MAX_POOLING):
        raise InvalidInputError(f"unknown pooling {pooling!r}")
    feat = np.asarray(feat2d, dtype=np.float64)
    rows = []
    for rid in region_ids:
        ys, xs = np.nonzero(mask == rid)
        if len(ys) == 0:
            raise InconsistencyError(f"region {rid} has no masked pixels")
        pixels = feat[ys, xs]
        rows.append(pixels.mean(axis=0) if pooling == MEAN_POOLING else pixels.max(axis=0))
    return np.stack(rows)


def pool_region_features(
    feat2d: np.ndarray, mask: np.ndarray, tokens: TokenSet, pooling: str
) -> RegionFeatures2D:
    """Pool raster features over each surviving region's pixels."""
    region_ids = tokens.region_ids()
    return RegionFeatures2D(
        features=pool_features_by_region(feat2d, mask, region_ids, pooling),
        pooling=pooling,
        region_ids=region_ids.astype(np.int64),
    )


def project_3d(h: T.Tensor, params: ModelParams) -> T.Tensor:
    """Linear map from encoder features to the 2D feature dimension."""
    p = params.tensors
    return T.add(T.matmul(h, p["proj.w"]), p["proj.b"])


# ---------------------------------------------------------------------------
# k-means with deterministic k-means++ seeding


def _plusplus_seed(
    x: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ seeding: first pick uniform, later picks with prob proportional to D^2."""
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All points coincide with chosen centroids; any pick is equivalent.
            pick = int(rng.integers(n))
        else:
            cum = np.cumsum(d2 / total)
            pick = int(np.searchsorted(cum, rng.random(), side="right"))
            pick = min(pick, n - 1)
        centroids[j] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)  # first minimum: lowest centroid index on ties


def _sse(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(((x - centroids[assign]) ** 2).sum())


@dataclass
class KMeansResult:
    centroids: np.ndarray  # K x L
    assignment: np.ndarray  # N int64
    sse: float
    n_iter: int
    converged: bool


def kmeans(
    features: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    n_restarts: int = 8,
) -> KMeansResult:
    """Lloyd iterations to an assignment fixpoint from k-means++ seeds.

    Runs ``n_restarts`` seeded restarts and keeps the lowest
    within-cluster SSE. An empty cluster re-seeds, deterministically,
    from the point farthest from its assigned centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"features must be N x L, got {x.shape}")
    if not (1 <= k <= len(x)):
        raise InvalidCountError(f"cannot form {k} clusters from {len(x)} points")

    best: KMeansResult | None = None
    for restart in range(n_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([0xC1A5, seed, restart]))
        centroids = _plusplus_seed(x, k, rng)
        assignment = _assign(x, centroids)
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            for j in range(k):
                members = assignment == j
                if members.any():
                    centroids[j] = x[members].mean(axis=0)
                else:
                    # Re-seed the empty cluster from the farthest point.
                    d2 = ((x - centroids[assignment]) ** 2).sum(axis=1)
                    centroids[j] = x[int(np.argmax(d2))]
            new_assignment = _assign(x, centroids)
            if np.array_equal(new_assignment, assignment):
                converged = True
                break
            assignment = new_assignment
        result = KMeansResult(
            centroids=centroids,
            assignment=assignment.astype(np.int64),
            sse=_sse(x, centroids, assignment),
            n_iter=it,
            converged=converged,
        )
        if best is None or result.sse < best.sse - 1e-12:
            best = result
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# Weight table


@dataclass
class WeightTable:
    """Per-group distillation weights derived from cluster population counts."""

    group_of_region: np.ndarray  # dataset regions -> group index
    counts: np.ndarray  # K int64
    k: np.ndarray  # K float64
    tau: np.ndarray  # K float64
    w: np.ndarray  # K float64, sums to 1
    n_groups: int
    seed: int


def weights_from_counts(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weight formulas on group counts: k, tau, and normalized w."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0 or np.any(counts <= 0):
        raise InvalidInputError("group counts must be a non-empty positive vector")
    k = (counts - counts.min()) / counts.max()
    tau = 1.0 - k
    return k, tau, tau / tau.sum()


def build_weight_table(
    region_features: np.ndarray, n_groups: int, seed: int
) -> tuple[WeightTable, np.ndarray]:
    """Cluster max-pooled region features and derive group weights.

    Computed once per dataset before stage-1 training; region-to-group
    lookup during training uses the returned centroids.
    """
    feats = np.asarray(region_features, dtype=np.float64)
    if len(feats) < n_groups:
        raise InvalidCountError(
            f"dataset has {len(feats)} regions, fewer than {n_groups} groups"
        )
    result = kmeans(feats, n_groups, seed)
    counts = np.bincount(result.assignment, minlength=n_groups).astype(np.int64)
    k, tau, w = weights_from_counts(counts)
    table = WeightTable(
        group_of_region=result.assignment,
        counts=counts,
        k=k,
        tau=tau,
        w=w,
        n_groups=n_groups,
        seed=seed,
    )
    return table, result.centroids


def assign_groups(region_features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest stored centroid per region feature (ties to the lowest group)."""
    return _assign(
        np.asarray(region_features, dtype=np.float64),
        np.asarray(centroids, dtype=np.float64),
    ).astype(np.int64)


def save_weight_table(path: str | Path, table: WeightTable, centroids: np.ndarray) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "weight-table",
        "version": 1,
        "n_groups": table.n_groups,
        "seed": table.seed,
        "counts": [int(c) for c in table.counts],
        "k": list(map(float, table.k)),
        "tau": list(map(float, table.tau)),
        "w": list(map(float, table.w)),
        "group_of_region": [int(g) for g in table.group_of_region],
        "centroid_shape": list(centroids.shape),
    }
    blobio.dump_manifest(path / "weight_table.json", manifest)
    blobio.write_blob(path / "centroids.bin", np.asarray(centroids, dtype="<f8"))


def load_weight_table(path: str | Path) -> tuple[WeightTable, np.ndarray]:
    path = Path(path)
    manifest = blobio.load_manifest(
        path / "weight_table.json",
        ("format", "n_groups", "seed", "counts", "k", "tau", "w", "group_of_region"),
    )
    if manifest["format"] != "weight-table":
        raise blobio.MalformedManifestError(f"{path}: not a weight table")
    table = WeightTable(
        group_of_region=np.array(manifest["group_of_region"], dtype=np.int64),
        counts=np.array(manifest["counts"], dtype=np.int64),
        k=np.array(manifest["k"], dtype=np.float64),
        tau=np.array(manifest["tau"], dtype=np.float64),
        w=np.array(manifest["w"], dtype=np.float64),
        n_groups=int(manifest["n_groups"]),
        seed=int(manifest["seed"]),
    )
    centroids = blobio.read_blob(
        path / "centroids.bin", "f8", tuple(manifest["centroid_shape"])
    )
    return table, centroids


# ---------------------------------------------------------------------------
# Loss


def stage1_loss(
    f2d: np.ndarray,
    f3d: T.Tensor,
    table: WeightTable,
    groups: np.ndarray,
    scale_mode: str = SCALE_MEAN_ONE,
    beta: float = 1.0,
) -> T.Tensor:
    """Weighted mean of per-region smooth L1 between pooled 2D and projected 3D features.

    ``mean-one`` scales weights by K so their average stays 1 and the
    effective learning rate matches the unweighted loss;
    ``paper-literal`` applies the normalized weights as-is.
    """
    if scale_mode not in (SCALE_MEAN_ONE, SCALE_PAPER_LITERAL):
        raise InvalidInputError(f"unknown scale_mode {scale_mode!r}")
    targets = np.asarray(f2d, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    m = targets.shape[0]
    if f3d.shape != targets.shape or groups.shape != (m,):
        raise InvalidInputError(
            f"misaligned stage-1 loss inputs: {targets.shape}, {f3d.shape}, {groups.shape}"
        )
    if groups.min() < 0 or groups.max() >= table.n_groups:
        raise InconsistencyError("region group index outside the weight table")

    scale = float(table.n_groups) if scale_mode == SCALE_MEAN_ONE else 1.0
    total: T.Tensor | None = None
    for i in range(m):
        term = T.smooth_l1(
            T.slice_axis(f3d, 0, i, i + 1), T.constant(targets[i : i + 1]), beta=beta
        )
        term = T.mul(term, scale * float(table.w[groups[i]]))
        total = term if total is None else T.add(total, term)
    assert total is not None
    return T.mul(total, 1.0 / m)


def uniform_stage1_loss(f2d: np.ndarray, f3d: T.Tensor, beta: float = 1.0) -> T.Tensor:
    """Unweighted distillation loss (the re-weighting ablation)."""
    return T.smooth_l1(f3d, T.constant(np.asarray(f2d, dtype=np.float64)), beta=beta)


def region_cosines(f2d: np.ndarray, f3d: np.ndarray) -> np.ndarray:
    """Per-region cosine similarity between target and projected features."""
    a = np.asarray(f2d, dtype=np.float64)
    b = np.asarray(f3d, dtype=np.float64)
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.maximum(den, 1e-12)
