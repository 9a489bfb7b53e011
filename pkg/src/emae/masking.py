"""Mask generation: the parallel (disjoint K-way) partition and the ablation strategies.

Conventions: a mask vector has entry 1 where the patch is *masked* (hidden
from the encoder and predicted by the decoder) and 0 where it is visible.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np

from . import rng
from .errors import InvalidConfiguration, InvalidPair


@dataclass(frozen=True, eq=False)
class MaskPartition:
    """One draw of the parallel mask strategy.

    ``parts[i]`` holds the ``N/K`` visible patch indices of part ``i`` and
    ``masks[i]`` is the matching binary mask (1 = masked).
    """

    n_patches: int
    k_parts: int
    rand_values: np.ndarray
    sorted_ids: np.ndarray
    parts: np.ndarray
    masks: np.ndarray

    @property
    def part_size(self) -> int:
        return self.n_patches // self.k_parts

    @property
    def mask_ratio(self) -> float:
        return mask_ratio(self)

    def visible(self, i: int) -> np.ndarray:
        return self.parts[i]

    def part_of(self) -> np.ndarray:
        """Part index of every patch position, shape ``[N]``."""
        owner = np.empty(self.n_patches, dtype=np.int64)
        for i, ids in enumerate(self.parts):
            owner[ids] = i
        return owner


@dataclass(frozen=True, eq=False)
class OverlapSet:
    part_i: int
    part_j: int
    positions: np.ndarray

    @property
    def count(self) -> int:
        return int(self.positions.sum())


def _check_partition_args(n_patches, k_parts):
    if k_parts < 2:
        raise InvalidConfiguration(f"k_parts must be >= 2, got {k_parts}")
    if n_patches <= 0 or n_patches % k_parts != 0:
        raise InvalidConfiguration(
            f"n_patches={n_patches} is not divisible by k_parts={k_parts}"
        )


def partition_from_values(rand_values: np.ndarray, k_parts: int) -> MaskPartition:
    """Build the partition for a given vector of uniform draws."""
    rand_values = np.asarray(rand_values, dtype=np.float64)
    n = rand_values.shape[0]
    _check_partition_args(n, k_parts)
    # stable: ties broken by original index
    ids = np.argsort(rand_values, kind="stable")
    size = n // k_parts
    parts = ids.reshape(k_parts, size)
    masks = np.ones((k_parts, n), dtype=np.uint8)
    masks[np.arange(k_parts)[:, None], parts] = 0
    for a in (rand_values, ids, parts, masks):
        a.setflags(write=False)
    return MaskPartition(n, k_parts, rand_values, ids, parts, masks)


def generate_partition(n_patches: int, k_parts: int, seed: int, *path: int) -> MaskPartition:
    """Draw a parallel-mask partition of ``n_patches`` into ``k_parts`` parts.

    ``path`` (e.g. epoch, image index) selects an independent random stream
    under the same seed.
    """
    _check_partition_args(n_patches, k_parts)
    return partition_from_values(rng.uniform(n_patches, seed, *path), k_parts)


def mask_ratio(partition: MaskPartition) -> float:
    k = partition.k_parts
    return (k - 1) / k


def mask_ratio_exact(k_parts: int) -> Fraction:
    return Fraction(k_parts - 1, k_parts)


def overlap(partition: MaskPartition, i: int, j: int) -> OverlapSet:
    """Positions masked in both part ``i`` and part ``j``."""
    k = partition.k_parts
    if not (0 <= i < k and 0 <= j < k):
        raise InvalidPair(f"part indices ({i}, {j}) out of range for K={k}")
    if i == j:
        raise InvalidPair(f"overlap needs two distinct parts, got i=j={i}")
    return OverlapSet(i, j, partition.masks[i] & partition.masks[j])


def overlap_ratio(k_parts: int) -> Fraction:
    """Overlap size relative to the number of positions one part predicts."""
    return Fraction(k_parts - 2, k_parts - 1)


def pair_indices(k_parts: int) -> tuple[np.ndarray, np.ndarray]:
    """Unordered pairs ``i < j`` in lexicographic order."""
    i, j = np.triu_indices(k_parts, k=1)
    return i.astype(np.int64), j.astype(np.int64)


# ---------------------------------------------------------------------------
# Strategies used by the ablations


@dataclass(frozen=True)
class Parallel:
    k_parts: int = 4


@dataclass(frozen=True)
class PureRandomRepeated:
    """``times`` independent random masks, each hiding a ``ratio`` fraction."""

    times: int = 4
    ratio: float = 0.75


@dataclass(frozen=True)
class Complementary:
    """Two draws: a random visible set holding a ``ratio`` fraction of the
    patches, then exactly its complement."""

    ratio: float = 0.25


@dataclass(frozen=True)
class SingleRandom:
    """Plain MAE masking: one random mask hiding a ``ratio`` fraction."""

    ratio: float = 0.75


MaskStrategy = Union[Parallel, PureRandomRepeated, Complementary, SingleRandom]


def _count(ratio, n):
    if not 0.0 < ratio < 1.0:
        raise InvalidConfiguration(f"ratio must be in (0, 1), got {ratio}")
    c = ratio * n
    if abs(c - round(c)) > 1e-9:
        raise InvalidConfiguration(f"ratio*N = {ratio}*{n} is not an integer")
    return int(round(c))


def _mask_from_visible(visible, n):
    m = np.ones(n, dtype=np.uint8)
    m[visible] = 0
    return m


def _random_visible(n, n_visible, seed, *path):
    ids = np.argsort(rng.uniform(n, seed, *path), kind="stable")
    return ids[:n_visible]


def generate_ablation_masks(kind: MaskStrategy, n_patches: int, seed: int, *path: int):
    """Return the draws of ``kind`` as a list of ``(visible_ids, mask)`` pairs."""
    n = n_patches
    if isinstance(kind, Parallel):
        p = generate_partition(n, kind.k_parts, seed, *path)
        return [(p.parts[i], p.masks[i]) for i in range(kind.k_parts)]
    if isinstance(kind, SingleRandom):
        vis = _random_visible(n, n - _count(kind.ratio, n), seed, *path, 0)
        return [(vis, _mask_from_visible(vis, n))]
    if isinstance(kind, PureRandomRepeated):
        if kind.times < 1:
            raise InvalidConfiguration(f"times must be >= 1, got {kind.times}")
        n_vis = n - _count(kind.ratio, n)
        out = []
        for t in range(kind.times):
            vis = _random_visible(n, n_vis, seed, *path, t)
            out.append((vis, _mask_from_visible(vis, n)))
        return out
    if isinstance(kind, Complementary):
        n_vis = _count(kind.ratio, n)
        ids = np.argsort(rng.uniform(n, seed, *path, 0), kind="stable")
        first, second = ids[:n_vis], ids[n_vis:]
        return [(first, _mask_from_visible(first, n)), (second, _mask_from_visible(second, n))]
    raise InvalidConfiguration(f"unknown mask strategy {kind!r}")


def coverage_stats(draws, n_patches: int):
    """Fraction of patches visible in at least one draw, and per-patch visit counts."""
    counts = np.zeros(n_patches, dtype=np.int64)
    for vis in draws:
        np.add.at(counts, np.asarray(vis, dtype=np.int64), 1)
    return float(np.count_nonzero(counts)) / n_patches, counts


def parse_strategy(name: str, k_parts: int = 4, times: int = 4, ratio: float | None = None) -> MaskStrategy:
    """Strategy from its command-line / config name."""
    name = name.lower().replace("_", "-")
    if name == "parallel":
        return Parallel(k_parts)
    if name in ("pure-random", "pure-random-repeated"):
        return PureRandomRepeated(times, 0.75 if ratio is None else ratio)
    if name == "complementary":
        return Complementary(0.25 if ratio is None else ratio)
    if name in ("single-random", "baseline"):
        return SingleRandom(0.75 if ratio is None else ratio)
    raise InvalidConfiguration(f"unknown mask strategy {name!r}")


def strategy_name(kind: MaskStrategy) -> str:
    return {
        Parallel: "parallel",
        PureRandomRepeated: "pure-random",
        Complementary: "complementary",
        SingleRandom: "single-random",
    }[type(kind)]


def render_grid(partition: MaskPartition, width: int | None = None) -> str:
    """Text grid of the part index owning each patch (raster order)."""
    n = partition.n_patches
    if width is None:
        side = int(round(n ** 0.5))
        width = side if side * side == n else n
    owner = partition.part_of()
    pad = len(str(partition.k_parts - 1))
    rows = []
    for r in range(0, n, width):
        rows.append(" ".join(str(v).rjust(pad) for v in owner[r:r + width]))
    return "\n".join(rows)


def warn_empty_overlap(k_parts: int):
    warnings.warn(
        f"K={k_parts}: parts share no masked position, consistency term is 0",
        RuntimeWarning,
        stacklevel=3,
    )
