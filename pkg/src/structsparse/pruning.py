"""Structured pruning: constraint sets, Euclidean projections and ADMM.

Weights are pruned in groups. Conv weights ``(out_c, in_c, kh, kw)`` are viewed
as the matrix ``(out_c, in_c*kh*kw)`` for column and filter pruning; channel
pruning groups by input channel; pattern and connectivity pruning act on the
individual ``kh x kw`` kernels.

Group scores are L2 norms. ``k = round(keep_ratio * group_count)`` (half up,
at least one) groups survive; ties go to the lowest group index.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Union

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "PruningError",
    "Column",
    "Filter",
    "Channel",
    "Connectivity",
    "Pattern",
    "PatternLibrary",
    "SparsityStructure",
    "structure_from_dict",
    "structure_to_dict",
    "keep_count",
    "Support",
    "support",
    "project",
    "is_trivial",
    "select_pattern_library",
    "resolve_structure",
    "AdmmConfig",
    "PruneTask",
    "AdmmState",
    "AdmmResult",
    "admm_prune",
    "sparsity_report",
]


class PruningError(ValueError):
    pass


def _check_ratio(r: float) -> None:
    if not 0.0 < r <= 1.0:
        raise PruningError(f"keep_ratio must be in (0, 1], got {r}")


@dataclass(frozen=True)
class Column:
    keep_ratio: float

    def __post_init__(self):
        _check_ratio(self.keep_ratio)


@dataclass(frozen=True)
class Filter:
    keep_ratio: float

    def __post_init__(self):
        _check_ratio(self.keep_ratio)


@dataclass(frozen=True)
class Channel:
    keep_ratio: float

    def __post_init__(self):
        _check_ratio(self.keep_ratio)


@dataclass(frozen=True)
class Connectivity:
    keep_ratio: float

    def __post_init__(self):
        _check_ratio(self.keep_ratio)


@dataclass(frozen=True, eq=False)
class PatternLibrary:
    """Binary kernel masks, shape ``(library_size, kh, kw)``."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=bool)
        if m.ndim != 3 or len(m) == 0:
            raise PruningError("pattern library needs at least one (kh, kw) mask")
        counts = m.reshape(len(m), -1).sum(axis=1)
        if np.any(counts != counts[0]) or counts[0] == 0:
            raise PruningError("library masks must all retain the same positive count")
        if len({row.tobytes() for row in m.reshape(len(m), -1)}) != len(m):
            raise PruningError("library masks must be distinct")
        if len(m) > 0xFFFE:
            raise PruningError("library size capped at 65534")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)

    def __len__(self) -> int:
        return len(self.masks)

    def __eq__(self, other) -> bool:
        return isinstance(other, PatternLibrary) and np.array_equal(self.masks, other.masks)

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    @property
    def retained(self) -> int:
        return int(self.masks[0].sum())

    def positions(self) -> list[list[int]]:
        return [np.flatnonzero(m).tolist() for m in self.masks]

    @classmethod
    def from_positions(cls, positions, kh: int, kw: int) -> "PatternLibrary":
        masks = np.zeros((len(positions), kh * kw), dtype=bool)
        for row, pos in zip(masks, positions):
            row[list(pos)] = True
        return cls(masks.reshape(-1, kh, kw))

    @classmethod
    def full(cls, kh: int, kw: int) -> "PatternLibrary":
        return cls(np.ones((1, kh, kw), dtype=bool))


@dataclass(frozen=True)
class Pattern:
    """Each kernel keeps the positions of one library mask.

    ``keep_ratio < 1`` additionally applies connectivity pruning: only that
    fraction of kernels survives. ``library`` is chosen from the weights
    (see `select_pattern_library`) when left unset.
    """

    kernel_h: int
    kernel_w: int
    retained_per_kernel: int
    library_size: int
    keep_ratio: float = 1.0
    library: PatternLibrary | None = field(default=None, compare=False)

    def __post_init__(self):
        _check_ratio(self.keep_ratio)
        if not 1 <= self.retained_per_kernel <= self.kernel_h * self.kernel_w:
            raise PruningError(
                f"retained_per_kernel must be in [1, {self.kernel_h * self.kernel_w}]"
            )
        if self.library_size < 1:
            raise PruningError("library_size must be >= 1")
        lib = self.library
        if lib is not None:
            if lib.kernel_shape != (self.kernel_h, self.kernel_w):
                raise PruningError("library kernel shape does not match the structure")
            if lib.retained != self.retained_per_kernel or len(lib) != self.library_size:
                raise PruningError("library does not match retained_per_kernel/library_size")


SparsityStructure = Union[Column, Filter, Channel, Connectivity, Pattern]

_TAGS = {Column: "column", Filter: "filter", Channel: "channel", Connectivity: "connectivity"}


def structure_to_dict(s: SparsityStructure) -> dict:
    if isinstance(s, Pattern):
        d = {
            "type": "pattern",
            "kernel_h": s.kernel_h,
            "kernel_w": s.kernel_w,
            "retained_per_kernel": s.retained_per_kernel,
            "library_size": s.library_size,
            "keep_ratio": s.keep_ratio,
        }
        if s.library is not None:
            d["library"] = s.library.positions()
        return d
    return {"type": _TAGS[type(s)], "keep_ratio": s.keep_ratio}


def structure_from_dict(d: Mapping) -> SparsityStructure:
    tag = d.get("type")
    if tag in ("pattern", "pattern+connectivity"):
        kh, kw = int(d.get("kernel_h", 3)), int(d.get("kernel_w", 3))
        lib = d.get("library")
        return Pattern(
            kernel_h=kh,
            kernel_w=kw,
            retained_per_kernel=int(d["retained_per_kernel"]),
            library_size=int(d["library_size"]),
            keep_ratio=float(d.get("keep_ratio", 1.0)),
            library=None if lib is None else PatternLibrary.from_positions(lib, kh, kw),
        )
    for cls, name in _TAGS.items():
        if tag == name:
            return cls(float(d["keep_ratio"]))
    raise PruningError(f"unknown structure type {tag!r}")


def keep_count(keep_ratio: float, count: int) -> int:
    if count < 1:
        raise PruningError("structure has no groups to retain")
    return max(1, min(count, int(math.floor(keep_ratio * count + 0.5))))


def _top_groups(scores: np.ndarray, keep_ratio: float) -> np.ndarray:
    k = keep_count(keep_ratio, scores.size)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


class Support(NamedTuple):
    """Retained positions of a projection.

    ``kept`` lists retained group indices. ``pattern_ids`` (pattern and
    connectivity only) is an ``(out_c, in_c)`` array of library indices,
    ``-1`` for pruned kernels.
    """

    mask: np.ndarray
    kept: np.ndarray
    pattern_ids: np.ndarray | None = None


def _as_conv(W: np.ndarray, s) -> np.ndarray:
    if W.ndim != 4:
        raise PruningError(
            f"{type(s).__name__} pruning needs 4-D conv weights, got shape {W.shape}"
        )
    return W


def _sq(W: np.ndarray) -> np.ndarray:
    return np.square(W.astype(np.float64))


def support(W: np.ndarray, s: SparsityStructure) -> Support:
    """Compute the retained set of the projection of ``W`` onto ``s``."""
    W = np.asarray(W)
    if W.ndim not in (2, 4):
        raise PruningError(f"weights must be 2-D or 4-D, got shape {W.shape}")
    if isinstance(s, Column):
        M = W.reshape(W.shape[0], -1)
        kept = _top_groups(_sq(M).sum(axis=0), s.keep_ratio)
        mask = np.zeros(M.shape, dtype=bool)
        mask[:, kept] = True
        return Support(mask.reshape(W.shape), kept)
    if isinstance(s, Filter):
        M = W.reshape(W.shape[0], -1)
        kept = _top_groups(_sq(M).sum(axis=1), s.keep_ratio)
        mask = np.zeros(M.shape, dtype=bool)
        mask[kept, :] = True
        return Support(mask.reshape(W.shape), kept)
    if isinstance(s, Channel):
        axes = (0, 2, 3) if W.ndim == 4 else (0,)
        kept = _top_groups(_sq(W).sum(axis=axes), s.keep_ratio)
        mask = np.zeros(W.shape, dtype=bool)
        mask[:, kept] = True
        return Support(mask, kept)
    if isinstance(s, Connectivity):
        W = _as_conv(W, s)
        out_c, in_c = W.shape[:2]
        kept = _top_groups(_sq(W).sum(axis=(2, 3)).ravel(), s.keep_ratio)
        alive = np.zeros(out_c * in_c, dtype=bool)
        alive[kept] = True
        ids = np.where(alive, 0, -1).reshape(out_c, in_c)
        mask = np.broadcast_to(alive.reshape(out_c, in_c, 1, 1), W.shape).copy()
        return Support(mask, kept, ids)
    if isinstance(s, Pattern):
        W = _as_conv(W, s)
        if W.shape[2:] != (s.kernel_h, s.kernel_w):
            raise PruningError(
                f"pattern structure is {s.kernel_h}x{s.kernel_w} but weights are {W.shape}"
            )
        lib = s.library or select_pattern_library(W, s.kernel_h, s.kernel_w,
                                                  s.retained_per_kernel, s.library_size)
        out_c, in_c = W.shape[:2]
        flat_masks = lib.masks.reshape(len(lib), -1)
        energy = _sq(W).reshape(out_c * in_c, -1) @ flat_masks.T.astype(np.float64)
        best = np.argmax(energy, axis=1)
        scores = energy[np.arange(energy.shape[0]), best]
        kept = _top_groups(scores, s.keep_ratio)
        alive = np.zeros(out_c * in_c, dtype=bool)
        alive[kept] = True
        mask = flat_masks[best] & alive[:, None]
        ids = np.where(alive, best, -1).reshape(out_c, in_c)
        return Support(mask.reshape(W.shape), kept, ids)
    raise PruningError(f"unsupported structure {s!r}")


def project(W: np.ndarray, s: SparsityStructure) -> np.ndarray:
    """Euclidean projection of ``W`` onto the structure ``s``."""
    W = np.asarray(W)
    return np.where(support(W, s).mask, W, np.zeros((), W.dtype))


def is_trivial(s: SparsityStructure) -> bool:
    """True when every tensor already satisfies ``s`` (projection is identity)."""
    if isinstance(s, Pattern):
        return s.keep_ratio >= 1.0 and s.retained_per_kernel == s.kernel_h * s.kernel_w
    return s.keep_ratio >= 1.0


def select_pattern_library(
    weights: np.ndarray, kh: int, kw: int, retained_per_kernel: int, library_size: int
) -> PatternLibrary:
    """Pick the most frequent top-magnitude kernel masks.

    Each kernel votes for the mask of its ``retained_per_kernel`` largest
    ``|w|`` positions. Candidates are ranked by vote count, then aggregate
    retained magnitude, then ascending position tuple. If there are too few
    distinct candidates, masks built from the positions with the largest
    aggregate magnitude fill the remainder.
    """
    size = kh * kw
    if not 1 <= retained_per_kernel <= size:
        raise PruningError(f"retained_per_kernel must be in [1, {size}]")
    if library_size > math.comb(size, retained_per_kernel):
        raise PruningError(
            f"cannot build {library_size} distinct masks with {retained_per_kernel} of "
            f"{size} positions"
        )
    K = np.abs(np.asarray(weights, dtype=np.float64)).reshape(-1, size)
    if K.shape[0] == 0:
        raise PruningError("no kernels to select patterns from")
    pos = np.arange(size)
    votes: Counter = Counter()
    mags: dict[tuple, float] = {}
    for row in K:
        top = tuple(sorted(np.lexsort((pos, -row))[:retained_per_kernel].tolist()))
        votes[top] += 1
        mags[top] = mags.get(top, 0.0) + float(row[list(top)].sum())
    ranked = sorted(votes, key=lambda m: (-votes[m], -mags[m], m))
    chosen = ranked[:library_size]
    if len(chosen) < library_size:
        agg = K.sum(axis=0)
        by_mag = np.lexsort((pos, -agg)).tolist()
        present = set(chosen)
        for combo in itertools.combinations(by_mag, retained_per_kernel):
            cand = tuple(sorted(combo))
            if cand not in present:
                chosen.append(cand)
                present.add(cand)
                if len(chosen) == library_size:
                    break
    return PatternLibrary.from_positions(chosen, kh, kw)


def resolve_structure(W: np.ndarray, s: SparsityStructure) -> SparsityStructure:
    """Fix a pattern library from ``W`` when ``s`` does not carry one."""
    if isinstance(s, Pattern) and s.library is None:
        lib = select_pattern_library(W, s.kernel_h, s.kernel_w, s.retained_per_kernel,
                                     s.library_size)
        return replace(s, library=lib)
    return s


LossFn = Callable[[Mapping[int, np.ndarray]], "tuple[float, Mapping[int, np.ndarray]]"]


@dataclass
class AdmmConfig:
    rho: float = 1e-2
    admm_iters: int = 30
    primal_steps: int = 20
    step_size: float = 1e-2
    finetune_steps: int = 100

    def __post_init__(self):
        if not self.rho > 0:
            raise PruningError(f"rho must be > 0, got {self.rho}")
        if self.step_size <= 0:
            raise PruningError(f"step_size must be > 0, got {self.step_size}")
        if min(self.admm_iters, self.primal_steps, self.finetune_steps) < 0:
            raise PruningError("iteration counts must be non-negative")


@dataclass
class PruneTask:
    layer_weights: dict[int, np.ndarray]
    structures: dict[int, SparsityStructure]
    loss: LossFn

    def __post_init__(self):
        missing = set(self.structures) - set(self.layer_weights)
        if missing:
            raise PruningError(f"structures reference unknown layers {sorted(missing)}")


@dataclass
class AdmmState:
    W: dict[int, np.ndarray]
    Z: dict[int, np.ndarray]
    U: dict[int, np.ndarray]
    rho: float
    iter: int = 0


@dataclass
class AdmmResult:
    weights: dict[int, np.ndarray]
    structures: dict[int, SparsityStructure]
    residuals: dict[int, list[float]]
    losses: list[float]
    final_loss: float
    state: AdmmState


def _eval(loss: LossFn, W, stage: str, it: int):
    value, grads = loss(W)
    if not np.isfinite(value):
        raise PruningError(f"non-finite loss during {stage} at iteration {it}")
    for i, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise PruningError(f"non-finite gradient during {stage} at iteration {it}, layer {i}")
    return float(value), grads


def admm_prune(task: PruneTask, config: AdmmConfig | None = None) -> AdmmResult:
    """Solve ``min f(W) s.t. W_i in S_i`` with scaled-form ADMM.

    Each iteration runs ``primal_steps`` gradient steps on
    ``f(W) + rho/2 * sum ||W_i - Z_i + U_i||^2``, projects ``W_i + U_i`` to get
    ``Z_i`` and accumulates ``U_i += W_i - Z_i``. Afterwards ``W_i`` is hard
    projected and fine-tuned with masked gradient steps, so the result always
    satisfies its constraints exactly.
    """
    cfg = config or AdmmConfig()
    W = {i: np.array(w, dtype=np.result_type(w, np.float32), copy=True)
         for i, w in task.layer_weights.items()}
    structures = {i: resolve_structure(W[i], s) for i, s in task.structures.items()}
    active = [i for i, s in structures.items() if not is_trivial(s)]
    Z = {i: project(W[i], structures[i]) for i in active}
    U = {i: np.zeros_like(W[i]) for i in active}
    state = AdmmState(W, Z, U, cfg.rho)
    residuals: dict[int, list[float]] = {i: [] for i in active}
    losses: list[float] = []
    step = cfg.step_size

    for it in range(cfg.admm_iters):
        for _ in range(cfg.primal_steps):
            _, grads = _eval(task.loss, W, "primal step", it)
            for i, g in grads.items():
                if i in Z:
                    g = g + cfg.rho * (W[i] - Z[i] + U[i])
                W[i] = W[i] - step * g
        for i in active:
            Z[i] = project(W[i] + U[i], structures[i])
            U[i] = U[i] + W[i] - Z[i]
            residuals[i].append(float(np.linalg.norm(W[i] - Z[i])))
        state.iter = it + 1
        losses.append(_eval(task.loss, W, "primal step", it)[0])
        log.debug("admm iter %d loss %.6g", it, losses[-1])

    masks = {}
    for i in active:
        masks[i] = support(W[i], structures[i]).mask
        W[i] = np.where(masks[i], W[i], np.zeros((), W[i].dtype))
    for it in range(cfg.finetune_steps):
        _, grads = _eval(task.loss, W, "finetune", it)
        for i, g in grads.items():
            if i in masks:
                g = np.where(masks[i], g, np.zeros((), g.dtype))
            W[i] = W[i] - step * g
    final = _eval(task.loss, W, "finetune", cfg.finetune_steps)[0]
    return AdmmResult(W, structures, residuals, losses, final, state)


def _retained_fraction(W: np.ndarray, s: SparsityStructure) -> float:
    if isinstance(s, Pattern):
        return float(np.count_nonzero(W)) / W.size
    if isinstance(s, Column):
        g = np.any(W.reshape(W.shape[0], -1) != 0, axis=0)
    elif isinstance(s, Filter):
        g = np.any(W.reshape(W.shape[0], -1) != 0, axis=1)
    elif isinstance(s, Channel):
        g = np.any(W != 0, axis=(0, 2, 3) if W.ndim == 4 else (0,))
    else:
        g = np.any(W != 0, axis=(2, 3)).ravel()
    return float(np.count_nonzero(g)) / g.size


def sparsity_report(weights: Mapping[int, np.ndarray],
                    structures: Mapping[int, SparsityStructure]) -> dict[int, dict]:
    """Per-layer retained fraction and whether the layer is a projection fixed point."""
    out = {}
    for i, s in structures.items():
        W = np.asarray(weights[i])
        out[i] = {
            "retained_fraction": _retained_fraction(W, s),
            "satisfies": bool(np.array_equal(project(W, s), W)),
        }
    return out
