"""Cluster paths through a network's layers and the good/bad point filter.

A path records, for one input, which cluster it lands in at every layer
(input space, each hidden space, output space) and how far from that
cluster's center it sits in normalized units. A split is the transition
between consecutive layers' clusters; its statistics over the training set
(how many points took it, how often the network was right on them) drive
the three-threshold filter that separates confident "good" points from
"bad" ones.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .clustering import (
    ClusterSet,
    ElbowCurve,
    cluster_set_from_doc,
    cluster_set_to_doc,
    default_k_candidates,
    elbow_select,
    kmeans,
)
from .network import ActivationTrace, Dataset, Network, forward_batch

PATH_MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Split:
    """A length-2 partial path: cluster ``src`` at layer ``layer`` to ``dst`` at layer+1."""

    layer: int
    src: int
    dst: int

    @property
    def key(self) -> str:
        return f"{self.layer}:{self.src}:{self.dst}"

    @staticmethod
    def from_key(key: str) -> "Split":
        l, s, d = key.split(":")
        return Split(int(l), int(s), int(d))


@dataclass(frozen=True)
class SplitStats:
    """How many training points traversed a split and how accurate the net was on them."""

    count: int
    accuracy: float

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class FilterParams:
    """The three thresholds defining a good point.

    ``max_norm_distance`` may be +inf (distance check off); the other two
    must be finite. A point is good only if every layer's normalized
    distance stays at or under the first threshold and every traversed
    split has at least ``min_split_count`` points and at least
    ``min_split_accuracy`` accuracy.
    """

    max_norm_distance: float
    min_split_count: int
    min_split_accuracy: float

    def __post_init__(self):
        if not self.max_norm_distance > 0:
            raise ValueError("max_norm_distance must be > 0")
        if np.isnan(self.max_norm_distance):
            raise ValueError("max_norm_distance must not be NaN")
        if self.min_split_count < 0:
            raise ValueError("min_split_count must be >= 0")
        if not 0.0 <= self.min_split_accuracy <= 1.0:
            raise ValueError("min_split_accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class Verdict:
    """Filter outcome for one point; ``first_failure`` names the earliest broken rule."""

    good: bool
    first_failure: str | None = None

    def __post_init__(self):
        if self.good != (self.first_failure is None):
            raise ValueError("good verdicts carry no failure; bad ones must name one")


@dataclass
class Path:
    """Per-layer cluster ids and normalized center distances for one input."""

    cluster_ids: np.ndarray
    normalized_distances: np.ndarray

    def __post_init__(self):
        self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64)
        self.normalized_distances = np.asarray(self.normalized_distances, dtype=np.float64)
        if self.cluster_ids.shape != self.normalized_distances.shape or self.cluster_ids.ndim != 1:
            raise ValueError("cluster ids and distances must be aligned 1-D sequences")

    def __len__(self) -> int:
        return len(self.cluster_ids)

    def splits(self):
        ids = self.cluster_ids
        return [Split(l, int(ids[l]), int(ids[l + 1])) for l in range(len(ids) - 1)]


@dataclass
class PathModel:
    """One ClusterSet per layer, fitted on a single training set's activations."""

    cluster_sets: list[ClusterSet]
    elbow_curves: list[ElbowCurve | None] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cluster_sets) < 3:
            raise ValueError("a path model spans input, hidden..., output: 3+ layers")

    @property
    def n_layers(self) -> int:
        return len(self.cluster_sets)


@dataclass(frozen=True)
class KPolicy:
    """How to choose k per layer: elbow sweep by default, explicit overrides otherwise.

    ``candidates`` of None means the size-based default sweep.
    ``overrides`` maps layer index to a fixed k, skipping the sweep there.
    ``seed`` may be an int or tuple; the layer index is appended so layers
    cluster independently.
    """

    seed: int | tuple = 0
    candidates: tuple[int, ...] | None = None
    overrides: dict = field(default_factory=dict)
    restarts: int = 3

    def layer_seed(self, layer: int) -> tuple:
        base = self.seed if isinstance(self.seed, tuple) else (self.seed,)
        return (*base, layer)


def layer_activations(net: Network, X) -> list[np.ndarray]:
    """Per-layer activation matrices (input, each hidden, softmax) for a batch."""
    _, acts = forward_batch(net, X, record=True)
    return acts


def build_path_model(net: Network, train_set: Dataset, policy: KPolicy) -> PathModel:
    """Cluster every layer's activations of the training set.

    Each layer gets its own elbow sweep (or a fixed k from the policy's
    overrides) and k-means fit. The elbow curves ride along for inspection
    and for manual override in a follow-up run.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    acts = layer_activations(net, train_set.points)
    cluster_sets, curves = [], []
    for layer, A in enumerate(acts):
        seed = policy.layer_seed(layer)
        if layer in policy.overrides:
            k = int(policy.overrides[layer])
            cs = kmeans(A, k, seed, restarts=policy.restarts)
            curves.append(None)
        else:
            cand = policy.candidates or default_k_candidates(len(A))
            with warnings.catch_warnings():
                # tiny layers can collapse the sweep to 2 usable candidates
                warnings.simplefilter("ignore")
                curve, fits = elbow_select(A, cand, seed, restarts=policy.restarts,
                                           return_sets=True)
            cs = fits[curve.selected_k]
            curves.append(curve)
        cluster_sets.append(cs)
    return PathModel(cluster_sets, curves)


def compute_paths(pm: PathModel, layer_acts: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized paths for a batch given its per-layer activations.

    Returns ``(ids, norm_d)``, both (n, n_layers).
    """
    if len(layer_acts) != pm.n_layers:
        raise ValueError(f"expected {pm.n_layers} activation layers, got {len(layer_acts)}")
    ids_cols, nd_cols = [], []
    for cs, A in zip(pm.cluster_sets, layer_acts):
        ids, dist = cs.assign_batch(A)
        ids_cols.append(ids)
        nd_cols.append(cs.normalize(dist))
    return np.stack(ids_cols, axis=1), np.stack(nd_cols, axis=1)


def compute_path(pm: PathModel, trace: ActivationTrace) -> Path:
    """Path of a single point from its activation trace."""
    if len(trace) != pm.n_layers:
        raise ValueError(f"trace has {len(trace)} layers, path model expects {pm.n_layers}")
    ids, nd = compute_paths(pm, [a[None, :] for a in trace.layers])
    return Path(ids[0], nd[0])


def paths_for_dataset(net: Network, pm: PathModel, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, norm_d, predictions) for a batch of raw inputs."""
    probs, acts = forward_batch(net, X, record=True)
    ids, nd = compute_paths(pm, acts)
    return ids, nd, probs.argmax(axis=1)


def split_stats(pm: PathModel, ids: np.ndarray, labels, predictions) -> dict[Split, SplitStats]:
    """Count and accuracy per observed split.

    ``ids`` is the (n, n_layers) cluster-id matrix of the statistics basis
    (training points, normally). Splits nobody traversed are simply absent;
    the filter treats them as count 0.
    """
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != pm.n_layers:
        raise ValueError("ids must be (n, n_layers)")
    if labels.shape != (len(ids),) or predictions.shape != (len(ids),):
        raise ValueError("labels and predictions must align with ids")
    correct = (labels == predictions).astype(np.int64)
    counts: dict[Split, int] = {}
    hits: dict[Split, int] = {}
    for l in range(pm.n_layers - 1):
        src, dst = ids[:, l], ids[:, l + 1]
        # group identical (src, dst) pairs in one pass per layer
        pair = src * (dst.max() + 1) + dst
        order = np.argsort(pair, kind="stable")
        sorted_pair = pair[order]
        boundaries = np.flatnonzero(np.diff(sorted_pair)) + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [len(pair)]])
        csum = np.concatenate([[0], np.cumsum(correct[order])])
        for s, e in zip(starts, ends):
            i = order[s]
            sp = Split(l, int(src[i]), int(dst[i]))
            counts[sp] = int(e - s)
            hits[sp] = int(csum[e] - csum[s])
    return {
        sp: SplitStats(counts[sp], hits[sp] / counts[sp] if counts[sp] else 0.0)
        for sp in counts
    }


def path_from_arrays(ids_row, nd_row) -> Path:
    return Path(np.asarray(ids_row), np.asarray(nd_row))


def classify_point(stats: dict[Split, SplitStats], params: FilterParams, path: Path) -> Verdict:
    """Apply the three-threshold filter to one path.

    Checks run in layer order; at each layer the distance rule comes
    first, then the outgoing split's count, then its accuracy, so
    ``first_failure`` is deterministic. A split absent from ``stats``
    counts as 0 points with accuracy 0.
    """
    nd = path.normalized_distances
    ids = path.cluster_ids
    n_layers = len(path)
    for l in range(n_layers):
        if nd[l] > params.max_norm_distance:
            return Verdict(False, f"distance-at-layer-{l}")
        if l < n_layers - 1:
            st = stats.get(Split(l, int(ids[l]), int(ids[l + 1])))
            count = st.count if st else 0
            acc = st.accuracy if st else 0.0
            if count < params.min_split_count:
                return Verdict(False, f"small-split-at-{l}")
            if acc < params.min_split_accuracy:
                return Verdict(False, f"low-accuracy-split-at-{l}")
    return Verdict(True)


def filter_features(stats: dict[Split, SplitStats], ids: np.ndarray,
                    nd: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point reductions the filter thresholds act on.

    Returns ``(max_nd, min_count, min_acc)``, each (n,): the worst
    normalized distance across layers, and the smallest split count and
    accuracy along each point's traversed splits. A point is then good
    under params iff ``max_nd <= d and min_count >= c and min_acc >= a``,
    which lets grid search score thousands of triples without re-walking
    paths.
    """
    ids = np.asarray(ids, dtype=np.int64)
    nd = np.asarray(nd, dtype=np.float64)
    n, n_layers = ids.shape
    max_nd = nd.max(axis=1)
    min_count = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    min_acc = np.ones(n, dtype=np.float64)
    for l in range(n_layers - 1):
        pairs = {}
        for sp, st in stats.items():
            if sp.layer == l:
                pairs[(sp.src, sp.dst)] = st
        counts_l = np.empty(n, dtype=np.int64)
        accs_l = np.empty(n, dtype=np.float64)
        for i in range(n):
            st = pairs.get((int(ids[i, l]), int(ids[i, l + 1])))
            counts_l[i] = st.count if st else 0
            accs_l[i] = st.accuracy if st else 0.0
        np.minimum(min_count, counts_l, out=min_count)
        np.minimum(min_acc, accs_l, out=min_acc)
    return max_nd, min_count, min_acc


def good_mask(features, params: FilterParams) -> np.ndarray:
    """Boolean good/bad verdicts from precomputed filter features."""
    max_nd, min_count, min_acc = features
    return (
        (max_nd <= params.max_norm_distance)
        & (min_count >= params.min_split_count)
        & (min_acc >= params.min_split_accuracy)
    )


@dataclass(frozen=True)
class ParamGrid:
    """Candidate values per threshold; the search walks the full cross product."""

    max_norm_distances: tuple[float, ...]
    min_split_counts: tuple[int, ...]
    min_split_accuracies: tuple[float, ...]

    def __post_init__(self):
        if not (self.max_norm_distances and self.min_split_counts and self.min_split_accuracies):
            raise ValueError("every parameter needs at least one candidate")

    def triples(self):
        for d in self.max_norm_distances:
            for c in self.min_split_counts:
                for a in self.min_split_accuracies:
                    yield FilterParams(d, c, a)


@dataclass(frozen=True)
class GridSearchResult:
    params: FilterParams
    retained_count: int
    retained_accuracy: float
    met_target: bool


def grid_search(stats: dict[Split, SplitStats], val_ids, val_nd, val_labels,
                val_predictions, grid: ParamGrid, target_accuracy: float) -> GridSearchResult:
    """Pick the filter triple that keeps the most points at the target accuracy.

    Every triple in the grid is scored on the validation set: how many
    points it retains as good and how accurate the predictions are on
    them (an empty retained set scores 0 accuracy). Among triples meeting
    ``target_accuracy`` the most-retaining wins, ties broken toward the
    tighter filter (smaller distance, then larger count, then larger
    accuracy). When nothing reaches the target the highest-accuracy triple
    is returned with ``met_target`` unset.
    """
    val_labels = np.asarray(val_labels, dtype=np.int64)
    val_predictions = np.asarray(val_predictions, dtype=np.int64)
    if len(val_labels) == 0:
        raise ValueError("validation set is empty")
    if not 0.0 <= target_accuracy <= 1.0:
        raise ValueError("target_accuracy must lie in [0, 1]")
    features = filter_features(stats, val_ids, val_nd)
    correct = val_labels == val_predictions

    best_meeting = None   # (retained, -d, c, a, result)
    best_fallback = None  # (accuracy, retained, -d, c, a, result)
    for params in grid.triples():
        mask = good_mask(features, params)
        retained = int(mask.sum())
        acc = float(correct[mask].mean()) if retained else 0.0
        rank = (-params.max_norm_distance, params.min_split_count, params.min_split_accuracy)
        if acc >= target_accuracy:
            key = (retained, *rank)
            if best_meeting is None or key > best_meeting[0]:
                best_meeting = (key, GridSearchResult(params, retained, acc, True))
        key = (acc, retained, *rank)
        if best_fallback is None or key > best_fallback[0]:
            best_fallback = (key, GridSearchResult(params, retained, acc, False))
    return best_meeting[1] if best_meeting else best_fallback[1]


def stats_to_doc(stats: dict[Split, SplitStats]) -> dict:
    return {sp.key: {"count": st.count, "accuracy": st.accuracy} for sp, st in stats.items()}


def stats_from_doc(doc: dict) -> dict[Split, SplitStats]:
    return {
        Split.from_key(key): SplitStats(int(item["count"]), float(item["accuracy"]))
        for key, item in doc.items()
    }


def path_model_to_doc(pm: PathModel) -> dict:
    curves = []
    for curve in pm.elbow_curves or [None] * pm.n_layers:
        if curve is None:
            curves.append(None)
        else:
            curves.append({
                "candidates": list(curve.candidates),
                "inertias": list(curve.inertias),
                "selected_k": curve.selected_k,
            })
    return {
        "cluster_sets": [cluster_set_to_doc(cs) for cs in pm.cluster_sets],
        "elbow_curves": curves,
    }


def path_model_from_doc(doc: dict) -> PathModel:
    sets = [cluster_set_from_doc(d) for d in doc["cluster_sets"]]
    curves = []
    for c in doc.get("elbow_curves", [None] * len(sets)):
        if c is None:
            curves.append(None)
        else:
            curves.append(ElbowCurve(
                [int(k) for k in c["candidates"]],
                [float(v) for v in c["inertias"]],
                int(c["selected_k"]),
            ))
    return PathModel(sets, curves)


def save_path_model(pm: PathModel, path) -> None:
    doc = {"format_version": PATH_MODEL_FORMAT_VERSION, **path_model_to_doc(pm)}
    FsPath(path).write_text(json.dumps(doc, sort_keys=True))


def load_path_model(path) -> PathModel:
    doc = json.loads(FsPath(path).read_text())
    if doc.get("format_version") != PATH_MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported path model format version {doc.get('format_version')}")
    return path_model_from_doc(doc)
