"""Dense keypoint scoring and selection on top of the response matrix.

Scores are computed on the raw non-negative responses, not the normalized
descriptors: the channel-max score needs non-negative entries to be well
defined. Neighborhoods come from the same radius queries the convolution
uses, with each point included in its own neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ScoreMap
from .neighbors import NeighborLists
from .validation import as_float_array, readonly


@dataclass(frozen=True)
class KeypointSet:
    """Selected point indices, ordered by non-increasing score."""

    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        scores = as_float_array(self.scores, "scores").reshape(-1)
        if idx.shape != scores.shape:
            raise ValueError("indices and scores must have the same length")
        if np.unique(idx).size != idx.size:
            raise ValueError("keypoint indices must be unique")
        if np.any(np.diff(scores) > 0):
            raise ValueError("scores must be non-increasing")
        object.__setattr__(self, "indices", readonly(idx))
        object.__setattr__(self, "scores", readonly(scores))

    def __len__(self) -> int:
        return self.indices.shape[0]


def _check_responses(responses) -> np.ndarray:
    resp = as_float_array(responses, "responses")
    if resp.ndim != 2:
        raise ValueError("responses must be an (N, c) matrix")
    return resp


def _neighborhood_means(responses: np.ndarray, neighbors: NeighborLists) -> np.ndarray:
    if len(neighbors) != responses.shape[0]:
        raise ValueError("one neighbor list per point required")
    counts = neighbors.counts
    if np.any(counts == 0):
        raise ValueError("empty neighbor list; self-inclusive radius neighborhoods required")
    gathered = responses[neighbors.indices]
    sums = np.add.reduceat(gathered, neighbors.splits[:-1], axis=0)
    return sums / counts[:, None]


def saliency_scores(responses, neighbors: NeighborLists) -> np.ndarray:
    """Density-invariant saliency: softplus of response minus neighborhood mean.

    Using the neighborhood *mean* rather than a sum makes the score depend on
    the local response contrast only, not on how many points happen to fall
    inside the radius.
    """
    resp = _check_responses(responses)
    means = _neighborhood_means(resp, neighbors)
    return np.logaddexp(0.0, resp - means)


def softmax_saliency_scores(responses, neighbors: NeighborLists) -> np.ndarray:
    """Soft local-max baseline: exp(response) over the neighborhood exp-sum.

    Kept for ablations; the sum normalization makes sparse neighborhoods
    score systematically higher, which the mean-based saliency avoids.
    """
    resp = _check_responses(responses)
    if len(neighbors) != resp.shape[0]:
        raise ValueError("one neighbor list per point required")
    counts = neighbors.counts
    if np.any(counts == 0):
        raise ValueError("empty neighbor list; self-inclusive radius neighborhoods required")
    # Shift by the neighborhood max per (point, channel) before exponentiating;
    # the ratio is unchanged and cannot overflow.
    gathered = resp[neighbors.indices]
    maxes = np.maximum.reduceat(gathered, neighbors.splits[:-1], axis=0)
    sums = np.add.reduceat(np.exp(gathered - np.repeat(maxes, counts, axis=0)),
                           neighbors.splits[:-1], axis=0)
    return np.exp(resp - maxes) / sums


def channel_max_scores(responses) -> np.ndarray:
    """Per-channel response divided by the row maximum; all-zero rows give 0."""
    resp = _check_responses(responses)
    if resp.size and resp.min() < 0.0:
        raise ValueError("responses must be elementwise >= 0")
    row_max = resp.max(axis=1, keepdims=True) if resp.size else np.zeros((resp.shape[0], 1))
    safe = np.where(row_max > 0.0, row_max, 1.0)
    return resp / safe


def detection_scores(saliency, channel_max) -> ScoreMap:
    """Final per-point score: max over channels of saliency times channel max."""
    alpha = as_float_array(saliency, "saliency")
    beta = as_float_array(channel_max, "channel_max")
    if alpha.shape != beta.shape or alpha.ndim != 2:
        raise ValueError(f"saliency {alpha.shape} and channel_max {beta.shape} must match")
    scores = (alpha * beta).max(axis=1)
    return ScoreMap(scores, alpha, beta)


def score_cloud(feature_map, neighbors: NeighborLists) -> ScoreMap:
    """Convenience composition: saliency and channel-max scores from a FeatureMap."""
    alpha = saliency_scores(feature_map.responses, neighbors)
    beta = channel_max_scores(feature_map.responses)
    return detection_scores(alpha, beta)


def select_keypoints(score_map: ScoreMap, k: int) -> KeypointSet:
    """The ``k`` top-scoring indices, score descending, ties to the lower index."""
    scores = score_map.scores
    n = scores.shape[0]
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.lexsort((np.arange(n), -scores))
    chosen = order[:k]
    return KeypointSet(chosen, scores[chosen])


def hard_keypoints(responses, neighbors: NeighborLists) -> np.ndarray:
    """Indices passing the hard criterion, ascending.

    A point qualifies when its strongest channel (lowest index on ties) is
    also, at that point, the spatial maximum of that channel over its radius
    neighborhood (again lowest index on ties).
    """
    resp = _check_responses(responses)
    if len(neighbors) != resp.shape[0]:
        raise ValueError("one neighbor list per point required")
    if np.any(neighbors.counts == 0):
        raise ValueError("empty neighbor list; self-inclusive radius neighborhoods required")
    best_channel = np.argmax(resp, axis=1)
    keep = []
    for i in range(resp.shape[0]):
        nb = neighbors[i]
        values = resp[nb, best_channel[i]]
        winner = nb[np.argmax(values)]  # neighbor lists ascend, so ties pick the lowest index
        if winner == i:
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)
