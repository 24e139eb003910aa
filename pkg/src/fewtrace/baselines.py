"""Non-meta-learning classifiers over latent traces, plus the span-only
representation ablation.

These are the standard formulations: class-mean prototypes with squared
Euclidean distance, a matching rule using softmax cosine attention from the
query to (optionally transformer-contextualized) support items, 1-nearest
neighbor, and a small CART decision tree with Gini impurity and fully
deterministic tie-breaking. All predictors break argmax/argmin ties toward
the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from .episodes import Episode, SupportSet
from .errors import ValidationError
from .featurize import SpanFeatureMatrix, TextEmbedder, featurize_trace
from .fusion import (
    AttentionParams,
    EncoderParams,
    LatentTrace,
    activation_fn,
    as_tensor,
    init_attention_params,
    multihead,
)
from .seeding import substream
from .traces import Trace

__all__ = [
    "EpisodicClassifier",
    "protonet_predict",
    "matchingnet_predict",
    "nearneighbor_predict",
    "decisiontree_fit_predict",
    "onlyspan_latent",
    "ProtoNetClassifier",
    "MatchingNetClassifier",
    "NearNeighborClassifier",
    "DecisionTreeClassifier",
    "train_matching_embedder",
    "episode_accuracy",
]


class EpisodicClassifier(Protocol):
    """fit on a support set once, then predict per latent."""

    def fit(self, support: SupportSet) -> None: ...

    def predict(self, z: LatentTrace) -> int: ...


def _support_arrays(support: SupportSet) -> tuple[np.ndarray, np.ndarray]:
    z = np.stack([latent.z for latent, _ in support.items])
    y = np.asarray([label for _, label in support.items], dtype=np.int64)
    return z, y


def _z_of(z: LatentTrace | np.ndarray) -> np.ndarray:
    return z.z if isinstance(z, LatentTrace) else np.asarray(z, dtype=np.float64)


# --- prototypes and neighbors ----------------------------------------------


def protonet_predict(support: SupportSet, z: LatentTrace | np.ndarray) -> int:
    """Argmin squared distance to per-class mean prototypes."""
    zs, ys = _support_arrays(support)
    q = _z_of(z)
    prototypes = np.stack([zs[ys == c].mean(axis=0) for c in range(support.n_way)])
    d2 = ((prototypes - q) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def nearneighbor_predict(support: SupportSet, z: LatentTrace | np.ndarray) -> int:
    """1-NN under Euclidean distance; distance ties resolve to the lowest class."""
    zs, ys = _support_arrays(support)
    d2 = ((zs - _z_of(z)) ** 2).sum(axis=1)
    best = d2.min()
    return int(ys[d2 == best].min())


def _cosine_rows(q: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    qn = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sn = s / s.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return qn @ sn.transpose(-2, -1)


def matching_probs(
    support_z,
    support_y: Sequence[int],
    query_z,
    n_way: int,
    attn: AttentionParams | None = None,
) -> torch.Tensor:
    """Class probabilities [m x N] under the matching rule.

    With attention parameters, support and query rows are first
    contextualized by one self-attention pass over the episode; each query
    is contextualized alongside the support set only. Probabilities are the
    per-class sums of the softmax over query-to-support cosine similarities.
    """
    s = as_tensor(support_z)
    q = as_tensor(query_z)
    y = torch.as_tensor(list(support_y), dtype=torch.long)
    if attn is not None:
        m = q.shape[0]
        seqs = torch.cat([s.unsqueeze(0).expand(m, s.shape[0], -1), q.unsqueeze(1)], dim=1)
        ctx = multihead(seqs, seqs, seqs, attn)
        s_ctx, q_ctx = ctx[:, :-1, :], ctx[:, -1, :]
        sims = _cosine_rows(q_ctx.unsqueeze(1), s_ctx).squeeze(1)
    else:
        sims = _cosine_rows(q, s)
    attn_weights = torch.softmax(sims, dim=-1)
    onehot = torch.zeros((s.shape[0], n_way), dtype=attn_weights.dtype)
    onehot[torch.arange(s.shape[0]), y] = 1.0
    return attn_weights @ onehot


def matchingnet_predict(
    support: SupportSet,
    z: LatentTrace | np.ndarray,
    attn: AttentionParams | None = None,
) -> int:
    zs, ys = _support_arrays(support)
    probs = matching_probs(zs, ys, _z_of(z)[None, :], support.n_way, attn)
    return int(np.argmax(probs.detach().numpy()[0]))


# --- decision tree -----------------------------------------------------------


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p**2).sum())


def _majority(y: np.ndarray, n_classes: int) -> int:
    counts = np.bincount(y, minlength=n_classes)
    return int(np.argmax(counts))


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    label: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int) -> tuple[int, float] | None:
    # Lowest feature index, then lowest (midpoint) threshold, wins ties.
    parent = _gini(np.bincount(y, minlength=n_classes))
    n = len(y)
    best: tuple[float, int, float] | None = None
    for f in range(x.shape[1]):
        values = np.unique(x[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = (lo + hi) / 2.0
            mask = x[:, f] <= thr
            left = np.bincount(y[mask], minlength=n_classes)
            right = np.bincount(y[~mask], minlength=n_classes)
            weighted = (left.sum() * _gini(left) + right.sum() * _gini(right)) / n
            gain = parent - weighted
            if gain > 1e-12 and (best is None or gain > best[0] + 1e-12):
                best = (gain, f, thr)
    if best is None:
        return None
    return best[1], best[2]


def _grow(x: np.ndarray, y: np.ndarray, n_classes: int) -> _TreeNode:
    if len(np.unique(y)) == 1:
        return _TreeNode(label=int(y[0]))
    split = _best_split(x, y, n_classes)
    if split is None:
        return _TreeNode(label=_majority(y, n_classes))
    f, thr = split
    mask = x[:, f] <= thr
    return _TreeNode(
        feature=f,
        threshold=thr,
        left=_grow(x[mask], y[mask], n_classes),
        right=_grow(x[~mask], y[~mask], n_classes),
    )


def _tree_predict(node: _TreeNode, q: np.ndarray) -> int:
    while not node.is_leaf:
        node = node.left if q[node.feature] <= node.threshold else node.right
    return node.label


def decisiontree_fit_predict(support: SupportSet, query) -> float:
    """Fit an unlimited-depth Gini CART on the support set; query accuracy."""
    zs, ys = _support_arrays(support)
    root = _grow(zs, ys, support.n_way)
    correct = 0
    items = query.items if hasattr(query, "items") else query
    for latent, label in items:
        correct += int(_tree_predict(root, _z_of(latent)) == label)
    return correct / len(items)


# --- span-only ablation -------------------------------------------------------


def onlyspan_latent(
    trace: Trace,
    embedder: TextEmbedder,
    enc: EncoderParams,
    activation: str = "relu",
    max_spans: int = 64,
) -> LatentTrace:
    """Span-sequence representation: mean of the projected span rows.

    No log features and no attention fusion; the result feeds the same
    meta-learner as the full pipeline.
    """
    span_m, _ = featurize_trace(trace, embedder, max_spans=max_spans, max_logs=1)
    g = activation_fn(activation)
    with torch.no_grad():
        projected = g(as_tensor(span_m.values) @ enc.W_span + enc.b_span)
        z = projected.mean(dim=0)
    return LatentTrace(z=z.numpy().copy(), trace_id=trace.trace_id)


def onlyspan_project(span_m: SpanFeatureMatrix, enc: EncoderParams,
                     activation: str = "relu") -> np.ndarray:
    g = activation_fn(activation)
    with torch.no_grad():
        return g(as_tensor(span_m.values) @ enc.W_span + enc.b_span).mean(dim=0).numpy()


# --- classifier wrappers ------------------------------------------------------


class ProtoNetClassifier:
    def __init__(self):
        self._support: SupportSet | None = None

    def fit(self, support: SupportSet) -> None:
        self._support = support

    def predict(self, z: LatentTrace) -> int:
        if self._support is None:
            raise ValidationError("predict called before fit")
        return protonet_predict(self._support, z)


class NearNeighborClassifier:
    def __init__(self):
        self._support: SupportSet | None = None

    def fit(self, support: SupportSet) -> None:
        self._support = support

    def predict(self, z: LatentTrace) -> int:
        if self._support is None:
            raise ValidationError("predict called before fit")
        return nearneighbor_predict(self._support, z)


class MatchingNetClassifier:
    def __init__(self, attn: AttentionParams | None = None):
        self.attn = attn
        self._support: SupportSet | None = None

    def fit(self, support: SupportSet) -> None:
        self._support = support

    def predict(self, z: LatentTrace) -> int:
        if self._support is None:
            raise ValidationError("predict called before fit")
        return matchingnet_predict(self._support, z, self.attn)


class DecisionTreeClassifier:
    def __init__(self):
        self._root: _TreeNode | None = None

    def fit(self, support: SupportSet) -> None:
        zs, ys = _support_arrays(support)
        self._root = _grow(zs, ys, support.n_way)

    def predict(self, z: LatentTrace) -> int:
        if self._root is None:
            raise ValidationError("predict called before fit")
        return _tree_predict(self._root, _z_of(z))


def episode_accuracy(classifier: EpisodicClassifier, episode: Episode) -> float:
    classifier.fit(episode.support)
    correct = sum(
        int(classifier.predict(latent) == label) for latent, label in episode.query.items
    )
    return correct / len(episode.query.items)


# --- matching-network training -------------------------------------------------


def train_matching_embedder(
    tasks: Sequence[Episode],
    d_model: int,
    n_heads: int = 4,
    seed: int = 0,
    iterations: int = 60,
    lr: float = 5e-3,
) -> AttentionParams:
    """Episodically train the matching network's contextualizer.

    Mirrors the meta-training schedule: the same fixed tasks each iteration,
    negative log-likelihood of the matching probabilities on the query sets,
    AdamW updates.
    """
    if torch.get_num_threads() != 1:
        torch.set_num_threads(1)
    rng = substream(seed, "matching-init")
    attn = init_attention_params(d_model, n_heads, rng, requires_grad=True)
    tensors = list(attn.named_tensors().values())
    opt = torch.optim.AdamW(tensors, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    for _ in range(iterations):
        opt.zero_grad()
        loss = torch.zeros((), dtype=torch.float64)
        for task in tasks:
            s_z, s_y = _support_arrays(task.support)
            q_z, q_y = _support_arrays(task.query)
            probs = matching_probs(s_z, s_y, q_z, task.support.n_way, attn)
            picked = probs[torch.arange(len(q_y)), torch.as_tensor(q_y)]
            loss = loss - torch.log(picked.clamp_min(1e-300)).mean()
        loss.backward()
        opt.step()
    for t in tensors:
        t.requires_grad_(False)
    return attn
