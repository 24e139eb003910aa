"""First-order meta-learning over latent trace representations.

The default meta-learner is a transformer encoder: the latent vectors in a
forward call form a token sequence, self-attention mixes them, a pooling
step combines each token's attended features with its input features, and
a dropout + fully-connected + softmax head yields per-token class
probabilities. Alternative learner bodies (linear, RNN, LSTM, 1-D CNN)
classify each latent vector independently at matched scale.

Training follows first-order MAML: the inner loop runs plain gradient
descent on an episode's support set; the outer loop evaluates the adapted
parameters on the query set and applies the query gradient (taken at the
adapted point) to the initial parameters with an adaptive optimizer. At
meta-test time the same inner loop adapts to the novel episode before the
query set is scored, with each query contextualized only by the support
set so no information leaks between query examples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .episodes import Episode, SupportSet
from .errors import DimensionError, DivergenceError, ValidationError
from .fusion import AttentionParams, as_tensor, init_attention_params, multihead
from .seeding import substream, torch_generator

__all__ = [
    "LearnerConfig",
    "MetaConfig",
    "MetaLearnerParams",
    "AdaptedParams",
    "init_learner_params",
    "forward",
    "query_probs",
    "gradient_step",
    "inner_adapt",
    "meta_train",
    "meta_test",
    "predict",
]

_DTYPE = torch.float64

BODIES = ("transformer_encoder", "linear", "rnn", "lstm", "cnn")

_RNN_HIDDEN = 32
_CNN_CHANNELS = 16
_CNN_KERNEL = 3


def _single_threaded() -> None:
    if torch.get_num_threads() != 1:
        torch.set_num_threads(1)


@dataclass(frozen=True)
class LearnerConfig:
    """Architecture of the episodic classifier."""

    body: str = "transformer_encoder"
    d_model: int = 64
    n_heads: int = 4
    dropout_rate: float = 0.1
    n_classes: int = 5
    pooling: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.body not in BODIES:
            raise ValidationError(f"unknown learner body {self.body!r}")
        if self.body == "transformer_encoder" and self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.pooling not in ("mean", "max"):
            raise ValidationError(f"unknown pooling {self.pooling!r}")
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")


@dataclass(frozen=True)
class MetaConfig:
    """Inner/outer loop hyperparameters; the outer update is first-order."""

    alpha: float = 0.1
    beta: float = 1e-3
    inner_steps: int = 5
    meta_iterations: int = 20
    first_order: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("alpha and beta must be > 0")
        if self.inner_steps < 1:
            raise ValidationError("inner_steps must be >= 1")
        if self.meta_iterations < 0:
            raise ValidationError("meta_iterations must be >= 0")
        if not self.first_order:
            raise ValidationError("only the first-order outer update is implemented")


@dataclass
class MetaLearnerParams:
    """Learner body parameters plus the fully-connected classification head."""

    body: str
    attention: AttentionParams | None
    extra: dict[str, torch.Tensor]
    W_fc: torch.Tensor
    b_fc: torch.Tensor

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        if self.attention is not None:
            out.update(self.attention.named_tensors(prefix="attn"))
        out.update({f"body.{k}": v for k, v in self.extra.items()})
        out["fc.W"] = self.W_fc
        out["fc.b"] = self.b_fc
        return out

    def with_tensors(self, tensors: Mapping[str, torch.Tensor]) -> "MetaLearnerParams":
        """A structurally identical copy using the given tensors."""
        attention = None
        if self.attention is not None:
            n = self.attention.n_heads
            attention = AttentionParams(
                W_q=tuple(tensors[f"attn.head{i}.W_q"] for i in range(n)),
                W_k=tuple(tensors[f"attn.head{i}.W_k"] for i in range(n)),
                W_v=tuple(tensors[f"attn.head{i}.W_v"] for i in range(n)),
                W_o=tensors["attn.W_o"],
            )
        extra = {k: tensors[f"body.{k}"] for k in self.extra}
        return MetaLearnerParams(
            body=self.body,
            attention=attention,
            extra=extra,
            W_fc=tensors["fc.W"],
            b_fc=tensors["fc.b"],
        )

    def clone(self, requires_grad: bool = False) -> "MetaLearnerParams":
        return self.with_tensors(
            {k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.named_tensors().items()}
        )


@dataclass(frozen=True)
class AdaptedParams:
    """Task-specific parameters produced by inner-loop adaptation."""

    params: MetaLearnerParams
    task_id: str
    inner_steps: int


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> torch.Tensor:
    bound = 1.0 / float(fan_in) ** 0.5
    return torch.as_tensor(rng.uniform(-bound, bound, size=shape), dtype=_DTYPE)


def init_learner_params(cfg: LearnerConfig, zero_head: bool = True) -> MetaLearnerParams:
    """Seeded uniform fan-in initialization for the configured body.

    The classification head starts at zero by default: across tasks the
    class indices are arbitrary permutations, so zero is the symmetric
    point for the head and the first adaptation step reduces to a
    class-mean-correlation classifier uncontaminated by shared feature
    offsets. Pass zero_head=False for a fully random start.
    """
    rng = substream(cfg.seed, "learner-init", cfg.body)
    d, n = cfg.d_model, cfg.n_classes
    attention = None
    extra: dict[str, torch.Tensor] = {}
    feat_dim = d
    if cfg.body == "transformer_encoder":
        attention = init_attention_params(d, cfg.n_heads, rng)
    elif cfg.body == "rnn":
        h = _RNN_HIDDEN
        extra = {
            "w_ih": _uniform(rng, (1, h), 1),
            "b_ih": _uniform(rng, (h,), 1),
            "W_hh": _uniform(rng, (h, h), h),
            "b_hh": _uniform(rng, (h,), h),
        }
        feat_dim = h
    elif cfg.body == "lstm":
        h = _RNN_HIDDEN
        extra = {
            "w_ih": _uniform(rng, (1, 4 * h), 1),
            "b_ih": _uniform(rng, (4 * h,), 1),
            "W_hh": _uniform(rng, (h, 4 * h), h),
            "b_hh": _uniform(rng, (4 * h,), h),
        }
        feat_dim = h
    elif cfg.body == "cnn":
        extra = {
            "kernel": _uniform(rng, (_CNN_CHANNELS, 1, _CNN_KERNEL), _CNN_KERNEL),
            "bias": _uniform(rng, (_CNN_CHANNELS,), _CNN_KERNEL),
        }
        feat_dim = _CNN_CHANNELS
    if zero_head:
        W_fc = torch.zeros((feat_dim, n), dtype=_DTYPE)
        b_fc = torch.zeros((n,), dtype=_DTYPE)
    else:
        W_fc = _uniform(rng, (feat_dim, n), feat_dim)
        b_fc = _uniform(rng, (n,), feat_dim)
    return MetaLearnerParams(
        body=cfg.body,
        attention=attention,
        extra=extra,
        W_fc=W_fc,
        b_fc=b_fc,
    )


# --- forward pass ---------------------------------------------------------


def _pool(attended: torch.Tensor, inputs: torch.Tensor, pooling: str) -> torch.Tensor:
    # Combine each token's attended features with its own input features.
    if pooling == "mean":
        return (attended + inputs) / 2.0
    return torch.maximum(attended, inputs)


def _dropout(x: torch.Tensor, rate: float, train_mode: bool,
             rng: torch.Generator | None) -> torch.Tensor:
    if not train_mode or rate <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=rng, dtype=_DTYPE) >= rate).to(_DTYPE)
    return x * keep / (1.0 - rate)


def _rnn_features(z: torch.Tensor, extra: Mapping[str, torch.Tensor]) -> torch.Tensor:
    # Each latent vector is read as a length-d sequence of scalars.
    b, d = z.shape
    h = torch.zeros((b, extra["W_hh"].shape[0]), dtype=_DTYPE)
    for t in range(d):
        x_t = z[:, t : t + 1]
        h = torch.tanh(x_t @ extra["w_ih"] + extra["b_ih"] + h @ extra["W_hh"] + extra["b_hh"])
    return h


def _lstm_features(z: torch.Tensor, extra: Mapping[str, torch.Tensor]) -> torch.Tensor:
    b, d = z.shape
    hidden = extra["W_hh"].shape[0]
    h = torch.zeros((b, hidden), dtype=_DTYPE)
    c = torch.zeros((b, hidden), dtype=_DTYPE)
    for t in range(d):
        x_t = z[:, t : t + 1]
        gates = x_t @ extra["w_ih"] + extra["b_ih"] + h @ extra["W_hh"] + extra["b_hh"]
        i, f, g, o = gates.chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
    return h


def _cnn_features(z: torch.Tensor, extra: Mapping[str, torch.Tensor], pooling: str) -> torch.Tensor:
    y = F.conv1d(z.unsqueeze(1), extra["kernel"], extra["bias"], padding=_CNN_KERNEL // 2)
    y = torch.relu(y)
    return y.mean(dim=2) if pooling == "mean" else y.max(dim=2).values


def _features(
    z: torch.Tensor,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
) -> torch.Tensor:
    """Per-token feature vectors for a single token sequence [B x d_model]."""
    if params.body == "transformer_encoder":
        attended = multihead(z, z, z, params.attention)
        return _pool(attended, z, cfg.pooling)
    if params.body == "linear":
        return z
    if params.body == "rnn":
        return _rnn_features(z, params.extra)
    if params.body == "lstm":
        return _lstm_features(z, params.extra)
    return _cnn_features(z, params.extra, cfg.pooling)


def _logits(
    z: torch.Tensor,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
    train_mode: bool,
    rng: torch.Generator | None,
) -> torch.Tensor:
    if z.ndim != 2:
        raise DimensionError(f"expected a [B x d_model] batch, got shape {tuple(z.shape)}")
    if z.shape[1] != cfg.d_model:
        raise DimensionError(f"latent width {z.shape[1]} != configured d_model {cfg.d_model}")
    feats = _features(z, params, cfg)
    feats = _dropout(feats, cfg.dropout_rate, train_mode, rng)
    return feats @ params.W_fc + params.b_fc


def forward(
    z_batch,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
    train_mode: bool = False,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Class probabilities [B x N]; the batch is one attention token sequence."""
    return torch.softmax(_logits(as_tensor(z_batch), params, cfg, train_mode, rng), dim=1)


def query_probs(
    support_z,
    query_z,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
    train_mode: bool = False,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Probabilities for each query, contextualized only by the support set.

    For the transformer body each query is scored in its own sequence
    (support tokens + that query token), so queries never attend to each
    other; the other bodies treat examples independently anyway.
    """
    support_z, query_z = as_tensor(support_z), as_tensor(query_z)
    if params.body != "transformer_encoder":
        return forward(query_z, params, cfg, train_mode, rng)
    m = query_z.shape[0]
    s = support_z.shape[0]
    seqs = torch.cat(
        [support_z.unsqueeze(0).expand(m, s, -1), query_z.unsqueeze(1)], dim=1
    )
    attended = multihead(seqs, seqs, seqs, params.attention)[:, -1, :]
    feats = _pool(attended, query_z, cfg.pooling)
    feats = _dropout(feats, cfg.dropout_rate, train_mode, rng)
    logits = feats @ params.W_fc + params.b_fc
    return torch.softmax(logits, dim=1)


def predict(
    support_z, query_z, params: MetaLearnerParams, cfg: LearnerConfig
) -> np.ndarray:
    """Deterministic argmax predictions; ties break to the lowest class."""
    with torch.no_grad():
        probs = query_probs(support_z, query_z, params, cfg, train_mode=False)
    return np.argmax(probs.numpy(), axis=1)


# --- adaptation and meta-training ------------------------------------------


def _episode_tensors(items: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    z = torch.stack([as_tensor(latent.z) for latent, _ in items])
    y = torch.as_tensor([label for _, label in items], dtype=torch.long)
    return z, y


def gradient_step(
    tensors: dict[str, torch.Tensor],
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    alpha: float,
) -> dict[str, torch.Tensor]:
    """One plain gradient-descent step: t - alpha * dL/dt for every tensor."""
    loss = loss_fn(tensors)
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    out = {}
    for (name, tensor), grad in zip(tensors.items(), grads):
        if grad is None:
            grad = torch.zeros_like(tensor)
        if not torch.all(torch.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient for {name!r} during adaptation")
        out[name] = (tensor - alpha * grad).detach().requires_grad_(True)
    return out


def _support_loss(
    z: torch.Tensor,
    y: torch.Tensor,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
    train_mode: bool,
    rng: torch.Generator | None,
) -> torch.Tensor:
    return F.cross_entropy(_logits(z, params, cfg, train_mode, rng), y)


def inner_adapt(
    params: MetaLearnerParams,
    support: SupportSet,
    mcfg: MetaConfig,
    cfg: LearnerConfig,
    rng: torch.Generator | None = None,
    task_id: str = "",
) -> AdaptedParams:
    """Plain gradient descent on the support set; the input params are untouched.

    Dropout is off by default so adaptation is deterministic; passing an RNG
    enables it, which is how repeated evaluation runs are made to differ.
    """
    if not support.items:
        raise ValidationError("support set is empty")
    z, y = _episode_tensors(support.items)
    if int(y.max()) >= cfg.n_classes:
        raise ValidationError(
            f"support labels reach {int(y.max())}, but the learner has {cfg.n_classes} classes"
        )
    base = params.clone(requires_grad=True)
    tensors = base.named_tensors()
    for _ in range(mcfg.inner_steps):
        tensors = gradient_step(
            tensors,
            lambda t: _support_loss(z, y, base.with_tensors(t), cfg, rng is not None, rng),
            mcfg.alpha,
        )
    adapted = base.with_tensors({k: v.detach() for k, v in tensors.items()})
    return AdaptedParams(params=adapted, task_id=task_id, inner_steps=mcfg.inner_steps)


def _query_loss(
    episode: Episode,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
    train_mode: bool,
    rng: torch.Generator | None,
) -> torch.Tensor:
    s_z, _ = _episode_tensors(episode.support.items)
    q_z, q_y = _episode_tensors(episode.query.items)
    probs = query_probs(s_z, q_z, params, cfg, train_mode, rng)
    return F.nll_loss(torch.log(probs.clamp_min(1e-300)), q_y)


def meta_train(
    params0: MetaLearnerParams,
    tasks: Sequence[Episode],
    mcfg: MetaConfig,
    cfg: LearnerConfig,
) -> tuple[MetaLearnerParams, list[float]]:
    """First-order meta-optimization over a fixed set of training tasks.

    Every iteration adapts to each task's support set, accumulates the
    query-set gradient taken at the adapted parameters, and applies their
    sum to the initial parameters with the adaptive optimizer. Returns the
    optimized parameters and the per-iteration summed query loss.
    """
    _single_threaded()
    if not tasks:
        raise ValidationError("meta_train requires at least one task")
    theta = params0.clone(requires_grad=True)
    named = theta.named_tensors()
    # Weight decay stays off in the outer loop so a zero query gradient is a
    # true fixed point of the meta-update.
    opt = torch.optim.AdamW(
        list(named.values()), lr=mcfg.beta, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0
    )
    curve: list[float] = []
    for iteration in range(mcfg.meta_iterations):
        opt.zero_grad()
        total = 0.0
        for t_index, task in enumerate(tasks):
            adapted = inner_adapt(theta, task.support, mcfg, cfg, task_id=task.task_id)
            adapted_t = {
                k: v.detach().clone().requires_grad_(True)
                for k, v in adapted.params.named_tensors().items()
            }
            rng = torch_generator(cfg.seed, "meta-dropout", iteration, t_index)
            loss = _query_loss(
                task, adapted.params.with_tensors(adapted_t), cfg, train_mode=True, rng=rng
            )
            if not bool(torch.isfinite(loss.detach())):
                raise DivergenceError("meta-training query loss is not finite")
            grads = torch.autograd.grad(loss, list(adapted_t.values()), allow_unused=True)
            # First-order update: the query gradient at the adapted point is
            # applied directly to the initial parameters.
            for (name, _), grad in zip(adapted_t.items(), grads):
                if grad is None:
                    continue
                target = named[name]
                if target.grad is None:
                    target.grad = grad.clone()
                else:
                    target.grad += grad
            total += float(loss.detach())
        opt.step()
        curve.append(total)
    return theta.clone(requires_grad=False), curve


def meta_test(
    params_star: MetaLearnerParams,
    task: Episode,
    mcfg: MetaConfig,
    cfg: LearnerConfig,
    rng: torch.Generator | None = None,
) -> tuple[float, AdaptedParams]:
    """Adapt on the support set, then score query accuracy; no side effects."""
    if not task.query.items:
        raise ValidationError(f"task {task.task_id!r} has an empty query set")
    adapted = inner_adapt(params_star, task.support, mcfg, cfg, rng=rng, task_id=task.task_id)
    s_z, _ = _episode_tensors(task.support.items)
    q_z, q_y = _episode_tensors(task.query.items)
    preds = predict(s_z, q_z, adapted.params, cfg)
    accuracy = float(np.mean(preds == q_y.numpy()))
    return accuracy, adapted
