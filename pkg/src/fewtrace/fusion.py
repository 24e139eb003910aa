"""Attention-based trace autoencoder: fuse span and log features into one
fixed-size latent vector per trace.

The encoder projects both modalities into a common space, runs multi-head
attention with the projected span rows as queries and the projected log
rows as keys and values, and mean-pools the attended rows into the latent
vector z. The decoder reconstructs the per-trace mean span/log feature
rows from z, and training minimizes the summed per-modality MSE with
decoupled weight decay (AdamW). Two simpler fusion variants are provided
for ablations: a linear projection over the concatenated mean-pooled
modalities, and a gated linear unit over the same input.

All tensors are float64 on CPU; training pins torch to one thread so runs
with the same seed are bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DimensionError, DivergenceError, ValidationError
from .featurize import (
    DEFAULT_MAX_LOGS,
    DEFAULT_MAX_SPANS,
    LogFeatureMatrix,
    SpanFeatureMatrix,
    TextEmbedder,
    featurize_trace,
)
from .seeding import substream
from .traces import Trace, TraceCorpus

__all__ = [
    "AEConfig",
    "EncoderParams",
    "AttentionParams",
    "DecoderParams",
    "LinearFusionParams",
    "GluFusionParams",
    "AEParams",
    "LatentTrace",
    "TrainingCurve",
    "activation_fn",
    "project",
    "attention",
    "attention_weights",
    "multihead",
    "encode",
    "encode_tensor",
    "decode",
    "reconstruction_loss",
    "trace_loss",
    "init_ae_params",
    "train_ae",
    "standardize_latent",
    "encode_corpus",
]

_DTYPE = torch.float64


def _single_threaded() -> None:
    # Fixed thread count keeps CPU reductions bit-reproducible across runs.
    if torch.get_num_threads() != 1:
        torch.set_num_threads(1)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(_DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=_DTYPE)


def activation_fn(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
    if name == "relu":
        return torch.relu
    if name == "tanh":
        return torch.tanh
    raise ValidationError(f"unknown activation {name!r}; expected 'relu' or 'tanh'")


@dataclass(frozen=True)
class AEConfig:
    """Hyperparameters of the fusion autoencoder."""

    d_common: int = 64
    n_heads: int = 4
    activation: str = "tanh"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0
    variant: str = "multihead"
    val_fraction: float = 0.15
    max_spans: int = DEFAULT_MAX_SPANS
    max_logs: int = DEFAULT_MAX_LOGS

    def __post_init__(self):
        if self.d_common % self.n_heads != 0:
            raise ValidationError(
                f"d_common={self.d_common} is not divisible by n_heads={self.n_heads}"
            )
        if self.variant not in ("multihead", "linear", "glu"):
            raise ValidationError(f"unknown fusion variant {self.variant!r}")
        activation_fn(self.activation)

    @property
    def d_k(self) -> int:
        return self.d_common // self.n_heads


@dataclass
class EncoderParams:
    """Per-modality input projections into the common space."""

    W_span: torch.Tensor  # [d_span x d_common]
    b_span: torch.Tensor  # [d_common]
    W_log: torch.Tensor  # [d_log x d_common]
    b_log: torch.Tensor  # [d_common]

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "encoder.W_span": self.W_span,
            "encoder.b_span": self.b_span,
            "encoder.W_log": self.W_log,
            "encoder.b_log": self.b_log,
        }


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output matrix."""

    W_q: tuple[torch.Tensor, ...]  # each [d_model x d_k]
    W_k: tuple[torch.Tensor, ...]
    W_v: tuple[torch.Tensor, ...]
    W_o: torch.Tensor  # [d_model x d_model]

    @property
    def n_heads(self) -> int:
        return len(self.W_q)

    @property
    def d_k(self) -> int:
        return self.W_q[0].shape[1]

    def named_tensors(self, prefix: str = "attention") -> dict[str, torch.Tensor]:
        out = {}
        for i in range(self.n_heads):
            out[f"{prefix}.head{i}.W_q"] = self.W_q[i]
            out[f"{prefix}.head{i}.W_k"] = self.W_k[i]
            out[f"{prefix}.head{i}.W_v"] = self.W_v[i]
        out[f"{prefix}.W_o"] = self.W_o
        return out


@dataclass
class DecoderParams:
    """Reconstruction maps from the latent space back to both modalities."""

    W_span_dec: torch.Tensor  # [d_common x d_span]
    b_span_dec: torch.Tensor  # [d_span]
    W_log_dec: torch.Tensor  # [d_common x d_log]
    b_log_dec: torch.Tensor  # [d_log]

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "decoder.W_span_dec": self.W_span_dec,
            "decoder.b_span_dec": self.b_span_dec,
            "decoder.W_log_dec": self.W_log_dec,
            "decoder.b_log_dec": self.b_log_dec,
        }


@dataclass
class LinearFusionParams:
    """Linear fusion over concat(mean span row, mean log row)."""

    W: torch.Tensor  # [2*d_common x d_common]
    b: torch.Tensor  # [d_common]

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {"fusion.W": self.W, "fusion.b": self.b}


@dataclass
class GluFusionParams:
    """Gated linear unit fusion over the same concatenated input."""

    W_lin: torch.Tensor  # [2*d_common x d_common]
    b_lin: torch.Tensor
    W_gate: torch.Tensor
    b_gate: torch.Tensor

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {
            "fusion.W_lin": self.W_lin,
            "fusion.b_lin": self.b_lin,
            "fusion.W_gate": self.W_gate,
            "fusion.b_gate": self.b_gate,
        }


FusionParams = AttentionParams | LinearFusionParams | GluFusionParams


@dataclass
class AEParams:
    """All trainable autoencoder parameters plus their configuration.

    ``latent_mean``/``latent_std`` are output-calibration statistics measured
    on the training normals' latents after optimization. They are not
    trainable and do not affect the encoder itself; corpus-level encoding
    standardizes latents with them so downstream classifiers see
    unit-scale, centered coordinates.
    """

    encoder: EncoderParams
    fusion: FusionParams
    decoder: DecoderParams
    config: AEConfig
    latent_mean: torch.Tensor | None = None
    latent_std: torch.Tensor | None = None

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = dict(self.encoder.named_tensors())
        out.update(self.fusion.named_tensors())
        out.update(self.decoder.named_tensors())
        return out

    @property
    def d_span(self) -> int:
        return self.encoder.W_span.shape[0]

    @property
    def d_log(self) -> int:
        return self.encoder.W_log.shape[0]


@dataclass(frozen=True)
class LatentTrace:
    """The fused fixed-size representation of one trace."""

    z: np.ndarray
    trace_id: str = ""


@dataclass(frozen=True)
class TrainingCurve:
    train_loss: tuple[float, ...]
    val_loss: tuple[float, ...]
    epoch_seconds: tuple[float, ...] = ()


# --- forward pieces -------------------------------------------------------


def project(
    v_span,
    v_log,
    enc: EncoderParams,
    g: Callable[[torch.Tensor], torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise projection of both modalities into the common space."""
    v_span, v_log = as_tensor(v_span), as_tensor(v_log)
    if v_span.shape[1] != enc.W_span.shape[0]:
        raise DimensionError(
            f"span features have width {v_span.shape[1]}, projection expects {enc.W_span.shape[0]}"
        )
    if v_log.shape[1] != enc.W_log.shape[0]:
        raise DimensionError(
            f"log features have width {v_log.shape[1]}, projection expects {enc.W_log.shape[0]}"
        )
    return g(v_span @ enc.W_span + enc.b_span), g(v_log @ enc.W_log + enc.b_log)


def attention_weights(q, k, d_k: int) -> torch.Tensor:
    """Scaled dot-product attention distribution; rows sum to 1."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] == 0:
        raise DimensionError("attention requires at least one key/value row")
    scores = q @ k.transpose(-2, -1) / (float(d_k) ** 0.5)
    return torch.softmax(scores, dim=-1)


def attention(q, k, v, d_k: int) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V."""
    v = as_tensor(v)
    if as_tensor(k).shape[-2] != v.shape[-2]:
        raise DimensionError("key and value row counts differ")
    return attention_weights(q, k, d_k) @ v


def multihead(q, k, v, params: AttentionParams) -> torch.Tensor:
    """Concatenated per-head attention outputs times the output matrix.

    Accepts [n x d_model] inputs or batched [... x n x d_model] stacks.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d_model = params.W_o.shape[0]
    if q.shape[-1] != d_model or k.shape[-1] != d_model or v.shape[-1] != d_model:
        raise DimensionError(
            f"multihead expects width {d_model}, got q={q.shape[-1]} k={k.shape[-1]} v={v.shape[-1]}"
        )
    heads = [
        attention(q @ params.W_q[i], k @ params.W_k[i], v @ params.W_v[i], params.d_k)
        for i in range(params.n_heads)
    ]
    return torch.cat(heads, dim=-1) @ params.W_o


def _mean_rows(m: torch.Tensor) -> torch.Tensor:
    return m.mean(dim=0)


def encode_tensor(v_span, v_log, params: AEParams) -> torch.Tensor:
    """Differentiable encoder path: feature matrices -> latent vector [d']."""
    g = activation_fn(params.config.activation)
    p_span, p_log = project(v_span, v_log, params.encoder, g)
    if isinstance(params.fusion, AttentionParams):
        fused = multihead(p_span, p_log, p_log, params.fusion)
        return _mean_rows(fused)
    u = torch.cat([_mean_rows(p_span), _mean_rows(p_log)])
    if isinstance(params.fusion, LinearFusionParams):
        return g(u @ params.fusion.W + params.fusion.b)
    return (u @ params.fusion.W_lin + params.fusion.b_lin) * torch.sigmoid(
        u @ params.fusion.W_gate + params.fusion.b_gate
    )


def encode(v_span: SpanFeatureMatrix, v_log: LogFeatureMatrix, params: AEParams,
           trace_id: str = "") -> LatentTrace:
    """Encode one featurized trace into its latent representation."""
    with torch.no_grad():
        z = encode_tensor(v_span.values, v_log.values, params)
    return LatentTrace(z=z.numpy().copy(), trace_id=trace_id)


def decode(
    z,
    dec: DecoderParams,
    g: Callable[[torch.Tensor], torch.Tensor],
    n_spans: int,
    n_logs: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct both modalities from z, broadcast to the requested rows.

    The latent vector pools away row identity, so the decoder emits one
    reconstructed row per modality replicated n_spans / n_logs times.
    """
    z = as_tensor(z)
    if z.shape[-1] != dec.W_span_dec.shape[0]:
        raise DimensionError(
            f"latent width {z.shape[-1]} != decoder input {dec.W_span_dec.shape[0]}"
        )
    span_row = g(z @ dec.W_span_dec + dec.b_span_dec)
    log_row = g(z @ dec.W_log_dec + dec.b_log_dec)
    return span_row.expand(n_spans, -1), log_row.expand(n_logs, -1)


def reconstruction_loss(v_span, v_log, vhat_span, vhat_log) -> torch.Tensor:
    """Summed per-modality mean-squared error (mean per element)."""
    v_span, v_log = as_tensor(v_span), as_tensor(v_log)
    vhat_span, vhat_log = as_tensor(vhat_span), as_tensor(vhat_log)
    if v_span.shape != vhat_span.shape or v_log.shape != vhat_log.shape:
        raise DimensionError(
            f"reconstruction shapes {tuple(vhat_span.shape)}/{tuple(vhat_log.shape)} do not "
            f"match targets {tuple(v_span.shape)}/{tuple(v_log.shape)}"
        )
    return ((vhat_span - v_span) ** 2).mean() + ((vhat_log - v_log) ** 2).mean()


def trace_loss(v_span, v_log, params: AEParams) -> torch.Tensor:
    """Reconstruction loss of one trace through encode/decode.

    Pooling makes the decoder's natural target the per-trace mean feature
    rows, so the loss compares single reconstructed rows against those means.
    """
    v_span, v_log = as_tensor(v_span), as_tensor(v_log)
    z = encode_tensor(v_span, v_log, params)
    g = activation_fn(params.config.activation)
    vhat_span, vhat_log = decode(z, params.decoder, g, 1, 1)
    return reconstruction_loss(
        _mean_rows(v_span).unsqueeze(0), _mean_rows(v_log).unsqueeze(0), vhat_span, vhat_log
    )


# --- initialization and training ------------------------------------------


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
             requires_grad: bool) -> torch.Tensor:
    bound = 1.0 / float(fan_in) ** 0.5
    arr = rng.uniform(-bound, bound, size=shape)
    t = torch.as_tensor(arr, dtype=_DTYPE)
    return t.requires_grad_(requires_grad)


def init_attention_params(
    d_model: int, n_heads: int, rng: np.random.Generator, requires_grad: bool = False
) -> AttentionParams:
    if d_model % n_heads != 0:
        raise ValidationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    d_k = d_model // n_heads
    W_q, W_k, W_v = [], [], []
    for _ in range(n_heads):
        W_q.append(_uniform(rng, (d_model, d_k), d_model, requires_grad))
        W_k.append(_uniform(rng, (d_model, d_k), d_model, requires_grad))
        W_v.append(_uniform(rng, (d_model, d_k), d_model, requires_grad))
    W_o = _uniform(rng, (d_model, d_model), d_model, requires_grad)
    return AttentionParams(tuple(W_q), tuple(W_k), tuple(W_v), W_o)


def init_ae_params(
    d_span: int, d_log: int, cfg: AEConfig, requires_grad: bool = False
) -> AEParams:
    """Seeded uniform fan-in initialization of all tensors."""
    rng = substream(cfg.seed, "ae-init")
    d = cfg.d_common
    enc = EncoderParams(
        W_span=_uniform(rng, (d_span, d), d_span, requires_grad),
        b_span=_uniform(rng, (d,), d_span, requires_grad),
        W_log=_uniform(rng, (d_log, d), d_log, requires_grad),
        b_log=_uniform(rng, (d,), d_log, requires_grad),
    )
    if cfg.variant == "multihead":
        fusion: FusionParams = init_attention_params(d, cfg.n_heads, rng, requires_grad)
    elif cfg.variant == "linear":
        fusion = LinearFusionParams(
            W=_uniform(rng, (2 * d, d), 2 * d, requires_grad),
            b=_uniform(rng, (d,), 2 * d, requires_grad),
        )
    else:
        fusion = GluFusionParams(
            W_lin=_uniform(rng, (2 * d, d), 2 * d, requires_grad),
            b_lin=_uniform(rng, (d,), 2 * d, requires_grad),
            W_gate=_uniform(rng, (2 * d, d), 2 * d, requires_grad),
            b_gate=_uniform(rng, (d,), 2 * d, requires_grad),
        )
    dec = DecoderParams(
        W_span_dec=_uniform(rng, (d, d_span), d, requires_grad),
        b_span_dec=_uniform(rng, (d_span,), d, requires_grad),
        W_log_dec=_uniform(rng, (d, d_log), d, requires_grad),
        b_log_dec=_uniform(rng, (d_log,), d, requires_grad),
    )
    return AEParams(encoder=enc, fusion=fusion, decoder=dec, config=cfg)


def _featurize_all(
    traces: Sequence[Trace], embedder: TextEmbedder, cfg: AEConfig
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    out = []
    for trace in traces:
        span_m, log_m = featurize_trace(trace, embedder, cfg.max_spans, cfg.max_logs)
        out.append((as_tensor(span_m.values), as_tensor(log_m.values)))
    return out


def train_ae(
    corpus: TraceCorpus,
    cfg: AEConfig,
    embedder: TextEmbedder,
) -> tuple[AEParams, TrainingCurve]:
    """Train the autoencoder on the corpus's unlabeled (normal) traces.

    Deterministic for a fixed seed: initialization, the train/validation
    split, and batch order all come from named sub-streams of cfg.seed.
    """
    _single_threaded()
    normals = corpus.normals()
    if len(normals) < cfg.batch_size:
        raise ValidationError(
            f"need at least batch_size={cfg.batch_size} normal traces, found {len(normals)}"
        )
    feats = _featurize_all(normals, embedder, cfg)
    d_span = feats[0][0].shape[1]
    d_log = feats[0][1].shape[1]

    split_rng = substream(cfg.seed, "ae-split")
    order = split_rng.permutation(len(feats))
    n_val = int(round(cfg.val_fraction * len(feats)))
    n_val = max(0, min(n_val, len(feats) - cfg.batch_size))
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = init_ae_params(d_span, d_log, cfg, requires_grad=True)
    tensors = list(params.named_tensors().values())
    opt = torch.optim.AdamW(
        tensors,
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )

    batch_rng = substream(cfg.seed, "ae-train")
    train_curve: list[float] = []
    val_curve: list[float] = []
    epoch_seconds: list[float] = []
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = batch_rng.permutation(len(train_idx))
        epoch_total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = [feats[train_idx[i]] for i in perm[lo : lo + cfg.batch_size]]
            loss = torch.zeros((), dtype=_DTYPE)
            for v_span, v_log in batch:
                loss = loss + trace_loss(v_span, v_log, params)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    "autoencoder loss is not finite; try a smaller learning rate"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_total += float(loss.detach())
        train_curve.append(epoch_total / len(train_idx))
        with torch.no_grad():
            if len(val_idx):
                val = sum(float(trace_loss(*feats[i], params)) for i in val_idx)
                val_curve.append(val / len(val_idx))
            else:
                val_curve.append(float("nan"))
        epoch_seconds.append(time.perf_counter() - t0)

    for t in tensors:
        t.requires_grad_(False)
    params.latent_mean, params.latent_std = _latent_statistics(feats, train_idx, params)
    return params, TrainingCurve(tuple(train_curve), tuple(val_curve), tuple(epoch_seconds))


def _latent_statistics(
    feats: Sequence[tuple[torch.Tensor, torch.Tensor]],
    train_idx: np.ndarray,
    params: AEParams,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-coordinate mean/std of the training normals' latents.

    The std floor is relative, so near-constant coordinates (where novel
    faults may later stick out) are amplified but boundedly so.
    """
    with torch.no_grad():
        zs = torch.stack([encode_tensor(*feats[i], params) for i in train_idx])
        mean = zs.mean(dim=0)
        std = zs.std(dim=0, unbiased=False)
        floor = torch.clamp(0.05 * std.mean(), min=1e-8)
        std = torch.clamp(std, min=float(floor))
    return mean, std


LATENT_CLIP = 8.0


def standardize_latent(z: np.ndarray, params: AEParams) -> np.ndarray:
    """Apply the encoder's output calibration; identity if stats are absent.

    Coordinates are clipped at +-LATENT_CLIP standard units: traces far off
    the normal manifold stay clearly separable without destabilizing
    gradient-based adaptation downstream.
    """
    if params.latent_mean is None or params.latent_std is None:
        return z
    scaled = (z - params.latent_mean.numpy()) / params.latent_std.numpy()
    return np.clip(scaled, -LATENT_CLIP, LATENT_CLIP)


def encode_corpus(
    corpus: TraceCorpus, params: AEParams, embedder: TextEmbedder
) -> list[tuple[LatentTrace, str | None]]:
    """Encode every trace, with output calibration; yields (latent, label)."""
    cfg = params.config
    out = []
    for trace in corpus.traces:
        span_m, log_m = featurize_trace(trace, embedder, cfg.max_spans, cfg.max_logs)
        latent = encode(span_m, log_m, params, trace_id=trace.trace_id)
        z = standardize_latent(latent.z, params)
        out.append((LatentTrace(z=z, trace_id=latent.trace_id), trace.label.id if trace.label else None))
    return out
