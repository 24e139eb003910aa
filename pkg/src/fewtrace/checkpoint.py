"""Checkpoint archives: a zip holding ``manifest.json`` plus one raw
little-endian float32 binary file per named tensor.

Archive bytes are deterministic (fixed member order and timestamps), and a
save/load/save round trip is byte-identical. The manifest records tensor
shapes, the model kind and configuration, and the seed that produced the
parameters.
"""

from __future__ import annotations

import dataclasses
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import ValidationError
from .fusion import (
    AEConfig,
    AEParams,
    AttentionParams,
    DecoderParams,
    EncoderParams,
    GluFusionParams,
    LinearFusionParams,
)
from .meta import LearnerConfig, MetaConfig, MetaLearnerParams, init_learner_params

__all__ = [
    "save_tensors",
    "load_tensors",
    "save_ae",
    "load_ae",
    "save_learner",
    "load_learner",
]

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_tensors(
    path: str | Path,
    kind: str,
    tensors: Mapping[str, torch.Tensor | np.ndarray],
    manifest_extra: Mapping[str, object],
) -> None:
    """Write a checkpoint archive; tensors are stored as little-endian f32."""
    entries = {}
    blobs = {}
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        member = f"tensors/{name}.f32"
        entries[name] = {"shape": list(arr.shape), "dtype": "<f4", "file": member}
        blobs[member] = arr.tobytes(order="C")
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tensors": entries,
        **manifest_extra,
    }
    with zipfile.ZipFile(Path(path), "w") as zf:
        _write_member(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for member in sorted(blobs):
            _write_member(zf, member, blobs[member])


def load_tensors(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint archive back into (manifest, float32 tensors)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            tensors = {}
            for name, entry in manifest["tensors"].items():
                raw = zf.read(entry["file"])
                arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
                tensors[name] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"checkpoint {path} is not a valid archive: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"checkpoint {path} has format_version {manifest.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise ValidationError(
            f"checkpoint {path} holds a {manifest.get('kind')!r}, expected {expect_kind!r}"
        )
    return manifest, tensors


def _t(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr, dtype=np.float64))


# --- autoencoder -------------------------------------------------------------


def save_ae(path: str | Path, params: AEParams,
            featurize_info: Mapping[str, object] | None = None) -> None:
    extra = {
        "config": dataclasses.asdict(params.config),
        "seed": params.config.seed,
        "d_span": params.d_span,
        "d_log": params.d_log,
        "featurize": dict(featurize_info or {}),
    }
    tensors = dict(params.named_tensors())
    if params.latent_mean is not None and params.latent_std is not None:
        tensors["calibration.latent_mean"] = params.latent_mean
        tensors["calibration.latent_std"] = params.latent_std
    save_tensors(path, "fusion_autoencoder", tensors, extra)


def load_ae(path: str | Path) -> tuple[AEParams, dict]:
    manifest, tensors = load_tensors(path, expect_kind="fusion_autoencoder")
    cfg = AEConfig(**manifest["config"])
    enc = EncoderParams(
        W_span=_t(tensors["encoder.W_span"]),
        b_span=_t(tensors["encoder.b_span"]),
        W_log=_t(tensors["encoder.W_log"]),
        b_log=_t(tensors["encoder.b_log"]),
    )
    if cfg.variant == "multihead":
        fusion = AttentionParams(
            W_q=tuple(_t(tensors[f"attention.head{i}.W_q"]) for i in range(cfg.n_heads)),
            W_k=tuple(_t(tensors[f"attention.head{i}.W_k"]) for i in range(cfg.n_heads)),
            W_v=tuple(_t(tensors[f"attention.head{i}.W_v"]) for i in range(cfg.n_heads)),
            W_o=_t(tensors["attention.W_o"]),
        )
    elif cfg.variant == "linear":
        fusion = LinearFusionParams(W=_t(tensors["fusion.W"]), b=_t(tensors["fusion.b"]))
    else:
        fusion = GluFusionParams(
            W_lin=_t(tensors["fusion.W_lin"]),
            b_lin=_t(tensors["fusion.b_lin"]),
            W_gate=_t(tensors["fusion.W_gate"]),
            b_gate=_t(tensors["fusion.b_gate"]),
        )
    dec = DecoderParams(
        W_span_dec=_t(tensors["decoder.W_span_dec"]),
        b_span_dec=_t(tensors["decoder.b_span_dec"]),
        W_log_dec=_t(tensors["decoder.W_log_dec"]),
        b_log_dec=_t(tensors["decoder.b_log_dec"]),
    )
    mean = tensors.get("calibration.latent_mean")
    std = tensors.get("calibration.latent_std")
    return (
        AEParams(
            encoder=enc,
            fusion=fusion,
            decoder=dec,
            config=cfg,
            latent_mean=None if mean is None else _t(mean),
            latent_std=None if std is None else _t(std),
        ),
        manifest,
    )


# --- meta-learner -------------------------------------------------------------


def save_learner(
    path: str | Path,
    params: MetaLearnerParams,
    cfg: LearnerConfig,
    mcfg: MetaConfig | None = None,
) -> None:
    extra = {
        "config": dataclasses.asdict(cfg),
        "meta_config": dataclasses.asdict(mcfg) if mcfg is not None else None,
        "seed": cfg.seed,
    }
    save_tensors(path, "meta_learner", params.named_tensors(), extra)


def load_learner(path: str | Path) -> tuple[MetaLearnerParams, LearnerConfig, MetaConfig | None]:
    manifest, tensors = load_tensors(path, expect_kind="meta_learner")
    cfg = LearnerConfig(**manifest["config"])
    mcfg = MetaConfig(**manifest["meta_config"]) if manifest.get("meta_config") else None
    template = init_learner_params(cfg)
    expected = set(template.named_tensors())
    if expected != set(tensors):
        raise ValidationError(
            f"checkpoint tensors {sorted(tensors)} do not match the "
            f"{cfg.body!r} learner layout"
        )
    params = template.with_tensors({k: _t(v) for k, v in tensors.items()})
    return params, cfg, mcfg
