"""Shared fixtures and independent oracles used across the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from fewtrace.featurize import HashingEmbedder
from fewtrace.synthgen import builtin_profile, default_injectors, generate
from fewtrace.traces import LogRecord, SpanRecord, make_trace


def naive_attention(q, k, v, d_k):
    """Triple-loop scaled dot-product attention oracle (pure Python floats)."""
    q, k, v = np.asarray(q, float), np.asarray(k, float), np.asarray(v, float)
    m, n = q.shape[0], k.shape[0]
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        scores = []
        for j in range(n):
            s = 0.0
            for t in range(q.shape[1]):
                s += q[i, t] * k[j, t]
            scores.append(s / np.sqrt(d_k))
        mx = max(scores)
        exps = [np.exp(s - mx) for s in scores]
        total = sum(exps)
        weights = [e / total for e in exps]
        for j in range(n):
            for t in range(v.shape[1]):
                out[i, t] += weights[j] * v[j, t]
    return out


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for t in range(a.shape[1]):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def finite_difference_grads(loss_fn, tensors: dict[str, torch.Tensor], eps: float = 1e-4):
    """Central-difference gradients of loss_fn with respect to every tensor."""
    grads = {}
    for name, tensor in tensors.items():
        grad = torch.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads[name] = grad
    return grads


def max_relative_error(analytic: dict, numeric: dict) -> float:
    worst = 0.0
    for name in analytic:
        a = analytic[name].reshape(-1)
        f = numeric[name].reshape(-1)
        for x, y in zip(a.tolist(), f.tolist()):
            denom = max(abs(x), abs(y), 1.0)
            worst = max(worst, abs(x - y) / denom)
    return worst


def tiny_trace(trace_id="t0", n_spans=2, n_logs=2, label=None):
    spans = [
        SpanRecord(f"aa11f{i}.0", None if i == 0 else "aa11f0.0",
                   1000 + 300 * i, 1400 + 500 * i, f"svc-{'ab'[i % 2]}", f"/get/item{i}")
        for i in range(n_spans)
    ]
    logs = [
        LogRecord(1100 + 100 * j, "INFO", "svc", f"message number {j} handled ok")
        for j in range(n_logs)
    ]
    return make_trace(trace_id, spans, logs, label)


@pytest.fixture(scope="session")
def embedder():
    return HashingEmbedder(dim=16, n_hashes=2)


@pytest.fixture(scope="session")
def small_corpus():
    profile = builtin_profile("booking-small")
    injectors = default_injectors(profile, 8)
    return generate(profile, injectors, n_normal=40, n_per_fault=6, seed=42)
