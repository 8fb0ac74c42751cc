"""Diagnosis embeddings and per-indicator 1-D CNN lab features."""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def embed_diagnoses(codes, params: dict[str, Tensor]) -> Tensor:
    """Look up embedding columns; ``codes`` may be any int array shape."""
    return ad.embedding(params["theta_e"], codes)


def init_feature_params(rng: np.random.Generator, n_codes: int, n_indicators: int,
                        d_u: int, d_v: int, c1: int, k1: int, k2: int) -> dict[str, Tensor]:
    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    p = {"theta_e": uni((d_u, n_codes), d_u)}
    for i in range(n_indicators):
        p[f"cnn.{i}.conv1_w"] = uni((c1, 1, k1), k1)
        p[f"cnn.{i}.conv1_b"] = uni((c1,), k1)
        p[f"cnn.{i}.conv2_w"] = uni((d_v, c1, k2), c1 * k2)
        p[f"cnn.{i}.conv2_b"] = uni((d_v,), c1 * k2)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _stage_lengths(length: int, k1: int, pool: int, k2: int):
    l1 = max(length, k1) - k1 + 1
    l1p = (max(l1, pool) - pool) // pool + 1
    l2 = max(l1p, k2) - k2 + 1
    need_conv1 = max(max(l1, pool), (max(l1p, k2) - 1) * pool + pool)
    need_input = max(length, k1, need_conv1 + k1 - 1)
    return l1, l1p, l2, need_input


def lab_features(waveforms: Sequence[np.ndarray], indicator: int, params: dict[str, Tensor],
                 pool: int = 2) -> Tensor:
    """CNN features for a set of waveforms of one indicator -> (N, d_v).

    Pipeline: conv -> max-pool -> ReLU -> conv -> max over time. Each waveform
    is processed as if alone: batch padding is masked out at every stage.
    """
    w1 = params[f"cnn.{indicator}.conv1_w"]
    w2 = params[f"cnn.{indicator}.conv2_w"]
    k1, k2 = w1.shape[2], w2.shape[2]
    lens = [len(w) for w in waveforms]
    if min(lens) < 1:
        raise ValueError("waveforms must have at least one sample")
    stages = np.array([_stage_lengths(n, k1, pool, k2) for n in lens])
    width = int(stages[:, 3].max())
    x = np.zeros((len(waveforms), 1, width))
    for j, w in enumerate(waveforms):
        x[j, 0, :len(w)] = w

    h = ad.conv1d(x, w1, params[f"cnn.{indicator}.conv1_b"])
    h = ad.mul(h, (np.arange(h.shape[2]) < stages[:, 0, None])[:, None, :])
    h = ad.maxpool1d(h, pool, pool)
    h = ad.mul(h, (np.arange(h.shape[2]) < stages[:, 1, None])[:, None, :])
    h = ad.relu(h)
    h = ad.conv1d(h, w2, params[f"cnn.{indicator}.conv2_b"])
    valid = (np.arange(h.shape[2]) < stages[:, 2, None])[:, None, :]
    return ad.max(h, axis=2, mask=valid)


def lab_feature(waveform, indicator: int, params: dict[str, Tensor]) -> Tensor:
    """Feature vector (d_v,) of a single nonempty waveform."""
    return ad.index(lab_features([np.asarray(waveform, dtype=np.float64)], indicator, params), 0)


class LabScaler:
    """Per-indicator standardization fitted on training waveforms."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, records, n_indicators: int) -> "LabScaler":
        mean, std = np.zeros(n_indicators), np.ones(n_indicators)
        for i in range(n_indicators):
            samples = [np.asarray(v.labs[i]) for r in records for v in r.visits if v.labs[i]]
            if samples:
                allv = np.concatenate(samples)
                mean[i] = allv.mean()
                std[i] = allv.std() or 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, n_indicators: int) -> "LabScaler":
        return cls(np.zeros(n_indicators), np.ones(n_indicators))

    def transform(self, waveform, indicator: int) -> np.ndarray:
        w = np.asarray(waveform, dtype=np.float64)
        if w.size == 0:
            # missing waveform -> one zero sample (the indicator mean after scaling)
            return np.zeros(1)
        return (w - self.mean[indicator]) / self.std[indicator]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LabScaler":
        return cls(d["mean"], d["std"])
