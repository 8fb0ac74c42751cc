"""Attended feature assembly, LSTM recurrence, prediction head, loss, checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import (AblationConfig, AttentionTrace, VisitTrace, combine_scores,
                        init_attention_params, inter_seq_scores, intra_seq_scores,
                        memory_query, third_order_scores)
from .autodiff import Tensor
from .data import DatasetConfig, PatientRecord
from .features import LabScaler, embed_diagnoses, init_feature_params, lab_features

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "tghoa-checkpoint/1"


@dataclass
class ModelConfig:
    n_codes: int
    n_indicators: int
    n_classes: int = 2
    n_u_max: int = 8
    d: int = 128
    d_u: int = 64
    d_v: int = 16
    c1: int = 8
    k1: int = 5
    k2: int = 3
    pool: int = 2
    d_o: int | None = None
    time_unit: str = "year"

    def __post_init__(self):
        if self.d_o is None:
            self.d_o = max(self.d // 2, 1)
        dims = (self.n_codes, self.n_indicators, self.n_u_max, self.d, self.d_u,
                self.d_v, self.c1, self.k1, self.k2, self.pool, self.d_o)
        if min(dims) < 1 or self.n_classes < 2:
            raise ValueError("model dimensions must be positive")

    @property
    def d_x(self) -> int:
        return self.d_u + self.n_indicators * self.d_v

    @classmethod
    def for_dataset(cls, ds: DatasetConfig, **dims) -> "ModelConfig":
        return cls(n_codes=ds.n_codes, n_indicators=ds.n_indicators, n_classes=ds.n_classes,
                   n_u_max=ds.n_u_max, time_unit=ds.time_unit, **dims)

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = init_feature_params(rng, cfg.n_codes, cfg.n_indicators, cfg.d_u, cfg.d_v,
                                 cfg.c1, cfg.k1, cfg.k2)
    params.update(init_attention_params(rng, cfg.d, cfg.d_u, cfg.d_v, cfg.n_u_max,
                                        cfg.n_indicators))
    bound = 1.0 / math.sqrt(cfg.d)
    extra = {}
    for gate in ("i", "f", "o", "g"):
        extra[f"lstm.w_{gate}"] = rng.uniform(-bound, bound, size=(cfg.d, cfg.d_x + cfg.d))
        extra[f"lstm.b_{gate}"] = np.zeros(cfg.d)
    extra["head.w"] = rng.uniform(-bound, bound, size=(cfg.d_o, cfg.d))
    extra["head.b"] = np.zeros(cfg.d_o)
    bo = 1.0 / math.sqrt(cfg.d_o)
    extra["theta_o"] = rng.uniform(-bo, bo, size=(cfg.n_classes, cfg.d_o))
    extra["b_o"] = np.zeros(cfg.n_classes)
    params.update({k: Tensor(v, requires_grad=True, name=k) for k, v in extra.items()})
    return params


# ---------------------------------------------------------------- building blocks

def attend_pool(U, V, alpha_u, alpha_v) -> Tensor:
    """[sum_i alpha_u(i) u_i, alpha_v(1) v_1 (+) ... (+) alpha_v(n_v) v_n_v]."""
    U, V = ad._as_tensor(U), ad._as_tensor(V)
    alpha_u, alpha_v = ad._as_tensor(alpha_u), ad._as_tensor(alpha_v)
    u_hat = ad.sum(ad.mul(U, ad.reshape(alpha_u, alpha_u.shape + (1,))), axis=-2)
    weighted = ad.mul(V, ad.reshape(alpha_v, alpha_v.shape + (1,)))
    v_hat = ad.reshape(weighted, V.shape[:-2] + (V.shape[-2] * V.shape[-1],))
    return ad.concat([u_hat, v_hat], axis=-1)


def fuse_lstm(params) -> tuple[Tensor, Tensor]:
    gates = ("i", "f", "o", "g")
    w = ad.concat([params[f"lstm.w_{g}"] for g in gates], axis=0)
    b = ad.concat([params[f"lstm.b_{g}"] for g in gates], axis=0)
    return w, b


def lstm_step(x, h_prev, c_prev, params, fused=None):
    """One LSTM step; returns (h, c)."""
    w, b = fused if fused is not None else fuse_lstm(params)
    d = w.shape[0] // 4
    z = ad.linear(ad.concat([x, h_prev], axis=-1), w, b)
    i = ad.sigmoid(ad.index(z, (Ellipsis, slice(0, d))))
    f = ad.sigmoid(ad.index(z, (Ellipsis, slice(d, 2 * d))))
    o = ad.sigmoid(ad.index(z, (Ellipsis, slice(2 * d, 3 * d))))
    g = ad.tanh(ad.index(z, (Ellipsis, slice(3 * d, 4 * d))))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def predict_head(h, params) -> Tensor:
    z = ad.relu(ad.linear(h, params["head.w"], params["head.b"]))
    return ad.softmax(ad.linear(z, params["theta_o"], params["b_o"]))


def loss(probs, y) -> Tensor:
    """Two-sided cross-entropy, averaged over the batch.

    ``-sum_k y_k log p_k - sum_k (1 - y_k) log(1 - p_k)`` with one-hot ``y``;
    probabilities are clamped to [1e-12, 1 - 1e-12].
    """
    probs = ad._as_tensor(probs)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    k = probs.shape[-1]
    onehot = np.eye(k)[y].reshape(probs.shape)
    p = ad.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    terms = ad.add(ad.mul(ad.log(p), onehot), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - onehot))
    per_example = ad.neg(ad.sum(terms, axis=-1))
    return ad.mean(per_example)


# ---------------------------------------------------------------- whole model

@dataclass
class EncodedBatch:
    patient_ids: list[str]
    codes: np.ndarray        # (B, T, W) int
    code_mask: np.ndarray    # (B, T, W) bool
    deltas: np.ndarray       # (B, T) in the dataset time unit
    waves: list[list[np.ndarray]]  # per indicator, B*T scaled waveforms (b-major)
    labels: np.ndarray       # (B,)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def n_visits(self) -> int:
        return self.codes.shape[1]


def encode(records: list[PatientRecord], cfg: ModelConfig, scaler: LabScaler) -> EncodedBatch:
    if len({r.n_visits for r in records}) != 1:
        raise ValueError("records in one forward pass must share the visit count")
    B, T = len(records), records[0].n_visits
    width = max(len(v.diagnoses) for r in records for v in r.visits)
    if width > cfg.n_u_max:
        raise ValueError(f"a visit has {width} codes; n_u_max is {cfg.n_u_max}")
    codes = np.zeros((B, T, width), dtype=np.int64)
    mask = np.zeros((B, T, width), dtype=bool)
    deltas = np.zeros((B, T))
    waves = [[] for _ in range(cfg.n_indicators)]
    for b, r in enumerate(records):
        deltas[b] = r.deltas(cfg.time_unit)
        for t, v in enumerate(r.visits):
            codes[b, t, :len(v.diagnoses)] = v.diagnoses
            mask[b, t, :len(v.diagnoses)] = True
            for i in range(cfg.n_indicators):
                waves[i].append(scaler.transform(v.labs[i], i))
    labels = np.array([r.label for r in records], dtype=np.int64)
    return EncodedBatch([r.patient_id for r in records], codes, mask, deltas, waves, labels)


def forward_batch(enc: EncodedBatch, params, cfg: ModelConfig, ablation: AblationConfig,
                  trace: bool = False):
    """Run the recurrence over all visits; returns (probs (B, K), traces or None)."""
    B, T = enc.size, enc.n_visits
    n_v = cfg.n_indicators
    U_all = ad.mul(embed_diagnoses(enc.codes, params), enc.code_mask[..., None])
    feats = [lab_features(enc.waves[i], i, params, cfg.pool) for i in range(n_v)]
    V_all = ad.reshape(ad.stack(feats, axis=1), (B, T, n_v, cfg.d_v))
    fused = fuse_lstm(params)

    h = Tensor(np.zeros((B, cfg.d)))
    c = Tensor(np.zeros((B, cfg.d)))
    traces = [AttentionTrace(pid) for pid in enc.patient_ids] if trace else None
    for t in range(T):
        U = ad.index(U_all, (slice(None), t))
        V = ad.index(V_all, (slice(None), t))
        mask = enc.code_mask[:, t]
        lams = {}
        q = None
        if ablation.needs_query:
            if t == 0:
                # no history before the first visit
                q = Tensor(np.zeros((B, cfg.d)))
            else:
                q = memory_query(c, enc.deltas[:, t], params, ablation)
        if ablation.use_intra:
            lams["intra"] = intra_seq_scores(U, V, q, params)
        if ablation.use_inter:
            lams["inter"] = inter_seq_scores(U, V, params, mask)[1:]
        if ablation.use_third:
            lams["third"] = third_order_scores(U, V, q, params, mask)[1:]
        alpha_u, alpha_v = combine_scores(lams, params, ablation, mask, n_v)
        x = attend_pool(U, V, alpha_u, alpha_v)
        h, c = lstm_step(x, h, c, params, fused)
        if trace:
            _record_visit(traces, t, enc, mask, alpha_u, alpha_v, q, lams)
    return predict_head(h, params), traces


def _record_visit(traces, t, enc, mask, alpha_u, alpha_v, q, lams):
    for b, tr in enumerate(traces):
        m = mask[b]
        lam = {unit: {"codes": vals[0].data[b][m].tolist(), "indicators": vals[1].data[b].tolist()}
               for unit, vals in lams.items()}
        tr.visits.append(VisitTrace(
            delta=float(enc.deltas[b, t]),
            codes=enc.codes[b, t][m].tolist(),
            alpha_u=alpha_u.data[b][m].tolist(),
            alpha_v=alpha_v.data[b].tolist(),
            query=[] if q is None else q.data[b].tolist(),
            lambdas=lam,
        ))


def forward_patient(record: PatientRecord, params, cfg: ModelConfig, ablation: AblationConfig,
                    scaler: LabScaler | None = None):
    """Class probabilities (K,) and the attention trace of one patient."""
    scaler = scaler or LabScaler.identity(cfg.n_indicators)
    probs, traces = forward_batch(encode([record], cfg, scaler), params, cfg, ablation, trace=True)
    return ad.index(probs, 0), traces[0]


def batch_loss(enc: EncodedBatch, params, cfg: ModelConfig, ablation: AblationConfig) -> Tensor:
    probs, _ = forward_batch(enc, params, cfg, ablation)
    return loss(probs, enc.labels)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, cfg: ModelConfig, ablation: AblationConfig,
                    scaler: LabScaler, dataset: DatasetConfig | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": cfg.to_dict(),
        "ablation": ablation.to_dict(),
        "active": sorted(active_param_names(params, ablation)),
        "scaler": scaler.to_dict(),
        "dataset": dataset.to_dict() if dataset else None,
        "extra": extra or {},
        "params": {k: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                   for k, p in sorted(params.items())},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_checkpoint(path):
    """Returns (params, ModelConfig, AblationConfig, LabScaler, DatasetConfig | None, doc)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    params = {k: Tensor(np.array(v["data"], dtype=np.float64).reshape(v["shape"]),
                        requires_grad=True, name=k)
              for k, v in doc["params"].items()}
    cfg = ModelConfig(**doc["model"])
    abl = AblationConfig(**doc["ablation"])
    scaler = LabScaler.from_dict(doc["scaler"])
    ds = DatasetConfig.from_dict(doc["dataset"]) if doc.get("dataset") else None
    return params, cfg, abl, scaler, ds, doc


def active_param_names(params, ablation: AblationConfig) -> set[str]:
    from .attention import UNIT_PARAMS
    attn = {n for names in UNIT_PARAMS.values() for n in names}
    return {k for k in params if k not in attn} | set(ablation.active_params())
