"""RMSProp training over equal-visit-count batches, evaluation and explanations."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AblationConfig
from .data import Batch, PatientRecord, group_by_visits
from .features import LabScaler
from .metrics import accuracy, average_precision, macro_ovr, roc_auc
from .sequence import (ModelConfig, active_param_names, batch_loss, encode, forward_batch,
                       forward_patient)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    step: int = 0
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params, grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In-place update: s <- rho s + (1 - rho) g^2;  p <- p - lr g / (sqrt(s) + eps)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        s = state.square_avg.get(name)
        if s is None:
            s = np.zeros_like(g)
        s = state.rho * s + (1.0 - state.rho) * g * g
        state.square_avg[name] = s
        params[name].data -= state.learning_rate * g / (np.sqrt(s) + state.epsilon)
    state.step += 1


@dataclass
class TrainResult:
    curve: list[float]
    state: OptimizerState
    stopped_early: bool = False


def train(batches: list[Batch], params, cfg: ModelConfig, ablation: AblationConfig,
          scaler: LabScaler, optimizer: OptimizerState | None = None, epochs: int = 30,
          seed: int = 0, patience: int | None = None, divergence_factor: float = 10.0,
          progress=None) -> TrainResult:
    """Train in place; returns the per-epoch mean training loss curve.

    The epoch loss is the patient-weighted mean of batch losses observed
    before each update.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    optimizer = optimizer or OptimizerState()
    encoded = [encode(b.records, cfg, scaler) for b in batches]
    sizes = np.array([e.size for e in encoded], dtype=np.float64)
    trainable = sorted(active_param_names(params, ablation))
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    initial = None
    best, since_best = np.inf, 0
    for epoch in range(epochs):
        losses = np.zeros(len(encoded))
        for j in rng.permutation(len(encoded)):
            for name in trainable:
                params[name].zero_grad()
            with ad.Tape() as tape:
                value = batch_loss(encoded[j], params, cfg, ablation)
            tape.backward(value)
            losses[j] = float(value.data)
            if initial is None:
                initial = losses[j]
            if losses[j] > divergence_factor * initial:
                raise DivergenceError(
                    f"epoch {epoch}: loss {losses[j]:.4g} exceeds {divergence_factor}x "
                    f"initial {initial:.4g}")
            rmsprop_step(params, {n: params[n].grad for n in trainable}, optimizer)
        mean_loss = float(np.dot(losses, sizes) / sizes.sum())
        curve.append(mean_loss)
        log.info("epoch %d mean loss %.5f", epoch + 1, mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
        if patience is not None:
            if mean_loss < best - 1e-12:
                best, since_best = mean_loss, 0
            else:
                since_best += 1
                if since_best >= patience:
                    return TrainResult(curve, optimizer, stopped_early=True)
    return TrainResult(curve, optimizer)


@dataclass
class EvalReport:
    accuracy: float
    auc_roc: float | None
    auc_pr: float | None
    n: int
    class_counts: list[int]
    predicted_counts: list[int]
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def predict(records: list[PatientRecord], params, cfg: ModelConfig, ablation: AblationConfig,
            scaler: LabScaler, batch_size: int = 64) -> np.ndarray:
    """Class probabilities (N, K) in input order."""
    probs = np.zeros((len(records), cfg.n_classes))
    index = {id(r): i for i, r in enumerate(records)}
    for b in group_by_visits(records, batch_size):
        out, _ = forward_batch(encode(b.records, cfg, scaler), params, cfg, ablation)
        for r, row in zip(b.records, out.data):
            probs[index[id(r)]] = row
    return probs


def scores_report(labels, probs, config: dict | None = None, seed: int | None = None) -> EvalReport:
    labels = np.asarray(labels)
    k = probs.shape[1]
    return EvalReport(
        accuracy=accuracy(labels, probs),
        auc_roc=macro_ovr(roc_auc, labels, probs),
        auc_pr=macro_ovr(average_precision, labels, probs),
        n=len(labels),
        class_counts=np.bincount(labels, minlength=k).tolist(),
        predicted_counts=np.bincount(probs.argmax(axis=1), minlength=k).tolist(),
        config=config or {},
        seed=seed,
    )


def evaluate(records: list[PatientRecord], params, cfg: ModelConfig, ablation: AblationConfig,
             scaler: LabScaler, seed: int | None = None) -> EvalReport:
    if not records:
        raise ValueError("evaluation needs at least one record")
    probs = predict(records, params, cfg, ablation, scaler)
    echo = {"model": cfg.to_dict(), "ablation": ablation.to_dict()}
    return scores_report([r.label for r in records], probs, echo, seed)


def _ranked(values: list[float]) -> list[int]:
    return sorted(range(len(values)), key=lambda i: (-values[i], i))


def explain(record: PatientRecord, params, cfg: ModelConfig, ablation: AblationConfig,
            scaler: LabScaler, indicator_names: list[str] | None = None) -> dict:
    """Per-visit codes and indicators sorted by attention, with unit scores."""
    names = indicator_names or [str(i) for i in range(cfg.n_indicators)]
    probs, trace = forward_patient(record, params, cfg, ablation, scaler)
    visits = []
    for t, v in enumerate(trace.visits):
        code_rank = _ranked(v.alpha_u)
        ind_rank = _ranked(v.alpha_v)
        visits.append({
            "visit": t,
            "delta": v.delta,
            "codes": [{"code": v.codes[i], "alpha": v.alpha_u[i],
                       "lambdas": {u: lam["codes"][i] for u, lam in v.lambdas.items()}}
                      for i in code_rank],
            "indicators": [{"name": names[i], "index": i, "alpha": v.alpha_v[i],
                            "lambdas": {u: lam["indicators"][i] for u, lam in v.lambdas.items()}}
                           for i in ind_rank],
        })
    return {"patient_id": record.patient_id, "label": record.label,
            "probs": probs.data.tolist(), "ablation": ablation.to_dict(), "visits": visits}
