"""Time-guided query, the three attention units and their combination.

All functions take batched tensors: ``U`` is (..., n_u, d_u), ``V`` is
(..., n_v, d_v) and ``q`` is (..., d). ``code_mask`` (..., n_u) marks real
diagnosis slots; padded slots get exactly zero attention.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DECAYS = ("g1", "g2", "g3", "g4")

# parameters read by each unit
UNIT_PARAMS = {
    "query": ("theta_d", "b_d"),
    "intra": ("theta_u1", "theta_v1", "theta_uq", "theta_vq"),
    "inter": ("theta_u2", "theta_v2", "kernel_u2", "kernel_v2"),
    "third": ("theta_u3", "theta_v3", "theta_q", "kernel_u3", "kernel_v3"),
    "combine": ("eta", "epsilon"),
}


@dataclass(frozen=True)
class AblationConfig:
    use_intra: bool = True
    use_inter: bool = True
    use_third: bool = True
    use_time_guide: bool = True
    decay: str = "g2"

    def __post_init__(self):
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}, got {self.decay!r}")

    @property
    def any_unit(self) -> bool:
        return self.use_intra or self.use_inter or self.use_third

    @property
    def needs_query(self) -> bool:
        return self.use_intra or self.use_third

    def active_params(self) -> list[str]:
        names = []
        if self.needs_query:
            names += UNIT_PARAMS["query"]
        for unit, flag in (("intra", self.use_intra), ("inter", self.use_inter),
                           ("third", self.use_third)):
            if flag:
                names += UNIT_PARAMS[unit]
        if self.any_unit:
            names += UNIT_PARAMS["combine"]
        return names

    def to_dict(self) -> dict:
        return asdict(self)


ABLATIONS = {
    "lstm": AblationConfig(False, False, False, False),
    "lstm-att": AblationConfig(True, False, False, False),
    "lstm-tga": AblationConfig(True, False, False, True),
    "lstm-coa": AblationConfig(False, True, False, False),
    "tgcoa": AblationConfig(True, True, False, True),
    "tghoa": AblationConfig(True, True, True, True),
}


def ablation(name: str, decay: str = "g2") -> AblationConfig:
    try:
        base = ABLATIONS[name]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
    return AblationConfig(base.use_intra, base.use_inter, base.use_third,
                          base.use_time_guide, decay)


def decay(delta, kind: str = "g2"):
    """Time-decay weight of a gap ``delta`` >= 0 (scalar or array)."""
    d = np.asarray(delta, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("time delta must be non-negative")
    if kind == "g1":
        out = np.ones_like(d)
    elif kind == "g2":
        out = 1.0 / np.log(math.e + d)
    elif kind == "g3":
        out = math.e / (d + math.e)
    elif kind == "g4":
        out = np.maximum(0.0, 1.0 - d / math.e)
    else:
        raise ValueError(f"unknown decay {kind!r}")
    return float(out) if out.ndim == 0 else out


def init_attention_params(rng: np.random.Generator, d: int, d_u: int, d_v: int,
                          n_u_max: int, n_v: int) -> dict[str, Tensor]:
    bound = 1.0 / math.sqrt(d)

    def mat(rows, cols):
        return rng.uniform(-bound, bound, size=(rows, cols))

    p = {
        "theta_d": mat(d, d), "b_d": np.zeros(d),
        "theta_u1": mat(d, d_u), "theta_v1": mat(d, d_v),
        "theta_uq": mat(d, d), "theta_vq": mat(d, d),
        "theta_u2": mat(d, d_u), "theta_v2": mat(d, d_v),
        "kernel_u2": np.full(n_u_max, 1.0 / n_u_max), "kernel_v2": np.full(n_v, 1.0 / n_v),
        "theta_u3": mat(d, d_u), "theta_v3": mat(d, d_v), "theta_q": mat(d, d),
        "kernel_u3": np.full(n_u_max, 1.0 / n_u_max), "kernel_v3": np.full(n_v, 1.0 / n_v),
        "eta": np.array([1.0, 1.0, 1.0, 0.0]), "epsilon": np.array([1.0, 1.0, 1.0, 0.0]),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _expand(t: Tensor, axis: int) -> Tensor:
    shape = list(t.shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return ad.reshape(t, tuple(shape))


def memory_query(c_prev, delta, params, config: AblationConfig) -> Tensor:
    """g(delta) * tanh(theta_d c_prev + b_d); g is 1 without time guidance."""
    c_prev = ad._as_tensor(c_prev)
    pre = ad.tanh(ad.linear(c_prev, params["theta_d"], params["b_d"]))
    g = decay(delta, config.decay) if config.use_time_guide else np.ones_like(np.asarray(delta, float))
    g = np.asarray(g, dtype=np.float64)
    return ad.mul(pre, g[..., None] if g.ndim else g)


def _kernel_slots(kernel: Tensor, n_u: int, code_mask) -> Tensor:
    if n_u > kernel.shape[0]:
        raise ValueError(f"visit has {n_u} codes but only {kernel.shape[0]} kernel slots")
    k = ad.index(kernel, slice(0, n_u)) if n_u < kernel.shape[0] else kernel
    if code_mask is None:
        return k
    return ad.mul(k, np.asarray(code_mask, dtype=np.float64))


def _contract(C: Tensor, kernel_u: Tensor, kernel_v: Tensor, code_mask):
    """Collapse a (..., n_u, n_v) relation matrix with 1x1 kernels on each side."""
    lam_u = ad.tanh(ad.sum(ad.mul(C, kernel_v), axis=-1))
    ku = _kernel_slots(kernel_u, C.shape[-2], code_mask)
    lam_v = ad.tanh(ad.sum(ad.mul(C, _expand(ku, -1)), axis=-2))
    return lam_u, lam_v


def intra_seq_scores(U, V, q, params):
    """tanh((theta_u1 u_i)^T theta_uq q) per code; likewise for indicators."""
    U, V, q = ad._as_tensor(U), ad._as_tensor(V), ad._as_tensor(q)
    qu = _expand(ad.linear(q, params["theta_uq"]), -2)
    qv = _expand(ad.linear(q, params["theta_vq"]), -2)
    au = ad.linear(U, params["theta_u1"])
    av = ad.linear(V, params["theta_v1"])
    lam_u = ad.tanh(ad.sum(ad.mul(au, qu), axis=-1))
    lam_v = ad.tanh(ad.sum(ad.mul(av, qv), axis=-1))
    return lam_u, lam_v


def inter_seq_scores(U, V, params, code_mask=None):
    """Relation matrix C(i_u, i_v) = (theta_u2 u)^T (theta_v2 v) and its contractions."""
    U, V = ad._as_tensor(U), ad._as_tensor(V)
    pu = ad.linear(U, params["theta_u2"])
    pv = ad.linear(V, params["theta_v2"])
    C = ad.matmul(pu, ad.transpose(pv))
    lam_u, lam_v = _contract(C, params["kernel_u2"], params["kernel_v2"], code_mask)
    return C, lam_u, lam_v


def third_order_scores(U, V, q, params, code_mask=None):
    """C(i_u, i_v) = (theta_u3 u * theta_q q)^T (theta_v3 v), contracted like the inter unit."""
    U, V, q = ad._as_tensor(U), ad._as_tensor(V), ad._as_tensor(q)
    gate = _expand(ad.linear(q, params["theta_q"]), -2)
    ru = ad.mul(ad.linear(U, params["theta_u3"]), gate)
    rv = ad.linear(V, params["theta_v3"])
    C = ad.matmul(ru, ad.transpose(rv))
    lam_u, lam_v = _contract(C, params["kernel_u3"], params["kernel_v3"], code_mask)
    return C, lam_u, lam_v


def combine_scores(lams: dict, params, config: AblationConfig, code_mask, n_v: int):
    """Softmax of the weighted unit scores.

    ``lams`` maps unit name ("intra", "inter", "third") to (lam_u, lam_v);
    disabled or missing units contribute nothing.
    """
    code_mask = np.asarray(code_mask, dtype=bool)
    logits = []
    for side, weights, n_shape in ((0, params["eta"], code_mask.shape),
                                   (1, params["epsilon"], code_mask.shape[:-1] + (n_v,))):
        z = ad.mul(np.zeros(n_shape), ad.index(weights, 3))
        for k, unit in enumerate(("intra", "inter", "third")):
            if unit in lams and _enabled(config, unit):
                z = ad.add(z, ad.mul(lams[unit][side], ad.index(weights, k)))
        logits.append(z)
    alpha_u = ad.softmax(logits[0], mask=code_mask)
    alpha_v = ad.softmax(logits[1])
    return alpha_u, alpha_v


def _enabled(config: AblationConfig, unit: str) -> bool:
    return {"intra": config.use_intra, "inter": config.use_inter,
            "third": config.use_third}[unit]


@dataclass
class VisitTrace:
    delta: float
    codes: list[int]
    alpha_u: list[float]
    alpha_v: list[float]
    query: list[float]
    lambdas: dict[str, dict[str, list[float]]] = field(default_factory=dict)


@dataclass
class AttentionTrace:
    patient_id: str
    visits: list[VisitTrace] = field(default_factory=list)

    def to_dict(self, indicator_names=None) -> dict:
        out = {"patient_id": self.patient_id, "visits": []}
        for t, v in enumerate(self.visits):
            names = indicator_names or [str(i) for i in range(len(v.alpha_v))]
            out["visits"].append({
                "visit": t, "delta": v.delta,
                "codes": [{"code": c, "alpha": a} for c, a in zip(v.codes, v.alpha_u)],
                "indicators": [{"name": n, "alpha": a} for n, a in zip(names, v.alpha_v)],
                "query": v.query,
                "lambdas": v.lambdas,
            })
        return out
