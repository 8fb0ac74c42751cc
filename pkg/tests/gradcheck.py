"""Shared finite-difference comparison used across test modules."""
import numpy as np

from tghoa import autodiff as ad

REL_TOL = 1e-4
ABS_TOL = 1e-6


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Boolean mask of slots violating rel <= 1e-4 (abs <= 1e-6 near zero)."""
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    near_zero = scale < ABS_TOL
    return np.where(near_zero, err > ABS_TOL, err > REL_TOL * scale)


def check_op(fn, arrays, rng, eps=1e-5):
    """Compare tape gradients of sum(w * fn(*inputs)) with central differences."""
    inputs = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    weights = rng.normal(size=out.shape)

    def value():
        return float(np.sum(fn(*inputs).data * weights))

    with ad.Tape() as tape:
        total = ad.sum(ad.mul(fn(*inputs), weights))
    tape.backward(total)
    numeric = ad.finite_difference_oracle(value, {str(i): t for i, t in enumerate(inputs)}, eps)
    bad = []
    for i, t in enumerate(inputs):
        mism = grad_mismatch(t.grad, numeric[str(i)])
        if mism.any():
            bad.append((i, float(np.max(np.abs(t.grad - numeric[str(i)])))))
    return bad


def toy_problem(seed=0):
    """Tiny model (d=8, d_u=8, d_v=4, two indicators, ten codes) and one 3-visit patient."""
    from tghoa.data import PatientRecord, Visit
    from tghoa.features import LabScaler
    from tghoa.sequence import ModelConfig, encode, init_params

    rng = np.random.default_rng(seed)
    visits = [Visit(t, sorted(rng.choice(10, size=n, replace=False).tolist()),
                    [rng.normal(size=m).tolist() for m in lens])
              for t, n, lens in ((0.0, 2, (7, 12)), (0.4, 3, (3, 9)), (1.9, 1, (15, 1)))]
    record = PatientRecord("toy", visits, 1)
    cfg = ModelConfig(n_codes=10, n_indicators=2, n_u_max=3, d=8, d_u=8, d_v=4)
    params = init_params(cfg, seed)
    # random biases so that no gradient is trivially zero
    for name, p in params.items():
        if name in ("b_d", "b_o", "head.b") or name.startswith("lstm.b") or name.endswith("_b"):
            p.data[:] = rng.normal(0, 0.3, p.shape)
    scaler = LabScaler.identity(2)
    return record, cfg, params, scaler, encode([record], cfg, scaler)
