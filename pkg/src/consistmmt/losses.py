"""Training objectives: translation, optimal-transport and KL consistency losses.

Representations are treated as distributions over their coordinates: a
vector ``h`` of length ``d`` places mass ``|h_i| / sum_j |h_j|`` on the scalar
atom ``h_i``. Transport cost between atoms is ``|a - b|``.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from . import tensor as T
from .errors import DegenerateMassError, NumericsError, ShapeError

EPS_MASS = 1e-8


@dataclass
class TransportPlan:
    plan: np.ndarray
    source_mass: np.ndarray
    target_mass: np.ndarray

    def row_sums(self):
        return self.plan.sum(axis=1)

    def col_sums(self):
        return self.plan.sum(axis=0)


@dataclass
class LossWeights:
    kl: float = 0.5
    ot: float = 0.1

    def __post_init__(self):
        if self.kl < 0 or self.ot < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_syn: float
    l_aut: float
    l_trans: float
    l_kl: float
    l_ot: float
    total: float

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def mean(cls, items):
        return cls(**{f.name: float(np.mean([getattr(b, f.name) for b in items])) for f in fields(cls)})


def _check_mass(h):
    norm = np.abs(np.asarray(h, dtype=np.float64)).sum(axis=-1)
    if np.any(norm <= EPS_MASS):
        raise DegenerateMassError(f"representation L1 norm {norm.min():.3g} <= {EPS_MASS}")


def mass(h):
    """Mass of each coordinate, ``|h_i| / sum |h|``; works on arrays or Tensors (last axis)."""
    if isinstance(h, T.Tensor):
        _check_mass(h.data)
        a = T.absolute(h)
        return T.div(a, T.tsum(a, axis=-1, keepdims=True))
    h = np.asarray(h, dtype=np.float64)
    _check_mass(h)
    a = np.abs(h)
    return a / a.sum(axis=-1, keepdims=True)


def relaxed_assignment(src, tgt):
    """Nearest-target index for every source coordinate (ties -> lowest index)."""
    src = np.atleast_2d(np.asarray(src, dtype=np.float64))
    tgt = np.atleast_2d(np.asarray(tgt, dtype=np.float64))
    return kernels.nearest_target(src, tgt)


def relaxed_ot_distance(hs, ha):
    """Relaxed OT from ``hs`` to ``ha`` with only the source marginal enforced.

    Each source atom ships all of its mass to the closest target atom, so the
    distance is ``sum_i m_i * min_j |hs_i - ha_j|``. Returns
    ``(distance, TransportPlan)`` for 1-D float inputs.
    """
    hs = np.asarray(hs, dtype=np.float64).reshape(-1)
    ha = np.asarray(ha, dtype=np.float64).reshape(-1)
    if hs.shape != ha.shape:
        raise ShapeError(f"shape mismatch {hs.shape} vs {ha.shape}")
    m = mass(hs)
    m_hat = mass(ha)
    idx = relaxed_assignment(hs, ha)[0]
    plan = np.zeros((hs.size, ha.size))
    plan[np.arange(hs.size), idx] = m
    dist = float(np.sum(m * np.abs(hs - ha[idx])))
    return dist, TransportPlan(plan, m, m_hat)


def exact_ot_distance(hs, ha):
    """Exact 1-D Wasserstein-1 between the two coordinate distributions."""
    hs = np.asarray(hs, dtype=np.float64).reshape(-1)
    ha = np.asarray(ha, dtype=np.float64).reshape(-1)
    if hs.shape != ha.shape:
        raise ShapeError(f"shape mismatch {hs.shape} vs {ha.shape}")
    if hs.size > 64:
        raise ShapeError("exact_ot_distance is an oracle for d <= 64")
    m = mass(hs)
    m_hat = mass(ha)
    cost, plan = kernels.quantile_coupling(hs, m, ha, m_hat)
    return float(cost), TransportPlan(plan, m, m_hat)


def relaxed_ot_tensor(hs, ha, mass_grad=True):
    """Differentiable relaxed OT per row of [B, d] tensors; returns a [B] tensor.

    The argmin assignment is held fixed. Gradients flow through the costs
    and, unless ``mass_grad`` is False, through the mass normalization.
    """
    if hs.shape != ha.shape:
        raise ShapeError(f"shape mismatch {hs.shape} vs {ha.shape}")
    idx = relaxed_assignment(hs.data, ha.data)
    m = mass(hs) if mass_grad else T.Tensor(mass(hs.data), dtype=hs.dtype)
    diff = T.sub(hs, T.take_along_last(ha, idx))
    cost = T.absolute(diff)
    return T.tsum(T.mul(m, cost), axis=-1)


def ot_loss(hs, ha, mass_grad=True):
    """Symmetric relaxed OT loss averaged over the batch.

    Tensors of shape [B, d] (or [d]) give a scalar Tensor; plain arrays give a float.
    """
    if not isinstance(hs, T.Tensor) and not isinstance(ha, T.Tensor):
        hs = np.atleast_2d(np.asarray(hs, dtype=np.float64))
        ha = np.atleast_2d(np.asarray(ha, dtype=np.float64))
        vals = [0.5 * (relaxed_ot_distance(a, b)[0] + relaxed_ot_distance(b, a)[0]) for a, b in zip(hs, ha)]
        return float(np.mean(vals))
    hs, ha = T.as_tensor(hs), T.as_tensor(ha)
    if hs.ndim == 1:
        hs, ha = hs.reshape(1, -1), ha.reshape(1, -1)
    both = T.add(relaxed_ot_tensor(hs, ha, mass_grad), relaxed_ot_tensor(ha, hs, mass_grad))
    return T.scale(T.tsum(both), 0.5 / hs.shape[0])


def kl_consistency(logits_syn, logits_aut, mask):
    """``KL[p_syn || p_aut]`` summed over unmasked positions / their count.

    Gradients flow into both logit tensors.
    """
    if logits_syn.shape != logits_aut.shape:
        raise ShapeError(f"shape mismatch {logits_syn.shape} vs {logits_aut.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits_syn.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} != {logits_syn.shape[:-1]}")
    count = max(int(mask.sum()), 1)
    lp = T.log_softmax_array(logits_syn.data)
    lq = T.log_softmax_array(logits_aut.data)
    p = np.exp(lp)
    q = np.exp(lq)
    w = mask[..., None].astype(np.float64)
    per_pos = (p * (lp - lq)).sum(axis=-1)
    value = float((per_pos * mask).sum()) / count
    dtype = logits_syn.dtype

    def bw(g):
        g = float(g) / count
        kl = per_pos[..., None]
        g_syn = w * p * (lp - lq - kl) * g
        g_aut = w * (q - p) * g
        return g_syn.astype(dtype), g_aut.astype(dtype)

    return T.make_op("kl_consistency", np.asarray(value, dtype=dtype), (logits_syn, logits_aut), bw)


def translation_loss(logits, tgt_out, pad_id, smoothing):
    v = logits.shape[-1]
    return T.cross_entropy_label_smoothed(logits.reshape(-1, v), np.asarray(tgt_out).reshape(-1), pad_id, smoothing)


def total_loss(l_syn, l_aut, l_kl, l_ot, weights):
    """Combine the four component losses into the training objective.

    Components may be Tensors (the returned total is then a Tensor for
    backward) or floats. Returns ``(total, LossBreakdown)``.
    """
    comps = {"l_syn": l_syn, "l_aut": l_aut, "l_kl": l_kl, "l_ot": l_ot}
    vals = {k: (v.item() if isinstance(v, T.Tensor) else float(v)) for k, v in comps.items()}
    bad = [k for k, v in vals.items() if not np.isfinite(v)]
    if bad:
        raise NumericsError(f"non-finite loss component(s): {', '.join(bad)}")
    l_trans_val = 0.5 * (vals["l_syn"] + vals["l_aut"])
    total_val = l_trans_val + weights.kl * vals["l_kl"] + weights.ot * vals["l_ot"]
    breakdown = LossBreakdown(vals["l_syn"], vals["l_aut"], l_trans_val, vals["l_kl"], vals["l_ot"], total_val)
    if any(isinstance(v, T.Tensor) for v in comps.values()):
        l_trans = T.scale(T.add(T.as_tensor(l_syn), T.as_tensor(l_aut)), 0.5)
        total = l_trans
        if weights.kl:
            total = T.add(total, T.scale(T.as_tensor(l_kl), weights.kl))
        if weights.ot:
            total = T.add(total, T.scale(T.as_tensor(l_ot), weights.ot))
        return total, breakdown
    return total_val, breakdown


def compute_losses(model, batch, weights, smoothing=0.1, fwd_syn=None, fwd_aut=None):
    """Full objective for one batch; returns ``(total Tensor, LossBreakdown)``."""
    from .model import EVAL

    logits_s, logits_a, h_s, h_a = model.forward_pair(batch, fwd_syn or EVAL, fwd_aut or EVAL)
    pad = model.config.pad_id
    l_syn = translation_loss(logits_s, batch.tgt_out, pad, smoothing)
    l_aut = translation_loss(logits_a, batch.tgt_out, pad, smoothing)
    l_kl = kl_consistency(logits_s, logits_a, batch.out_mask) if weights.kl else 0.0
    l_ot = ot_loss(h_s, h_a) if weights.ot else 0.0
    if not weights.kl:
        with T.no_grad():
            l_kl = kl_consistency(logits_s, logits_a, batch.out_mask).item()
    if not weights.ot:
        l_ot = _ot_report(h_s.data, h_a.data)
    return total_loss(l_syn, l_aut, l_kl, l_ot, weights)


def _ot_report(hs, ha):
    # reporting only, never part of the objective when its weight is 0
    try:
        return ot_loss(hs, ha)
    except DegenerateMassError:
        return 0.0
