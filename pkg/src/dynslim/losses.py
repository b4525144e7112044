"""Training objectives.

The enhancement loss compares compressed complex spectra and compressed
magnitude spectra of the target and estimate, mixed by a factor; the
slimmable pre-training loss sums it over every utilization factor; the
end-to-end loss adds a squared utilization-target penalty and a
selection-balance penalty on the utilization occurrence vector.

Magnitudes are clamped below at 1e-8 before the compression exponent so
gradients stay finite on silent frames. Batched inputs are reduced by the
mean over the batch; sums run over all time-frequency bins.
"""

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, stft

MAG_FLOOR = 1e-8

_window_cache = {}


def _hann(n, dtype):
    key = (n, np.dtype(dtype).name)
    if key not in _window_cache:
        _window_cache[key] = np.hanning(n).astype(dtype)
    return _window_cache[key]


def _compressed_spectra(sig, cfg):
    spec = stft(sig, _hann(cfg.stft_win, sig.dtype), cfg.stft_hop)
    power = spec.real * spec.real + spec.imag * spec.imag
    mag = power.clamp_min(MAG_FLOOR * MAG_FLOOR).sqrt()
    mag_c = mag ** cfg.compress
    scale = mag_c / mag  # |S|^(c-1), phase preserved
    return mag_c, spec.real * scale, spec.imag * scale


def spectral_loss(target, estimate, cfg):
    """Compressed complex + magnitude spectral distance.

    target/estimate: Tensor [T] or [B, T] of equal shape. Returns a scalar
    Tensor; zero iff the spectrograms match.
    """
    if target.shape != estimate.shape:
        raise ShapeError(f"spectral_loss: length mismatch "
                         f"{target.shape} vs {estimate.shape}")
    t_mag, t_re, t_im = _compressed_spectra(target, cfg)
    e_mag, e_re, e_im = _compressed_spectra(estimate, cfg)
    complex_term = ((t_re - e_re) ** 2 + (t_im - e_im) ** 2).sum()
    mag_term = ((t_mag - e_mag) ** 2).sum()
    loss = cfg.mix * complex_term + (1.0 - cfg.mix) * mag_term
    if target.ndim == 2:
        loss = loss * (1.0 / target.shape[0])
    return loss


def slim_loss(target, estimates, cfg, n_expected=None):
    """Sum of spectral losses over the per-utilization estimates."""
    if n_expected is not None and len(estimates) != n_expected:
        raise ShapeError(f"slim_loss: got {len(estimates)} estimates, "
                         f"expected {n_expected}")
    if not estimates:
        raise ShapeError("slim_loss: no estimates")
    total = spectral_loss(target, estimates[0], cfg)
    for est in estimates[1:]:
        total = total + spectral_loss(target, est, cfg)
    return total


def _check_occurrence(occ):
    s = float(occ.data.sum())
    if abs(s - 1.0) > 1e-6:
        raise ShapeError(f"occurrence vector sums to {s}, expected 1")


def eff_loss(occ, uset, target_utilization):
    """Squared gap between the mean utilization implied by the occurrence
    vector and the target. occ: Tensor [J] (soft or hard frequencies)."""
    _check_occurrence(occ)
    values = np.asarray(uset.values, dtype=occ.dtype)
    mean_util = (occ * values).sum()
    return (mean_util - target_utilization) ** 2


def bal_loss(occ, n_choices):
    """Selection-balance penalty: 0 for the uniform occurrence vector,
    1 for a one-hot one."""
    _check_occurrence(occ)
    return ((occ * occ).sum() * float(n_choices) - 1.0) \
        * (1.0 / (n_choices - 1))


def dynslim_loss(target, estimate, occ, cfg, uset):
    """End-to-end objective: enhancement + weighted regularizers.

    The gradient reaches the backbone through the estimate and the router
    both through the straight-through gated estimate and through the soft
    occurrence vector.
    """
    loss = spectral_loss(target, estimate, cfg)
    if cfg.eff_weight:
        loss = loss + cfg.eff_weight * eff_loss(occ, uset,
                                                cfg.target_utilization)
    if cfg.bal_weight:
        loss = loss + cfg.bal_weight * bal_loss(occ, len(uset))
    return loss


def combine_outputs(estimates, gating):
    """Gated sum of per-utilization outputs.

    estimates: list of J Tensors [T] or [B, T]; gating: Tensor [J, T] or
    [B, J, T], exactly one active gate per sample.
    """
    j = len(estimates)
    if gating.shape[-2] != j:
        raise ShapeError(f"combine_outputs: {j} estimates but gating has "
                         f"{gating.shape[-2]} rows")
    gates_sum = gating.data.sum(axis=-2)
    if not np.allclose(gates_sum, 1.0) or \
            not np.all((gating.data == 0) | (gating.data == 1)):
        raise ShapeError("combine_outputs: gating is not one-hot")
    axis = gating.ndim - 2
    out = None
    for idx, est in enumerate(estimates):
        gate = gating.narrow(axis, idx, 1).reshape(est.shape)
        term = est * gate
        out = term if out is None else out + term
    return out
