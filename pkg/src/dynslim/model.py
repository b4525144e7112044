"""Backbone assembly: resampling wrapper, encoder stack, grouped-GRU
bottleneck, decoder stack with additive skip connections, and the two
inference paths.

forward_static runs every slimmable block at one utilization factor.
forward_dynamic asks the router for one decision per frame and switches
the slim width per bottleneck frame in a single pass; with a one-hot
gating signal this equals the masked sum of per-factor forwards (the
masked-sum form is kept as the training/test oracle because it is what
the gated-combination objective differentiates).

Causality: encoder convs left-pad kernel-stride zeros, decoder transposed
convs crop on the right, so the conv stack looks ahead at most one
bottleneck frame; the linear-phase resampling filters add taps//factor
input samples. lookahead_samples() reports the total bound.
"""

import numpy as np

from . import resample as rs
from .config import ModelConfig
from .errors import NumericsError, ShapeError
from .layers import DecoderBlock, EncoderBlock, GroupedGRU, Module
from .router import Router, RoutingTrace, gumbel_noise, st_select
from .tensor import Tensor


class SlimDenoiser(Module):
    """Slimmable encoder/decoder denoiser over mono waveforms."""

    def __init__(self, config: ModelConfig, rng=None, with_router=False):
        config.validate()
        rng = rng or np.random.default_rng()
        dtype = np.dtype(config.dtype)
        self.config = config
        self.dtype = dtype
        depth = config.depth
        widths = [1] + [config.hidden * 2 ** i for i in range(depth)]
        self.encoders = [
            EncoderBlock(widths[i], widths[i + 1], config.kernel,
                         config.stride, rng=rng, dtype=dtype)
            for i in range(depth)
        ]
        self.bottleneck = GroupedGRU(config.bottleneck_features,
                                     config.gru_groups, rng=rng, dtype=dtype)
        self.decoders = [
            DecoderBlock(widths[i + 1], widths[i], config.kernel,
                         config.stride, last=(i == 0), rng=rng, dtype=dtype)
            for i in range(depth)
        ]
        self.router = None
        if with_router:
            self.implant_router(rng)
        self.static_forwards = 0  # instrumentation for schedule tests

    def implant_router(self, rng=None):
        self.router = Router(len(self.config.uset), self.config.router.kernel,
                             self.config.router.hidden,
                             rng=rng or np.random.default_rng(),
                             dtype=self.dtype)

    # -- length bookkeeping -------------------------------------------------

    def valid_length(self, t):
        """Smallest padded length >= t that survives the resampler, all
        stride levels, and the router decision kernel exactly."""
        if t < 1:
            raise ShapeError(f"signal length must be >= 1, got {t}")
        c = self.config
        total_stride = c.stride ** c.depth
        base = total_stride // np.gcd(total_stride, c.resample)
        unit = int(np.lcm(base, c.router.kernel))
        return -(-t // unit) * unit

    def bottleneck_frames(self, t_pad):
        c = self.config
        return t_pad * c.resample // c.stride ** c.depth

    def lookahead_samples(self):
        """Input samples of lookahead: one decoder frame span per level
        (bounded by the total stride) plus the linear-phase resampler
        group delays."""
        c = self.config
        conv = c.stride ** c.depth
        filters = 2 * rs.TAPS
        return (conv + filters) // c.resample + 1

    # -- static path ----------------------------------------------------------

    def _check(self, t, stage):
        if not np.isfinite(t.data).all():
            raise NumericsError(f"non-finite activations after {stage}")

    def forward_static(self, x, uf):
        """x: Tensor [T] or [B, T]; runs all slimmable blocks at uf."""
        self.config.uset.index_of(uf)  # raises if uf is not in the set
        self.static_forwards += 1
        t = x.shape[-1]
        t_pad = self.valid_length(t)
        batch = x.shape[0] if x.ndim == 2 else None
        h = x.pad_last(0, t_pad - t).reshape(
            (batch or 1, 1, t_pad))
        h = rs.upsample(h, self.config.resample)
        skips = []
        for i, enc in enumerate(self.encoders):
            h = enc.forward(h, uf)
            self._check(h, f"encoder block {i + 1}")
            skips.append(h)
        h, _ = self.bottleneck.forward(h)
        self._check(h, "bottleneck")
        for i in reversed(range(len(self.decoders))):
            h = self.decoders[i].forward(h, skips[i], uf)
            self._check(h, f"decoder block {i + 1}")
        y = rs.downsample(h, self.config.resample)
        y = y.reshape((batch, t_pad) if batch else (t_pad,))
        return y.narrow(y.ndim - 1, 0, t)

    # -- dynamic (switched) path ---------------------------------------------

    def route(self, x_np, mode="infer", rng=None):
        """Router decisions for one padded utterance array [t_pad]."""
        if self.router is None:
            raise ShapeError("model has no router; run forward_static or "
                             "implant one")
        scores = self.router.scores_np(
            np.ascontiguousarray(x_np[None].astype(self.dtype)))
        z = scores
        if mode == "train":
            z = scores + gumbel_noise(scores.shape, rng).astype(scores.dtype)
        decisions = z.argmax(axis=0)
        return RoutingTrace(scores, decisions, self.config.uf_values)

    def forward_dynamic(self, x, mode="infer", rng=None):
        """x: 1-D array (or Tensor) -> (enhanced 1-D array, RoutingTrace).

        Single switched-width pass: every frame of every slimmable block
        runs under the utilization factor its output maps to (nearest
        neighbor to the bottleneck rate, zero-order hold below).
        """
        x_np = x.data if isinstance(x, Tensor) else np.asarray(x)
        if x_np.ndim != 1:
            raise ShapeError(f"forward_dynamic expects a 1-D signal, got "
                             f"{x_np.shape}")
        t = x_np.shape[-1]
        t_pad = self.valid_length(t)
        xp = np.pad(x_np.astype(self.dtype), (0, t_pad - t))
        trace = self.route(xp, mode=mode, rng=rng)
        y = self._switched_pass(xp, trace.decisions)
        return y[:t], trace

    def _switched_pass(self, xp, decisions):
        c = self.config
        uset = c.uset
        n_bot = self.bottleneck_frames(len(xp))
        # nearest-neighbor to the bottleneck rate
        nn = (np.arange(n_bot) * len(decisions) // n_bot).astype(np.intp)
        d_bot = np.asarray(decisions, dtype=np.intp)[nn]
        h = rs.upsample_np(xp[None], c.resample)
        skips = []
        depth = c.depth
        for i, enc in enumerate(self.encoders):
            frames = np.repeat(d_bot, c.stride ** (depth - 1 - i))
            h = enc.forward_switched(h, frames, uset)
            if not np.isfinite(h).all():
                raise NumericsError(f"non-finite activations after encoder "
                                    f"block {i + 1}")
            skips.append(h)
        h = self.bottleneck.forward_np(h)
        for i in reversed(range(depth)):
            frames = np.repeat(d_bot, c.stride ** (depth - 1 - i))
            h = self.decoders[i].forward_switched(h, skips[i], frames, uset)
            if not np.isfinite(h).all():
                raise NumericsError(f"non-finite activations after decoder "
                                    f"block {i + 1}")
        y = rs.downsample_np(h, c.resample)
        return y[0]

    # -- state dict -------------------------------------------------------------

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != "
                                 f"{p.data.shape}")
            p.data = np.ascontiguousarray(arr)


def build_model(config, seed=0, with_router=False):
    """Deterministic model construction from a config and seed."""
    from .rng import INIT, philox
    return SlimDenoiser(config, rng=philox(seed, INIT),
                        with_router=with_router)
