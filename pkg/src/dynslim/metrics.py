"""Quality metrics, MAC accounting, utilization statistics, Pareto fronts.

MAC convention (documented formula table): every conv-type layer costs
kernel_ops x output elements, i.e. C_out_active * C_in_active * K * T_out,
for plain, pointwise, and transposed convs alike (for the transposed conv
T_out is its upsampled output length). Grouped GRUs cost the six gate
projections plus the three gating products per frame; diagonal GRUs the
elementwise analogue; the polyphase resamplers cost their tap count per
input sample. Activation/sigmoid evaluations are not counted. All totals
are reported per input sample at the original rate.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError, ShapeError
from .layers import decoder_pw_rows, slim_count
from .resample import TAPS

SI_SDR_CAP_DB = 100.0


def si_sdr(target, estimate):
    """Scale-invariant signal-to-distortion ratio in dB, capped at +-100.

    The estimate is projected onto the target; the ratio of projected
    energy to residual energy is returned on a log scale.
    """
    s = np.asarray(target, dtype=np.float64).reshape(-1)
    e = np.asarray(estimate, dtype=np.float64).reshape(-1)
    if s.shape != e.shape:
        raise ShapeError(f"si_sdr: length mismatch {s.shape} vs {e.shape}")
    s_energy = float(np.dot(s, s))
    if s_energy == 0.0:
        raise DataError("si_sdr: zero target signal")
    alpha = float(np.dot(e, s)) / s_energy
    proj = alpha * s
    err = proj - e
    num = float(np.dot(proj, proj))
    den = float(np.dot(err, err))
    if den == 0.0:
        return SI_SDR_CAP_DB
    if num == 0.0:
        return -SI_SDR_CAP_DB
    value = 10.0 * np.log10(num / den)
    return float(np.clip(value, -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def conv_macs(c_out, c_in, kernel, t_out):
    """Hand-checkable conv cost: one MAC per kernel tap per output value."""
    return float(c_out) * c_in * kernel * t_out


@dataclass
class LayerMacs:
    name: str
    kind: str
    slimmable: bool
    per_uf: dict = field(default_factory=dict)  # uf -> MACs/sample

    def at(self, uf):
        if self.slimmable:
            return self.per_uf[uf]
        return next(iter(self.per_uf.values()))


class MacReport:
    """Per-layer MACs per input sample at each utilization factor."""

    def __init__(self, layers, uf_values):
        self.layers = layers
        self.uf_values = tuple(uf_values)

    def total(self, uf, include_router=True):
        return sum(l.at(uf) for l in self.layers
                   if include_router or l.kind != "router")

    def router_total(self):
        return sum(l.at(1.0) for l in self.layers if l.kind == "router")

    def backbone_total(self, uf):
        return self.total(uf, include_router=False)

    def trace_mean(self, occurrence, include_router=True):
        """Mean MACs/sample with each frame weighted by its factor."""
        occ = np.asarray(occurrence, dtype=np.float64)
        if len(occ) != len(self.uf_values):
            raise ShapeError(f"occurrence length {len(occ)} != "
                             f"{len(self.uf_values)} factors")
        if abs(occ.sum() - 1.0) > 1e-6:
            raise ShapeError(f"occurrence sums to {occ.sum()}, expected 1")
        return float(sum(o * self.total(uf, include_router)
                         for o, uf in zip(occ, self.uf_values)))

    def rows(self):
        header = ["layer", "kind", "slimmable"] + \
            [f"macs_uf_{uf:g}" for uf in self.uf_values]
        out = [header]
        for l in self.layers:
            out.append([l.name, l.kind, str(l.slimmable).lower()]
                       + [f"{l.at(uf):.6g}" for uf in self.uf_values])
        out.append(["total", "", ""]
                   + [f"{self.total(uf):.6g}" for uf in self.uf_values])
        return out

    def to_csv(self, path_or_file):
        close = False
        fh = path_or_file
        if isinstance(path_or_file, str):
            fh = open(path_or_file, "w", newline="")
            close = True
        try:
            csv.writer(fh).writerows(self.rows())
        finally:
            if close:
                fh.close()

    def to_text(self):
        rows = self.rows()
        widths = [max(len(str(r[i])) for r in rows)
                  for i in range(len(rows[0]))]
        buf = io.StringIO()
        for r in rows:
            buf.write("  ".join(str(v).ljust(w)
                                for v, w in zip(r, widths)).rstrip() + "\n")
        return buf.getvalue()


def count_macs(config, trace=None):
    """Analytic MAC report for a model config; per input sample.

    With a RoutingTrace, report.trace_mean(trace.occurrence) gives the
    per-sample mean under those decisions.
    """
    uset = config.uset
    ufs = uset.values
    depth = config.depth
    widths = [1] + [config.hidden * 2 ** i for i in range(depth)]
    layers = []

    def add(name, kind, slimmable, fn):
        per = {uf: fn(uf) for uf in (ufs if slimmable else (1.0,))}
        layers.append(LayerMacs(name, kind, slimmable, per))

    u, s, k = config.resample, config.stride, config.kernel
    add("resample_up", "resample", False, lambda uf: float(TAPS))
    for i in range(1, depth + 1):
        rate = u / s ** i
        c_in, c_hid = widths[i - 1], widths[i]
        add(f"encoder{i}.conv", "conv", True,
            lambda uf, a=c_hid, b=c_in, r=rate:
            conv_macs(slim_count(a, uf), b, k, r))
        add(f"encoder{i}.pw", "conv", True,
            lambda uf, a=c_hid, r=rate:
            conv_macs(2 * a, slim_count(a, uf), 1, r))
    f_bot = config.bottleneck_features
    m = config.gru_groups
    rate_bot = u / s ** depth
    add("bottleneck.gru", "gru", False,
        lambda uf: (6.0 * m * (f_bot // m) ** 2 + 3.0 * f_bot) * rate_bot)
    for i in range(depth, 0, -1):
        rate_in = u / s ** i
        rate_out = u / s ** (i - 1)
        c_hid, c_out = widths[i], widths[i - 1]
        add(f"decoder{i}.pw", "conv", True,
            lambda uf, a=c_hid, r=rate_in:
            conv_macs(len(decoder_pw_rows(2 * a, uf)), a, 1, r))
        add(f"decoder{i}.tconv", "tconv", True,
            lambda uf, a=c_hid, b=c_out, r=rate_out:
            conv_macs(b, slim_count(a, uf), k, r))
    add("resample_down", "resample", False, lambda uf: float(TAPS))
    rk, rh = config.router.kernel, config.router.hidden
    j = len(ufs)
    add("router.conv", "router", False,
        lambda uf: conv_macs(rh, 1, rk, 1.0 / rk))
    add("router.dgru", "router", False, lambda uf: 9.0 * rh / rk)
    add("router.pw", "router", False,
        lambda uf: conv_macs(j, rh, 1, 1.0 / rk))
    report = MacReport(layers, ufs)
    if trace is not None:
        report.trace_mean_value = report.trace_mean(trace.occurrence)
    return report


def utilization_stats(traces):
    """Aggregate occurrence frequencies and mean utilization over traces."""
    traces = list(traces)
    if not traces:
        raise DataError("utilization_stats: no traces")
    uf_values = traces[0].uf_values
    counts = np.zeros(len(uf_values))
    total = 0
    for tr in traces:
        if tr.uf_values != uf_values:
            raise ShapeError("utilization_stats: mixed utilization sets")
        counts += np.bincount(tr.decisions, minlength=len(uf_values))
        total += tr.n_frames
    occurrence = counts / total
    mean_util = float(np.dot(occurrence, np.asarray(uf_values)))
    return occurrence, mean_util


def pareto_front(points):
    """Dominance labels for (cost, quality) points.

    A point is dominated if some other point has cost <= and quality >=
    with at least one strict inequality. Returns a boolean array,
    True = nondominated.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"pareto_front: expected [N, 2], got {pts.shape}")
    n = len(pts)
    nondom = np.ones(n, dtype=bool)
    for i in range(n):
        for jj in range(n):
            if i == jj:
                continue
            cost_le = pts[jj, 0] <= pts[i, 0]
            qual_ge = pts[jj, 1] >= pts[i, 1]
            strict = pts[jj, 0] < pts[i, 0] or pts[jj, 1] > pts[i, 1]
            if cost_le and qual_ge and strict:
                nondom[i] = False
                break
    return nondom


def spearman(x, y):
    """Spearman rank correlation with two-sided p-value."""
    res = stats.spearmanr(np.asarray(x), np.asarray(y))
    return float(res.statistic), float(res.pvalue)
