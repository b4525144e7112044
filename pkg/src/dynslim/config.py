"""Configuration dataclasses and the key=value config-file format.

A run config is a flat text file of `section.key = value` lines (values are
Python literals). Unknown keys are rejected. Command-line flags override
file values, which override the defaults below.
"""

import ast
import math
from dataclasses import asdict, dataclass, field, fields

from .errors import DataError
from .layers import UtilizationSet


@dataclass
class RouterConfig:
    """Routing subnet sizes. kernel doubles as the stride of its first
    conv, fixing the decision rate to one per `kernel` input samples."""

    kernel: int = 256
    hidden: int = 64

    def validate(self):
        if self.kernel < 1 or self.hidden < 1:
            raise DataError("router kernel and hidden size must be positive")


@dataclass
class ModelConfig:
    """Backbone hyperparameters.

    depth:      number of encoder/decoder levels
    kernel:     conv kernel size of every strided conv
    stride:     downsampling factor per level
    resample:   input up/downsampling factor around the network
    hidden:     channels after the first encoder block (doubles per level)
    gru_groups: independent GRUs across the bottleneck feature space
    uf_values:  available utilization factors (ascending, last == 1)
    """

    depth: int = 5
    kernel: int = 8
    stride: int = 4
    resample: int = 4
    hidden: int = 32
    gru_groups: int = 4
    uf_values: tuple = (0.125, 0.25, 0.5, 1.0)
    dtype: str = "float32"
    router: RouterConfig = field(default_factory=RouterConfig)

    @property
    def uset(self):
        return UtilizationSet(self.uf_values)

    @property
    def bottleneck_features(self):
        return self.hidden * 2 ** (self.depth - 1)

    def validate(self):
        if self.depth < 1:
            raise DataError("model depth must be >= 1")
        if self.kernel < self.stride:
            raise DataError("conv kernel must be >= stride")
        if self.resample < 1:
            raise DataError("resample factor must be >= 1")
        if self.bottleneck_features % self.gru_groups != 0:
            raise DataError(
                f"bottleneck features {self.bottleneck_features} not "
                f"divisible by {self.gru_groups} GRU groups")
        if self.dtype not in ("float32", "float64"):
            raise DataError(f"unsupported dtype {self.dtype}")
        self.uset  # raises on malformed sets
        self.router.validate()


@dataclass
class LossConfig:
    """Enhancement-loss and routing-regularizer settings.

    compress/mix follow the compressed-spectral loss; eff_weight and
    bal_weight scale the utilization-target and balance regularizers;
    target_utilization is the average utilization the router is asked to
    maintain.
    """

    compress: float = 0.3
    mix: float = 0.3
    eff_weight: float = 1.0
    bal_weight: float = 0.1
    target_utilization: float = 0.5
    stft_win: int = 512
    stft_hop: int = 256

    def validate(self):
        if not 0.0 < self.compress <= 1.0:
            raise DataError("compress exponent must lie in (0, 1]")
        if not 0.0 <= self.mix <= 1.0:
            raise DataError("mix factor must lie in [0, 1]")
        if self.eff_weight < 0 or self.bal_weight < 0:
            raise DataError("loss weights must be >= 0")
        if not 0.0 < self.target_utilization <= 1.0:
            raise DataError("target utilization must lie in (0, 1]")
        if self.stft_hop > self.stft_win or self.stft_hop < 1:
            raise DataError("stft hop must lie in [1, window length]")


@dataclass
class MixtureSpec:
    """Synthetic-corpus and segmentation parameters."""

    snr_low_db: float = 0.0
    snr_high_db: float = 15.0
    sample_rate: int = 16000
    segment_seconds: float = 4.0
    utterance_seconds: float = 4.0

    def validate(self):
        if not math.isfinite(self.snr_low_db) or \
                not math.isfinite(self.snr_high_db):
            raise DataError("snr range must be finite")
        if self.snr_high_db < self.snr_low_db:
            raise DataError("snr_high_db < snr_low_db")
        if self.sample_rate < 1:
            raise DataError("sample rate must be positive")
        if self.segment_seconds <= 0 or self.utterance_seconds <= 0:
            raise DataError("segment and utterance lengths must be positive")


@dataclass
class TrainConfig:
    """Optimization schedule for both stages.

    Stage 1 halves the learning rate after `plateau_epochs` epochs without
    validation improvement; stage 2 decays it by `lr_decay` per epoch.
    Both stop early after `patience` epochs without improvement.
    """

    max_epochs: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 35
    plateau_epochs: int = 15
    lr_decay: float = 0.99
    grad_clip: float = 5.0
    val_fraction: float = 0.1
    router_pretrain_epochs: int = 0  # optional frozen-backbone warmup

    def validate(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch size must be positive")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise DataError("bad learning-rate settings")
        if not 0 < self.val_fraction < 1:
            raise DataError("val_fraction must lie in (0, 1)")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: MixtureSpec = field(default_factory=MixtureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.data.validate()
        self.train.validate()


_SECTIONS = {
    "model": (ModelConfig, ("router",)),
    "router": (RouterConfig, ()),
    "loss": (LossConfig, ()),
    "data": (MixtureSpec, ()),
    "train": (TrainConfig, ()),
}


def _known_keys():
    known = {"seed"}
    for section, (cls, _) in _SECTIONS.items():
        for f in fields(cls):
            if f.name == "router":
                continue
            known.add(f"{section}.{f.name}")
    return known


def parse_overrides(pairs):
    """Parse `section.key=value` strings into a dict, rejecting unknowns."""
    known = _known_keys()
    out = {}
    for raw in pairs:
        if "=" not in raw:
            raise DataError(f"malformed config entry {raw!r} "
                            "(expected key=value)")
        key, _, value = raw.partition("=")
        key = key.strip()
        if key not in known:
            raise DataError(f"unknown config key {key!r}")
        try:
            out[key] = ast.literal_eval(value.strip())
        except (ValueError, SyntaxError):
            out[key] = value.strip()
    return out


def load_config_file(path):
    """Read a key=value config file into an override dict."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            pairs.append(line)
    return parse_overrides(pairs)


def build_run_config(file_overrides=None, flag_overrides=None):
    """Defaults <- config file <- command-line flags, then validate."""
    cfg = RunConfig()
    merged = {}
    merged.update(file_overrides or {})
    merged.update(flag_overrides or {})
    for key, value in merged.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        section, _, name = key.partition(".")
        target = {"model": cfg.model, "router": cfg.model.router,
                  "loss": cfg.loss, "data": cfg.data,
                  "train": cfg.train}[section]
        current = getattr(target, name)
        if isinstance(current, tuple) and not isinstance(value, tuple):
            value = tuple(value) if isinstance(value, (list, set)) else \
                (value,)
        setattr(target, name, type(current)(value)
                if not isinstance(value, type(current)) else value)
    cfg.validate()
    return cfg


def dump_run_config(cfg):
    """Serialize a RunConfig back to config-file text."""
    lines = [f"seed = {cfg.seed}"]
    for section, obj in (("model", cfg.model), ("router", cfg.model.router),
                         ("loss", cfg.loss), ("data", cfg.data),
                         ("train", cfg.train)):
        for f in fields(obj):
            if f.name == "router":
                continue
            lines.append(f"{section}.{f.name} = "
                         f"{getattr(obj, f.name)!r}")
    return "\n".join(lines) + "\n"


def config_as_flat_dict(cfg):
    """Flat `section.key -> value` view (used by checkpoints)."""
    out = {"seed": cfg.seed}
    for section, obj in (("model", cfg.model), ("router", cfg.model.router),
                         ("loss", cfg.loss), ("data", cfg.data),
                         ("train", cfg.train)):
        d = asdict(obj)
        d.pop("router", None)
        for k, v in d.items():
            out[f"{section}.{k}"] = v
    return out
