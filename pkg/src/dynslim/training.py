"""Two-stage optimization.

Stage 1 pre-trains the slimmable backbone: every batch runs one static
forward per utilization factor, the per-factor losses are summed, and the
accumulated gradients take a single optimizer step. The learning rate is
halved after `plateau_epochs` epochs without validation improvement.

Stage 2 implants the router (random init) on top of the stage-1 backbone
and minimizes the end-to-end objective with Gumbel sampling on, using the
masked-sum form of the gated combination so gradients match the objective
exactly; the learning rate decays exponentially per epoch. Validation
always runs noise-free. Both stages stop early after `patience` epochs
without improvement and checkpoint the best-validation state.

Training logs are append-only lines of key=value records.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as dt
from .checkpoint import save_checkpoint
from .config import config_as_flat_dict
from .data import batch_segments, split_corpus
from .errors import DataError, NumericsError
from .losses import (combine_outputs, dynslim_loss, slim_loss,
                     spectral_loss)
from .metrics import si_sdr
from .rng import DATA, GUMBEL, philox
from .router import gumbel_noise, st_select, upsample_decisions
from .tensor import Tensor, backward


def adam_update(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; mutates param/m/v in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Deterministic Adam over named parameters; steps with non-finite
    gradients are skipped (counted and logged), not clipped to zero."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.skipped = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def step(self, lr):
        grads = {}
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                self.skipped += 1
                return False
            grads[name] = g
        self.t += 1
        for name, p in self.named:
            adam_update(p.data, grads[name], self.m[name], self.v[name],
                        self.t, lr, self.beta1, self.beta2, self.eps)
        return True

    def state_arrays(self):
        out = {}
        for name, _ in self.named:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        out["adam.t"] = np.array([float(self.t)])
        return out

    def load_state_arrays(self, arrays):
        for name, _ in self.named:
            self.m[name] = np.ascontiguousarray(arrays[f"adam.m.{name}"])
            self.v[name] = np.ascontiguousarray(arrays[f"adam.v.{name}"])
        self.t = int(arrays["adam.t"][0])


def clip_global_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class TrainState:
    stage: str
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    best_val: float = float("inf")
    epochs_since_improve: int = 0
    plateau_counter: int = 0
    seed: int = 0
    skipped_steps: int = 0


class TrainLogger:
    """Append-only key=value record writer."""

    def __init__(self, path, echo=False):
        self.path = path
        self.echo = echo
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    def write(self, **fields):
        parts = []
        for key, value in fields.items():
            if isinstance(value, float):
                parts.append(f"{key}={value:.6g}")
            elif isinstance(value, (list, tuple, np.ndarray)):
                parts.append(
                    f"{key}=" + "|".join(f"{v:.6g}" for v in value))
            else:
                parts.append(f"{key}={value}")
        line = " ".join(parts)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        if self.echo:
            print(line, flush=True)


def _save_state(path, model, run_cfg, state, optimizer=None, extra=None):
    arrays = dict(model.state_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {"stage": state.stage, "epoch": state.epoch, "step": state.step,
            "lr": state.lr, "best_val": state.best_val,
            "seed": state.seed,
            "epochs_since_improve": state.epochs_since_improve,
            "plateau_counter": state.plateau_counter,
            "has_router": model.router is not None}
    meta.update(extra or {})
    save_checkpoint(path, config_as_flat_dict(run_cfg), meta, arrays)


def _to_tensor(arr, dtype):
    return Tensor(np.ascontiguousarray(arr.astype(dtype)))


def validate_static(model, corpus, entries, run_cfg, max_sisdr_utts=16):
    """Slim loss over the validation set plus per-factor SI-SDR means.

    Deterministic: fixed crops (segment start 0), no augmentation, no
    parameter mutation.
    """
    cfg = run_cfg
    uset = cfg.model.uset
    dtype = np.dtype(cfg.model.dtype)
    seg = int(round(cfg.data.segment_seconds * cfg.data.sample_rate))
    t_pad = model.valid_length(seg)
    total_loss = 0.0
    count = 0
    sisdr_out = {uf: [] for uf in uset}
    sisdr_in = []
    with dt.no_grad():
        for i in range(0, len(entries), cfg.train.batch_size):
            chunk = entries[i:i + cfg.train.batch_size]
            xs, ss = [], []
            for e in chunk:
                noisy, clean = corpus.load_pair(e)
                xs.append(np.pad(noisy[:seg], (0, t_pad - seg)))
                ss.append(np.pad(clean[:seg], (0, t_pad - seg)))
            x_t = _to_tensor(np.stack(xs), dtype)
            s_t = _to_tensor(np.stack(ss), dtype)
            outs = [model.forward_static(x_t, uf) for uf in uset]
            loss = slim_loss(s_t, outs, cfg.loss)
            total_loss += loss.item() * len(chunk)
            count += len(chunk)
            for uf, out in zip(uset, outs):
                for b in range(len(chunk)):
                    if len(sisdr_out[uf]) < max_sisdr_utts:
                        sisdr_out[uf].append(
                            si_sdr(ss[b][:seg], out.data[b][:seg]))
            for b in range(len(chunk)):
                if len(sisdr_in) < max_sisdr_utts:
                    sisdr_in.append(si_sdr(ss[b][:seg], xs[b][:seg]))
    return {
        "loss": total_loss / max(1, count),
        "si_sdr_in": float(np.mean(sisdr_in)),
        "si_sdr_out": {uf: float(np.mean(v)) for uf, v in sisdr_out.items()},
    }


def validate_dynamic(model, corpus, entries, run_cfg):
    """Noise-free routed validation: end-to-end loss, SI-SDR, utilization."""
    cfg = run_cfg
    uset = cfg.model.uset
    seg = int(round(cfg.data.segment_seconds * cfg.data.sample_rate))
    losses, sisdrs = [], []
    counts = np.zeros(len(uset))
    frames = 0
    with dt.no_grad():
        for e in entries:
            noisy, clean = corpus.load_pair(e)
            x, s = noisy[:seg], clean[:seg]
            y, trace = model.forward_dynamic(x, mode="infer")
            counts += np.bincount(trace.decisions, minlength=len(uset))
            frames += trace.n_frames
            se = spectral_loss(_to_tensor(s, np.float64),
                               Tensor(y.astype(np.float64)), cfg.loss)
            losses.append(se.item())
            sisdrs.append(si_sdr(s, y))
    occ = counts / max(1, frames)
    mean_util = float(np.dot(occ, np.asarray(uset.values)))
    se_mean = float(np.mean(losses))
    loss = se_mean + cfg.loss.eff_weight * \
        (mean_util - cfg.loss.target_utilization) ** 2
    if len(uset) > 1:
        loss += cfg.loss.bal_weight * \
            (len(uset) * float((occ ** 2).sum()) - 1.0) / (len(uset) - 1)
    return {"loss": loss, "se_loss": se_mean,
            "si_sdr": float(np.mean(sisdrs)),
            "mean_utilization": mean_util, "occurrence": occ}


def _epoch_seed_stream(seed, epoch):
    return philox(seed, DATA, epoch)


def _restore(state, opt, resume_from):
    """Continue epoch numbering, schedule position, and moments."""
    meta, arrays = resume_from
    state.epoch = int(meta["epoch"]) + 1
    state.step = int(meta["step"])
    state.lr = float(meta["lr"])
    state.best_val = float(meta["best_val"])
    state.epochs_since_improve = int(meta["epochs_since_improve"])
    state.plateau_counter = int(meta["plateau_counter"])
    if any(k.startswith("adam.") for k in arrays):
        opt.load_state_arrays(arrays)
    return state.epoch


def stage1_train(model, corpus, run_cfg, out_dir, echo=False,
                 max_epochs=None, resume_from=None):
    """Pre-train the slimmable backbone on the summed per-factor loss."""
    if model.router is not None:
        raise DataError("stage 1 expects a router-free model")
    cfg = run_cfg
    dtype = np.dtype(cfg.model.dtype)
    uset = cfg.model.uset
    os.makedirs(out_dir, exist_ok=True)
    log = TrainLogger(os.path.join(out_dir, "train_slim.log"), echo=echo)
    train_entries, val_entries = split_corpus(corpus,
                                              cfg.train.val_fraction,
                                              cfg.seed)
    params = model.named_parameters()
    opt = Adam(params)
    state = TrainState(stage="slim", lr=cfg.train.lr, seed=cfg.seed)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = _restore(state, opt, resume_from)
    best_path = os.path.join(out_dir, "slim_best.ckpt")
    last_path = os.path.join(out_dir, "slim_last.ckpt")
    epochs = max_epochs or cfg.train.max_epochs
    for epoch in range(start_epoch, start_epoch + epochs):
        state.epoch = epoch
        t0 = time.monotonic()
        rng = _epoch_seed_stream(cfg.seed, epoch)
        train_loss, n_batches = 0.0, 0
        for x, s in batch_segments(corpus, train_entries, cfg.data, rng,
                                   cfg.train.batch_size,
                                   model.valid_length):
            x_t, s_t = _to_tensor(x, dtype), _to_tensor(s, dtype)
            outs = [model.forward_static(x_t, uf) for uf in uset]
            loss = slim_loss(s_t, outs, cfg.loss, n_expected=len(uset))
            model.zero_grad()
            backward(loss, params=[p for _, p in params],
                     check_finite=False)
            clip_global_norm([p for _, p in params], cfg.train.grad_clip)
            opt.step(state.lr)
            state.step += 1
            train_loss += loss.item()
            n_batches += 1
        val = validate_static(model, corpus, val_entries, run_cfg)
        if not np.isfinite(val["loss"]):
            _save_state(os.path.join(out_dir, "slim_diverged.ckpt"), model,
                        run_cfg, state, opt)
            raise NumericsError(f"stage 1 diverged at epoch {epoch}; state "
                                f"dumped")
        improved = val["loss"] < state.best_val - 1e-9
        if improved:
            state.best_val = val["loss"]
            state.epochs_since_improve = 0
            state.plateau_counter = 0
            _save_state(best_path, model, run_cfg, state, opt,
                        extra={"val_loss": val["loss"]})
        else:
            state.epochs_since_improve += 1
            state.plateau_counter += 1
        if state.plateau_counter >= cfg.train.plateau_epochs:
            state.lr *= 0.5
            state.plateau_counter = 0
        log.write(stage="slim", epoch=epoch, step=state.step, lr=state.lr,
                  train_loss=train_loss / max(1, n_batches),
                  val_loss=val["loss"], val_si_sdr_in=val["si_sdr_in"],
                  val_si_sdr_out=[val["si_sdr_out"][uf] for uf in uset],
                  seed=cfg.seed, skipped=opt.skipped,
                  seconds=time.monotonic() - t0)
        state.skipped_steps = opt.skipped
        _save_state(last_path, model, run_cfg, state, opt,
                    extra={"val_loss": val["loss"]})
        if state.epochs_since_improve >= cfg.train.patience:
            break
    return state


def _soft_occurrence(scores):
    """Batch-mean selection probabilities (noise-free softmax), kept
    differentiable; in expectation over Gumbel draws this matches the
    hard occurrence frequencies."""
    axis = scores.ndim - 2
    shift = scores.data.max(axis=axis, keepdims=True)
    z = (scores - shift).exp()
    denom = z.sum(axis=axis)
    if z.ndim == 3:
        p = z / denom.reshape(denom.shape[0], 1, denom.shape[1])
        flat = p.sum(axis=2).sum(axis=0)
        n = p.shape[0] * p.shape[2]
    else:
        p = z / denom.reshape(1, denom.shape[0])
        flat = p.sum(axis=1)
        n = p.shape[1]
    return flat * (1.0 / n)


def stage2_train(model, corpus, run_cfg, out_dir, echo=False,
                 max_epochs=None, joint_lr=None, resume_from=None):
    """End-to-end routed training with Gumbel sampling on.

    The gated output is assembled as the masked sum over per-factor
    forwards so the gradient matches the combination objective exactly;
    the switched single pass is used for validation and inference.
    """
    if model.router is None:
        raise DataError("stage 2 requires an implanted router")
    cfg = run_cfg
    dtype = np.dtype(cfg.model.dtype)
    uset = cfg.model.uset
    os.makedirs(out_dir, exist_ok=True)
    log = TrainLogger(os.path.join(out_dir, "train_dyn.log"), echo=echo)
    train_entries, val_entries = split_corpus(corpus,
                                              cfg.train.val_fraction,
                                              cfg.seed)
    all_params = model.named_parameters()
    router_params = [(n, p) for n, p in all_params if n.startswith("router")]
    state = TrainState(stage="dyn", lr=cfg.train.lr, seed=cfg.seed)
    best_path = os.path.join(out_dir, "dyn_best.ckpt")
    last_path = os.path.join(out_dir, "dyn_last.ckpt")
    epochs = max_epochs or cfg.train.max_epochs
    pre_epochs = cfg.train.router_pretrain_epochs
    opt = Adam(router_params if pre_epochs else all_params)
    phase = "router_pretrain" if pre_epochs else "joint"
    start_epoch = 0
    if resume_from is not None:
        start_epoch = _restore(state, opt, resume_from)
    for epoch in range(start_epoch, start_epoch + epochs):
        state.epoch = epoch
        if pre_epochs and epoch == pre_epochs:
            # switch to joint fine-tuning (fresh moments, lower lr)
            opt = Adam(all_params)
            state.lr = joint_lr if joint_lr is not None else 1e-4
            phase = "joint"
        t0 = time.monotonic()
        rng = _epoch_seed_stream(cfg.seed, epoch)
        train_loss, n_batches = 0.0, 0
        hard_occ = np.zeros(len(uset))
        hard_frames = 0
        for x, s in batch_segments(corpus, train_entries, cfg.data, rng,
                                   cfg.train.batch_size,
                                   model.valid_length):
            x_t, s_t = _to_tensor(x, dtype), _to_tensor(s, dtype)
            t_pad = x.shape[-1]
            x3 = x_t.reshape((x.shape[0], 1, t_pad))
            scores = model.router.forward(x3)
            grng = philox(cfg.seed, GUMBEL, epoch, state.step)
            noise = gumbel_noise(scores.shape, grng).astype(dtype)
            onehot = st_select(scores, noise, mode="train")
            gating = upsample_decisions(
                onehot, model.bottleneck_frames(t_pad), t_pad)
            outs = [model.forward_static(x_t, uf) for uf in uset]
            est = combine_outputs(outs, gating)
            occ_soft = _soft_occurrence(scores)
            loss = dynslim_loss(s_t, est, occ_soft, cfg.loss, uset)
            model.zero_grad()
            params = [p for _, p in opt.named]
            backward(loss, params=params, check_finite=False)
            clip_global_norm(params, cfg.train.grad_clip)
            opt.step(state.lr)
            state.step += 1
            train_loss += loss.item()
            n_batches += 1
            counts = onehot.data.sum(axis=(0, 2)) if onehot.ndim == 3 \
                else onehot.data.sum(axis=1)
            hard_occ += counts
            hard_frames += int(counts.sum())
        val = validate_dynamic(model, corpus, val_entries, run_cfg)
        if not np.isfinite(val["loss"]):
            _save_state(os.path.join(out_dir, "dyn_diverged.ckpt"), model,
                        run_cfg, state, opt)
            raise NumericsError(f"stage 2 diverged at epoch {epoch}; state "
                                f"dumped")
        improved = val["loss"] < state.best_val - 1e-9
        if improved:
            state.best_val = val["loss"]
            state.epochs_since_improve = 0
            _save_state(best_path, model, run_cfg, state, opt,
                        extra={"val_loss": val["loss"],
                               "val_mean_utilization":
                               val["mean_utilization"]})
        else:
            state.epochs_since_improve += 1
        log.write(stage="dyn", phase=phase, epoch=epoch, step=state.step,
                  lr=state.lr, train_loss=train_loss / max(1, n_batches),
                  val_loss=val["loss"], val_se_loss=val["se_loss"],
                  val_si_sdr=val["si_sdr"],
                  val_mean_util=val["mean_utilization"],
                  val_occ=val["occurrence"],
                  train_occ=hard_occ / max(1, hard_frames),
                  seed=cfg.seed, skipped=opt.skipped,
                  seconds=time.monotonic() - t0)
        state.skipped_steps = opt.skipped
        _save_state(last_path, model, run_cfg, state, opt,
                    extra={"val_loss": val["loss"]})
        if state.epochs_since_improve >= cfg.train.patience:
            break
        if phase == "joint" or not pre_epochs:
            state.lr *= cfg.train.lr_decay
    return state
