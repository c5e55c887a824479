"""Training loops for the three regimes: from scratch, finetune, and memory
transfer from frozen source models."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .cells import BASE_KEYS
from .checkpoint import Checkpoint, params_digest, rng_from_json, rng_state_to_json
from .errors import ConfigError, NumericError, ShapeError, TransMemError, UsageError
from .metrics import evaluate, frame_mse
from .network import NetworkConfig, check_source_geometry, forward_sequence, init_params, run_source_models
from .objective import final_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

MODES = ("scratch", "finetune", "transfer")
BETA_ROBUST_BAND = (1e-3, 1.0)


@dataclass
class TrainConfig:
    mode: str = "scratch"
    lr: float = 1e-3
    batch_size: int = 8
    max_iters: int = 5000
    beta: float = 0.1
    seed: int = 0
    sources: list = field(default_factory=list)
    val_every: int = 250
    patience: int = 5
    eval_batch: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_iters < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, max_iters >= 0")
        if self.val_every < 1 or self.patience < 1:
            raise ConfigError("val_every and patience must be >= 1")


@dataclass
class SourceModel:
    config: NetworkConfig
    params: dict
    name: str = ""

    @classmethod
    def from_checkpoint(cls, ckpt, name=""):
        net = NetworkConfig.from_dict(ckpt.config["network"])
        if net.num_sources != 0:
            raise UsageError(f"source {name or '?'} is a transfer model; sources must be plain ConvLSTM predictors")
        params = {}
        for k, v in ckpt.model_params().items():
            v = np.array(v)
            v.setflags(write=False)
            params[k] = v
        return cls(net, params, name)

    def digest(self):
        return params_digest(self.params)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list

    def log_lines(self):
        return [format_record(r) for r in self.records]


def format_record(rec):
    return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())


def target_network(net_config, train_config, num_loaded_sources):
    """Network config the target model trains with, validated against the mode."""
    mode = train_config.mode
    if mode == "scratch":
        if num_loaded_sources:
            raise ConfigError("scratch mode takes no sources")
        return net_config.replace(num_sources=0)
    if mode == "finetune":
        if num_loaded_sources != 1:
            raise ConfigError(f"finetune needs exactly 1 source, got {num_loaded_sources}")
        return net_config.replace(num_sources=0)
    if num_loaded_sources < 1:
        raise ConfigError("transfer mode needs at least one source")
    return net_config.replace(num_sources=num_loaded_sources)


def predict(params, net_config, frames, batch=50):
    """Predicted clips ``(N, T-1, P, H, W)``; step s predicts frame s+1."""
    outs = []
    for i in range(0, frames.shape[0], batch):
        out = forward_sequence(frames[i:i + batch], params, net_config)
        outs.append(out.predicted_frames())
    return np.concatenate(outs, axis=0)


def horizon(pred, frames, input_len):
    """Align predictions with the ground truth of the prediction horizon."""
    return pred[:, input_len - 1:], frames[:, input_len:]


def validation_mse(params, net_config, frames, batch=50):
    p, t = horizon(predict(params, net_config, frames, batch), frames, net_config.input_len)
    return frame_mse(p, t)[1]


def evaluate_params(params, net_config, dataset, csi_threshold=None, batch=50):
    p, t = horizon(predict(params, net_config, dataset.frames, batch), dataset.frames, net_config.input_len)
    return evaluate(p, t, csi_threshold)


def gate_table(params, net_config, frames, batch=50):
    """Mean transfer-gate activation per layer and source, ``(K, M)``, plus the
    pooled per-source mean ``(M,)``."""
    if net_config.num_sources == 0:
        raise UsageError("model has no transfer gates (not trained in transfer mode)")
    k, m = net_config.num_layers, net_config.num_sources
    sums = np.zeros((k, m))
    count = 0
    for i in range(0, frames.shape[0], batch):
        out = forward_sequence(frames[i:i + batch], params, net_config)
        for step in out.records:
            for layer, rec in enumerate(step):
                g = rec.gates.value
                sums[layer] += g.reshape(g.shape[0], m, -1).sum(axis=(0, 2))
        n = frames[i:i + batch].shape[0]
        count += n * len(out.records) * (g.size // (g.shape[0] * m))
    per_layer = sums / count
    return per_layer, per_layer.mean(axis=0)


def _check_dataset(dataset, net_config):
    expect = (net_config.seq_len, net_config.frame_channels, net_config.frame_height, net_config.frame_width)
    if dataset.frames.shape[1:] != expect:
        raise ShapeError("dataset (T, P, H, W) vs network config", expect, dataset.frames.shape[1:])
    if dataset.input_len != net_config.input_len:
        raise ConfigError(f"dataset input_len {dataset.input_len} != network input_len {net_config.input_len}")


def _finetune_init(params, source, net_config):
    src = source.config
    for attr in ("num_layers", "channels", "filter_size", "subscale_factor", "frame_channels"):
        if getattr(src, attr) != getattr(net_config, attr):
            raise ConfigError(f"finetune source {attr}={getattr(src, attr)} differs from target "
                              f"{getattr(net_config, attr)}")
    out = dict(params)
    for name, value in source.params.items():
        layer_key = name.split(".", 1)[1] if name.startswith("l") else None
        if name.startswith("dec.") or layer_key in BASE_KEYS:
            if out[name].shape != value.shape:
                raise ShapeError(f"finetune parameter {name}", out[name].shape, value.shape)
            out[name] = np.array(value)
    return out


def train(train_config, net_config, train_set, val_set=None, sources=(), resume=None, stop_after=None,
          on_record=None):
    """Run one training job; returns a :class:`TrainResult`.

    ``sources`` are :class:`SourceModel` (frozen). ``resume`` continues from a
    checkpoint written by an earlier call; ``stop_after`` halts after that many
    total iterations, leaving a resumable checkpoint. ``on_record`` is called
    with each metric record as it is produced.
    """
    sources = list(sources)
    net = target_network(net_config, train_config, len(sources))
    _check_dataset(train_set, net)
    if val_set is not None:
        _check_dataset(val_set, net)
    for s in sources:
        check_source_geometry(s.config, net)
    if train_config.mode == "transfer" and train_config.beta > 0:
        lo, hi = BETA_ROBUST_BAND
        if not lo <= train_config.beta <= hi:
            log.warning("beta=%g is outside the robust band [%g, %g]", train_config.beta, lo, hi)
    digests = [s.digest() for s in sources]
    bank_sources = [(s.config, s.params) for s in sources] if train_config.mode == "transfer" else []

    if resume is None:
        rng = np.random.Generator(np.random.Philox(train_config.seed))
        params = init_params(net, rng)
        if train_config.mode == "finetune":
            params = _finetune_init(params, sources[0], net)
        opt = AdamState(lr=train_config.lr)
        state = {"iteration": 0, "best_val": None, "best_iter": 0, "bad_validations": 0, "done": False}
        best = dict(params)
    else:
        if resume.config.get("state", {}).get("done"):
            raise UsageError("checkpoint is from a finished run; nothing to resume")
        rng = rng_from_json(resume.rng_state)
        params = {k[len("current/"):]: v for k, v in resume.extra_tensors.items() if k.startswith("current/")}
        best = resume.model_params()
        opt = resume.optimizer
        state = dict(resume.config["state"])

    records = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    def validate(it):
        if val_set is None:
            return
        nonlocal best
        val = validation_mse(params, net, val_set.frames, train_config.eval_batch)
        if not np.isfinite(val):
            raise NumericError(f"validation MSE is {val} at iteration {it}")
        improved = state["best_val"] is None or val < state["best_val"]
        if improved:
            state.update(best_val=val, best_iter=it, bad_validations=0)
            best = dict(params)
        else:
            state["bad_validations"] += 1
        emit({"iter": it, "val_mse": val, "best_val": state["best_val"], "best_iter": state["best_iter"]})

    n = len(train_set)
    last = train_config.max_iters if stop_after is None else min(stop_after, train_config.max_iters)
    it = state["iteration"]
    stopped_early = False
    while it < last:
        it += 1
        idx = rng.integers(0, n, size=train_config.batch_size)
        frames = train_set.frames[idx]
        bank = run_source_models(frames, bank_sources, net) if bank_sources else None
        pv = {k: ad.parameter(v, name=k) for k, v in params.items()}
        out = forward_sequence(frames, pv, net)
        loss, report = final_loss(out.predictions, frames, out.records, bank, train_config.beta)
        if not np.isfinite(report.total):
            raise NumericError(f"non-finite loss at iteration {it}: {report.log_line()}")
        grads = ad.backward(loss, pv)
        params, opt = adam_step(params, grads, opt)
        emit({"iter": it, **report.as_fields()})
        state["iteration"] = it
        if it % train_config.val_every == 0:
            validate(it)
            if state["bad_validations"] >= train_config.patience:
                stopped_early = True
                break

    finished = stopped_early or it >= train_config.max_iters
    if finished:
        if val_set is not None and it % train_config.val_every != 0 and not stopped_early:
            validate(it)
        if val_set is None:
            best = dict(params)
        state["done"] = True
        state["stopped_early"] = stopped_early

    for s, d in zip(sources, digests):
        if s.digest() != d:
            raise TransMemError(f"source model {s.name or '?'} was modified during training")

    config = {
        "kind": "convlstm" if net.num_sources == 0 else "tmu",
        "network": net.to_dict(),
        "train": asdict(train_config),
        "source_digests": digests,
        "dataset": {"generator": train_set.generator, "seed": train_set.seed, "config": train_set.config},
        "state": state,
    }
    ckpt = Checkpoint(config, best, opt, rng_state_to_json(rng),
                      {f"current/{k}": v for k, v in params.items()})
    return TrainResult(ckpt, records)
