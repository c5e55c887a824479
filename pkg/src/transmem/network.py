"""Stacked K-layer sequence-to-sequence predictor built from TMU cells."""
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .cells import CellState, convlstm_step, init_layer, layer_params, tmu_step
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NetworkConfig:
    num_layers: int = 4
    channels: int = 64
    filter_size: int = 5
    subscale_factor: int = 4
    input_len: int = 10
    predict_len: int = 10
    num_sources: int = 0
    frame_channels: int = 1
    frame_height: int = 64
    frame_width: int = 64
    # how source models produce memories over the prediction horizon
    source_bank_mode: str = "closed_loop"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigError(f"filter_size must be odd, got {self.filter_size}")
        f = self.subscale_factor
        if f < 1 or self.frame_height % f or self.frame_width % f:
            raise ConfigError(
                f"frame {self.frame_height}x{self.frame_width} is not divisible by subscale_factor {f}")
        if self.input_len < 1 or self.predict_len < 0:
            raise ConfigError("input_len must be >= 1 and predict_len >= 0")
        if self.num_sources < 0:
            raise ConfigError("num_sources must be >= 0")
        if self.source_bank_mode not in ("closed_loop", "teacher_forced"):
            raise ConfigError(f"unknown source_bank_mode {self.source_bank_mode!r}")

    @property
    def seq_len(self):
        return self.input_len + self.predict_len

    @property
    def input_channels(self):
        return self.frame_channels * self.subscale_factor ** 2

    @property
    def state_hw(self):
        return self.frame_height // self.subscale_factor, self.frame_width // self.subscale_factor

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return NetworkConfig(**d)


def init_params(config, rng):
    """Fresh parameters ``{name: array}`` for the whole predictor."""
    params = {}
    for layer in range(config.num_layers):
        cin = config.input_channels if layer == 0 else config.channels
        params.update(init_layer(rng, f"l{layer}", cin, config.channels, config.filter_size,
                                 config.state_hw, config.num_sources))
    out_ch = config.input_channels
    bound = np.sqrt(1.0 / config.channels)
    params["dec.w"] = rng.uniform(-bound, bound, size=(out_ch, config.channels, 1, 1))
    params["dec.b"] = np.zeros(out_ch)
    return params


@dataclass
class SequenceOutput:
    predictions: list   # Var per step, prediction of frame s+1, (B, P, H, W)
    records: list       # records[s][layer] -> TmuStepOutput (or CellState for ConvLSTM)

    def predicted_frames(self):
        """Stacked prediction values ``(B, T-1, P, H, W)``."""
        return np.stack([p.value for p in self.predictions], axis=1)


def check_frames(frames, config):
    if frames.ndim != 5:
        raise ShapeError("frames must be (batch, T, P, H, W)", None, frames.shape)
    expect = (config.seq_len, config.frame_channels, config.frame_height, config.frame_width)
    if frames.shape[1:] != expect:
        raise ShapeError("frame sequence vs network config", expect, frames.shape[1:])


def forward_sequence(frames, params, config, banks=None, cell="tmu", teacher_forcing=False):
    """Unroll the predictor over a batch of clips.

    Steps ``s = 0..T-2`` each predict frame ``s+1``. Ground-truth frames are
    consumed while ``s < input_len``; afterwards the previous prediction is fed
    back (unless ``teacher_forcing``). ``params`` values may be ``Var`` (to
    train) or plain arrays (constants). ``banks``, when given, is a
    :class:`MemoryBank` whose shapes are validated against each step.
    """
    check_frames(frames, config)
    pv = {k: v if isinstance(v, ad.Var) else ad.constant(v) for k, v in params.items()}
    layers = [layer_params(pv, f"l{k}") for k in range(config.num_layers)]
    if cell == "tmu":
        for lp in layers:
            if lp.num_sources != config.num_sources:
                raise ConfigError(f"parameters carry {lp.num_sources} sources, config says {config.num_sources}")
    fused = [lp.fused() for lp in layers]
    f = config.subscale_factor
    b = frames.shape[0]
    h, w = config.state_hw
    states = [CellState.zeros(b, config.channels, h, w) for _ in range(config.num_layers)]
    predictions, records = [], []
    prev_pred = None
    for s in range(config.seq_len - 1):
        if s < config.input_len or teacher_forcing:
            x = ad.constant(frames[:, s])
        else:
            x = prev_pred
        inp = ad.space_to_depth(x, f)
        step_records = []
        for k, lp in enumerate(layers):
            if cell == "tmu":
                bank = None if banks is None else banks.stacked(s, k)
                out = tmu_step(inp, states[k], lp, bank, fused[k])
                states[k] = out.state
            else:
                out = convlstm_step(inp, states[k], lp)
                states[k] = out
            step_records.append(out)
            inp = states[k].hidden
        y = ad.conv2d(inp, pv["dec.w"], pv["dec.b"])
        prev_pred = ad.clamp(ad.depth_to_space(y, f), 0.0, 1.0)
        predictions.append(prev_pred)
        records.append(step_records)
    return SequenceOutput(predictions, records)


def check_source_geometry(source_config, target_config):
    """Raise unless a source model can feed memories to the target."""
    problems = []
    for attr in ("num_layers", "channels", "frame_channels"):
        a, b = getattr(source_config, attr), getattr(target_config, attr)
        if a != b:
            problems.append(f"{attr}: source {a} vs target {b}")
    if problems:
        raise ConfigError("source/target geometry mismatch: " + "; ".join(problems))
    f = source_config.subscale_factor
    th, tw = target_config.frame_height, target_config.frame_width
    if th % f or tw % f or (th // f, tw // f) != target_config.state_hw:
        raise ConfigError(
            f"source state extents {th // f}x{tw // f} (subscale {f}) differ from target "
            f"{target_config.state_hw}; choose subscale factors so that frame_size/subscale "
            f"is the same for source and target")


def run_source_models(frames, sources, target_config):
    """Run the frozen source predictors on ``frames`` and collect their memories.

    ``sources`` is a list of ``(NetworkConfig, params)`` pairs; their order
    defines source index m. Returns a :class:`MemoryBank`.
    """
    from .objective import MemoryBank

    teacher = target_config.source_bank_mode == "teacher_forced"
    per_source = []
    for cfg, params in sources:
        check_source_geometry(cfg, target_config)
        run_cfg = cfg.replace(input_len=target_config.input_len, predict_len=target_config.predict_len,
                              frame_height=target_config.frame_height,
                              frame_width=target_config.frame_width, num_sources=0)
        out = forward_sequence(frames, params, run_cfg, cell="convlstm", teacher_forcing=teacher)
        per_source.append([[st.memory.value for st in step] for step in out.records])
    return MemoryBank.from_sources(per_source, target_config.seq_len - 1, target_config.num_layers)
