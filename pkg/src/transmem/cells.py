"""ConvLSTM cell and the Transferable Memory Unit.

Gate kernels are stored stacked along the output-channel axis in the order
``g, i, f, o`` (input modulation, input, forget, output); the TMU's transfer
gate kernels are a separate stack, one ``C``-channel block per source.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError, UsageError

BASE_KEYS = ("w_x", "w_h", "b", "w_ci", "w_cf", "w_co")
TRANSFER_KEYS = ("w_distill", "ln_gain", "ln_shift", "gate_w_x", "gate_w_h", "gate_b")
LN_EPSILON = 1e-5


@dataclass
class CellState:
    hidden: ad.Var
    memory: ad.Var

    @classmethod
    def zeros(cls, batch, channels, height, width):
        z = np.zeros((batch, channels, height, width))
        return cls(ad.Var(z, op="zeros"), ad.Var(z, op="zeros"))


@dataclass
class ConvLstmParams:
    w_x: ad.Var
    w_h: ad.Var
    b: ad.Var
    w_ci: ad.Var
    w_cf: ad.Var
    w_co: ad.Var

    @property
    def channels(self):
        return self.w_h.shape[1]


@dataclass
class TmuParams:
    base: ConvLstmParams
    w_distill: Optional[ad.Var] = None
    ln_gain: Optional[ad.Var] = None
    ln_shift: Optional[ad.Var] = None
    gate_w_x: Optional[ad.Var] = None
    gate_w_h: Optional[ad.Var] = None
    gate_b: Optional[ad.Var] = None

    @property
    def num_sources(self):
        if self.w_distill is None:
            return 0
        return self.w_distill.shape[0] // self.base.channels

    def fused(self):
        """Base and transfer-gate kernels concatenated so one convolution per
        input serves every gate. Hoist this out of the time loop."""
        if self.num_sources == 0:
            return self.base.w_x, self.base.w_h, self.base.b
        return (ad.concat([self.base.w_x, self.gate_w_x]),
                ad.concat([self.base.w_h, self.gate_w_h]),
                ad.concat([self.base.b, self.gate_b]))


@dataclass
class TmuStepOutput:
    state: CellState
    intermediate: ad.Var
    distilled: Optional[ad.Var]  # (B, M*C, H, W), block m is the source-m prediction
    gates: Optional[ad.Var]      # (B, M*C, H, W)
    num_sources: int

    def _split(self, v):
        if v is None:
            return []
        return np.split(v.value, self.num_sources, axis=1)

    @property
    def distilled_list(self):
        return self._split(self.distilled)

    @property
    def gates_list(self):
        return self._split(self.gates)


def _wrap_all(obj):
    for field in obj.__dataclass_fields__:
        val = getattr(obj, field)
        if val is not None and not isinstance(val, (ad.Var, ConvLstmParams)):
            setattr(obj, field, ad.constant(val))
    return obj


def layer_params(flat, prefix):
    """Build :class:`TmuParams` from a flat ``{name: Var|array}`` mapping."""
    base = _wrap_all(ConvLstmParams(*(flat[f"{prefix}.{k}"] for k in BASE_KEYS)))
    extra = {k: flat.get(f"{prefix}.{k}") for k in TRANSFER_KEYS}
    return _wrap_all(TmuParams(base, **extra))


def _check_state(x, prev):
    if x.shape[0] != prev.hidden.shape[0] or x.shape[2:] != prev.hidden.shape[2:]:
        raise ShapeError("cell input vs state (batch, H, W)",
                         (prev.hidden.shape[0],) + prev.hidden.shape[2:], (x.shape[0],) + x.shape[2:])


def _is_zero_constant(v):
    return not v.requires_grad and v.op == "zeros"


def _intermediate(x, prev, base, w_x, w_h, b):
    c = base.channels
    pre = ad.conv2d(x, w_x, b)
    if not _is_zero_constant(prev.hidden):
        pre = pre + ad.conv2d(prev.hidden, w_h)
    g = ad.tanh(ad.slice_channels(pre, 0, c))
    i = ad.sigmoid(ad.slice_channels(pre, c, 2 * c) + base.w_ci * prev.memory)
    f = ad.sigmoid(ad.slice_channels(pre, 2 * c, 3 * c) + base.w_cf * prev.memory)
    c_tilde = f * prev.memory + i * g
    return pre, c_tilde


def _output(pre, memory, base):
    c = base.channels
    o = ad.sigmoid(ad.slice_channels(pre, 3 * c, 4 * c) + base.w_co * memory)
    return CellState(o * ad.tanh(memory), memory)


def convlstm_step(x, prev, params):
    """One ConvLSTM update; the new memory is the gated intermediate memory."""
    if isinstance(params, TmuParams):
        params = params.base
    _check_state(x, prev)
    pre, c_tilde = _intermediate(x, prev, params, params.w_x, params.w_h, params.b)
    return _output(pre, c_tilde, params)


def tmu_step(x, prev, params, bank=None, fused=None):
    """One TMU update.

    ``bank`` holds the M source memories for this step and layer, either as a
    list of ``(B, C, H, W)`` arrays or pre-stacked as ``(B, M*C, H, W)``. It is
    treated as constant. ``fused`` is ``params.fused()``, passed in to avoid
    re-concatenating kernels every step.
    """
    m = params.num_sources
    base = params.base
    c = base.channels
    _check_state(x, prev)
    if fused is None:
        fused = params.fused()
    pre, c_tilde = _intermediate(x, prev, base, *fused)
    if m == 0:
        if bank is not None and len(bank) != 0:
            raise ConfigError(f"bank has {len(bank)} sources but the cell has none")
        return TmuStepOutput(_output(pre, c_tilde, base), c_tilde, None, None, 0)

    if bank is not None:
        _stack_bank(bank, m, c_tilde.shape)  # the bank itself is consumed by the loss
    distilled = ad.layer_norm(ad.conv2d(c_tilde, params.w_distill), params.ln_gain, params.ln_shift,
                              LN_EPSILON, groups=m)
    gates = ad.sigmoid(ad.slice_channels(pre, 4 * c, (4 + m) * c))
    tiled = ad.repeat_channels(c_tilde, m)
    blend = gates * distilled + (1.0 - gates) * tiled
    memory = c_tilde + ad.group_sum(blend, m)
    return TmuStepOutput(_output(pre, memory, base), c_tilde, distilled, gates, m)


def _stack_bank(bank, m, state_shape):
    if isinstance(bank, np.ndarray) and bank.ndim == 4:
        expect = (state_shape[0], m * state_shape[1]) + tuple(state_shape[2:])
        if bank.shape != expect:
            raise ShapeError("stacked memory bank", expect, bank.shape)
        return bank
    if len(bank) != m:
        raise ConfigError(f"memory bank has {len(bank)} entries, cell expects {m}")
    for mem in bank:
        mem = getattr(mem, "value", mem)
        if mem.shape != tuple(state_shape):
            raise ShapeError("memory bank entry vs cell state", state_shape, mem.shape)
    return np.concatenate([getattr(b, "value", b) for b in bank], axis=1)


def stack_bank(bank, m, state_shape):
    """Validate ``bank`` and return it as one ``(B, M*C, H, W)`` array."""
    return _stack_bank(bank, m, state_shape)


def gate_statistics(outputs):
    """Mean transfer-gate activation per source, pooled over every element,
    timestep, layer and sample in ``outputs``."""
    sums = None
    count = 0
    for out in outputs:
        if out.gates is None:
            continue
        g = out.gates.value
        per_src = g.reshape(g.shape[0], out.num_sources, -1)
        s = per_src.sum(axis=(0, 2))
        sums = s if sums is None else sums + s
        count += per_src.shape[0] * per_src.shape[2]
    if sums is None:
        raise UsageError("gate_statistics needs at least one transfer step output")
    return sums / count


# -- initialization -------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_layer(rng, prefix, in_channels, channels, filter_size, state_hw, num_sources=0):
    """Fresh parameters for one layer as ``{name: array}``.

    Convolution weights are uniform in +-sqrt(1/fan_in); biases and peephole
    weights start at zero; layer-norm gain 1, shift 0.
    """
    k, c, m = filter_size, channels, num_sources
    h, w = state_hw
    p = {
        f"{prefix}.w_x": _uniform(rng, (4 * c, in_channels, k, k), in_channels * k * k),
        f"{prefix}.w_h": _uniform(rng, (4 * c, c, k, k), c * k * k),
        f"{prefix}.b": np.zeros(4 * c),
        f"{prefix}.w_ci": np.zeros((c, h, w)),
        f"{prefix}.w_cf": np.zeros((c, h, w)),
        f"{prefix}.w_co": np.zeros((c, h, w)),
    }
    if m:
        p.update(init_transfer(rng, prefix, in_channels, channels, filter_size, m))
    return p


def init_transfer(rng, prefix, in_channels, channels, filter_size, num_sources):
    k, c, m = filter_size, channels, num_sources
    return {
        f"{prefix}.w_distill": _uniform(rng, (m * c, c, 1, 1), c),
        f"{prefix}.ln_gain": np.ones(m * c),
        f"{prefix}.ln_shift": np.zeros(m * c),
        f"{prefix}.gate_w_x": _uniform(rng, (m * c, in_channels, k, k), in_channels * k * k),
        f"{prefix}.gate_w_h": _uniform(rng, (m * c, c, k, k), c * k * k),
        f"{prefix}.gate_b": np.zeros(m * c),
    }
