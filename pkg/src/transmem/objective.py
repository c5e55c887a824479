"""Distillation loss and the joint unsupervised training objective."""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


class MemoryBank:
    """Frozen source memories, indexed by step, layer and source.

    Stored per (step, layer) as one ``(B, M*C, H, W)`` array whose channel
    block m belongs to source m.
    """

    def __init__(self, stacked, num_sources):
        self._stacked = stacked
        self.num_sources = num_sources

    @classmethod
    def from_sources(cls, per_source, steps, layers):
        """``per_source[m][s][k]`` -> bank. With no sources the bank is empty."""
        if not per_source:
            return cls([[None] * layers for _ in range(steps)], 0)
        for m, mems in enumerate(per_source):
            if len(mems) != steps or any(len(row) != layers for row in mems):
                raise ShapeError(f"memories of source {m} (steps, layers)", (steps, layers),
                                 (len(mems), len(mems[0]) if mems else 0))
        stacked = [[np.concatenate([src[s][k] for src in per_source], axis=1) for k in range(layers)]
                   for s in range(steps)]
        return cls(stacked, len(per_source))

    @property
    def steps(self):
        return len(self._stacked)

    @property
    def layers(self):
        return len(self._stacked[0]) if self._stacked else 0

    def stacked(self, step, layer):
        return self._stacked[step][layer]

    def memory(self, step, layer, source):
        """``C`` of one source at one step and layer, ``(B, C, H, W)``."""
        a = self._stacked[step][layer]
        return np.split(a, self.num_sources, axis=1)[source]


def distill_loss(records, bank):
    """Per-layer distillation losses as scalar ``Var``.

    Each is the squared distance between distilled and source memories,
    summed over sources, timesteps and elements and averaged over the batch.
    """
    if bank.num_sources == 0:
        return []
    if len(records) != bank.steps:
        raise ShapeError("distillation steps vs bank", (bank.steps,), (len(records),))
    layers = len(records[0])
    if layers != bank.layers:
        raise ShapeError("distillation layers vs bank", (bank.layers,), (layers,))
    losses = []
    for k in range(layers):
        terms = []
        for s, step in enumerate(records):
            out = step[k]
            if out.distilled is None or out.num_sources != bank.num_sources:
                raise ShapeError("distilled sources vs bank", (bank.num_sources,), (out.num_sources,))
            terms.append(ad.squared_error(out.distilled, ad.constant(bank.stacked(s, k))))
        losses.append(ad.add_n(terms))
    return losses


def prediction_loss(predictions, frames):
    """Squared error of next-frame predictions for frames ``1..T-1`` (0-based),
    summed over time and pixels, averaged over the batch."""
    terms = [ad.squared_error(p, ad.constant(frames[:, s + 1])) for s, p in enumerate(predictions)]
    return ad.add_n(terms)


@dataclass
class LossReport:
    prediction_loss: float
    distill_loss: list = field(default_factory=list)
    beta: float = 0.0
    total: float = 0.0

    @property
    def distill_total(self):
        return float(sum(self.distill_loss))

    def as_fields(self):
        out = {"loss": self.total, "pred": self.prediction_loss}
        if self.distill_loss:
            out["beta"] = self.beta
            out["distill"] = self.distill_total
            for k, v in enumerate(self.distill_loss):
                out[f"distill_l{k}"] = v
        return out

    def log_line(self):
        return " ".join(f"{k}={v!r}" for k, v in self.as_fields().items())


def final_loss(predictions, frames, records=None, bank=None, beta=0.1):
    """Prediction loss plus ``beta`` times the sum of per-layer distillation
    losses. Returns ``(total Var, LossReport)``."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    pred = prediction_loss(predictions, frames)
    distill = distill_loss(records, bank) if bank is not None and bank.num_sources else []
    if distill:
        total = pred + ad.scale(ad.add_n(distill), beta)
    else:
        total = pred
    report = LossReport(float(pred.value), [float(d.value) for d in distill], float(beta), float(total.value))
    return total, report


def combine(prediction, distill, beta):
    """Scalar form of the objective, for reports built from plain numbers."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    return LossReport(float(prediction), [float(d) for d in distill], float(beta),
                      float(prediction + beta * sum(distill)))
