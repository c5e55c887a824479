"""Binary checkpoint format.

Layout (little-endian)::

    "TMUC" | u32 version | str config-json
    u32 n | n x (str name, tensor blob)
    u8 has_optimizer [| str adam-json | u32 n | n x (str name, blob m, blob v)]
    str rng-json

``str`` is a u32 byte length followed by UTF-8. JSON is written with sorted
keys, so save -> load -> save reproduces the same bytes.
"""
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .datasets import _get_str, _put_str, atomic_write
from .errors import FormatError
from .optim import AdamState

CHECKPOINT_MAGIC = b"TMUC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    optimizer: AdamState = None
    rng_state: dict = None
    extra_tensors: dict = field(default_factory=dict)  # e.g. "current/<name>" for resuming

    @property
    def kind(self):
        return self.config.get("kind", "tmu")

    def model_params(self):
        return dict(self.tensors)

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        _put_str(buf, json.dumps(self.config, sort_keys=True))
        named = {**self.tensors, **{f"+{k}": v for k, v in self.extra_tensors.items()}}
        buf.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            _put_str(buf, name)
            tc.write_tensor(buf, named[name])
        if self.optimizer is None:
            buf.write(b"\x00")
        else:
            buf.write(b"\x01")
            _put_str(buf, json.dumps(self.optimizer.hyper(), sort_keys=True))
            names = sorted(self.optimizer.m)
            buf.write(struct.pack("<I", len(names)))
            for name in names:
                _put_str(buf, name)
                tc.write_tensor(buf, self.optimizer.m[name])
                tc.write_tensor(buf, self.optimizer.v[name])
        _put_str(buf, "" if self.rng_state is None else json.dumps(self.rng_state, sort_keys=True))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        buf = io.BytesIO(data)
        magic = tc._read_exact(buf, 4, "checkpoint header")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r} (expected {CHECKPOINT_MAGIC!r} for a checkpoint)")
        (version,) = struct.unpack("<I", tc._read_exact(buf, 4, "checkpoint header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version {version} does not match reader version {CHECKPOINT_VERSION}")
        config = json.loads(_get_str(buf, "config"))
        (n,) = struct.unpack("<I", tc._read_exact(buf, 4, "tensor count"))
        tensors, extra = {}, {}
        for _ in range(n):
            name = _get_str(buf, "tensor name")
            t = tc.read_tensor(buf)
            if name.startswith("+"):
                extra[name[1:]] = t
            else:
                tensors[name] = t
        optimizer = None
        flag = tc._read_exact(buf, 1, "optimizer flag")
        if flag == b"\x01":
            hyper = json.loads(_get_str(buf, "optimizer"))
            (n,) = struct.unpack("<I", tc._read_exact(buf, 4, "moment count"))
            m, v = {}, {}
            for _ in range(n):
                name = _get_str(buf, "moment name")
                m[name] = tc.read_tensor(buf)
                v[name] = tc.read_tensor(buf)
            optimizer = AdamState(hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"], hyper["step"], m, v)
        elif flag != b"\x00":
            raise FormatError(f"bad optimizer flag {flag!r}")
        rng_raw = _get_str(buf, "rng state")
        if buf.read(1):
            raise FormatError("trailing bytes after checkpoint")
        return cls(config, tensors, optimizer, json.loads(rng_raw) if rng_raw else None, extra)

    def save(self, path):
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def params_digest(params):
    """SHA-256 over the serialized tensors, in name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(tc.tensor_to_bytes(params[name]))
    return h.hexdigest()


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def rng_state_to_json(rng):
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": [int(i) for i in x.ravel()], "dtype": str(x.dtype), "shape": list(x.shape)}
        if isinstance(x, np.integer):
            return int(x)
        return x
    return conv(rng.bit_generator.state)


def rng_from_json(state):
    def conv(x):
        if isinstance(x, dict) and "__array__" in x:
            return np.array(x["__array__"], dtype=x["dtype"]).reshape(x["shape"])
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    st = conv(state)
    bitgen = getattr(np.random, st["bit_generator"])()
    bitgen.state = st
    return np.random.Generator(bitgen)
