"""Function approximators: convolutional encoder, embodiment fusion with a
bias-transform variable, action encoder, one-step latent dynamics, and the
reactive / autoregressive imitation baselines. All are built from autodiff
primitives so the planner can differentiate through them, twice.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad

PIXEL_SCALE = 1.0 / 255.0
LATENT_DIM = 128
ACTION_ENC_DIM = 64
BIAS_TRANSFORM_UNITS = 20
BIAS_TRANSFORM_INIT = 0.1

# conv stack as (out_channels, kernel, stride); valid padding, swish after
# each conv, layer norm only on the fully connected layers
CONV_STACK = ((32, 8, 4), (64, 4, 2), (64, 3, 1), (16, 2, 1))
# reduced 42x42 preset: first conv rescaled (8,4) -> (4,2); NOT a canonical
# configuration, it exists so desk-scale runs stay cheap
CONV_STACK_42 = ((32, 4, 2), (64, 4, 2), (64, 3, 1), (16, 2, 1))
FC_WIDTHS = (128, 128)

# compact variant for desk-scale training budgets: same topology, narrower
# everywhere; also NOT canonical
COMPACT_CONV = ((16, 8, 4), (32, 4, 2), (32, 3, 1), (8, 2, 1))
COMPACT_CONV_42 = ((16, 4, 2), (32, 4, 2), (32, 3, 1), (8, 2, 1))
COMPACT_FC = (64, 64)
COMPACT_LATENT = 64
COMPACT_ACTION_ENC = 32


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_hw: tuple = (84, 84)
    in_channels: int = 3
    conv: tuple = CONV_STACK
    fc: tuple = FC_WIDTHS
    latent_dim: int = LATENT_DIM

    def conv_output_hw(self) -> tuple:
        h, w = self.image_hw
        for _, k, s in self.conv:
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if h <= 0 or w <= 0:
                raise ConfigError(f"conv stack does not fit image {self.image_hw}")
        return h, w

    def flat_dim(self) -> int:
        h, w = self.conv_output_hw()
        return h * w * self.conv[-1][0]

    @staticmethod
    def for_image(size: int, in_channels: int = 3) -> "EncoderConfig":
        conv = CONV_STACK_42 if size < 64 else CONV_STACK
        return EncoderConfig(image_hw=(size, size), in_channels=in_channels, conv=conv)

    @staticmethod
    def compact(size: int, in_channels: int = 3) -> "EncoderConfig":
        conv = COMPACT_CONV_42 if size < 64 else COMPACT_CONV
        return EncoderConfig(image_hw=(size, size), in_channels=in_channels,
                             conv=conv, fc=COMPACT_FC, latent_dim=COMPACT_LATENT)


@dataclass(frozen=True)
class DynamicsConfig:
    latent_dim: int = LATENT_DIM
    action_enc_dim: int = ACTION_ENC_DIM


@dataclass(frozen=True)
class NetConfig:
    """Full shape description of one trainable model."""
    kind: str = "upn"  # upn | ril | ail
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    action_dim: int = 2
    embodiment_dim: int = 4
    bias_units: int = BIAS_TRANSFORM_UNITS
    hidden: int = 128  # baseline head / recurrent width

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        enc = d["encoder"]
        enc = EncoderConfig(image_hw=tuple(enc["image_hw"]),
                            in_channels=enc["in_channels"],
                            conv=tuple(tuple(c) for c in enc["conv"]),
                            fc=tuple(enc["fc"]),
                            latent_dim=enc["latent_dim"])
        dyn = DynamicsConfig(**d["dynamics"])
        return NetConfig(kind=d["kind"], encoder=enc, dynamics=dyn,
                         action_dim=d["action_dim"],
                         embodiment_dim=d["embodiment_dim"],
                         bias_units=d["bias_units"], hidden=d["hidden"])


class ParameterSet(dict):
    """Named map of weight tensors. Keys are unique by construction; values
    are autodiff leaf tensors. Checkpoint round-trips are bit-exact."""

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self:
            raise ValueError(f"duplicate parameter {name}")
        self[name] = ad.Tensor(value)

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet()
        for k, v in self.items():
            out[k] = ad.Tensor(v.data.astype(dtype))
        return out

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for k, v in self.items():
            out[k] = ad.Tensor(v.data.copy())
        return out

    def tensors(self):
        return list(self.values())


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _add_linear(p, rng, name, din, dout, dtype):
    p.add(f"{name}.w", _uniform(rng, (din, dout), din, dtype))
    p.add(f"{name}.b", np.zeros(dout, dtype=dtype))


def _add_layer_norm(p, name, dim, dtype):
    p.add(f"{name}.g", np.ones(dim, dtype=dtype))
    p.add(f"{name}.s", np.zeros(dim, dtype=dtype))


def _add_encoder(p, rng, cfg: EncoderConfig, prefix, dtype, in_channels=None):
    cin = in_channels if in_channels is not None else cfg.in_channels
    for i, (cout, k, _) in enumerate(cfg.conv):
        p.add(f"{prefix}.conv{i}.w", _uniform(rng, (k, k, cin, cout), k * k * cin, dtype))
        p.add(f"{prefix}.conv{i}.b", np.zeros(cout, dtype=dtype))
        cin = cout
    din = cfg.flat_dim()
    for i, width in enumerate(cfg.fc):
        _add_linear(p, rng, f"{prefix}.fc{i}", din, width, dtype)
        _add_layer_norm(p, f"{prefix}.ln{i}", width, dtype)
        din = width


def _linear(p, name, x):
    return ad.affine(x, p[f"{name}.w"], p[f"{name}.b"])


def _layer_norm(p, name, x):
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.s"])


def _encoder_forward(p, cfg: EncoderConfig, prefix, obs):
    if obs.shape[1:3] != tuple(cfg.image_hw):
        raise ConfigError(f"encoder expects {cfg.image_hw} images, got {obs.shape}")
    h = ad.scale(obs, PIXEL_SCALE)
    for i, (cout, k, s) in enumerate(cfg.conv):
        h = ad.conv2d(h, p[f"{prefix}.conv{i}.w"], stride=s)
        h = ad.add(h, ad.broadcast_to(p[f"{prefix}.conv{i}.b"], h.shape))
        h = ad.swish(h)
    h = h.reshape(h.shape[0], cfg.flat_dim())
    for i in range(len(cfg.fc)):
        h = ad.swish(_layer_norm(p, f"{prefix}.ln{i}", _linear(p, f"{prefix}.fc{i}", h)))
    return h


def as_obs_tensor(obs) -> ad.Tensor:
    """Raw pixel batch (N,H,W,C) in [0,255] as a float tensor; a single image
    gets a batch axis."""
    if isinstance(obs, ad.Tensor):
        return obs
    arr = np.asarray(obs, dtype=ad.get_default_dtype())
    if arr.ndim == 3:
        arr = arr[None]
    return ad.Tensor(arr)


class PlannerNets:
    """The planner's networks: tied image encoder, embodiment fusion with a
    trainable bias-transform vector, action encoder, and one-step latent
    dynamics. Parameters are read-only during evaluation."""

    kind = "upn"

    def __init__(self, config: NetConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @staticmethod
    def init(config: NetConfig, rng: np.random.Generator,
             dtype=None) -> "PlannerNets":
        dtype = dtype or ad.get_default_dtype()
        cfg = config.encoder
        p = ParameterSet()
        _add_encoder(p, rng, cfg, "enc", dtype)
        fuse_in = cfg.latent_dim + config.embodiment_dim + config.bias_units
        _add_linear(p, rng, "fuse.fc", fuse_in, cfg.latent_dim, dtype)
        _add_layer_norm(p, "fuse.ln", cfg.latent_dim, dtype)
        p.add("bias_transform",
              np.full(config.bias_units, BIAS_TRANSFORM_INIT, dtype=dtype))
        _add_linear(p, rng, "act.fc", config.action_dim,
                    config.dynamics.action_enc_dim, dtype)
        _add_layer_norm(p, "act.ln", config.dynamics.action_enc_dim, dtype)
        dyn_in = cfg.latent_dim + config.dynamics.action_enc_dim
        _add_linear(p, rng, "dyn.fc", dyn_in, cfg.latent_dim, dtype)
        _add_layer_norm(p, "dyn.ln", cfg.latent_dim, dtype)
        return PlannerNets(config, p)

    def encode(self, obs) -> ad.Tensor:
        """Latent vector of an observation batch; used identically for
        current and goal images (tied weights)."""
        return _encoder_forward(self.params, self.config.encoder, "enc",
                                as_obs_tensor(obs))

    def fuse_embodiment(self, x: ad.Tensor, q: ad.Tensor) -> ad.Tensor:
        """Initial rollout state: concat(x, q, tiled bias transform), then
        project back to the latent width."""
        if q.shape != (x.shape[0], self.config.embodiment_dim):
            raise ConfigError(f"embodiment shape {q.shape} does not match "
                              f"configured dim {self.config.embodiment_dim}")
        b = ad.broadcast_to(self.params["bias_transform"],
                            (x.shape[0], self.config.bias_units))
        h = ad.concat([x, q, b], axis=1)
        return ad.swish(_layer_norm(self.params, "fuse.ln",
                                    _linear(self.params, "fuse.fc", h)))

    def encode_actions(self, actions: ad.Tensor) -> ad.Tensor:
        """(B,H,action_dim) -> (B,H,U) action encodings."""
        bsz, horizon, adim = actions.shape
        flat = actions.reshape(bsz * horizon, adim)
        u = ad.swish(_layer_norm(self.params, "act.ln",
                                 _linear(self.params, "act.fc", flat)))
        return u.reshape(bsz, horizon, self.config.dynamics.action_enc_dim)

    def dynamics_step(self, x: ad.Tensor, u: ad.Tensor) -> ad.Tensor:
        h = ad.concat([x, u], axis=1)
        return ad.swish(_layer_norm(self.params, "dyn.ln",
                                    _linear(self.params, "dyn.fc", h)))


class ReactiveNets:
    """Reactive baseline: one action from channel-stacked current and goal
    images fused with the embodiment vector."""

    kind = "ril"

    def __init__(self, config: NetConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @staticmethod
    def init(config: NetConfig, rng: np.random.Generator, dtype=None) -> "ReactiveNets":
        dtype = dtype or ad.get_default_dtype()
        cfg = config.encoder
        p = ParameterSet()
        _add_encoder(p, rng, cfg, "enc", dtype, in_channels=2 * cfg.in_channels)
        din = cfg.latent_dim + config.embodiment_dim
        for i in range(2):
            _add_linear(p, rng, f"head.fc{i}", din, config.hidden, dtype)
            _add_layer_norm(p, f"head.ln{i}", config.hidden, dtype)
            din = config.hidden
        _add_linear(p, rng, "head.out", din, config.action_dim, dtype)
        return ReactiveNets(config, p)

    def encode_pair(self, obs_t, obs_g) -> ad.Tensor:
        stacked = ad.concat([as_obs_tensor(obs_t), as_obs_tensor(obs_g)], axis=3)
        return _encoder_forward(self.params, self.config.encoder, "enc", stacked)

    def forward(self, obs_t, obs_g, q: ad.Tensor) -> ad.Tensor:
        h = ad.concat([self.encode_pair(obs_t, obs_g), q], axis=1)
        for i in range(2):
            h = ad.swish(_layer_norm(self.params, f"head.ln{i}",
                                     _linear(self.params, f"head.fc{i}", h)))
        return _linear(self.params, "head.out", h)


class AutoregressiveNets:
    """Autoregressive baseline: a vanilla recurrent cell unrolled over the
    horizon, hidden state initialized from the encoded (current, goal,
    embodiment) triple, one linear action decoder per step."""

    kind = "ail"

    def __init__(self, config: NetConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @staticmethod
    def init(config: NetConfig, rng: np.random.Generator, dtype=None) -> "AutoregressiveNets":
        dtype = dtype or ad.get_default_dtype()
        cfg = config.encoder
        hid = config.hidden
        p = ParameterSet()
        _add_encoder(p, rng, cfg, "enc", dtype, in_channels=2 * cfg.in_channels)
        _add_linear(p, rng, "init.fc", cfg.latent_dim + config.embodiment_dim, hid, dtype)
        _add_layer_norm(p, "init.ln", hid, dtype)
        p.add("rnn.wh", _uniform(rng, (hid, hid), hid, dtype))
        p.add("rnn.wx", _uniform(rng, (hid, hid), hid, dtype))
        p.add("rnn.b", np.zeros(hid, dtype=dtype))
        _add_linear(p, rng, "out", hid, config.action_dim, dtype)
        return AutoregressiveNets(config, p)

    def forward(self, obs_t, obs_g, q: ad.Tensor, horizon: int) -> ad.Tensor:
        """(B, horizon, action_dim) action sequence."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        p = self.params
        stacked = ad.concat([as_obs_tensor(obs_t), as_obs_tensor(obs_g)], axis=3)
        x = _encoder_forward(p, self.config.encoder, "enc", stacked)
        h = ad.swish(_layer_norm(p, "init.ln",
                                 _linear(p, "init.fc", ad.concat([x, q], axis=1))))
        drive = ad.matmul(h, p["rnn.wx"])  # constant conditioning input
        bias = ad.broadcast_to(p["rnn.b"], drive.shape)
        steps = []
        for _ in range(horizon):
            h = ad.tanh(ad.add(ad.add(ad.matmul(h, p["rnn.wh"]), drive), bias))
            a = _linear(p, "out", h)
            steps.append(a.reshape(a.shape[0], 1, self.config.action_dim))
        return ad.concat(steps, axis=1)


MODEL_CLASSES = {"upn": PlannerNets, "ril": ReactiveNets, "ail": AutoregressiveNets}


def init_model(config: NetConfig, rng: np.random.Generator, dtype=None):
    return MODEL_CLASSES[config.kind].init(config, rng, dtype)


def make_net_config(kind: str, image_size: int, action_dim: int,
                    embodiment_dim: int, arch: str = "canonical") -> NetConfig:
    """Shape description for a model; ``canonical`` is the full-scale stack,
    ``compact`` a narrower desk-scale variant."""
    if arch == "canonical":
        return NetConfig(kind=kind, encoder=EncoderConfig.for_image(image_size),
                         action_dim=action_dim, embodiment_dim=embodiment_dim)
    if arch == "compact":
        return NetConfig(
            kind=kind, encoder=EncoderConfig.compact(image_size),
            dynamics=DynamicsConfig(latent_dim=COMPACT_LATENT,
                                    action_enc_dim=COMPACT_ACTION_ENC),
            action_dim=action_dim, embodiment_dim=embodiment_dim,
            hidden=COMPACT_FC[0])
    raise ValueError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all integers little-endian):
#   bytes 0..7   magic "LPCK0001"
#   bytes 8..11  u32 header length
#   header       UTF-8 JSON: format version, model config, extra metadata,
#                and a record list of {name, shape, dtype} in file order
#   payload      raw array bytes per record, in record-list order
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LPCK0001"


def save_checkpoint(path, params: ParameterSet, config: NetConfig | None = None,
                    extra: dict | None = None,
                    state: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (and optional optimizer/runtime arrays) to ``path``.
    Round-trips are bit-exact; byte layout is stable for fixed content."""
    records = [("p/" + k, v.data) for k, v in params.items()]
    for k, v in (state or {}).items():
        records.append(("s/" + k, np.asarray(v)))
    header = {
        "format_version": 1,
        "config": config.to_dict() if config is not None else None,
        "extra": extra or {},
        "records": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.name}
                    for n, a in records],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in records:
            f.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Return (header dict, ParameterSet, state dict of plain arrays)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        params = ParameterSet()
        state = {}
        for rec in header["records"]:
            arr = np.frombuffer(f.read(int(np.prod(rec["shape"], dtype=np.int64))
                                       * np.dtype(rec["dtype"]).itemsize),
                                dtype=rec["dtype"]).reshape(rec["shape"]).copy()
            name = rec["name"]
            if name.startswith("p/"):
                params.add(name[2:], arr)
            else:
                state[name[2:]] = arr
    return header, params, state


def load_model(path):
    """Rebuild the trained model stored at ``path``."""
    header, params, _ = load_checkpoint(path)
    if header["config"] is None:
        raise ValueError(f"{path}: checkpoint has no model config")
    config = NetConfig.from_dict(header["config"])
    return MODEL_CLASSES[config.kind](config, params)
