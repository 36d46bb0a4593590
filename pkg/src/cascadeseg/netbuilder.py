"""WNet / TNet / ENet construction from a declarative stage schedule.

A schedule is an ordered list of stages along the main trunk:

* ``ResidualBlock(d)``: two 3x3x1 convolutions with in-plane dilation ``d``,
  each followed by batch norm and PReLU, plus an identity skip.
* ``InterSliceConv``: one 1x1x3 convolution + batch norm + PReLU.
* ``Downsample``: 2x2x1 max pooling.
* ``PredictionHead(scale)``: a 3x3x1 convolution branching off the trunk into
  ``class_count`` channels, upsampled by ``scale`` to input resolution.

The head outputs are concatenated and fused by one more 3x3x1 convolution.
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .kvfile import format_kv, parse_kv
from .tensor import Tensor, no_grad

CONFIG_VERSION = 1
NETWORK_NAMES = ("wnet", "tnet", "enet")


@dataclass(frozen=True)
class ResidualBlock:
    dilation: int = 1


@dataclass(frozen=True)
class InterSliceConv:
    pass


@dataclass(frozen=True)
class Downsample:
    pass


@dataclass(frozen=True)
class PredictionHead:
    scale: int = 1


Stage = ResidualBlock | InterSliceConv | Downsample | PredictionHead


class ConfigError(ValueError):
    """A NetworkConfig breaks one of the architecture rules."""


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    stages: tuple
    base_channels: int = 32
    class_count: int = 2
    input_channels: int = 4
    head_fusion_kernel: tuple[int, int, int] = (3, 3, 1)

    def validate(self) -> None:
        if self.name not in NETWORK_NAMES:
            raise ConfigError(f"rule 'name': {self.name!r} is not one of {NETWORK_NAMES}")
        if self.input_channels != 4:
            raise ConfigError(f"rule 'input_channels': expected 4, got {self.input_channels}")
        if self.class_count != 2:
            raise ConfigError(f"rule 'class_count': expected 2, got {self.class_count}")
        if self.base_channels < self.input_channels:
            # the first skip connection zero-pads the input up to C_o channels
            raise ConfigError(f"rule 'base_channels': must be >= {self.input_channels}, "
                              f"got {self.base_channels}")
        blocks = [s for s in self.stages if isinstance(s, ResidualBlock)]
        inter = [s for s in self.stages if isinstance(s, InterSliceConv)]
        downs = [s for s in self.stages if isinstance(s, Downsample)]
        heads = [s for s in self.stages if isinstance(s, PredictionHead)]
        if len(blocks) != 10:
            raise ConfigError(f"rule 'residual_blocks': need exactly 10, got {len(blocks)}")
        if any(b.dilation not in (1, 2, 3) for b in blocks):
            raise ConfigError("rule 'dilation': residual-block dilations must be in {1,2,3}")
        if len(inter) != 4:
            raise ConfigError(f"rule 'inter_slice_convs': need exactly 4, got {len(inter)}")
        want_down = 1 if self.name == "enet" else 2
        if len(downs) != want_down:
            raise ConfigError(f"rule 'downsamples': {self.name} needs exactly {want_down}, "
                              f"got {len(downs)}")
        if len(heads) != 3:
            raise ConfigError(f"rule 'prediction_heads': need exactly 3, got {len(heads)}")
        if tuple(self.head_fusion_kernel) != (3, 3, 1):
            raise ConfigError("rule 'head_fusion': fusion convolution must be 3x3x1")
        if not isinstance(self.stages[0], ResidualBlock):
            raise ConfigError("rule 'first_stage': the schedule must start with a residual block")
        n_down = 0
        for s in self.stages:
            if isinstance(s, Downsample):
                n_down += 1
            elif isinstance(s, PredictionHead) and s.scale != 2 ** n_down:
                raise ConfigError(f"rule 'head_scale': head after {n_down} downsamples "
                                  f"must upsample by {2 ** n_down}, got {s.scale}")
            elif not isinstance(s, (ResidualBlock, InterSliceConv, PredictionHead)):
                raise ConfigError(f"rule 'stage_type': unknown stage {s!r}")

    @property
    def downsample_count(self) -> int:
        return sum(isinstance(s, Downsample) for s in self.stages)

    def replace(self, **kw) -> NetworkConfig:
        return dataclasses.replace(self, **kw)


def _canonical_stages(name: str) -> tuple:
    R, I, D = ResidualBlock, InterSliceConv(), Downsample()
    if name in ("wnet", "tnet"):
        return (R(1), R(1), I, D,
                R(1), R(1), I, D,
                R(1), R(1), PredictionHead(4), I,
                R(2), R(2), PredictionHead(4), I,
                R(3), R(3), PredictionHead(4))
    if name == "enet":
        return (R(1), R(1), I, D,
                R(1), R(1), I,
                R(2), R(2), PredictionHead(2), I,
                R(3), R(3), PredictionHead(2), I,
                R(1), R(1), PredictionHead(2))
    raise ConfigError(f"no canonical schedule for {name!r}")


def canonical_config(name: str, base_channels: int = 32, class_count: int = 2) -> NetworkConfig:
    cfg = NetworkConfig(name=name, stages=_canonical_stages(name),
                        base_channels=base_channels, class_count=class_count)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- text format

def _stage_token(s) -> str:
    if isinstance(s, ResidualBlock):
        return f"block d={s.dilation}"
    if isinstance(s, InterSliceConv):
        return "interslice"
    if isinstance(s, Downsample):
        return "downsample"
    if isinstance(s, PredictionHead):
        return f"head scale={s.scale}"
    raise ConfigError(f"unknown stage {s!r}")


def _parse_stage(token: str):
    parts = token.split()
    kind, args = parts[0], dict(p.split("=", 1) for p in parts[1:])
    if kind == "block":
        return ResidualBlock(int(args.get("d", 1)))
    if kind == "interslice":
        return InterSliceConv()
    if kind == "downsample":
        return Downsample()
    if kind == "head":
        return PredictionHead(int(args.get("scale", 1)))
    raise ConfigError(f"unknown stage token {token!r}")


def config_to_text(cfg: NetworkConfig) -> str:
    pairs = [("version", CONFIG_VERSION), ("name", cfg.name),
             ("input_channels", cfg.input_channels), ("base_channels", cfg.base_channels),
             ("class_count", cfg.class_count),
             ("head_fusion", "x".join(map(str, cfg.head_fusion_kernel)))]
    pairs += [(f"stage.{i:02d}", _stage_token(s)) for i, s in enumerate(cfg.stages)]
    return format_kv(pairs)


def config_from_text(text: str) -> NetworkConfig:
    kv = parse_kv(text)
    version = int(kv.get("version", -1))
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported network config version {version}")
    stage_keys = sorted(k for k in kv if k.startswith("stage."))
    if stage_keys:
        stages = tuple(_parse_stage(kv[k]) for k in stage_keys)
    else:
        stages = _canonical_stages(kv["name"])
    cfg = NetworkConfig(
        name=kv["name"], stages=stages,
        base_channels=int(kv.get("base_channels", 32)),
        class_count=int(kv.get("class_count", 2)),
        input_channels=int(kv.get("input_channels", 4)),
        head_fusion_kernel=tuple(int(v) for v in kv.get("head_fusion", "3x3x1").split("x")))
    cfg.validate()
    return cfg


def load_config(path) -> NetworkConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------ receptive field

def _trunk_layers(cfg: NetworkConfig, through_head: bool):
    """(kernel, dilation, stride) per layer on the path to the deepest head."""
    out = []
    last_head = max(i for i, s in enumerate(cfg.stages) if isinstance(s, PredictionHead))
    for s in cfg.stages[:last_head]:
        if isinstance(s, ResidualBlock):
            out += [((3, 3, 1), (s.dilation, s.dilation, 1), (1, 1, 1))] * 2
        elif isinstance(s, InterSliceConv):
            out.append(((1, 1, 3), (1, 1, 1), (1, 1, 1)))
        elif isinstance(s, Downsample):
            out.append(((2, 2, 1), (1, 1, 1), (2, 2, 1)))
    if through_head:
        out.append(((3, 3, 1), (1, 1, 1), (1, 1, 1)))
        scale = cfg.stages[last_head].scale
        # undo the trunk stride before the fusion convolution
        out.append(("upsample", scale))
        out.append((tuple(cfg.head_fusion_kernel), (1, 1, 1), (1, 1, 1)))
    return out


def receptive_field(cfg: NetworkConfig, through_head: bool = False) -> tuple[int, int, int]:
    """Theoretical receptive field per axis along the deepest path.

    Each layer adds ``(k - 1) * d * j`` where ``j`` is the product of the
    strides of all preceding layers. The default path runs from the input to
    the output of the deepest residual block (the features feeding the last
    prediction head), counting the pooling windows. With ``through_head`` the
    head convolution and the final fusion convolution are included as well;
    the bilinear upsampling between them contributes no extent.
    """
    rf = [1, 1, 1]
    jump = [1, 1, 1]
    for layer in _trunk_layers(cfg, through_head):
        if layer[0] == "upsample":
            jump = [max(1, j // f) for j, f in zip(jump, (layer[1], layer[1], 1))]
            continue
        k, d, s = layer
        for a in range(3):
            rf[a] += (k[a] - 1) * d[a] * jump[a]
            jump[a] *= s[a]
    return tuple(rf)


# ------------------------------------------------------------------- network

def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class _ConvUnit:
    prefix: str
    spec: L.KernelSpec
    norm: bool  # batch norm + PReLU after the convolution


class Network:
    """Executable network: named parameters, batch-norm states and the schedule."""

    def __init__(self, config: NetworkConfig, params: "OrderedDict[str, Tensor]",
                 bn_states: "OrderedDict[str, L.BatchNormState]", plan: list):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self._plan = plan

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters followed by batch-norm running statistics, by name."""
        out = OrderedDict((k, p.data) for k, p in self.params.items())
        for k, st in self.bn_states.items():
            out[f"{k}.running_mean"] = st.running_mean
            out[f"{k}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays) -> None:
        expected = set(self.params) | {f"{k}.running_{s}" for k in self.bn_states
                                      for s in ("mean", "var")}
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, "
                           f"unexpected {sorted(extra)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.zero_grad()
        for k, st in self.bn_states.items():
            st.running_mean = np.array(arrays[f"{k}.running_mean"], dtype=self.dtype)
            st.running_var = np.array(arrays[f"{k}.running_var"], dtype=self.dtype)

    def _conv_unit(self, x: Tensor, unit: _ConvUnit, mode: str) -> Tensor:
        p = self.params
        y = L.conv_aniso(x, p[f"{unit.prefix}.weight"], p.get(f"{unit.prefix}.bias"), unit.spec)
        if unit.norm:
            y = L.bn_prelu(y, p[f"{unit.prefix}.bn.gamma"], p[f"{unit.prefix}.bn.beta"],
                           p[f"{unit.prefix}.prelu"], self.bn_states[f"{unit.prefix}.bn"], mode)
        return y

    def forward(self, x: Tensor | np.ndarray, mode: str = "infer",
                ablate_head: int | None = None) -> Tensor:
        """Logits (B, class_count, X, Y, Z) for an input (B, 4, X, Y, Z).

        ``ablate_head`` zeroes the contribution of one prediction head (probe
        for tests).
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 5 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"{self.config.name}: expected input (B, "
                             f"{self.config.input_channels}, X, Y, Z), got {x.shape}")
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        X, Y = x.shape[2], x.shape[3]
        mult = 2 ** self.config.downsample_count
        px, py = (-X) % mult, (-Y) % mult
        h = L.pad_inplane(x, px, py)
        heads = []
        for step in self._plan:
            kind = step[0]
            if kind == "block":
                _, c1, c2, width = step
                skip = L.pad_channels(h, width) if h.shape[1] < width else h
                b = self._conv_unit(h, c1, mode)
                b = self._conv_unit(b, c2, mode)
                h = L.add_residual(skip, b)
            elif kind == "inter":
                h = self._conv_unit(h, step[1], mode)
            elif kind == "down":
                h = L.downsample2d(h)
            elif kind == "head":
                _, unit, scale = step
                y = self._conv_unit(h, unit, mode)
                y = L.upsample2d(y, scale)
                if ablate_head is not None and len(heads) == ablate_head:
                    y = L.scale_tensor(y, 0.0)
                heads.append(y)
        fused = L.concat_channels(heads)
        p = self.params
        logits = L.conv_aniso(fused, p["fuse.weight"], p["fuse.bias"],
                              L.KernelSpec(tuple(self.config.head_fusion_kernel)))
        return L.crop_inplane(logits, X, Y)

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Softmax probabilities in infer mode without recording a graph."""
        with no_grad():
            return L.softmax_channels(self.forward(x, mode="infer")).data


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Instantiate parameters for ``config`` (He fan-in normal init)."""
    config.validate()
    rng = np.random.Generator(np.random.Philox(seed))
    params: OrderedDict[str, Tensor] = OrderedDict()
    bn_states: OrderedDict[str, L.BatchNormState] = OrderedDict()
    Co, Cl = config.base_channels, config.class_count

    def add_conv(prefix, spec, cin, cout, norm):
        k = spec.extent
        fan_in = cin * k[0] * k[1] * k[2]
        params[f"{prefix}.weight"] = Tensor(_he_normal(rng, (cout, cin, *k), fan_in, dtype),
                                            requires_grad=True, name=f"{prefix}.weight")
        if not norm:
            # a bias in front of batch norm is cancelled by the mean subtraction
            params[f"{prefix}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True,
                                              name=f"{prefix}.bias")
        else:
            params[f"{prefix}.bn.gamma"] = Tensor(np.ones(cout, dtype), requires_grad=True,
                                                  name=f"{prefix}.bn.gamma")
            params[f"{prefix}.bn.beta"] = Tensor(np.zeros(cout, dtype), requires_grad=True,
                                                 name=f"{prefix}.bn.beta")
            params[f"{prefix}.prelu"] = Tensor(np.full(cout, L.PRELU_INIT, dtype),
                                               requires_grad=True, name=f"{prefix}.prelu")
            bn_states[f"{prefix}.bn"] = L.BatchNormState.initialized(cout, dtype)
        return _ConvUnit(prefix, spec, norm)

    plan = []
    width = config.input_channels
    nb = ni = nh = 0
    for s in config.stages:
        if isinstance(s, ResidualBlock):
            nb += 1
            spec = L.KernelSpec.intra_slice(s.dilation)
            c1 = add_conv(f"block{nb}.conv1", spec, width, Co, True)
            c2 = add_conv(f"block{nb}.conv2", spec, Co, Co, True)
            plan.append(("block", c1, c2, Co))
            width = Co
        elif isinstance(s, InterSliceConv):
            ni += 1
            plan.append(("inter", add_conv(f"inter{ni}", L.KernelSpec.inter_slice(),
                                           width, Co, True)))
            width = Co
        elif isinstance(s, Downsample):
            plan.append(("down",))
        elif isinstance(s, PredictionHead):
            nh += 1
            unit = add_conv(f"head{nh}", L.KernelSpec.intra_slice(1), width, Cl, False)
            plan.append(("head", unit, s.scale))
    add_conv("fuse", L.KernelSpec(tuple(config.head_fusion_kernel)), Cl * nh, Cl, False)
    return Network(config, params, bn_states, plan)
