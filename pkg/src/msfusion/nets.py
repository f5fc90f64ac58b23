"""Network architectures: the multi-stage fusion model and its baselines.

Every architecture is a stack of branches made of ResNet-style basic
blocks. ``ModelConfig.strategy`` selects how the CT and PET branches
interact:

``multistage``     one fusion block per stage, then concat -> pool -> head
``unimodal_ct``    CT branch only
``unimodal_pet``   PET branch only
``early``          one branch fed the voxelwise CT*PET product
``late``           two independent unimodal networks, probabilities averaged
``single_fusion``  two branches pooled to vectors and merged once by a gated unit
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import (
    BatchNormState,
    ConvParams,
    Tensor,
    add,
    batchnorm3d,
    concat,
    conv3d,
    global_avg_pool,
    linear,
    mul,
    no_grad,
    relu,
    scale_shift,
    sigmoid,
    softmax,
    tanh,
)
from .errors import ConfigError, FormatError

STRATEGIES = ("multistage", "unimodal_ct", "unimodal_pet", "early", "late", "single_fusion")


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 3
    blocks_per_stage: int = 3
    base_channels: int = 16
    input_shape: tuple[int, int, int] = (32, 64, 64)
    strategy: str = "multistage"
    seed: int = 0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.stages <= 5:
            raise ConfigError(f"stages must lie in [1, 5], got {self.stages}")
        if not 1 <= self.blocks_per_stage <= 5:
            raise ConfigError(f"blocks_per_stage must lie in [1, 5], got {self.blocks_per_stage}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (D, H, W), got {self.input_shape}")
        factor = 2 ** self.stages
        if any(n < factor or n % factor for n in self.input_shape):
            raise ConfigError(f"input_shape {self.input_shape} must be divisible by 2**stages = {factor}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**known)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **changes})

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**s for s in range(self.stages)]


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.in_channels != self.out_channels:
            raise ConfigError("a stride-1 block keeps its channel count")


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Ordered container of parameters, buffers and child modules.

    Registration order is construction order, which fixes the parameter
    registry order used by checkpoints.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_inits", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, shape, init: str, fan_in: int = 1) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = t
        self._inits[name] = (init, fan_in)
        object.__setattr__(self, name, t)
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Parameters and buffers interleaved in topology order."""
        for name, p in self._params.items():
            yield prefix + name, p.data
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_state(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
            if isinstance(m, BatchNorm3d):
                m.state.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so initial values do not depend on construction order
    return np.random.default_rng([seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(name.encode())])


def initialize(module: Module, seed: int) -> None:
    """He-normal weights, unit BN scale, zero shifts and biases."""
    def walk(m: Module, prefix: str) -> None:
        for name, p in m._params.items():
            kind, fan_in = m._inits[name]
            if kind == "he":
                std = np.sqrt(2.0 / fan_in)
                p.data[...] = (_param_rng(seed, prefix + name).standard_normal(p.shape) * std).astype(np.float32)
            elif kind == "ones":
                p.data[...] = 1.0
            else:
                p.data[...] = 0.0
        for cname, child in m._children.items():
            walk(child, f"{prefix}{cname}.")

    walk(module, "")


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.add_param("weight", (cout, cin, kernel, kernel, kernel), "he", cin * kernel**3)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, ConvParams(self.weight, None, self.stride, self.padding))


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float, eps: float):
        super().__init__()
        gamma = self.add_param("gamma", (channels,), "ones")
        beta = self.add_param("beta", (channels,), "zeros")
        self.state = BatchNormState(
            gamma, beta, np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum, eps
        )
        self.add_buffer("running_mean", self.state.running_mean)
        self.add_buffer("running_var", self.state.running_var)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm3d(x, self.state)


class Linear(Module):
    def __init__(self, fin: int, fout: int):
        super().__init__()
        self.add_param("weight", (fout, fin), "he", fin)
        self.add_param("bias", (fout,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class BasicBlock(Module):
    """conv3-BN-ReLU-conv3-BN on the main path, conv1-BN projection on the other, sum, ReLU."""

    main_path_depth = 2  # trainable layers a signal crosses on the main path

    def __init__(self, spec: BlockSpec, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.spec = spec
        cin, cout, s = spec.in_channels, spec.out_channels, spec.stride
        self.conv1 = Conv3d(cin, cout, 3, stride=s, padding=1)
        self.bn1 = BatchNorm3d(cout, momentum, eps)
        self.conv2 = Conv3d(cout, cout, 3, stride=1, padding=1)
        self.bn2 = BatchNorm3d(cout, momentum, eps)
        self.proj = Conv3d(cin, cout, 1, stride=s, padding=0)
        self.bn_proj = BatchNorm3d(cout, momentum, eps)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ConfigError(f"block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        main = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        side = self.bn_proj(self.proj(x))
        return relu(add(main, side))


def basic_block_forward(x: Tensor, spec: BlockSpec, block: BasicBlock) -> Tensor:
    if block.spec != spec:
        raise ConfigError(f"block built for {block.spec}, called with {spec}")
    return block(x)


class FusionBlock(Module):
    """Squeeze each modality to one map, multiply the maps, add the product back to both."""

    squeeze_depth = 1

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.squeeze_ct = Conv3d(channels, 1, 1)
        self.bn_ct = BatchNorm3d(1, momentum, eps)
        self.squeeze_pet = Conv3d(channels, 1, 1)
        self.bn_pet = BatchNorm3d(1, momentum, eps)

    def __call__(self, ct: Tensor, pet: Tensor) -> tuple[Tensor, Tensor]:
        if ct.shape != pet.shape:
            raise ConfigError(f"fusion inputs differ in shape: {ct.shape} vs {pet.shape}")
        fused = mul(self.bn_ct(self.squeeze_ct(ct)), self.bn_pet(self.squeeze_pet(pet)))
        return add(ct, fused), add(pet, fused)


def fusion_block_forward(ct_in: Tensor, pet_in: Tensor, block: FusionBlock) -> tuple[Tensor, Tensor]:
    return block(ct_in, pet_in)


class Stage(Module):
    def __init__(self, specs: list[BlockSpec], momentum: float, eps: float):
        super().__init__()
        self.blocks = []
        for i, spec in enumerate(specs):
            blk = BasicBlock(spec, momentum, eps)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Branch(Module):
    """L stages of N basic blocks; each stage entry strides by 2."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 1):
        super().__init__()
        self.stages = []
        cin = in_channels
        for s, cout in enumerate(cfg.stage_channels()):
            specs = [BlockSpec(cin, cout, 2)] + [BlockSpec(cout, cout, 1)] * (cfg.blocks_per_stage - 1)
            stage = Stage(specs, cfg.bn_momentum, cfg.bn_eps)
            setattr(self, f"stage{s}", stage)
            self.stages.append(stage)
            cin = cout
        self.out_channels = cin

    def __call__(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


class GatedUnit(Module):
    """h = z*tanh(W1 v1) + (1-z)*tanh(W2 v2), z = sigmoid(Wz [v1; v2])."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.proj_ct = Linear(dim, hidden)
        self.proj_pet = Linear(dim, hidden)
        self.gate = Linear(2 * dim, hidden)

    def __call__(self, v1: Tensor, v2: Tensor) -> Tensor:
        h1 = tanh(self.proj_ct(v1))
        h2 = tanh(self.proj_pet(v2))
        z = sigmoid(self.gate(concat([v1, v2], axis=1)))
        return add(mul(z, h1), mul(scale_shift(z, -1.0, 1.0), h2))


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class FusionTrace:
    """Records fusion events while a forward pass runs.

    Each stream (``ct``/``pet``) remembers the last event it came from and
    how many trainable main-path layers it has crossed since.
    """

    def __init__(self):
        self.events: list[dict] = []
        self.source = {"ct": "x1", "pet": "x2"}
        self.depth = {"ct": 0, "pet": 0}

    def advance(self, stream: str, layers: int) -> None:
        self.depth[stream] += layers

    def _emit(self, op: str, inputs: list[tuple[object, int]]) -> int:
        j = len(self.events) + 1
        self.events.append({"j": j, "op": op, "inputs": [{"src": s, "depth": d} for s, d in inputs]})
        return j

    def fusion(self, squeeze_depth: int) -> None:
        ct = (self.source["ct"], self.depth["ct"])
        pet = (self.source["pet"], self.depth["pet"])
        m = self._emit("multiply", [(ct[0], ct[1] + squeeze_depth), (pet[0], pet[1] + squeeze_depth)])
        a_ct = self._emit("add", [ct, (m, 0)])
        a_pet = self._emit("add", [pet, (m, 0)])
        self.source = {"ct": a_ct, "pet": a_pet}
        self.depth = {"ct": 0, "pet": 0}

    def concat(self) -> None:
        self._emit("concat", [(self.source["ct"], self.depth["ct"]), (self.source["pet"], self.depth["pet"])])


class Network(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion_enabled = True
        st = cfg.strategy
        if st in ("unimodal_ct", "unimodal_pet", "early"):
            self.branch = Branch(cfg)
            self.head = Linear(self.branch.out_channels, 2)
        elif st == "late":
            uni = cfg.replace(strategy="unimodal_ct")
            self.ct = Network(uni)
            self.pet = Network(cfg.replace(strategy="unimodal_pet"))
        else:
            self.ct_branch = Branch(cfg)
            self.pet_branch = Branch(cfg)
            c = self.ct_branch.out_channels
            if st == "multistage":
                self.fusions = []
                for s, ch in enumerate(cfg.stage_channels()):
                    fb = FusionBlock(ch, cfg.bn_momentum, cfg.bn_eps)
                    setattr(self, f"fusion{s}", fb)
                    self.fusions.append(fb)
                self.head = Linear(2 * c, 2)
            else:
                self.gmu = GatedUnit(c, c)
                self.head = Linear(c, 2)

    @property
    def strategy(self) -> str:
        return self.cfg.strategy

    def _check_input(self, x: Tensor | None, what: str) -> Tensor:
        if x is None:
            raise ConfigError(f"strategy {self.strategy!r} needs the {what} volume")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim == 4:
            x = Tensor(x.data[:, None], dtype=x.dtype)
        expected = (1,) + self.cfg.input_shape
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ConfigError(f"{what} input must be B x {expected}, got {x.shape}")
        return x

    def latent(self, ct: Tensor | None, pet: Tensor | None, trace: FusionTrace | None = None) -> Tensor:
        """Feature maps entering the head (before pooling), for multistage/single-stream nets."""
        st = self.strategy
        if st in ("unimodal_ct", "unimodal_pet", "early"):
            if st == "early":
                x = mul(self._check_input(ct, "CT"), self._check_input(pet, "PET"))
            else:
                x = self._check_input(ct if st == "unimodal_ct" else pet, st.split("_")[1].upper())
            return self.branch(x)
        if st != "multistage":
            raise ConfigError(f"latent maps are undefined for strategy {st!r}")
        c = self._check_input(ct, "CT")
        p = self._check_input(pet, "PET")
        for s in range(self.cfg.stages):
            c = self.ct_branch.stages[s](c)
            p = self.pet_branch.stages[s](p)
            if trace is not None:
                per_block = BasicBlock.main_path_depth * len(self.ct_branch.stages[s].blocks)
                trace.advance("ct", per_block)
                trace.advance("pet", per_block)
            if self.fusion_enabled:
                c, p = self.fusions[s](c, p)
                if trace is not None:
                    trace.fusion(FusionBlock.squeeze_depth)
        if trace is not None:
            trace.concat()
        return concat([c, p], axis=1)

    def branch_logits(self, ct, pet) -> tuple[Tensor, Tensor]:
        """Logits of the two independent sub-networks of a late-fusion model."""
        if self.strategy != "late":
            raise ConfigError("branch_logits is only defined for late fusion")
        return self.ct.forward(ct, None), self.pet.forward(None, pet)

    def forward(self, ct=None, pet=None) -> Tensor:
        st = self.strategy
        if st == "late":
            l_ct, l_pet = self.branch_logits(ct, pet)
            avg = 0.5 * (softmax(l_ct.data.astype(np.float64)) + softmax(l_pet.data.astype(np.float64)))
            return Tensor(np.log(np.maximum(avg, 1e-300)).astype(np.float32))
        if st == "single_fusion":
            c = global_avg_pool(self.ct_branch(self._check_input(ct, "CT")))
            p = global_avg_pool(self.pet_branch(self._check_input(pet, "PET")))
            return self.head(self.gmu(c, p))
        return self.head(global_avg_pool(self.latent(ct, pet)))

    __call__ = forward

    def trace_fusions(self) -> list[dict]:
        """Run one inference pass on a blank input and return the fusion events it performed."""
        if self.strategy != "multistage":
            raise ConfigError(f"fusion tracing needs a multistage network, got {self.strategy!r}")
        was_training = self.training
        self.eval()
        trace = FusionTrace()
        blank = np.zeros((1, 1) + self.cfg.input_shape, dtype=np.float32)
        try:
            with no_grad():
                self.latent(Tensor(blank), Tensor(blank), trace)
        finally:
            self.train(was_training)
        return trace.events


def build_network(cfg: ModelConfig) -> Network:
    cfg.validate()
    net = Network(cfg)
    initialize(net, cfg.seed)
    return net


def forward_classify(net: Network, ct, pet=None) -> Tensor:
    """Batch x 2 logits. For late fusion these are log averaged probabilities."""
    return net.forward(ct, pet)


def parameter_count(net: Module) -> int:
    return int(sum(p.size for p in net.parameters()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FNET"
CHECKPOINT_VERSION = 1


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def checkpoint_bytes(net: Network) -> bytes:
    cfg = json.dumps(net.cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    state = [np.ascontiguousarray(a, dtype="<f4").reshape(-1) for _, a in net.named_state()]
    flat = np.concatenate(state) if state else np.zeros(0, "<f4")
    body = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<II", CHECKPOINT_VERSION, len(cfg)),
            cfg,
            struct.pack("<Q", flat.size),
            flat.tobytes(),
        ]
    )
    return body + struct.pack("<Q", _checksum(body))


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def network_from_bytes(buf: bytes) -> Network:
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a network checkpoint (bad magic)", 0)
    if len(buf) < 12 + 8:
        raise FormatError("checkpoint header truncated", len(buf))
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 12
    if off + cfg_len + 8 > len(buf):
        raise FormatError("checkpoint config truncated", off)
    try:
        cfg = ModelConfig.from_dict(json.loads(buf[off:off + cfg_len].decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad checkpoint config: {exc}", off) from exc
    off += cfg_len
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    end = off + 4 * count
    if end + 8 > len(buf):
        raise FormatError(f"checkpoint payload truncated: need {4 * count} bytes", off)
    (stored,) = struct.unpack_from("<Q", buf, end)
    if stored != _checksum(buf[:end]):
        raise FormatError("checkpoint checksum mismatch", end)
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    net = Network(cfg)
    pos = 0
    for name, arr in net.named_state():
        n = arr.size
        if pos + n > count:
            raise FormatError(f"checkpoint has too few values for {name}", off + 4 * pos)
        arr[...] = flat[pos:pos + n].reshape(arr.shape)
        pos += n
    if pos != count:
        raise FormatError(f"checkpoint has {count - pos} unexpected trailing values", off + 4 * pos)
    return net


def load_checkpoint(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
