"""Feature extractor, decoder, aggregation/embedding layers and the classifier head.

Two size presets are provided: ``paper`` (224 px input, 56x56x1024 feature
maps) and ``desk`` (112 px input, small widths) for CPU training.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nncore import Parameter, Tensor, ops
from .nncore.layers import BatchNorm2d, Conv2d, ConvBN, DeConv2d, Module, _fan_in_uniform
from .nncore.tensor import DEFAULT_DTYPE

COMPONENTS = ("F", "D", "phi", "phi_tilde", "head")
TEST_COMPONENTS = ("F", "phi_tilde")


@dataclass(frozen=True)
class NetConfig:
    name: str
    input_size: int
    stem_channels: int
    stage_mid_channels: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int]
    embed_channels: int
    num_classes: int
    decode_size: int
    decoder_channels: int = 64
    heatmap_raw_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stage_mid_channels", tuple(self.stage_mid_channels))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        problems = []
        if self.input_size % 4:
            problems.append("input_size must be divisible by 4")
        if len(self.stage_mid_channels) != 4 or len(self.stage_depths) != 4:
            problems.append("exactly four stages are required")
        if any(d < 1 for d in self.stage_depths) or any(c < 1 for c in self.stage_mid_channels):
            problems.append("stage depths and widths must be positive")
        if self.decode_size != 2 * self.feature_size:
            problems.append(f"decode_size must be twice the feature map size ({2 * self.feature_size})")
        if self.num_classes < 2 or self.embed_channels < 1 or self.decoder_channels < 1:
            problems.append("num_classes >= 2, embed_channels >= 1, decoder_channels >= 1 required")
        if problems:
            raise ValueError(f"invalid NetConfig {self.name!r}: " + "; ".join(problems))

    @property
    def feature_size(self) -> int:
        return self.input_size // 4

    @property
    def feature_channels(self) -> int:
        return 4 * self.stage_mid_channels[-1]

    def replace(self, **changes) -> "NetConfig":
        data = asdict(self)
        data.update(changes)
        return NetConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)


PAPER = NetConfig("paper", 224, 64, (32, 64, 128, 256), (3, 4, 6, 3), 512, 8631, 112,
                  decoder_channels=64, heatmap_raw_size=64)
DESK = NetConfig("desk", 112, 16, (8, 16, 32, 64), (1, 1, 1, 1), 128, 20, 56,
                 decoder_channels=16, heatmap_raw_size=32)
PRESETS = {"paper": PAPER, "desk": DESK}


def get_config(name: str, **overrides) -> NetConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model config {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


# --------------------------------------------------------------------------
# building blocks


@dataclass(frozen=True)
class BottleneckSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    projection: bool = field(default=False)


class Bottleneck(Module):
    """1x1 -> 3x3 -> 1x1 residual unit, stride 1 throughout."""

    def __init__(self, spec: BottleneckSpec, rng):
        super().__init__()
        self.spec = spec
        s = spec
        self.conv1 = ConvBN(s.in_channels, s.mid_channels, 1, rng=rng)
        self.conv2 = ConvBN(s.mid_channels, s.mid_channels, 3, s.stride, 1, rng=rng)
        self.conv3 = ConvBN(s.mid_channels, s.out_channels, 1, relu=False, rng=rng)
        self.shortcut = (ConvBN(s.in_channels, s.out_channels, 1, s.stride, relu=False, rng=rng)
                         if s.projection else None)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv3(self.conv2(self.conv1(x)))
        sc = self.shortcut(x) if self.shortcut is not None else x
        return ops.relu(ops.add(y, sc))


class BasicBlock(Module):
    def __init__(self, c: int, rng):
        super().__init__()
        self.conv1 = ConvBN(c, c, 3, 1, 1, rng=rng)
        self.conv2 = ConvBN(c, c, 3, 1, 1, relu=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(ops.add(self.conv2(self.conv1(x)), x))


def stage_specs(cfg: NetConfig) -> list[list[BottleneckSpec]]:
    specs, cin = [], cfg.stem_channels
    for mid, depth in zip(cfg.stage_mid_channels, cfg.stage_depths):
        out = 4 * mid
        blocks = [BottleneckSpec(cin, mid, out, 1, projection=cin != out)]
        blocks += [BottleneckSpec(out, mid, out, 1, False) for _ in range(depth - 1)]
        specs.append(blocks)
        cin = out
    return specs


class FeatureExtractor(Module):
    """Modified ResNet-50: halved widths, stride-1 bottlenecks (F)."""

    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        self.stem = ConvBN(3, cfg.stem_channels, 7, 2, 3, rng=rng)
        self.stages = [[Bottleneck(s, rng) for s in stage] for stage in stage_specs(cfg)]
        self.blocks = [b for stage in self.stages for b in stage]
        del self.stages

    def forward(self, x: Tensor) -> Tensor:
        y = ops.maxpool2d(self.stem(x), 3, 2, 1)
        for block in self.blocks:
            y = block(y)
        return y


class Decoder(Module):
    """conv 3x3 + BN/ReLU, 2x deconv + BN/ReLU, three basic blocks, conv 3x3 -> 3, tanh (D)."""

    def __init__(self, cin: int, c: int, rng):
        super().__init__()
        self.conv_in = ConvBN(cin, c, 3, 1, 1, rng=rng)
        self.deconv = DeConv2d(c, c, 3, 2, 1, 1, rng=rng)
        self.deconv_bn = BatchNorm2d(c)
        self.res = [BasicBlock(c, rng) for _ in range(3)]
        self.conv_out = Conv2d(c, 3, 3, 1, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv_in(x)
        y = ops.relu(self.deconv_bn(self.deconv(y)))
        for block in self.res:
            y = block(y)
        return ops.tanh(self.conv_out(y))


class ClassifierHead(Module):
    """Fully connected layer: logits = g Q + b."""

    def __init__(self, embed: int, classes: int, rng):
        super().__init__()
        self.Q = Parameter(_fan_in_uniform(rng, (embed, classes), embed), "Q")
        self.b = Parameter(np.zeros(classes, DEFAULT_DTYPE), "b")

    def forward(self, g: Tensor) -> Tensor:
        return ops.linear(g, self.Q, self.b)


class ModelBundle(Module):
    """All trainable sub-networks. Components may be ``None`` (e.g. a test-time subset)."""

    def __init__(self, cfg: NetConfig, F=None, D=None, phi=None, phi_tilde=None, head=None):
        super().__init__()
        self.config = cfg
        self.F = F
        self.D = D
        self.phi = phi
        self.phi_tilde = phi_tilde
        self.head = head

    def component(self, name: str) -> Optional[Module]:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)

    def present(self) -> tuple[str, ...]:
        return tuple(c for c in COMPONENTS if getattr(self, c) is not None)


def build(cfg: NetConfig, rng=None, components=COMPONENTS) -> ModelBundle:
    """Construct a bundle; parameters are drawn from ``rng`` in a fixed order."""
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(0 if rng is None else int(rng))
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    fc = cfg.feature_channels
    parts = {
        "F": lambda: FeatureExtractor(cfg, rng),
        "D": lambda: Decoder(cfg.embed_channels, cfg.decoder_channels, rng),
        "phi": lambda: ConvBN(fc + 3, cfg.embed_channels, 1, relu=False, rng=rng),
        "phi_tilde": lambda: ConvBN(fc, cfg.embed_channels, 1, relu=True, rng=rng),
        "head": lambda: ClassifierHead(cfg.embed_channels, cfg.num_classes, rng),
    }
    # always consume the rng for every component so subsets match full builds
    built = {name: make() for name, make in parts.items()}
    bundle = ModelBundle(cfg, **{k: (v if k in components else None) for k, v in built.items()})
    for name, p in bundle.named_parameters():
        p.name = name
    return bundle


# published per-component counts for the full-size configuration
REFERENCE_COUNTS = {
    "paper": {"F": 5_902_528, "D": 555_712, "phi_tilde": 525_312, "phi": 526_848,
              "head": 4_427_703, "test_total": 6_427_840},
}


def count_parameters(bundle: ModelBundle) -> dict[str, int]:
    """Trainable parameter counts per component plus the test-time subtotal."""
    counts = {name: (bundle.component(name).num_parameters() if bundle.component(name) else 0)
              for name in COMPONENTS}
    counts["test_total"] = counts["F"] + counts["phi_tilde"]
    counts["train_total"] = int(sum(counts[c] for c in COMPONENTS))
    return counts


# --------------------------------------------------------------------------
# forward paths


def forward_train(bundle: ModelBundle, x_r, h_S, decode: bool = True, aggregate: bool = True) -> dict:
    """Full training-time forward pass.

    ``aggregate=False`` skips the aggregation branch (and therefore the
    decoder); ``decode=False`` skips only the decoder. Skipped entries are
    ``None``.
    """
    x_r = x_r if isinstance(x_r, Tensor) else Tensor(x_r)
    h_F = bundle.F(x_r)
    out = {"h_F": h_F, "h_C": None, "agg": None, "g_agg": None, "x_recon": None}
    if aggregate:
        h_S = h_S if isinstance(h_S, Tensor) else Tensor(np.asarray(h_S, dtype=h_F.dtype))
        if h_S.shape[0] != h_F.shape[0] or h_S.shape[2:] != h_F.shape[2:]:
            raise ValueError(f"heatmaps {h_S.shape} not aligned with feature maps {h_F.shape}")
        h_C = ops.concat_channels([h_S, h_F])
        agg = bundle.phi(h_C)
        out.update(h_C=h_C, agg=agg, g_agg=ops.global_avg_pool(agg))
        if decode:
            out["x_recon"] = bundle.D(agg)
    emb = bundle.phi_tilde(h_F)
    g_emb = ops.global_avg_pool(emb)
    out.update(emb=emb, g_emb=g_emb, logits=bundle.head(g_emb))
    return out


def forward_infer(bundle: ModelBundle, x) -> np.ndarray:
    """Test-time feature: GAP of the embedding applied to F(x). Touches F and phi_tilde only."""
    from .nncore import no_tape

    F, phi_tilde = bundle.F, bundle.phi_tilde
    x = x if isinstance(x, Tensor) else Tensor(x)
    with no_tape():
        return ops.global_avg_pool(phi_tilde(F(x))).data


# --------------------------------------------------------------------------
# checkpoint format

MAGIC = b"FSGFA1"
KIND_PARAM, KIND_BUFFER, KIND_MOMENTUM = 0, 1, 2
_META_TAG = b"META"


def _write_array(buf, kind: int, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<BI", kind, len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def state_arrays(bundle: ModelBundle, components=None) -> list[tuple[int, str, np.ndarray]]:
    comps = bundle.present() if components is None else components
    entries = []
    for comp in comps:
        module = bundle.component(comp)
        if module is None:
            raise ValueError(f"component {comp!r} absent from bundle")
        for name, p in module.named_parameters(f"{comp}."):
            entries.append((KIND_PARAM, name, p.data))
        for name, b in module.named_buffers(f"{comp}."):
            entries.append((KIND_BUFFER, name, b))
    return entries


def write_checkpoint(path, bundle: ModelBundle, components=None, momentum: Optional[dict] = None,
                     meta: Optional[dict] = None):
    """Serialize parameters, BN buffers, optional momentum buffers and metadata."""
    comps = bundle.present() if components is None else tuple(components)
    entries = state_arrays(bundle, comps)
    for name, v in (momentum or {}).items():
        entries.append((KIND_MOMENTUM, name, v))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(entries)))
    for kind, name, arr in entries:
        _write_array(buf, kind, name, arr)
    info = dict(meta or {})
    info["config"] = bundle.config.to_dict()
    info["components"] = list(comps)
    blob = json.dumps(info, sort_keys=True).encode("utf-8")
    buf.write(_META_TAG + struct.pack("<Q", len(blob)) + blob)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"checkpoint {self.path} truncated at byte {len(self.data)} "
                             f"(needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[list[tuple[int, str, np.ndarray]], dict]:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = r.unpack("<Q")
    entries = []
    for _ in range(count):
        kind, nlen = r.unpack("<BI")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        entries.append((kind, name, arr))
    if r.take(len(_META_TAG)) != _META_TAG:
        raise ValueError(f"{path}: missing metadata section")
    (mlen,) = r.unpack("<Q")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    if r.pos != len(data):
        raise ValueError(f"{path}: {len(data) - r.pos} trailing bytes after metadata")
    return entries, meta


def load_bundle(path) -> tuple[ModelBundle, dict, dict]:
    """Rebuild a bundle from a checkpoint, with only the components it contains.

    Returns (bundle, momentum buffers, metadata).
    """
    entries, meta = read_checkpoint(path)
    cfg = NetConfig(**meta["config"])
    bundle = build(cfg, 0, components=tuple(meta["components"]))
    params = dict(bundle.named_parameters())
    owners = {}
    for comp in bundle.present():
        for m_name, module in _named_modules(bundle.component(comp), f"{comp}."):
            for key in getattr(module, "_buffers", ()):
                owners[m_name + key] = (module, key)
    momentum = {}
    seen = set()
    for kind, name, arr in entries:
        if kind == KIND_PARAM:
            if name not in params or params[name].shape != arr.shape:
                raise ValueError(f"{path}: parameter {name} {arr.shape} does not fit the model")
            params[name].data = arr.copy()
            seen.add(name)
        elif kind == KIND_BUFFER:
            if name not in owners:
                raise ValueError(f"{path}: buffer {name} does not fit the model")
            module, key = owners[name]
            setattr(module, key, arr.copy())
        elif kind == KIND_MOMENTUM:
            momentum[name] = arr.copy()
        else:
            raise ValueError(f"{path}: unknown entry kind {kind}")
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)[:5]}")
    return bundle, momentum, meta


def _named_modules(module: Module, prefix: str):
    yield prefix, module
    for key, val in vars(module).items():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{key}.")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{key}.{i}.")
