"""YOLOv8 graph description, FCE insertion methods, execution and weight I/O.

A :class:`GraphSpec` is a declarative node list; :class:`Model` instantiates
weights for it and runs the forward pass.  Cost accounting works from the
GraphSpec alone (see :mod:`fceyolo.cost`).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import functional as F
from .fce import FCE_KINDS, make_fce
from .nn import C2f, ConvBNSiLU, Detect, Module, SPPF
from .tensor import Tensor, concat, dump_bytes, load_bytes

FCE_CHOICES = ("none",) + FCE_KINDS
METHODS = ("M1", "M2", "M3")
STRIDES = (8, 16, 32)


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class ScaleSpec:
    name: str
    depth: float
    width: float
    max_channels: int

    def channels(self, c: int) -> int:
        return int(math.ceil(min(c, self.max_channels) * self.width / 8) * 8)

    def repeats(self, n: int) -> int:
        return max(round(n * self.depth), 1) if n > 1 else n


SCALES = {
    "S": ScaleSpec("S", 0.33, 0.50, 1024),
    "M": ScaleSpec("M", 0.67, 0.75, 768),
    "L": ScaleSpec("L", 1.00, 1.00, 512),
}


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "L"
    num_classes: int = 9
    fce_kind: str = "none"
    method: str = "M1"
    fce_params: dict = field(default_factory=dict, hash=False)
    reg_max: int = 16
    cls_prior: float = 0.01
    dfl_decay: float = 1.0

    def __post_init__(self):
        if isinstance(self.scale, ScaleSpec):
            object.__setattr__(self, "scale", self.scale.name)
        if self.scale not in SCALES:
            raise ConfigError(f"unknown scale {self.scale!r}; expected one of {tuple(SCALES)}")
        if self.fce_kind not in FCE_CHOICES:
            raise ConfigError(f"unknown FCE kind {self.fce_kind!r}; expected one of {FCE_CHOICES}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.reg_max < 1:
            raise ConfigError("reg_max must be >= 1")
        if not 0 < self.cls_prior < 1:
            raise ConfigError("cls_prior must lie in (0, 1)")
        if self.dfl_decay < 0:
            raise ConfigError("dfl_decay must be >= 0")

    @property
    def scale_spec(self) -> ScaleSpec:
        return SCALES[self.scale]

    @property
    def label(self) -> str:
        if self.fce_kind == "none":
            return f"YOLOv8-{self.scale}"
        return f"{self.fce_kind}-{self.method}-{self.scale}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Node:
    index: int
    name: str
    kind: str
    inputs: list  # producer indices, -1 is the image
    in_channels: list
    out_channels: int
    stride: int
    params: dict = field(default_factory=dict)


@dataclass
class GraphSpec:
    config: ModelConfig
    nodes: list

    @property
    def outputs(self) -> list:
        return self.detect.inputs

    @property
    def detect(self) -> Node:
        return next(n for n in self.nodes if n.kind == "Detect")

    def fce_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == "FCE"]

    def find(self, kind: str) -> list:
        return [n for n in self.nodes if n.kind == kind]


class _Builder:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.nodes: list[Node] = []

    def channels_of(self, i: int) -> int:
        return 3 if i == -1 else self.nodes[i].out_channels

    def stride_of(self, i: int) -> int:
        return 1 if i == -1 else self.nodes[i].stride

    def add(self, kind: str, inputs: list, out_channels: int, stride_mult: float = 1, **params) -> int:
        idx = len(self.nodes)
        stride = int(self.stride_of(inputs[0]) * stride_mult)
        self.nodes.append(Node(
            idx, f"{idx}.{kind}", kind, list(inputs),
            [self.channels_of(i) for i in inputs], out_channels, stride, params,
        ))
        return idx

    def conv(self, src, c2, k=3, s=2):
        return self.add("ConvBNSiLU", [src], c2, s, k=k, s=s)

    def c2f(self, src, c2, n, shortcut):
        return self.add("C2f", [src], c2, n=n, shortcut=shortcut)

    def fce(self, src):
        c = self.channels_of(src)
        return self.add("FCE", [src], c, fce_kind=self.cfg.fce_kind, **self.cfg.fce_params)


def build_model(cfg: ModelConfig) -> GraphSpec:
    """Standard YOLOv8 topology with FCE nodes placed per the insertion method.

    M1: one block after SPPF.  M2: one block after the last head C2f (P5 path).
    M3: one block after each of the four head C2f modules.
    """
    sc = cfg.scale_spec
    ch, rep = sc.channels, sc.repeats
    use = cfg.fce_kind != "none"
    m = cfg.method
    b = _Builder(cfg)

    x = b.conv(-1, ch(64))
    x = b.conv(x, ch(128))
    x = b.c2f(x, ch(128), rep(3), True)
    x = b.conv(x, ch(256))
    p3 = b.c2f(x, ch(256), rep(6), True)
    x = b.conv(p3, ch(512))
    p4 = b.c2f(x, ch(512), rep(6), True)
    x = b.conv(p4, ch(1024))
    x = b.c2f(x, ch(1024), rep(3), True)
    p5 = b.add("SPPF", [x], ch(1024), k=5)
    if use and m == "M1":
        p5 = b.fce(p5)

    head_fce = use and m == "M3"
    x = b.add("Upsample", [p5], b.channels_of(p5), 0.5, scale=2)
    x = b.add("Concat", [x, p4], b.channels_of(x) + b.channels_of(p4), 1)
    h4 = b.c2f(x, ch(512), rep(3), False)
    if head_fce:
        h4 = b.fce(h4)
    x = b.add("Upsample", [h4], b.channels_of(h4), 0.5, scale=2)
    x = b.add("Concat", [x, p3], b.channels_of(x) + b.channels_of(p3), 1)
    o3 = b.c2f(x, ch(256), rep(3), False)
    if head_fce:
        o3 = b.fce(o3)
    x = b.conv(o3, ch(256))
    x = b.add("Concat", [x, h4], b.channels_of(x) + b.channels_of(h4), 1)
    o4 = b.c2f(x, ch(512), rep(3), False)
    if head_fce:
        o4 = b.fce(o4)
    x = b.conv(o4, ch(512))
    x = b.add("Concat", [x, p5], b.channels_of(x) + b.channels_of(p5), 1)
    o5 = b.c2f(x, ch(1024), rep(3), False)
    if use and m in ("M2", "M3"):
        o5 = b.fce(o5)

    b.add(
        "Detect", [o3, o4, o5], 4 * cfg.reg_max + cfg.num_classes,
        nc=cfg.num_classes, reg_max=cfg.reg_max, cls_prior=cfg.cls_prior, dfl_decay=cfg.dfl_decay,
    )
    graph = GraphSpec(cfg, b.nodes)
    validate(graph)
    return graph


def validate(graph: GraphSpec) -> None:
    """Check acyclicity and channel bookkeeping; raise ConfigError on failure."""
    nodes = graph.nodes
    for n in nodes:
        if any(i >= n.index or i < -1 for i in n.inputs):
            raise ConfigError(f"{n.name}: inputs {n.inputs} break topological order")
        got = [3 if i == -1 else nodes[i].out_channels for i in n.inputs]
        if got != n.in_channels:
            raise ConfigError(f"{n.name}: declared inputs {n.in_channels} != producers {got}")
        if n.kind == "Concat" and n.out_channels != sum(n.in_channels):
            raise ConfigError(f"{n.name}: concat output {n.out_channels} != {sum(n.in_channels)}")
        if n.kind in ("FCE", "Upsample") and n.out_channels != n.in_channels[0]:
            raise ConfigError(f"{n.name}: {n.kind} must preserve channels")
        if n.kind == "Concat" and len({nodes[i].stride for i in n.inputs}) != 1:
            raise ConfigError(f"{n.name}: concat inputs at different strides")
    detects = [n for n in nodes if n.kind == "Detect"]
    if len(detects) != 1 or len(detects[0].inputs) != 3:
        raise ConfigError("graph must end in one Detect node with three inputs")
    strides = tuple(nodes[i].stride for i in detects[0].inputs)
    if strides != STRIDES:
        raise ConfigError(f"detect inputs at strides {strides}, expected {STRIDES}")


# ------------------------------------------------------------------ execution


class _Passthrough(Module):
    def __init__(self, fn):
        self.fn = fn

    def forward(self, *xs):
        return self.fn(*xs)


def _make_layer(node: Node, rng: np.random.Generator) -> Module:
    p = node.params
    c1 = node.in_channels[0]
    if node.kind == "ConvBNSiLU":
        return ConvBNSiLU(c1, node.out_channels, p["k"], p["s"], rng=rng)
    if node.kind == "C2f":
        return C2f(c1, node.out_channels, p["n"], p["shortcut"], rng=rng)
    if node.kind == "SPPF":
        return SPPF(c1, node.out_channels, p["k"], rng=rng)
    if node.kind == "FCE":
        hyper = {k: v for k, v in p.items() if k != "fce_kind"}
        return make_fce(p["fce_kind"], c1, rng=rng, **hyper)
    if node.kind == "Upsample":
        return _Passthrough(lambda x: F.upsample_nearest(x, p["scale"]))
    if node.kind == "Concat":
        return _Passthrough(lambda *xs: concat(list(xs), axis=1))
    if node.kind == "Detect":
        return Detect(p["nc"], node.in_channels, p["reg_max"], p["cls_prior"], p["dfl_decay"], rng=rng)
    raise ConfigError(f"unknown node kind {node.kind!r}")


class Model(Module):
    """A GraphSpec with instantiated weights."""

    def __init__(self, graph: GraphSpec, seed: int = 0):
        self.graph = graph
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers = [_make_layer(n, rng) for n in graph.nodes]

    @property
    def config(self) -> ModelConfig:
        return self.graph.config

    def forward(self, images: Tensor) -> list:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {images.shape}")
        h, w = images.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} is not divisible by 32")
        outs: list = []
        for node, layer in zip(self.graph.nodes, self.layers):
            xs = [images if i == -1 else outs[i] for i in node.inputs]
            outs.append(layer(xs) if node.kind == "Detect" else layer(*xs))
        return outs[-1]

    def fce_layers(self) -> list:
        return [l for n, l in zip(self.graph.nodes, self.layers) if n.kind == "FCE"]


def forward(model: Model, images: Tensor) -> list:
    return model(images)


def create_model(cfg: Union[ModelConfig, None] = None, seed: int = 0, **kwargs) -> Model:
    cfg = cfg or ModelConfig(**kwargs)
    return Model(build_model(cfg), seed=seed)


# ------------------------------------------------------------------ weight I/O

MANIFEST = "manifest.json"
PARAMS_FILE = "params.bin"
BUFFERS_FILE = "buffers.bin"


def save_weights(model: Model, directory: Union[str, Path]) -> Path:
    """Write params.bin / buffers.bin (tensor-dump records) plus a JSON manifest.

    params.bin holds exactly the learnable scalars, in ``named_parameters`` order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"config": model.config.to_dict(), "seed": model.seed, "params": [], "buffers": []}
    for fname, key, items in (
        (PARAMS_FILE, "params", [(k, v.data) for k, v in model.named_parameters()]),
        (BUFFERS_FILE, "buffers", list(model.named_buffers())),
    ):
        blob = bytearray()
        for name, arr in items:
            manifest[key].append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
            blob += dump_bytes(arr)
        (d / fname).write_bytes(bytes(blob))
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return d


def load_weights(directory: Union[str, Path]) -> Model:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    model = create_model(ModelConfig(**manifest["config"]), seed=manifest["seed"])
    params = dict(model.named_parameters())
    owners = _buffer_owners(model)
    for fname, key in ((PARAMS_FILE, "params"), (BUFFERS_FILE, "buffers")):
        blob = (d / fname).read_bytes()
        for entry in manifest[key]:
            arr, _ = load_bytes(blob, entry["offset"])
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"{entry['name']}: shape {arr.shape} != manifest {entry['shape']}")
            if key == "params":
                params[entry["name"]].data = arr
            else:
                owner, attr = owners[entry["name"]]
                setattr(owner, attr, arr)
    return model


def _buffer_owners(model: Module, prefix: str = "") -> dict:
    out = {}
    for k, v in vars(model).items():
        if isinstance(v, np.ndarray):
            out[prefix + k] = (model, k)
    for k, m in model._children():
        out.update(_buffer_owners(m, f"{prefix}{k}."))
    return out
