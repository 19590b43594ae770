"""Static parameter and FLOP accounting over a GraphSpec.

Counts are derived from node hyperparameters with closed-form per-block
formulas; no weights are allocated.  FLOPs follow the 2 x multiply-accumulate
convention.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .fce import FCE_KINDS, fce_flops, fce_param_count, make_config
from .graph import GraphSpec, ModelConfig, Node, build_model

REFERENCE_SIZE = 640


@dataclass
class _Conv:
    c1: int
    c2: int
    k: int
    s: int = 1
    bn: bool = True  # ConvBNSiLU; False means plain conv with bias
    groups: int = 1

    @property
    def bias(self) -> bool:
        return not self.bn


def conv_params(c1: int, c2: int, k: int, groups: int = 1, bias: bool = False,
                bn: bool = False, fused: bool = False) -> int:
    """Learnable scalars of one convolution with optional bias and batch norm."""
    n = c2 * (c1 // groups) * k * k
    if bn and fused:
        return n + c2  # folded into a single bias
    return n + (c2 if bias else 0) + (2 * c2 if bn else 0)


def conv_flops(c1: int, c2: int, k: int, out_hw: tuple, groups: int = 1, bias: bool = False) -> int:
    """2 * MACs of one convolution, plus one add per output element with a bias."""
    out = c2 * out_hw[0] * out_hw[1]
    return 2 * k * k * (c1 // groups) * out + (out if bias else 0)


def _block_convs(node: Node) -> list:
    """Convolutions making up a block, in execution order."""
    p, c1, c2 = node.params, node.in_channels[0], node.out_channels
    if node.kind == "ConvBNSiLU":
        return [_Conv(c1, c2, p["k"], p["s"])]
    if node.kind == "C2f":
        c, n = int(c2 * 0.5), p["n"]
        convs = [_Conv(c1, 2 * c, 1)]
        for _ in range(n):
            convs += [_Conv(c, c, 3), _Conv(c, c, 3)]
        return convs + [_Conv((2 + n) * c, c2, 1)]
    if node.kind == "SPPF":
        c_ = c1 // 2
        return [_Conv(c1, c_, 1), _Conv(4 * c_, c2, 1)]
    return []


def _detect_convs(node: Node) -> list:
    """Per level: list of convs of the box and class branches."""
    p, ch = node.params, node.in_channels
    nc, reg = p["nc"], p["reg_max"]
    c2 = max(16, ch[0] // 4, reg * 4)
    c3 = max(ch[0], min(nc, 100))
    return [
        [_Conv(x, c2, 3), _Conv(c2, c2, 3), _Conv(c2, 4 * reg, 1, bn=False),
         _Conv(x, c3, 3), _Conv(c3, c3, 3), _Conv(c3, nc, 1, bn=False)]
        for x in ch
    ]


def _conv_params(cv: _Conv, fused: bool) -> int:
    return conv_params(cv.c1, cv.c2, cv.k, cv.groups, cv.bias, cv.bn, fused)


def _fce_cfg(node: Node):
    hyper = {k: v for k, v in node.params.items() if k != "fce_kind"}
    return make_config(node.params["fce_kind"], node.in_channels[0], **hyper)


def node_params(node: Node, fused: bool = False) -> int:
    if node.kind == "FCE":
        return fce_param_count(node.params["fce_kind"], node.in_channels[0], _fce_cfg(node))
    if node.kind == "Detect":
        return sum(_conv_params(cv, fused) for lvl in _detect_convs(node) for cv in lvl)
    return sum(_conv_params(cv, fused) for cv in _block_convs(node))


def count_params(g: GraphSpec, fused: bool = False) -> int:
    """Learnable scalars: conv weights and biases, BN gamma/beta, FCE weights.

    With ``fused`` each batch norm is folded into its convolution, leaving one
    bias per output channel (the deployed-model convention).
    """
    return sum(node_params(n, fused) for n in g.nodes)


def _conv_flops(cv: _Conv, h: int, w: int, fused: bool, elementwise: bool) -> tuple:
    """FLOPs of one conv on an h x w input; returns (flops, out_h, out_w)."""
    p = cv.k // 2
    ho = (h + 2 * p - cv.k) // cv.s + 1
    wo = (w + 2 * p - cv.k) // cv.s + 1
    out = cv.c2 * ho * wo
    f = conv_flops(cv.c1, cv.c2, cv.k, (ho, wo), cv.groups, cv.bias or (cv.bn and fused))
    if cv.bn and elementwise:
        f += (0 if fused else 2 * out) + out  # BN scale+shift, SiLU
    return f, ho, wo


def node_flops(node: Node, input_hw: tuple, fused: bool = False, elementwise: bool = True) -> int:
    H, W = input_hw
    if node.kind == "Detect":
        total = 0
        for lvl, stride in zip(_detect_convs(node), (8, 16, 32)):
            for cv in lvl:
                total += _conv_flops(cv, H // stride, W // stride, fused, elementwise)[0]
        return total
    if node.kind == "ConvBNSiLU":
        s_in = node.stride // node.params["s"]
        return _conv_flops(_block_convs(node)[0], H // s_in, W // s_in, fused, elementwise)[0]
    h, w = H // node.stride, W // node.stride
    if node.kind == "C2f":
        total, c = 0, int(node.out_channels * 0.5)
        for cv in _block_convs(node):
            total += _conv_flops(cv, h, w, fused, elementwise)[0]
        if node.params["shortcut"] and elementwise:
            total += node.params["n"] * c * h * w  # residual adds
        return total
    if node.kind == "SPPF":
        convs = _block_convs(node)
        total = sum(_conv_flops(cv, h, w, fused, elementwise)[0] for cv in convs)
        k = node.params["k"]
        if elementwise:
            total += 3 * (k * k - 1) * convs[0].c2 * h * w
        return total
    if node.kind == "FCE":
        return fce_flops(node.params["fce_kind"], node.in_channels[0], h, w, _fce_cfg(node), elementwise)
    if node.kind == "Upsample":
        return node.out_channels * (H // node.stride) * (W // node.stride) if elementwise else 0
    return 0  # Concat moves memory only


def count_flops(g: GraphSpec, input_hw=REFERENCE_SIZE, fused: bool = False, elementwise: bool = True) -> int:
    """FLOPs for one image of size ``input_hw`` (int or (h, w)), divisible by 32."""
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    if input_hw[0] % 32 or input_hw[1] % 32:
        raise ValueError(f"input size {input_hw} must be divisible by 32")
    return sum(node_flops(n, input_hw, fused, elementwise) for n in g.nodes)


# ------------------------------------------------------------------ reporting

_KIND_ORDER = {k: i for i, k in enumerate(("none",) + FCE_KINDS)}
_SCALE_ORDER = {"S": 0, "M": 1, "L": 2}


@dataclass
class CostRow:
    model: str
    scale: str
    method: str
    params: int
    flops: int
    input_size: int

    @property
    def params_m(self) -> str:
        return f"{self.params / 1e6:.2f}M"

    @property
    def flops_g(self) -> str:
        return f"{self.flops / 1e9:.1f}G"


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    flops_reference: int = REFERENCE_SIZE

    def format_table(self) -> str:
        lines = [f"{'Model':<16}{'Input':>6}{'Params':>10}{'FLOPs':>10}"]
        for r in self.rows:
            lines.append(f"{r.model:<16}{r.input_size:>6}{r.params_m:>10}{r.flops_g:>10}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["model", "scale", "method", "params", "flops_g", "input_size"])
        for r in self.rows:
            wr.writerow([r.model, r.scale, r.method, r.params, f"{r.flops / 1e9:.3f}", r.input_size])
        return buf.getvalue()


def node_report(g: GraphSpec, input_hw=REFERENCE_SIZE, fused: bool = False) -> list:
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    return [(n.name, node_params(n, fused), node_flops(n, input_hw, fused)) for n in g.nodes]


def _sort_key(cfg: ModelConfig):
    method = "" if cfg.fce_kind == "none" else cfg.method
    return (_KIND_ORDER[cfg.fce_kind], method, _SCALE_ORDER[cfg.scale])


def summary_table(
    configs: Iterable[ModelConfig],
    input_size: int = REFERENCE_SIZE,
    flops_reference: Optional[int] = REFERENCE_SIZE,
    fused: bool = True,
    elementwise: bool = False,
) -> CostReport:
    """One row per config, sorted by (kind, method, scale).

    FLOPs are evaluated at ``flops_reference`` (640 by default) whatever the
    detection input size, so rows for 640 and 1024 inputs carry equal FLOPs.
    Defaults follow the deployed-model convention: batch norm folded into
    convolutions, convolution FLOPs only.
    """
    ref = flops_reference or input_size
    report = CostReport(flops_reference=ref)
    for cfg in sorted(configs, key=_sort_key):
        g = build_model(cfg)
        report.rows.append(CostRow(
            cfg.label, cfg.scale, "-" if cfg.fce_kind == "none" else cfg.method,
            count_params(g, fused), count_flops(g, ref, fused, elementwise), input_size,
        ))
    return report


def all_configs(num_classes: int = 9) -> list:
    """Base models plus every (scale, kind, method) variant."""
    out = [ModelConfig(scale=s, num_classes=num_classes) for s in "SML"]
    for kind in FCE_KINDS:
        for method in ("M1", "M2", "M3"):
            for s in "SML":
                out.append(ModelConfig(scale=s, num_classes=num_classes, fce_kind=kind, method=method))
    return out
