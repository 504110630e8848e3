"""Analytic parameter and multiply-accumulate counts.

Counting rules:

* a convolution costs ``k*k * c_in/groups * c_out`` MAdds per output pixel;
  biases, activations, pooling, resizing, batch norm and elementwise
  products are free;
* pixel-attention convs and sigmoid gates are excluded;
* dynamic generators (the small fully connected layers) cost ``n_in*n_out``
  once per sample;
* the P phi Q^T term is charged as a dense ``c_out*c_in`` 1x1 conv per pixel
  (``dynamic="dense"``, the default) or as its three factors
  ``c_in*L + L*L + L*c_out`` per pixel (``dynamic="factorized"``, which is
  how the forward pass evaluates it);
* in inference mode a rep-conv costs exactly what a plain conv of its
  geometry costs, while training mode charges every conv in its branch graph.

FLOPs under this convention are twice the MAdds.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .blocks import ESA, DynamicFusion
from .dynamic import DyConv, DynamicRepConv
from .nn import Conv2d, Linear, Module
from .reparam import RepConv
from .tensor import conv_output_size

MODES = ("training", "inference")
DYNAMIC_COSTS = ("dense", "factorized")


@dataclass
class CostRow:
    name: str
    params: int
    madds: int


@dataclass
class CostReport:
    mode: str
    out_h: int
    out_w: int
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "madds"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.madds])
        w.writerow(["TOTAL", self.total_params, self.total_madds])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"mode={self.mode}  output={self.out_w}x{self.out_h}",
                 f"{'layer':<{width}}  {'params':>10}  {'madds':>16}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>10,}  {r.madds:>16,}")
        lines.append(f"{'TOTAL':<{width}}  {self.total_params:>10,}  {self.total_madds:>16,}")
        lines.append(f"params {self.total_params / 1e3:.1f}K  madds {self.total_madds / 1e9:.2f}G")
        return "\n".join(lines)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _repconv_rows(name, m: RepConv, h, w, mode):
    if m.is_fused or mode == "inference":
        params = m.k * m.k * (m.c_in // m.groups) * m.c_out + m.c_out
        return [CostRow(name, params, params_madds(m.k, m.c_in // m.groups, m.c_out, h, w))]
    madds = sum(c.madds(h, w)[0] for _, c in m.body.named_modules() if isinstance(c, Conv2d))
    return [CostRow(name, m.body.num_params(), madds)]


def params_madds(k: int, c_in_per_group: int, c_out: int, h: int, w: int) -> int:
    return k * k * c_in_per_group * c_out * h * w


def _rows(m: Module, name: str, h: int, w: int, mode: str, dyn: str = "dense") -> list[CostRow]:
    if isinstance(m, RepConv):
        return _repconv_rows(name, m, h, w, mode)
    if isinstance(m, Conv2d):
        return [CostRow(name, m.num_params(), m.madds(h, w)[0])]
    if isinstance(m, Linear):
        n_in, n_out = m.weight.shape
        return [CostRow(name, m.num_params(), n_in * n_out)]
    if isinstance(m, DynamicRepConv):
        rows = _rows(m.static, _join(name, "static"), h, w, mode, dyn)
        if m.latent:
            for sub in ("squeeze", "lam_head", "phi_head"):
                rows += _rows(getattr(m, sub), _join(name, sub), h, w, mode, dyn)
            L = m.latent
            per_px = m.c_out * m.c_in if dyn == "dense" else m.c_in * L + L * L + L * m.c_out
            rows.append(CostRow(_join(name, "PQ"), m.P.data.size + m.Q.data.size, per_px * h * w))
        return rows
    if isinstance(m, DyConv):
        rows = []
        for i, e in enumerate(m.experts):
            r = _repconv_rows(_join(name, f"experts.{i}"), e, h, w, mode)[0]
            # the blended kernel is applied once; each expert adds one kernel-sized blend
            r.madds = r.madds if i == 0 else r.params
            rows.append(r)
        return rows + _rows(m.router, _join(name, "router"), h, w, mode, dyn)
    if isinstance(m, DynamicFusion):
        pa = m.pa.num_params()
        return _rows(m.fuse, _join(name, "fuse"), h, w, mode, dyn) + [CostRow(_join(name, "pa"), pa, 0)]
    if isinstance(m, ESA):
        rows = _rows(m.reduce, _join(name, "reduce"), h, w, mode, dyn)
        dh, dw = conv_output_size(h, 3, 2, 0), conv_output_size(w, 3, 2, 0)
        rows += _rows(m.down, _join(name, "down"), h, w, mode, dyn)
        ph, pw = conv_output_size(dh, 7, 3, 0), conv_output_size(dw, 7, 3, 0)
        rows += _rows(m.mid, _join(name, "mid"), ph, pw, mode, dyn)
        rows += _rows(m.skip, _join(name, "skip"), h, w, mode, dyn)
        rows += _rows(m.expand, _join(name, "expand"), h, w, mode, dyn)
        return rows
    rows = []
    own = sum(p.data.size for p in m._params.values())
    if own:
        rows.append(CostRow(_join(name, "params"), own, 0))
    for child_name, child in m.children():
        if child_name == "tail" and hasattr(m, "cfg") and hasattr(m.cfg, "scale"):
            s = m.cfg.scale
            rows += _rows(child, _join(name, child_name), h * s, w * s, mode, dyn)
        else:
            rows += _rows(child, _join(name, child_name), h, w, mode, dyn)
    return rows


def cost_report(model: Module, out_h: int, out_w: int, mode: str = "inference",
                dynamic: str = "dense") -> CostReport:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if dynamic not in DYNAMIC_COSTS:
        raise ValueError(f"dynamic cost must be one of {DYNAMIC_COSTS}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    s = getattr(getattr(model, "cfg", None), "scale", 1)
    return CostReport(mode, out_h, out_w, _rows(model, "", out_h // s, out_w // s, mode, dynamic))


def count_params(model: Module, mode: str = "inference") -> int:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return sum(r.params for r in _rows(model, "", 1, 1, mode))


def count_madds(model: Module, out_h: int, out_w: int, mode: str = "inference",
                dynamic: str = "dense") -> int:
    return cost_report(model, out_h, out_w, mode, dynamic).total_madds
