"""Empirical shift-equivariance and shift-invariance audits for single ops and whole models.

A map ``f`` with output stride ``s`` is shift-equivariant when shifting its input
by ``(dy, dx)`` shifts its output by ``(dy / s, dx / s)``. Global pooling turns a
spatial map into per-channel scalars that no longer move with the input: the
auditor flags such nodes as localization-destroying.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_ops as T
from .errors import ConfigurationError, InputError

SHIFT_MODES = ("circular", "zeros")


def shift(x: np.ndarray, dy: int, dx: int, mode: str = "circular") -> np.ndarray:
    """Translate the last two axes of ``x`` by ``(dy, dx)``.

    ``circular`` wraps around; ``zeros`` fills the exposed strip with zeros.
    """
    x = np.asarray(x)
    if mode not in SHIFT_MODES:
        raise InputError(f"shift mode must be one of {SHIFT_MODES}, got {mode!r}")
    h, w = x.shape[-2:]
    if mode == "circular":
        # a full-period shift is the identity under wraparound
        if abs(dy) > h or abs(dx) > w:
            raise InputError(f"shift ({dy}, {dx}) exceeds the spatial size {(h, w)}")
        return np.roll(x, (dy, dx), axis=(-2, -1))
    if abs(dy) >= h or abs(dx) >= w:
        raise InputError(f"shift ({dy}, {dx}) must be smaller than the spatial size {(h, w)}")
    out = np.zeros_like(x)
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


@dataclass
class AuditConfig:
    shifts: Optional[List[Tuple[int, int]]] = None  # None: every stride multiple up to half the input
    pad_mode: str = "circular"
    interior_margin: Optional[int] = None  # zeros mode only; None: receptive-field radius
    n_trials: int = 8
    seed: int = 0
    tol: float = 1e-3

    def validate(self) -> None:
        if self.pad_mode not in SHIFT_MODES:
            raise ConfigurationError(f"pad_mode must be one of {SHIFT_MODES}, got {self.pad_mode!r}")
        if self.n_trials < 1:
            raise ConfigurationError("n_trials must be >= 1")
        if self.interior_margin is not None and self.interior_margin < 0:
            raise ConfigurationError("interior_margin must be >= 0")
        if self.tol <= 0:
            raise ConfigurationError("tol must be positive")


@dataclass
class ErrorStats:
    equivariance_max: float
    equivariance_mean: float
    invariance_max: float


def _check_shifts(shifts: Sequence[Tuple[int, int]], stride: int) -> None:
    if not shifts:
        raise ConfigurationError("at least one shift is required")
    for dy, dx in shifts:
        if dy % stride or dx % stride:
            raise ConfigurationError(f"shift ({dy}, {dx}) is not a multiple of the output stride {stride}")


def _interior(a: np.ndarray, margin: int, dy: int, dx: int) -> np.ndarray:
    h, w = a.shape[-2:]
    r0, r1 = margin + max(dy, 0), h - margin - max(-dy, 0)
    c0, c1 = margin + max(dx, 0), w - margin - max(-dx, 0)
    if r0 >= r1 or c0 >= c1:
        raise ConfigurationError(f"interior margin {margin} leaves no pixels to compare on a {h}x{w} map")
    return a[..., r0:r1, c0:c1]


def _compare(fx: np.ndarray, fsx: np.ndarray, dy: int, dx: int, stride: int, mode: str, margin: int):
    """(|f(shift x) - shift(f x)| values, |f(shift x) - f(x)| values) for one shift."""
    if fx.ndim < 3:
        # pooled output: nothing to move, so equivariance reduces to invariance
        diff = np.abs(fsx - fx).ravel()
        return diff, diff
    oy, ox = dy // stride, dx // stride
    expected = shift(fx, oy, ox, mode)
    eq = np.abs(fsx - expected)
    inv = np.abs(fsx - fx)
    if mode == "zeros":
        m = math.ceil(margin / stride)
        eq = _interior(eq, m, oy, ox)
        inv = _interior(inv, m, oy, ox)
    return eq.ravel(), inv.ravel()


def equivariance_error(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, cfg: AuditConfig,
                       stride: int = 1) -> ErrorStats:
    """Max/mean |f(shift(x)) - shift(f(x))| over ``cfg.shifts``, plus the max invariance error.

    ``f`` maps an input array to an output array whose spatial axes are ``stride``
    times smaller. In zeros mode only the interior (``cfg.interior_margin`` input
    pixels from every border, plus the zero-filled strip) is compared.
    """
    cfg.validate()
    shifts = cfg.shifts or [(stride, 0)]
    _check_shifts(shifts, stride)
    margin = cfg.interior_margin or 0
    fx = np.asarray(f(x))
    eq_max, eq_sum, eq_n, inv_max = 0.0, 0.0, 0, 0.0
    for dy, dx in shifts:
        fsx = np.asarray(f(shift(x, dy, dx, cfg.pad_mode)))
        eq, inv = _compare(fx, fsx, dy, dx, stride, cfg.pad_mode, margin)
        eq_max = max(eq_max, float(eq.max()))
        eq_sum += float(eq.sum())
        eq_n += eq.size
        inv_max = max(inv_max, float(inv.max()))
    return ErrorStats(eq_max, eq_sum / eq_n, inv_max)


# ---------------------------------------------------------------------------
# whole-model audit

REPORT_COLUMNS = ("name", "equivariance_max", "equivariance_mean", "invariance_max", "stride", "flagged")


@dataclass
class NodeRow:
    name: str
    equivariance_max: float
    equivariance_mean: float
    invariance_max: float
    stride: int
    flagged: bool = False


@dataclass
class EquivarianceReport:
    rows: List[NodeRow] = field(default_factory=list)
    shifts: List[Tuple[int, int]] = field(default_factory=list)
    pad_mode: str = "circular"
    tol: float = 1e-3

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, name: str) -> NodeRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def flagged(self) -> List[str]:
        return [r.name for r in self.rows if r.flagged]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([r.name, f"{r.equivariance_max:.6e}", f"{r.equivariance_mean:.6e}",
                             f"{r.invariance_max:.6e}", r.stride, int(r.flagged)])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {"pad_mode": self.pad_mode, "tol": self.tol, "shifts": [list(s) for s in self.shifts],
                   "rows": [asdict(r) for r in self.rows]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "EquivarianceReport":
        rows = [NodeRow(d["name"], float(d["equivariance_max"]), float(d["equivariance_mean"]),
                        float(d["invariance_max"]), int(d["stride"]), d["flagged"] == "1")
                for d in csv.DictReader(io.StringIO(text))]
        return cls(rows)

    @classmethod
    def from_json(cls, text: str) -> "EquivarianceReport":
        d = json.loads(text)
        return cls([NodeRow(**r) for r in d["rows"]], [tuple(s) for s in d["shifts"]], d["pad_mode"], d["tol"])

    def summary(self) -> str:
        flagged = self.flagged()
        lines = [f"{len(self.rows)} nodes audited ({self.pad_mode}, {len(self.shifts)} shifts), "
                 f"{len(flagged)} flagged as localization-destroying"]
        lines += [f"  FLAG {name}: invariant under shift while its input moves "
                  f"(error {self.row(name).equivariance_max:.3g})" for name in flagged]
        return "\n".join(lines)


def default_shifts(input_size: int, stride: int) -> List[Tuple[int, int]]:
    """Every (dy, dx) made of multiples of ``stride`` up to half the input, except (0, 0)."""
    steps = list(range(0, input_size // 2 + 1, stride))
    return [(dy, dx) for dy in steps for dx in steps if (dy, dx) != (0, 0)]


def receptive_field_radius(model, n_probe: int = 2, seed: int = 0) -> int:
    """Input-pixel radius over which the centre heatmap pixel depends on the input.

    Measured from the support of the input gradient, so it covers every path
    (including the pyramid and any global branch).
    """
    size = model.enc_cfg.input_size
    rng = np.random.default_rng(seed)
    x = T.Param(rng.normal(size=(n_probe, model.enc_cfg.in_channels, size, size)).astype(model.dtype), "x")
    model.eval()
    heat = model(x).heatmap
    hs = heat.shape[-1]
    mask = np.zeros(heat.shape, dtype=heat.data.dtype)
    mask[..., hs // 2, hs // 2] = 1.0
    T.sum_all(T.mul(heat, T.Tensor(mask))).backward()
    support = np.argwhere(np.abs(x.grad).sum(axis=(0, 1)) > 0)
    if support.size == 0:
        return 0
    centre = (hs // 2 + 0.5) * size / hs
    return int(math.ceil(np.abs(support + 0.5 - centre).max()))


def _node_arrays(model, x: np.ndarray):
    with T.no_grad():
        out = model(x, record=True)
    arrays = [(name, t.data, t) for name, t in out.nodes.items()]
    arrays.append(("heatmap", out.heatmap.data, out.heatmap))
    return arrays


def audit_model(model, cfg: Optional[AuditConfig] = None) -> EquivarianceReport:
    """Audit every named intermediate node of ``model`` plus its heatmap.

    Shifts must be multiples of the coarsest node stride so every spatial node
    can be compared with an integer shift. A pooled (non-spatial) node is
    flagged when it is invariant (error ~ 0) although the map it pools moves by
    more than ``cfg.tol``: its "equivariance error" is that pooled map's
    invariance error, i.e. the location signal it throws away.
    """
    cfg = cfg or AuditConfig()
    cfg.validate()
    size = model.enc_cfg.input_size
    model.eval()
    rng = np.random.default_rng([cfg.seed, 7])
    x = rng.normal(size=(cfg.n_trials, model.enc_cfg.in_channels, size, size)).astype(model.dtype)
    base = _node_arrays(model, x)
    spatial_sizes = [a.shape[-1] for _, a, _ in base if a.ndim == 4]
    coarse = size // min(spatial_sizes)
    shifts = [tuple(s) for s in cfg.shifts] if cfg.shifts else default_shifts(size, coarse)
    _check_shifts(shifts, coarse)
    margin = 0
    if cfg.pad_mode == "zeros":
        margin = cfg.interior_margin if cfg.interior_margin is not None else receptive_field_radius(model)
    stats = {name: [0.0, 0.0, 0, 0.0] for name, _, _ in base}
    # pooled node -> the name of the spatial node it pools, if that node is audited too
    parent_of = {}
    by_id = {id(t): name for name, _, t in base}
    for name, a, t in base:
        if a.ndim == 2 and t.parents:
            parent_of[name] = by_id.get(id(t.parents[0]))
    parent_inv = {name: 0.0 for name in parent_of}
    for dy, dx in shifts:
        shifted = _node_arrays(model, shift(x, dy, dx, cfg.pad_mode))
        for (name, a, t), (_, sa, st) in zip(base, shifted):
            stride = size // a.shape[-1] if a.ndim == 4 else size
            eq, inv = _compare(a, sa, dy, dx, stride if a.ndim == 4 else 1, cfg.pad_mode, margin)
            s = stats[name]
            s[0] = max(s[0], float(eq.max()))
            s[1] += float(eq.sum())
            s[2] += eq.size
            s[3] = max(s[3], float(inv.max()))
            if name in parent_of:
                src = st.parents[0].data
                ref = t.parents[0].data
                parent_inv[name] = max(parent_inv[name], float(np.abs(src - ref).max()))
    rows = []
    for name, a, _ in base:
        eq_max, eq_sum, eq_n, inv_max = stats[name]
        stride = size // a.shape[-1] if a.ndim == 4 else size
        flagged = False
        if a.ndim == 2:
            scale = float(np.abs(a).max()) + 1e-12
            eq_max = parent_inv.get(name, eq_max)
            eq_sum, eq_n = eq_max, 1
            flagged = inv_max <= 1e-6 * scale and eq_max > cfg.tol
        rows.append(NodeRow(name, eq_max, eq_sum / eq_n, inv_max, stride, flagged))
    return EquivarianceReport(rows, shifts, cfg.pad_mode, cfg.tol)
