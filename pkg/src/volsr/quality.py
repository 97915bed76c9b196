"""Full-reference metrics (PSNR, NRMSE, SSIM) and Table-style reports.

All three metrics share one dynamic range ``L = max(reference) - min(reference)``,
so the reference argument is privileged: ``psnr(a, b) != psnr(b, a)`` in general.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateInputError, ValidationError
from .volgrid import Volume

PSNR_INF = math.inf  # returned when MSE == 0


@dataclass(frozen=True)
class MetricsTriple:
    psnr: float
    nrmse: float
    ssim: float


def _arrays(reference, test):
    ref = reference.data if isinstance(reference, Volume) else np.asarray(reference, dtype=np.float64)
    tst = test.data if isinstance(test, Volume) else np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValidationError(f"dims mismatch: reference {ref.shape} vs test {tst.shape}")
    return ref, tst


def data_range(reference) -> float:
    ref = reference.data if isinstance(reference, Volume) else np.asarray(reference)
    L = float(ref.max() - ref.min())
    if not L > 0:
        raise DegenerateInputError("reference volume is constant; dynamic range is zero")
    return L


def mse(reference, test) -> float:
    ref, tst = _arrays(reference, test)
    return float(np.mean((ref - tst) ** 2))


def psnr(reference, test) -> float:
    """``10 log10(L^2 / MSE)``; ``math.inf`` when the volumes are identical."""
    ref, tst = _arrays(reference, test)
    L = data_range(ref)
    err = float(np.mean((ref - tst) ** 2))
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(L * L / err)


def nrmse(reference, test) -> float:
    ref, tst = _arrays(reference, test)
    L = data_range(ref)
    return math.sqrt(float(np.mean((ref - tst) ** 2))) / L


def _window(window, ndim=3):
    w = (window,) * ndim if np.isscalar(window) else tuple(window)
    if len(w) != ndim or any(int(k) < 1 or int(k) % 2 == 0 for k in w):
        raise ValidationError(f"SSIM window must be odd and positive, got {window}")
    return tuple(int(k) for k in w)


def box_mean_valid(x: np.ndarray, window) -> np.ndarray:
    """Mean over every fully contained ``window`` box (valid mode), via running sums."""
    out = np.asarray(x, dtype=np.float64)
    for axis, w in enumerate(_window(window, out.ndim)):
        c = np.cumsum(out, axis=axis)
        zero = np.zeros_like(np.take(c, [0], axis=axis))
        c = np.concatenate([zero, c], axis=axis)
        n = c.shape[axis]
        out = (np.take(c, np.arange(w, n), axis=axis) - np.take(c, np.arange(0, n - w), axis=axis)) / w
    return out


def ssim_map(reference, test, window=7, k1=0.01, k2=0.03, L=None) -> np.ndarray:
    ref, tst = _arrays(reference, test)
    win = _window(window, ref.ndim)
    if any(n < w for n, w in zip(ref.shape, win)):
        raise ValidationError(f"volume {ref.shape} smaller than SSIM window {win}")
    if L is None:
        L = data_range(ref)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    mx = box_mean_valid(ref, win)
    my = box_mean_valid(tst, win)
    sxx = box_mean_valid(ref * ref, win) - mx * mx
    syy = box_mean_valid(tst * tst, win) - my * my
    sxy = box_mean_valid(ref * tst, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(reference, test, window=7, k1=0.01, k2=0.03) -> float:
    """Mean SSIM over all valid positions of a uniform ``window`` cube.

    Window statistics use population (divide-by-count) moments. ``window`` may
    also be a per-axis tuple, e.g. ``(7, 7, 1)`` for a single slice.
    """
    return float(np.mean(ssim_map(reference, test, window, k1, k2)))


def evaluate(reference, test, window=7) -> MetricsTriple:
    return MetricsTriple(psnr(reference, test), nrmse(reference, test), ssim(reference, test, window))


# ---------------------------------------------------------------------------
# reports

METRICS = ("psnr", "nrmse", "ssim")
HIGHER_IS_BETTER = {"psnr": True, "nrmse": False, "ssim": True}


@dataclass
class MethodSummary:
    name: str
    loss: str
    per_volume: list[MetricsTriple]
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)


@dataclass
class MetricsReport:
    methods: list[MethodSummary]
    notes: list[str] = field(default_factory=list)
    volumes: list[dict] = field(default_factory=list)  # optional ids, aligned with per_volume

    def method(self, name: str, loss: str = "n/a") -> MethodSummary:
        for m in self.methods:
            if m.name == name and m.loss == loss:
                return m
        raise KeyError((name, loss))

    def to_dict(self) -> dict:
        return {
            "methods": [
                {
                    "name": m.name,
                    "loss": m.loss,
                    "per_volume": [asdict(t) for t in m.per_volume],
                    "mean": dict(m.mean),
                    "sd": dict(m.sd),
                }
                for m in self.methods
            ],
            "notes": list(self.notes),
            "volumes": list(self.volumes),
        }

    def to_json(self) -> str:
        # inf PSNR is written as the JSON-compatible string "inf"
        def fix(o):
            if isinstance(o, float) and math.isinf(o):
                return "inf" if o > 0 else "-inf"
            if isinstance(o, dict):
                return {k: fix(v) for k, v in o.items()}
            if isinstance(o, list):
                return [fix(v) for v in o]
            return o

        return json.dumps(fix(self.to_dict()), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        methods = []
        for m in d["methods"]:
            vols = [MetricsTriple(**{k: float(v) for k, v in t.items()}) for t in m["per_volume"]]
            methods.append(MethodSummary(m["name"], m["loss"], vols, dict(m["mean"]), dict(m["sd"])))
        return cls(methods, list(d.get("notes", [])), list(d.get("volumes", [])))

    def render(self) -> str:
        return render_table(self)


def aggregate_report(entries) -> MetricsReport:
    """Group ``(method, loss, MetricsTriple)`` entries; population mean/SD per metric."""
    entries = list(entries)
    if not entries:
        raise ValidationError("cannot aggregate an empty entry list")
    groups: dict[tuple[str, str], list[MetricsTriple]] = defaultdict(list)
    for method, loss, triple in entries:
        groups[(str(method), str(loss))].append(triple)
    methods = []
    for (name, loss) in sorted(groups):
        vols = groups[(name, loss)]
        summary = MethodSummary(name, loss, vols)
        for metric in METRICS:
            vals = np.array([getattr(t, metric) for t in vols], dtype=np.float64)
            summary.mean[metric] = float(vals.mean())
            if np.all(vals == vals[0]):
                summary.sd[metric] = 0.0  # also covers an all-infinite PSNR column
            elif np.all(np.isfinite(vals)):
                summary.sd[metric] = float(vals.std())
            else:
                summary.sd[metric] = math.inf
        methods.append(summary)
    return MetricsReport(methods)


def format_cell(mean: float, sd: float) -> str:
    return f"{mean:.2f} ({sd:.2f})"


def render_table(report: MetricsReport) -> str:
    """Text table: ``mean (SD)`` to two decimals, best value per column wrapped in ``**``."""
    best = {}
    for metric in METRICS:
        vals = [m.mean[metric] for m in report.methods if math.isfinite(m.mean[metric])]
        if vals:
            best[metric] = max(vals) if HIGHER_IS_BETTER[metric] else min(vals)
    header = ["Method", "Loss", "PSNR (SD) ↑", "NRMSE (SD) ↓", "SSIM (SD) ↑"]
    rows = []
    for m in report.methods:
        cells = [m.name, m.loss]
        for metric in METRICS:
            cell = format_cell(m.mean[metric], m.sd[metric])
            if metric in best and round(m.mean[metric], 2) == round(best[metric], 2):
                cell = "**" + cell + "**"
            cells.append(cell)
        rows.append(cells)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    lines += report.notes
    return "\n".join(lines) + "\n"
