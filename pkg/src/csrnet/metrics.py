"""PSNR / SSIM on luminance planes and dataset-level reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"planes differ in extent: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); identical planes give ``math.inf``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean(np.square(a - b)))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, data_range: float = 255.0) -> np.ndarray:
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 255.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1=0.01, K2=0.03)."""
    return float(np.mean(ssim_map(a, b, data_range)))


def mean_exact(values: Iterable[float]) -> float:
    """Order-independent mean: sorted, compensated summation; any inf gives inf."""
    vals = sorted(float(v) for v in values)
    if not vals:
        return math.nan
    if any(math.isinf(v) for v in vals):
        return float(np.mean(vals))
    return math.fsum(vals) / len(vals)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


@dataclass(frozen=True)
class ImageScore:
    name: str
    psnr: float
    ssim: float


@dataclass
class QualityReport:
    scores: list[ImageScore] = field(default_factory=list)
    dataset: str = ""
    task: str = ""
    param: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def avg_psnr(self) -> float:
        return mean_exact(s.psnr for s in self.scores)

    @property
    def avg_ssim(self) -> float:
        return mean_exact(s.ssim for s in self.scores)

    def to_csv(self) -> str:
        """Comment header, one row per image, then the dataset average row."""
        buf = io.StringIO()
        for note in self.notes:
            buf.write(f"# {note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "image", "task", "param", "psnr", "ssim"])
        param = "" if self.param is None else f"{self.param:g}"
        for s in self.scores:
            w.writerow([self.dataset, s.name, self.task, param, _fmt(s.psnr), _fmt(s.ssim)])
        w.writerow([self.dataset, "average", self.task, param, _fmt(self.avg_psnr), _fmt(self.avg_ssim)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "QualityReport":
        lines = text.splitlines()
        notes = [ln[2:] for ln in lines if ln.startswith("# ")]
        rows = list(csv.reader(ln for ln in lines if not ln.startswith("#")))
        rep = cls(notes=notes)
        for ds, name, task, param, p, s in rows[1:]:
            rep.dataset, rep.task = ds, task
            rep.param = float(param) if param else None
            if name != "average":
                rep.scores.append(ImageScore(name, float(p), float(s)))
        return rep


def evaluate(net, pairs: Sequence, spec=None, names: Sequence[str] | None = None, dataset: str = "") -> QualityReport:
    """Score restored inputs against ground truth; ``net=None`` scores the degraded inputs directly."""
    from .network import restore_plane

    names = list(names) if names is not None else [f"{i:06d}" for i in range(len(pairs))]
    rep = QualityReport(dataset=dataset)
    if spec is not None:
        rep.task, rep.param = spec.task, spec.param
    for name, pair in zip(names, pairs):
        x = np.asarray(pair.input, dtype=np.float64)
        y = np.asarray(pair.target, dtype=np.float64)
        out = x if net is None else np.clip(restore_plane(net, x), 0, 255)
        rep.scores.append(ImageScore(name, psnr(out, y), ssim(out, y)))
    return rep
