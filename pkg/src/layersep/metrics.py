"""Image quality metrics (MSE, PSNR, SSIM) and separation evaluation reports.

SSIM uses an 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03,
dynamic range 1, averaged over the valid (fully covered) region. PSNR is
capped at 100 dB so identical images stay finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .imaging import Image, LayerStack, reconstruct
from .losses import rmse

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0
PSNR_CAP_DB = 100.0


def mse(a: Image, b: Image) -> float:
    """Mean squared error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff))


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB against peak 1.0, capped at 100 dB."""
    err = mse(a, b)
    if err <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / err)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weighting window."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: Image, b: Image) -> float:
    """Mean local structural similarity over the valid window region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(
            f"ssim: image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    w = gaussian_window()
    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    ea2 = convolve2d(a * a, w, mode="valid")
    eb2 = convolve2d(b * b, w, mode="valid")
    eab = convolve2d(a * b, w, mode="valid")
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class SeparationEval:
    """Metrics of one predicted stack against a phantom's ground truth."""

    case_id: str
    mse: float
    ssim: float
    psnr_db: float
    layer_rmse: list[float]

    def to_row(self, group: str = "phantom") -> dict:
        row = {
            "case_id": self.case_id,
            "group": group,
            "mse": self.mse,
            "ssim": self.ssim,
            "psnr_db": self.psnr_db,
        }
        for i, value in enumerate(self.layer_rmse):
            row[f"layer{i}_rmse"] = value
        return row


def evaluate_separation(predicted: LayerStack, phantom, case_id: str = "") -> SeparationEval:
    """Score a separation: composite-vs-composed metrics plus per-layer RMSE."""
    if len(predicted.layers) != len(phantom.gt_stack.layers):
        raise ValueError("evaluate_separation: layer count mismatch")
    recon = reconstruct(predicted)
    layer_rmse = [
        rmse(pred, gt) for pred, gt in zip(predicted.layers, phantom.gt_stack.layers)
    ]
    return SeparationEval(
        case_id=case_id or str(phantom.params.get("seed", "")),
        mse=mse(recon, phantom.composed),
        ssim=ssim(recon, phantom.composed),
        psnr_db=psnr(recon, phantom.composed),
        layer_rmse=layer_rmse,
    )


@dataclass
class MetricReport:
    """Per-case metric rows with recomputable aggregates."""

    rows: list[dict] = field(default_factory=list)

    def add(self, row: dict) -> None:
        self.rows.append(dict(row))

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            for key, value in row.items():
                if key in ("case_id", "group"):
                    continue
                if isinstance(value, (int, float)) and key not in names:
                    names.append(key)
        return names

    def aggregate(self) -> dict[str, dict[str, float]]:
        """Mean and sample standard deviation (ddof=1; 0.0 for n=1) per metric."""
        out: dict[str, dict[str, float]] = {}
        for name in self.metric_names():
            values = np.array([row[name] for row in self.rows if name in row])
            std = float(values.std(ddof=1)) if values.size > 1 else 0.0
            out[name] = {"mean": float(values.mean()), "std": std, "n": int(values.size)}
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"rows": self.rows, "aggregate": self.aggregate()}, indent=2, sort_keys=True
        )

    def to_table(self) -> str:
        """Aligned text table: one line per group, mean +/- std per metric."""
        groups: dict[str, list[dict]] = {}
        for row in self.rows:
            groups.setdefault(str(row.get("group", "all")), []).append(row)
        names = self.metric_names()
        header = ["group", "n"] + names
        lines = [header]
        for group in sorted(groups):
            rows = groups[group]
            cells = [group, str(len(rows))]
            for name in names:
                values = np.array([r[name] for r in rows if name in r])
                if values.size == 0:
                    cells.append("-")
                    continue
                std = float(values.std(ddof=1)) if values.size > 1 else 0.0
                cells.append(f"{values.mean():.6g} +/- {std:.3g}")
            lines.append(cells)
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
            for line in lines
        )
