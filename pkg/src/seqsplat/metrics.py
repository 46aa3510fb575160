"""Image quality metrics for evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import ssim

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray, include=None) -> float:
    """``10 log10(1 / MSE)`` over included pixels with peak 1.

    ``include`` is an ``(H, W)`` map, nonzero where a pixel counts. Identical
    images give ``inf``.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if sq.ndim == 3:
        sq = sq.mean(axis=2)
    if include is not None:
        inc = np.asarray(include) != 0
        if inc.shape != sq.shape:
            raise ValueError(f"include map {inc.shape} does not match image {sq.shape}")
        if not inc.any():
            raise ValueError("psnr: every pixel is excluded")
        mse = float(sq[inc].mean())
    else:
        mse = float(sq.mean())
    if mse == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def masked_ssim(a: np.ndarray, b: np.ndarray, include=None) -> float:
    _, smap = ssim(a, b)
    if include is None:
        return float(smap.mean())
    inc = np.asarray(include) != 0
    if not inc.any():
        raise ValueError("ssim: every pixel is excluded")
    return float(smap[inc].mean())


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, name: str, sequence_id: int, a, b, transient_mask=None):
        include = None if transient_mask is None else (np.asarray(transient_mask) == 0)
        self.rows.append({"frame": name, "sequence": sequence_id,
                          "psnr": psnr(a, b), "ssim": masked_ssim(a, b),
                          "psnr_masked": psnr(a, b, include), "ssim_masked": masked_ssim(a, b, include)})

    def sequence_means(self, key: str = "psnr_masked") -> dict[int, float]:
        out = {}
        for s in sorted({r["sequence"] for r in self.rows}):
            out[s] = float(np.mean([r[key] for r in self.rows if r["sequence"] == s]))
        return out

    def to_csv(self) -> str:
        cols = ["frame", "sequence", "psnr", "ssim", "psnr_masked", "ssim_masked"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(str(r[c]) if not isinstance(r[c], float) else repr(r[c]) for c in cols))
        return "\n".join(lines) + "\n"
