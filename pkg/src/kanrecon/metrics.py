"""PSNR, SSIM and NMSE on normalized magnitude images."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List

import numpy as np

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class IdenticalImagesError(ValueError):
    """PSNR is unbounded because the two images are identical."""


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test, peak: float = 1.0) -> float:
    ref, test = _pair(ref, test)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        raise IdenticalImagesError("PSNR undefined for identical images (MSE = 0)")
    return 10.0 * np.log10(peak * peak / mse)


def nmse(ref, test) -> float:
    ref, test = _pair(ref, test)
    denom = float(np.sum(ref ** 2))
    if denom == 0.0:
        raise ValueError("NMSE undefined for an all-zero reference")
    return float(np.sum((ref - test) ** 2)) / denom


def ssim(ref, test, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` patches at stride 1 (uniform weights)."""
    ref, test = _pair(ref, test)
    if ref.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(ref.shape) < window:
        raise ValueError(f"image {ref.shape} smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    view = np.lib.stride_tricks.sliding_window_view
    x = view(ref, (window, window))
    y = view(test, (window, window))
    mx = x.mean(axis=(-2, -1))
    my = y.mean(axis=(-2, -1))
    dx = x - mx[..., None, None]
    dy = y - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    af: int
    psnr: float
    ssim: float
    nmse: float
    n_images: int
    meta: Dict[str, object] = field(default_factory=lambda: {
        "ssim_window": SSIM_WINDOW, "ssim_k1": SSIM_K1, "ssim_k2": SSIM_K2,
        "peak": 1.0, "normalization": "[0,1]",
    })

    @classmethod
    def from_images(cls, af: int, refs: Iterable[np.ndarray], tests: Iterable[np.ndarray]) -> "MetricReport":
        p, s, n = [], [], []
        count = 0
        for r, t in zip(refs, tests):
            try:
                p.append(psnr(r, t))
            except IdenticalImagesError:
                p.append(float("inf"))
            s.append(ssim(r, t))
            n.append(nmse(r, t))
            count += 1
        if count == 0:
            raise ValueError("no images to evaluate")
        return cls(int(af), float(np.mean(p)), float(np.mean(s)), float(np.mean(n)), count)

    def row(self) -> Dict[str, object]:
        return {"af": self.af, "psnr": self.psnr, "ssim": self.ssim, "nmse": self.nmse,
                "n_images": self.n_images}


CSV_FIELDS = ["af", "psnr", "ssim", "nmse", "n_images"]


def reports_to_csv(reports: List[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return buf.getvalue()


def reports_to_json(reports: List[MetricReport]) -> str:
    return json.dumps({"reports": [asdict(r) for r in reports]}, indent=2, sort_keys=True)


def reports_from_csv(text: str) -> List[MetricReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(MetricReport(int(row["af"]), float(row["psnr"]), float(row["ssim"]),
                                float(row["nmse"]), int(row["n_images"])))
    return out


def reports_from_json(text: str) -> List[MetricReport]:
    return [MetricReport(**r) for r in json.loads(text)["reports"]]
