"""Pose difference, difficulty stratification and reconstruction metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .core import DimensionError, as_numpy

JAW = slice(0, 17)
STRATA = ("Easy", "Medium", "Difficult")


@dataclass(frozen=True)
class PairRecord:
    path_src: str
    path_trg: str
    pd: float
    stratum: str | None = None

    def __post_init__(self):
        if not self.pd >= 0:
            raise ValueError(f"pose difference must be >= 0, got {self.pd}")
        if self.stratum is not None and self.stratum not in STRATA:
            raise ValueError(f"unknown stratum {self.stratum!r}")


def pose_difference(k_src, k_trg) -> float:
    """Mean L1 distance between the 17 jaw keypoints (indices 0–16) in 3-D."""
    a = np.asarray(k_src, dtype=np.float64)
    b = np.asarray(k_trg, dtype=np.float64)
    for k in (a, b):
        if k.ndim != 2 or k.shape[1] != 3 or k.shape[0] < 17:
            raise ValueError(f"need at least 17 three-dimensional keypoints, got shape {k.shape}")
    return float(np.abs(a[JAW] - b[JAW]).sum(axis=1).mean())


def stratify_pairs(records) -> list:
    """Assign Easy/Medium/Difficult by PD terciles.

    Records are ranked by PD with a stable sort (ties keep input order); the
    first third is Easy, the next third Medium, the rest Difficult. When the
    count is not divisible by three the earlier strata take one extra record
    each, so stratum sizes differ by at most one.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to stratify")
    n = len(records)
    order = sorted(range(n), key=lambda i: records[i].pd)
    base, extra = divmod(n, 3)
    sizes = [base + (1 if s < extra else 0) for s in range(3)]
    out = [None] * n
    pos = 0
    for stratum, size in zip(STRATA, sizes):
        for i in order[pos : pos + size]:
            out[i] = replace(records[i], stratum=stratum)
        pos += size
    return out


def cut_points(records) -> tuple:
    """(Easy/Medium, Medium/Difficult) PD boundaries of a stratified set."""
    hi = {s: max((r.pd for r in records if r.stratum == s), default=np.nan) for s in STRATA}
    return hi["Easy"], hi["Medium"]


def read_pairs_csv(path) -> list:
    """Rows of ``path_src, path_trg[, pd, stratum]``; relative paths resolve against the CSV."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in ("path_src", "path_trg"):
            if col not in fields:
                raise CSVParseError(path, 1, f"missing column {col!r}")
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in ("path_src", "path_trg")):
                raise CSVParseError(path, line, "wrong number of fields")
            if not row["path_src"] or not row["path_trg"]:
                raise CSVParseError(path, line, "empty path")
            pd = row.get("pd") or ""
            try:
                pd_val = float(pd) if pd.strip() else None
            except ValueError:
                raise CSVParseError(path, line, f"pd is not a number: {pd!r}") from None
            rows.append({
                "path_src": row["path_src"],
                "path_trg": row["path_trg"],
                "pd": pd_val,
                "stratum": (row.get("stratum") or None),
                "line": line,
            })
    return rows


def resolve(csv_path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(csv_path).parent / p


def write_pairs_csv(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_src", "path_trg", "pd", "stratum"])
        for r in records:
            w.writerow([r.path_src, r.path_trg, repr(float(r.pd)), r.stratum or ""])
    return path


class CSVParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {msg}")


# ---------------------------------------------------------------------------
# SSIM


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _luma(img) -> np.ndarray:
    arr = as_numpy(img).astype(np.float64)
    if arr.ndim == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114])
    return arr


def ssim(img_a, img_b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03, win: int = 11,
         sigma: float = 1.5) -> float:
    """Mean structural similarity on luma with an 11×11 Gaussian window.

    Statistics are taken only where the window fits entirely inside the image.
    """
    a, b = _luma(img_a), _luma(img_b)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in size: {a.shape} vs {b.shape}")
    if min(a.shape) < win:
        raise DimensionError(f"images must be at least {win}×{win}")
    w = _gaussian_window(win, sigma)

    def filt(x):
        return fftconvolve(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(img_a, img_b, data_range: float = 1.0) -> float:
    a, b = as_numpy(img_a).astype(np.float64), as_numpy(img_b).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(data_range**2 / mse))


class MetricPort:
    """Adapter slot for evaluators that need large pretrained networks (FID, LPIPS).

    Subclasses implement ``__call__``; none ships with the package.
    """

    name = "metric"

    def __call__(self, img_a, img_b) -> float:
        raise NotImplementedError(f"{self.name} requires an external evaluator")
