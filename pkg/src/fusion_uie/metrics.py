"""Full-reference (MSE, PSNR, SSIM) and no-reference (UIQM family) metrics.

Images are (3,H,W) float arrays in [0,1].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class UIQMConstants:
    c_uicm: float = 0.0282
    c_uism: float = 0.2953
    c_uiconm: float = 3.5753
    alpha_low: float = 0.1
    alpha_high: float = 0.1
    block: int = 8
    channel_weights: tuple[float, float, float] = (0.299, 0.587, 0.114)
    plip_gamma: float = 1026.0
    log_eps: float = 1e-4


UIQM = UIQMConstants()


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``math.inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_tensor(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Differentiable mean SSIM over valid window positions, averaged over channels."""
    if a.shape != b.shape:
        raise T.ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    _, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    r = SSIM_WINDOW // 2
    valid = (slice(None), slice(r, h - r), slice(r, w - r))

    def blur(x):
        return T.depthwise_conv2d(x, win)[valid]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (mu_ab * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return T.mean(num / den)


def ssim(a, b) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    with T.no_grad():
        return ssim_tensor(Tensor(a), Tensor(b)).item()


# -- UIQM -------------------------------------------------------------------

def _trimmed(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    v = np.sort(values, axis=None)
    k = len(v)
    start = int(math.ceil(lo * k))
    stop = k - int(math.floor(hi * k))
    return v[start:stop]


def uicm(img8: np.ndarray, c: UIQMConstants = UIQM) -> float:
    r, g, b = img8
    rg = r - g
    yb = 0.5 * (r + g) - b
    rg_t = _trimmed(rg, c.alpha_low, c.alpha_high)
    yb_t = _trimmed(yb, c.alpha_low, c.alpha_high)
    mu_rg, mu_yb = rg_t.mean(), yb_t.mean()
    var_rg = np.mean((rg_t - mu_rg) ** 2)
    var_yb = np.mean((yb_t - mu_yb) ** 2)
    return float(-0.0268 * math.sqrt(mu_rg ** 2 + mu_yb ** 2) + 0.1586 * math.sqrt(var_rg + var_yb))


def _blocks(ch: np.ndarray, size: int) -> Iterable[np.ndarray]:
    h, w = ch.shape
    for i in range(0, h - size + 1, size):
        for j in range(0, w - size + 1, size):
            yield ch[i:i + size, j:j + size]


def eme(ch: np.ndarray, block: int) -> float:
    """Measure of enhancement: 2/(#blocks) * sum of log(max/min) over blocks.

    Intensities are floored at 1 (8-bit scale), so flat or black blocks
    contribute 0.
    """
    total, n = 0.0, 0
    for blk in _blocks(ch, block):
        hi, lo = max(float(blk.max()), 1.0), max(float(blk.min()), 1.0)
        total += math.log(hi / lo)
        n += 1
    return 2.0 * total / n


def uism(img8: np.ndarray, c: UIQMConstants = UIQM) -> float:
    score = 0.0
    for ch, lam in zip(img8, c.channel_weights):
        edges = np.hypot(ndimage.sobel(ch, axis=0), ndimage.sobel(ch, axis=1))
        # grayscale edge map: Sobel magnitude weighted by the channel itself
        score += lam * eme(edges * ch / 255.0, c.block)
    return float(score)


def _plip_sub(a, b, gamma):
    return gamma * (a - b) / (gamma - b)


def _plip_add(a, b, gamma):
    return a + b - a * b / gamma


def uiconm(img8: np.ndarray, c: UIQMConstants = UIQM) -> float:
    """logAMEE contrast of the intensity image: -1/n * sum m*log(m) over blocks,
    with m = (max PLIP- min) / (max PLIP+ min).

    m*log(m) <= 0 for m in (0,1], so the leading minus makes the score
    non-negative.  Blocks with zero contrast contribute 0.
    """
    gray = img8.mean(axis=0)
    total, n = 0.0, 0
    for blk in _blocks(gray, c.block):
        hi, lo = float(blk.max()), float(blk.min())
        n += 1
        top = _plip_sub(hi, lo, c.plip_gamma)
        bottom = _plip_add(hi, lo, c.plip_gamma)
        if top == 0.0 or bottom == 0.0:
            continue
        m = top / bottom
        total += m * math.log(m + c.log_eps)
    return 0.0 - total / n


def uiqm(img, c: UIQMConstants = UIQM) -> dict[str, float]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {img.shape}")
    if img.shape[1] < c.block or img.shape[2] < c.block:
        raise ValueError(f"image {img.shape[1]}x{img.shape[2]} smaller than the {c.block}x{c.block} block")
    img8 = np.clip(img, 0.0, 1.0) * 255.0
    a, s, k = uicm(img8, c), uism(img8, c), uiconm(img8, c)
    return {"uicm": a, "uism": s, "uiconm": k, "uiqm": c.c_uicm * a + c.c_uism * s + c.c_uiconm * k}


# -- reports ----------------------------------------------------------------

CSV_FIELDS = ("path", "mse", "psnr_db", "ssim", "uicm", "uism", "uiconm", "uiqm")


@dataclass
class ImageMetrics:
    path: str
    uicm: float
    uism: float
    uiconm: float
    uiqm: float
    mse: Optional[float] = None
    psnr_db: Optional[float] = None
    ssim: Optional[float] = None


def evaluate_image(path: str, img, reference=None) -> ImageMetrics:
    rec = ImageMetrics(path=path, **uiqm(img))
    if reference is not None:
        rec.mse = mse(img, reference)
        rec.psnr_db = psnr(img, reference)
        rec.ssim = ssim(img, reference)
    return rec


def _fmt(v: Optional[float]) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


@dataclass
class MetricReport:
    records: list[ImageMetrics] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def has_reference(self) -> bool:
        return any(r.mse is not None for r in self.records)

    def mean(self, key: str) -> Optional[float]:
        vals = [getattr(r, key) for r in self.records if getattr(r, key) is not None]
        if not vals:
            return None
        return float(np.mean(vals))  # inf propagates, which is the honest mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.records:
            writer.writerow([r.path] + [_fmt(getattr(r, k)) for k in CSV_FIELDS[1:]])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"images: {self.count}"]
        if self.has_reference:
            lines.append("full-reference:")
            for k in ("mse", "psnr_db", "ssim"):
                lines.append(f"  {k:<8} {_fmt(self.mean(k))}")
        lines.append("no-reference:")
        for k in ("uicm", "uism", "uiconm", "uiqm"):
            lines.append(f"  {k:<8} {_fmt(self.mean(k))}")
        return "\n".join(lines) + "\n"


def read_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
