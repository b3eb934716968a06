"""Paired (degraded, clean) luminance data for super-resolution, denoising and deblocking.

Planes are float64 arrays on the [0, 255] scale.  Every stage clamps to that
range and every random draw comes from a seeded counter-based generator, so a
dataset is a pure function of its sources, task and seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

log = logging.getLogger(__name__)

TASKS = ("sr", "denoise", "deblock")
LEGAL_PARAMS = {"sr": (2, 4, 8), "denoise": (15, 30, 50), "deblock": (10, 20)}
NOISE_GENERATOR = "philox4x64-boxmuller/1"


@dataclass(frozen=True)
class DegradationSpec:
    task: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "sr" and (self.param != int(self.param) or self.param < 1):
            raise ValueError(f"super-resolution factor must be a positive integer, got {self.param}")
        if self.task == "denoise" and self.param < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.param}")
        if self.task == "deblock" and not 1 <= self.param <= 100:
            raise ValueError(f"JPEG quality must lie in [1, 100], got {self.param}")

    @property
    def nonstandard(self) -> bool:
        """True when the parameter is outside the task's usual evaluation set."""
        return self.param not in LEGAL_PARAMS[self.task]

    def to_dict(self) -> dict:
        d = asdict(self)
        if float(self.param).is_integer():
            d["param"] = int(self.param)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(task=d["task"], param=d["param"], seed=d.get("seed", 0))


def clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, 0.0, 255.0)


def rgb_to_y(r, g, b) -> np.ndarray:
    """Full-range BT.601 luma."""
    r, g, b = (np.asarray(c, dtype=np.float64) for c in (r, g, b))
    if not r.shape == g.shape == b.shape:
        raise ValueError(f"colour planes differ in extent: {r.shape}, {g.shape}, {b.shape}")
    return clamp(0.299 * r + 0.587 * g + 0.114 * b)


def rgb_to_ycbcr(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    y = rgb_to_y(r, g, b)
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return y, cb, cr


def ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    r = y + 1.402 * (cr - 128.0)
    g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0)
    b = y + 1.772 * (cb - 128.0)
    return clamp(np.stack([r, g, b], axis=-1))


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    inner = (a + 2) * ax3 - (a + 3) * ax2 + 1
    outer = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, inner, np.where(ax <= 2, outer, 0.0))


def resize_weights(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """(out_len, in_len) interpolation matrix; rows sum to one.

    Output sample ``i`` (1-based) sits at input coordinate
    ``i / scale + (1 - 1/scale) / 2``.  Taps falling outside the signal are
    folded back by symmetric reflection.  When shrinking with ``antialias`` the
    kernel is stretched by ``1/scale``.
    """
    if antialias and scale < 1:
        width = 4.0 / scale

        def kern(x):
            return scale * cubic(scale * x)

    else:
        width = 4.0
        kern = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    ind = left[:, None] + np.arange(taps)[None, :]
    w = kern(u[:, None] - ind)
    w = w / w.sum(axis=1, keepdims=True)
    # symmetric fold: 1..n, n..1, repeated
    period = 2 * in_len
    m = np.mod(ind - 1, period).astype(np.int64)
    src = np.where(m < in_len, m, period - 1 - m)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, src.reshape(-1)), w.reshape(-1))
    return mat


def _out_len(n: int, scale) -> int:
    return int(math.floor(n * scale + 0.5))


def bicubic_resize(p: np.ndarray, scale, antialias: bool = True) -> np.ndarray:
    """Separable bicubic resize by ``scale`` (a float or Fraction)."""
    p = np.asarray(p, dtype=np.float64)
    scale = Fraction(scale).limit_denominator(10_000) if not isinstance(scale, Fraction) else scale
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = p.shape
    oh, ow = _out_len(h, scale), _out_len(w, scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"resizing {h}x{w} by {scale} gives a degenerate {oh}x{ow} plane")
    if scale == 1:
        return p.copy()
    s = float(scale)
    wh = resize_weights(h, oh, s, antialias)
    ww = resize_weights(w, ow, s, antialias)
    return clamp(wh @ p @ ww.T)


def crop_to_multiple(p: np.ndarray, k: int) -> np.ndarray:
    h, w = p.shape[:2]
    return p[: h - h % k, : w - w % k]


def degrade_sr(p: np.ndarray, up: int) -> np.ndarray:
    """Bicubic down by ``up`` (antialiased) then back up to the original extents."""
    up = int(up)
    h, w = p.shape
    if h % up or w % up:
        log.warning("cropping %dx%d plane to a multiple of %d for super-resolution", h, w, up)
        p = crop_to_multiple(p, up)
    small = bicubic_resize(p, Fraction(1, up), antialias=True)
    return bicubic_resize(small, Fraction(up), antialias=True)


# ---------------------------------------------------------------------------
# noise


def derive_seed(global_seed: int, index: int) -> int:
    """Independent per-item seed so parallel processing order cannot change outputs."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1, np.uint64)[0])


def gaussian(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Standard normals from Philox-4x64 uniforms through the Box-Muller transform."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    gen = np.random.Generator(np.random.Philox(seed))
    u = gen.random((2, m))
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))
    theta = 2.0 * np.pi * u[1]
    z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
    return z.reshape(shape)


def add_gaussian_noise(p: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return p.copy()
    return clamp(p + sigma * gaussian(p.shape, seed))


# ---------------------------------------------------------------------------
# JPEG blocking simulation

LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _round_half_up(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quant_table(q: float) -> np.ndarray:
    """Standard luminance table scaled by the usual quality law."""
    if not 1 <= q <= 100:
        raise ValueError(f"JPEG quality must lie in [1, 100], got {q}")
    s = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.maximum(1.0, _round_half_up(LUMA_TABLE * s / 100.0))


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix: coefficients = D @ block @ D.T."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos((2 * i + 1) * k * np.pi / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


_DCT8 = dct_matrix(8)


def jpeg_degrade(p: np.ndarray, q: float) -> np.ndarray:
    """Quantize 8x8 DCT blocks of the luma plane as a baseline encoder would, then decode."""
    table = quant_table(q)
    p = np.asarray(p, dtype=np.float64)
    h, w = p.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(p, ((0, ph), (0, pw)), mode="edge") - 128.0
    bh, bw = padded.shape[0] // 8, padded.shape[1] // 8
    blocks = padded.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)
    coef = _DCT8 @ blocks @ _DCT8.T
    coef = _round_half_up(coef / table) * table
    rec = _DCT8.T @ coef @ _DCT8
    out = rec.transpose(0, 2, 1, 3).reshape(padded.shape) + 128.0
    return clamp(out[:h, :w])


# ---------------------------------------------------------------------------


def degrade(p: np.ndarray, spec: DegradationSpec, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (degraded input, ground truth); SR may crop the ground truth to a multiple of Up."""
    p = clamp(np.asarray(p, dtype=np.float64))
    seed = spec.seed if seed is None else seed
    if spec.task == "sr":
        up = int(spec.param)
        if p.shape[0] % up or p.shape[1] % up:
            log.warning("cropping %dx%d plane to a multiple of %d for super-resolution", *p.shape, up)
            p = crop_to_multiple(p, up)
        return degrade_sr(p, up), p
    if spec.task == "denoise":
        return add_gaussian_noise(p, spec.param, seed), p
    return jpeg_degrade(p, spec.param), p


@dataclass(frozen=True)
class PatchPair:
    input: np.ndarray
    target: np.ndarray
    top: int = 0
    left: int = 0


def extract_patches(
    inp: np.ndarray,
    target: np.ndarray,
    patch_size: int,
    count: int | None,
    seed: int = 0,
    stride: int | None = None,
) -> list[PatchPair]:
    """Aligned crops taken at identical coordinates from both planes.

    Random (seeded) positions by default; with ``stride`` the crops walk a
    fixed grid in row-major order (``count`` limits how many are kept).
    """
    if inp.shape != target.shape:
        raise ValueError(f"input {inp.shape} and target {target.shape} differ in extent")
    if patch_size % 4:
        raise ValueError(f"patch size must be divisible by 4, got {patch_size}")
    h, w = inp.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch size {patch_size} exceeds image extents {h}x{w}")
    if stride is not None:
        coords = [(t, l) for t in range(0, h - patch_size + 1, stride) for l in range(0, w - patch_size + 1, stride)]
        if count is not None:
            coords = coords[:count]
    else:
        if count is None:
            raise ValueError("random patch extraction needs a count")
        gen = np.random.Generator(np.random.Philox(seed))
        tops = gen.integers(0, h - patch_size + 1, size=count)
        lefts = gen.integers(0, w - patch_size + 1, size=count)
        coords = list(zip(tops.tolist(), lefts.tolist()))
    return [
        PatchPair(inp[t : t + patch_size, l : l + patch_size].copy(), target[t : t + patch_size, l : l + patch_size].copy(), t, l)
        for t, l in coords
    ]


def luminance(img: np.ndarray) -> np.ndarray:
    """Y plane of an (H, W) gray or (H, W, 3) colour array."""
    if img.ndim == 2:
        return np.asarray(img, dtype=np.float64)
    return rgb_to_y(img[..., 0], img[..., 1], img[..., 2])


def synthetic_plane(h: int, w: int, seed: int = 0) -> np.ndarray:
    """Seeded test image with gratings, soft blobs, hard edges and fine texture."""
    gen = np.random.Generator(np.random.Philox(derive_seed(seed, 0x5EED)))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(4):
        theta = gen.uniform(0, np.pi)
        freq = gen.uniform(0.05, 0.6)
        phase = gen.uniform(0, 2 * np.pi)
        img += gen.uniform(10, 30) * np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(3):
        cy, cx = gen.uniform(0, h), gen.uniform(0, w)
        r = gen.uniform(0.1, 0.4) * min(h, w)
        img += gen.uniform(-60, 60) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    for _ in range(2):
        theta = gen.uniform(0, 2 * np.pi)
        off = gen.uniform(-0.3, 0.3) * (h + w)
        img += gen.uniform(-40, 40) * ((xx - w / 2) * np.cos(theta) + (yy - h / 2) * np.sin(theta) > off)
    img += gen.normal(0, 6, size=(h, w))
    return clamp(img + 128.0)
