"""RGB-D samples: NetPBM I/O, NYU-style preprocessing and synthetic scenes."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParseError, ShapeError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def check_bounds(self, height: int, width: int):
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise ConfigError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image")

    def rescaled(self, scale_y: float, scale_x: float) -> "CameraIntrinsics":
        # half-pixel-centre convention, same as the bilinear resampler
        return CameraIntrinsics(
            self.fx * scale_x,
            self.fy * scale_y,
            (self.cx + 0.5) * scale_x - 0.5,
            (self.cy + 0.5) * scale_y - 0.5,
        )

    def cropped(self, top: int, left: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx, self.fy, self.cx - left, self.cy - top)


@dataclass
class RgbdSample:
    rgb: np.ndarray  # H x W x 3, [0, 1]
    depth: np.ndarray  # H x W, metres
    mask: np.ndarray  # H x W, bool, True = valid
    intrinsics: CameraIntrinsics
    id: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ShapeError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2] or self.mask.shape != self.rgb.shape[:2]:
            raise ShapeError(
                f"sample {self.id!r}: planes disagree rgb={self.rgb.shape[:2]} depth={self.depth.shape} mask={self.mask.shape}"
            )
        if np.any(self.depth[self.mask] <= 0):
            raise DataError(f"sample {self.id!r}: non-positive depth on a valid pixel")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rgb.shape[:2]

    def image_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.rgb.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# NetPBM


def _read_header(buf: bytes, path) -> Tuple[bytes, List[int], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated NetPBM header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    magic = tokens[0]
    try:
        nums = [int(t) for t in tokens[1:]]
    except ValueError:
        raise FormatError(f"{path}: malformed NetPBM header {tokens!r}") from None
    return magic, nums, pos


def read_netpbm(path) -> np.ndarray:
    """Read binary PPM (P6) or PGM (P5), 8 or 16 bit. Returns HxWx3 or HxW integers."""
    buf = Path(path).read_bytes()
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: expected P5 or P6 magic, found {buf[:2]!r}")
    magic, (width, height, maxval), pos = _read_header(buf, path)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad dimensions or maxval ({width}x{height}, {maxval})")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raw = buf[pos:pos + count * dtype.itemsize]
    if len(raw) < count * dtype.itemsize:
        raise FormatError(f"{path}: raster truncated ({len(raw)} of {count * dtype.itemsize} bytes)")
    arr = np.frombuffer(raw, dtype=dtype, count=count).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def write_ppm(path, rgb: np.ndarray):
    """Write an HxWx3 float image in [0,1] (or uint8) as 8-bit binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"write_ppm expects HxWx3, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm16(path, values: np.ndarray):
    """Write HxW unsigned integers as 16-bit big-endian binary PGM."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"write_pgm16 expects HxW, got {values.shape}")
    if values.min(initial=0) < 0 or values.max(initial=0) > 65535:
        raise DataError("PGM values must lie in [0, 65535]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.astype(">u2").tobytes())


def depth_to_mm(depth: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    mm = np.round(np.asarray(depth, dtype=np.float64) * 1000.0)
    mm = np.clip(mm, 0, 65535)
    if mask is not None:
        mm = np.where(mask, mm, 0)
    return mm.astype(np.uint16)


# ---------------------------------------------------------------------------
# meta files

META_KEYS = ("fx", "fy", "cx", "cy", "depth_unit")


def read_meta(path) -> dict:
    meta = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in META_KEYS:
            raise ParseError(f"unknown meta key {key!r}", path, lineno)
        try:
            meta[key] = float(value)
        except ValueError:
            raise ParseError(f"value for {key!r} is not a number: {value!r}", path, lineno) from None
    missing = [k for k in ("fx", "fy", "cx", "cy") if k not in meta]
    if missing:
        raise ParseError(f"missing intrinsics: {', '.join(missing)}", path)
    meta.setdefault("depth_unit", 0.001)
    return meta


def write_meta(path, intrinsics: CameraIntrinsics, depth_unit: float = 0.001):
    with open(path, "w") as fh:
        fh.write(f"fx={intrinsics.fx!r}\nfy={intrinsics.fy!r}\ncx={intrinsics.cx!r}\ncy={intrinsics.cy!r}\n")
        fh.write(f"depth_unit={depth_unit!r}\n")


# ---------------------------------------------------------------------------
# samples

NYU_RESIZED = (312, 416)
NYU_CROPPED = (240, 320)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    from .tensor import interp_matrix

    ah = interp_matrix(img.shape[0], out_h)
    aw = interp_matrix(img.shape[1], out_w)
    if img.ndim == 2:
        return ah @ img @ aw.T
    rows = np.tensordot(ah, img, axes=(1, 0))  # [out_h, w, c]
    return np.matmul(aw, rows)  # [out_h, out_w, c]


def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ys = np.minimum(((np.arange(out_h) + 0.5) * img.shape[0] / out_h).astype(int), img.shape[0] - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * img.shape[1] / out_w).astype(int), img.shape[1] - 1)
    return img[ys][:, xs]


def center_crop_offsets(shape, target) -> Tuple[int, int]:
    (h, w), (th, tw) = shape, target
    if th > h or tw > w:
        raise ShapeError(f"cannot crop {h}x{w} to {th}x{tw}")
    return (h - th) // 2, (w - tw) // 2


def nyu_preprocess(sample: RgbdSample) -> RgbdSample:
    """Down-sample to 312x416 then centre-crop to 240x320.

    RGB is resampled bilinearly; depth and mask use nearest neighbour so
    holes never bleed into valid depth.
    """
    h, w = sample.shape
    rh, rw = NYU_RESIZED
    rgb = _resize_bilinear(sample.rgb.astype(np.float64), rh, rw)
    depth = _resize_nearest(sample.depth, rh, rw)
    mask = _resize_nearest(sample.mask, rh, rw)
    k = sample.intrinsics.rescaled(rh / h, rw / w)
    top, left = center_crop_offsets((rh, rw), NYU_CROPPED)
    ch, cw = NYU_CROPPED
    sl = (slice(top, top + ch), slice(left, left + cw))
    return RgbdSample(
        np.clip(rgb[sl], 0, 1), depth[sl], mask[sl], k.cropped(top, left), sample.id
    )


def load_sample(rgb_path, depth_path, meta_path, nyu_preprocess_flag: bool = False, sample_id: Optional[str] = None) -> RgbdSample:
    rgb_raw = read_netpbm(rgb_path)
    if rgb_raw.ndim != 3:
        raise FormatError(f"{rgb_path}: expected a colour PPM (P6)")
    if rgb_raw.dtype != np.uint8:
        raise FormatError(f"{rgb_path}: expected maxval 255")
    depth_raw = read_netpbm(depth_path)
    if depth_raw.ndim != 2:
        raise FormatError(f"{depth_path}: expected a greyscale PGM (P5)")
    if rgb_raw.shape[:2] != depth_raw.shape:
        raise ShapeError(f"rgb {rgb_raw.shape[:2]} and depth {depth_raw.shape} dimensions disagree")
    meta = read_meta(meta_path)
    depth = depth_raw.astype(np.float64) * meta["depth_unit"]
    sample = RgbdSample(
        rgb_raw.astype(np.float32) / 255.0,
        depth,
        depth_raw > 0,
        CameraIntrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"]),
        sample_id if sample_id is not None else Path(rgb_path).stem,
    )
    return nyu_preprocess(sample) if nyu_preprocess_flag else sample


def sample_paths(directory, sample_id: str):
    d = Path(directory)
    return d / f"{sample_id}_rgb.ppm", d / f"{sample_id}_depth.pgm", d / f"{sample_id}_meta.txt"


def save_sample(sample: RgbdSample, directory) -> Tuple[Path, Path, Path]:
    """Write ``<id>_rgb.ppm``, ``<id>_depth.pgm`` (millimetres) and ``<id>_meta.txt``."""
    os.makedirs(directory, exist_ok=True)
    rgb_p, depth_p, meta_p = sample_paths(directory, sample.id or "sample")
    write_ppm(rgb_p, sample.rgb)
    write_pgm16(depth_p, depth_to_mm(sample.depth, sample.mask))
    write_meta(meta_p, sample.intrinsics)
    return rgb_p, depth_p, meta_p


def load_dataset(directory, nyu_preprocess_flag: bool = False) -> List[RgbdSample]:
    d = Path(directory)
    ids = sorted(p.name[: -len("_rgb.ppm")] for p in d.glob("*_rgb.ppm"))
    if not ids:
        raise DataError(f"no *_rgb.ppm samples found in {d}")
    return [load_sample(*sample_paths(d, i), nyu_preprocess_flag=nyu_preprocess_flag, sample_id=i) for i in ids]


def save_dataset(samples: Sequence[RgbdSample], directory):
    for s in samples:
        save_sample(s, directory)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthSceneConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    d_min: float = 1.0
    d_max: float = 10.0
    objects: Tuple[int, int] = (2, 5)
    shapes: Tuple[str, ...] = ("rect", "disc")
    texture: str = "gradient"
    depth_shading: bool = True

    def validate(self):
        if not 0 < self.d_min < self.d_max:
            raise ConfigError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.height % 4 or self.width % 4 or self.height < 4 or self.width < 4:
            raise ConfigError(f"image dims {self.height}x{self.width} must be positive multiples of 4")
        lo, hi = self.objects
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad object count range {self.objects}")
        if not self.shapes or any(s not in ("rect", "disc") for s in self.shapes):
            raise ConfigError(f"shape palette must be drawn from rect/disc, got {self.shapes}")
        if self.texture not in ("flat", "gradient"):
            raise ConfigError(f"texture must be flat or gradient, got {self.texture!r}")
        return self

    def intrinsics(self) -> CameraIntrinsics:
        # synthetic camera, roughly 53 degree horizontal field of view
        return CameraIntrinsics(float(self.width), float(self.width), (self.width - 1) / 2, (self.height - 1) / 2)


@dataclass
class SceneShape:
    kind: str
    depth: float
    color: np.ndarray
    params: tuple = field(default_factory=tuple)


def render_scene(cfg: SynthSceneConfig, rng: np.random.Generator):
    """Render one scene. Returns ``(rgb, depth, ids, shapes)``; ``ids`` indexes ``shapes`` per pixel."""
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))

    def shade(base, depth):
        if not cfg.depth_shading:
            return base
        # nearer surfaces are brighter: a monocular cue the network can pick up
        t = (depth - cfg.d_min) / (cfg.d_max - cfg.d_min)
        return base * (1.0 - 0.6 * t) + 0.05

    background = SceneShape("background", float(cfg.d_max), shade(rng.uniform(0.2, 0.9, 3), cfg.d_max))
    shapes = [background]
    for _ in range(n_obj):
        kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        depth = float(rng.uniform(cfg.d_min, cfg.d_max))
        color = shade(rng.uniform(0.1, 0.9, 3), depth)
        if kind == "rect":
            y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            y1 = min(h, y0 + int(rng.integers(4, max(5, h // 2))))
            x1 = min(w, x0 + int(rng.integers(4, max(5, w // 2))))
            params = (int(y0), int(x0), int(y1), int(x1))
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(3, max(4, min(h, w) / 4))
            params = (float(cy), float(cx), float(r))
        grad_dir = rng.uniform(0, 2 * np.pi)
        shapes.append(SceneShape(kind, depth, color, params + (float(grad_dir),)))

    ids = np.zeros((h, w), dtype=np.int32)
    # painter's algorithm: far to near, nearer overwrites
    order = sorted(range(1, len(shapes)), key=lambda i: -shapes[i].depth)
    for i in order:
        s = shapes[i]
        if s.kind == "rect":
            y0, x0, y1, x1 = s.params[:4]
            cover = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            cy, cx, r = s.params[:3]
            cover = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        ids[cover] = i

    depth_table = np.array([s.depth for s in shapes])
    color_table = np.stack([s.color for s in shapes])
    depth = depth_table[ids]
    rgb = color_table[ids]
    if cfg.texture == "gradient":
        angle = np.array([0.0] + [s.params[-1] for s in shapes[1:]])[ids]
        ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h) * 0.5 + 0.5
        rgb = rgb * (0.75 + 0.25 * ramp)[..., None]
    return np.clip(rgb, 0.0, 1.0), depth, ids, shapes


def generate_synthetic(cfg: SynthSceneConfig, n: int) -> List[RgbdSample]:
    """``n`` deterministic scenes: background plane at ``d_max`` plus composited shapes."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(n):
        rgb, depth, _, _ = render_scene(cfg, rng)
        out.append(RgbdSample(rgb, depth, np.ones(depth.shape, dtype=bool), cfg.intrinsics(), f"synth_{i:04d}"))
    return out
