"""Procedural BEV map scenes and their degraded sensor views.

A scene is a set of rasterised map elements in three classes (pedestrian
crossing, divider, boundary).  From the ground truth we derive:

* ``cam_view``: dense colour rendering, blurred with distance from the ego
  cell, intensity noise, and rectangular occluders of constant value;
* ``lidar_view``: sparse returns on element edges (plus sparse ground
  returns) thinning with distance, with a reflectivity and a height channel;
* ``sd_prior``: skeleton of the boundary class, max-pooled by
  ``sd_downsample``;
* ``hd_noisy``: ground truth with per-instance jitter and cell dropout.

Everything lives in the BEV frame; there is no perspective camera.  Each
modality draws from its own RNG stream so changing one view's parameters
never alters another view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.draw import line as draw_line
from skimage.draw import polygon as draw_polygon
from skimage.morphology import skeletonize

from . import config as cfgmod
from .container import ContainerError, pack_arrays, read_container, unpack_arrays, write_container

CLASSES = ("ped_crossing", "divider", "boundary")
PED, DIV, BOU = 0, 1, 2
CAM_CHANNELS = 3
LIDAR_CHANNELS = 2

# colours rendered by the camera, one RGB triple per class
_CLASS_COLOURS = np.array([
    [1.00, 1.00, 1.00],
    [0.90, 0.75, 0.10],
    [0.45, 0.50, 0.65],
])
_REFLECTIVITY = np.array([1.0, 0.7, 0.4])
_GROUND_RETURN = 0.1
_OCCLUDER_VALUE = 0.25

DATASET_MAGIC = b"TCSD"


@dataclass
class GenConfig:
    height: int = 64
    width: int = 128
    dividers: tuple[int, int] = (2, 4)
    boundaries: tuple[int, int] = (1, 3)
    crossings: tuple[int, int] = (1, 2)
    divider_width: tuple[int, int] = (2, 3)
    boundary_width: tuple[int, int] = (2, 3)
    crossing_width: tuple[int, int] = (4, 6)
    dash_prob: float = 0.5
    cam_blur_sigma: float = 1.5
    cam_occlusion_rate: float = 0.12
    cam_noise_sigma: float = 0.2
    lidar_keep_near: float = 0.9
    lidar_keep_far: float = 0.3
    lidar_ground_rate: float = 0.08
    sd_downsample: int = 8
    hd_dropout: float = 0.1
    hd_jitter: int = 2
    n_train: int = 512
    n_val: int = 128
    patch_size: int = 4

    def validate(self) -> None:
        for name in ("dash_prob", "cam_occlusion_rate", "lidar_keep_near", "lidar_keep_far",
                     "lidar_ground_rate", "hd_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("dividers", "boundaries", "crossings", "divider_width", "boundary_width",
                     "crossing_width"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range, got {(lo, hi)}")
        if self.dividers[1] + self.boundaries[1] + self.crossings[1] == 0:
            raise ValueError("degenerate config: scenes would contain no elements")
        if min(self.divider_width[0], self.boundary_width[0], self.crossing_width[0]) < 1:
            raise ValueError("stroke widths must be >= 1")
        if self.cam_blur_sigma < 0 or self.cam_noise_sigma < 0 or self.hd_jitter < 0:
            raise ValueError("blur, noise and jitter must be non-negative")
        # BEV features sit at half resolution and are cut into patches
        unit = max(2 * self.patch_size, self.sd_downsample)
        if self.height % unit or self.width % unit:
            raise ValueError(f"grid {self.height}x{self.width} must be divisible by {unit}")


@dataclass
class SceneSample:
    """One scene. Arrays carry a leading batch axis of 1 (``gt_inst`` is int32)."""

    gt_sem: np.ndarray
    gt_inst: np.ndarray
    cam_view: np.ndarray
    lidar_view: np.ndarray
    sd_prior: np.ndarray
    hd_noisy: np.ndarray
    seed: int

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in
                ("gt_sem", "gt_inst", "cam_view", "lidar_view", "sd_prior", "hd_noisy")}


@dataclass
class Dataset:
    config: GenConfig
    samples: list[SceneSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


# ---------------------------------------------------------------- geometry

def _distance_map(h: int, w: int) -> np.ndarray:
    """Normalised distance from the ego cell at the grid centre, in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return np.sqrt(((yy - cy) / cy) ** 2 + ((xx - cx) / cx) ** 2) / np.sqrt(2.0)


def _stroke(mask: np.ndarray, pts: np.ndarray, width: int) -> None:
    h, w = mask.shape
    canvas = np.zeros_like(mask)
    for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
        rr, cc = draw_line(int(round(r0)), int(round(c0)), int(round(r1)), int(round(c1)))
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        canvas[rr[keep], cc[keep]] = True
    # close diagonal steps so a stroke is one 4-connected component
    diag = canvas[:-1, :-1] & canvas[1:, 1:] & ~canvas[:-1, 1:] & ~canvas[1:, :-1]
    anti = canvas[:-1, 1:] & canvas[1:, :-1] & ~canvas[:-1, :-1] & ~canvas[1:, 1:]
    canvas[:-1, 1:] |= diag
    canvas[:-1, :-1] |= anti
    if width > 1:
        canvas = ndimage.binary_dilation(canvas, structure=np.ones((width, width), bool))
    mask |= canvas


def _draw_divider(rng, cfg: GenConfig, mask: np.ndarray) -> float:
    h, w = cfg.height, cfg.width
    y0 = rng.uniform(6, h - 7)
    amp = rng.uniform(0, 4)
    period = rng.uniform(w * 0.8, w * 2.5)
    phase = rng.uniform(0, 2 * np.pi)
    xs = np.arange(-2, w + 3, 4, dtype=float)
    ys = y0 + amp * np.sin(2 * np.pi * xs / period + phase)
    width = int(rng.integers(cfg.divider_width[0], cfg.divider_width[1] + 1))
    if rng.random() < cfg.dash_prob:
        dash, gap = int(rng.integers(10, 18)), int(rng.integers(5, 9))
        start = -int(rng.integers(0, dash + gap))
        while start < w:
            sel = (xs >= start) & (xs <= start + dash)
            if sel.sum() >= 2:
                _stroke(mask, np.stack([ys[sel], xs[sel]], 1), width)
            start += dash + gap
    else:
        _stroke(mask, np.stack([ys, xs], 1), width)
    return float(y0)


def _draw_boundary(rng, cfg: GenConfig, mask: np.ndarray) -> None:
    h, w = cfg.height, cfg.width
    cy, cx = rng.uniform(-0.1 * h, 1.1 * h), rng.uniform(0, w)
    ry, rx = rng.uniform(6, 0.6 * h), rng.uniform(10, 0.6 * w)
    k = 14
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(0.8, 1.2, k)
    pts = np.stack([cy + ry * rad * np.sin(ang), cx + rx * rad * np.cos(ang)], 1)
    pts = np.vstack([pts, pts[:1]])
    width = int(rng.integers(cfg.boundary_width[0], cfg.boundary_width[1] + 1))
    _stroke(mask, pts, width)


def _draw_crossing(rng, cfg: GenConfig, mask: np.ndarray, anchors: list[float]) -> None:
    h, w = cfg.height, cfg.width
    yc = anchors[int(rng.integers(len(anchors)))] if anchors else rng.uniform(8, h - 8)
    xc = rng.uniform(8, w - 8)
    length = rng.uniform(14, 30)
    width = int(rng.integers(cfg.crossing_width[0], cfg.crossing_width[1] + 1))
    tilt = rng.uniform(-0.25, 0.25)
    dy, dx = np.cos(tilt) * length / 2, np.sin(tilt) * length / 2
    ny, nx = -np.sin(tilt) * width / 2, np.cos(tilt) * width / 2
    rows = np.array([yc - dy - ny, yc - dy + ny, yc + dy + ny, yc + dy - ny])
    cols = np.array([xc - dx - nx, xc - dx + nx, xc + dx + nx, xc + dx - nx])
    rr, cc = draw_polygon(rows, cols, shape=(h, w))
    mask[rr, cc] = True


def _label_instances(sem: np.ndarray) -> np.ndarray:
    inst = np.zeros(sem.shape, dtype=np.int32)
    for c in range(sem.shape[0]):
        inst[c], _ = ndimage.label(sem[c] > 0)
    return inst


# ---------------------------------------------------------------- modality views

def render_camera(sem: np.ndarray, cfg: GenConfig, rng) -> np.ndarray:
    h, w = sem.shape[1:]
    img = np.zeros((CAM_CHANNELS, h, w))
    for c in range(len(CLASSES)):
        img = np.maximum(img, sem[c][None] * _CLASS_COLOURS[c][:, None, None])
    if cfg.cam_blur_sigma > 0:
        dist = _distance_map(h, w)
        blurred = np.stack([ndimage.gaussian_filter(ch, cfg.cam_blur_sigma, mode="nearest")
                            for ch in img])
        img = (1.0 - dist) * img + dist * blurred
    if cfg.cam_noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.cam_noise_sigma, img.shape)
    if cfg.cam_occlusion_rate > 0:
        occ = np.zeros((h, w), bool)
        while occ.mean() < cfg.cam_occlusion_rate:
            bh, bw = int(rng.integers(6, 17)), int(rng.integers(8, 25))
            r, c = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
            occ[r:r + bh, c:c + bw] = True
        img[:, occ] = _OCCLUDER_VALUE
    return img


def render_lidar(sem: np.ndarray, cfg: GenConfig, rng) -> np.ndarray:
    h, w = sem.shape[1:]
    keep = cfg.lidar_keep_near + (cfg.lidar_keep_far - cfg.lidar_keep_near) * _distance_map(h, w)
    out = np.zeros((LIDAR_CHANNELS, h, w))
    draw = rng.random((h, w))
    ground = rng.random((h, w))
    cross = ndimage.generate_binary_structure(2, 1)
    for c in range(len(CLASSES)):
        fg = sem[c] > 0
        edge = fg & ~ndimage.binary_erosion(fg, structure=cross, border_value=0)
        hit = edge & (draw < keep)
        out[0][hit] = np.maximum(out[0][hit], _REFLECTIVITY[c])
        if c == BOU:
            out[1][hit] = 1.0
    any_fg = sem.max(axis=0) > 0
    ground_hit = ~any_fg & (ground < cfg.lidar_ground_rate * keep)
    out[0][ground_hit] = _GROUND_RETURN
    return out


def sd_from_gt(sem: np.ndarray, factor: int) -> np.ndarray:
    skel = skeletonize(sem[BOU] > 0)
    h, w = skel.shape
    return skel.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3)).astype(np.float64)[None]


def corrupt_hd(sem: np.ndarray, inst: np.ndarray, cfg: GenConfig, rng) -> np.ndarray:
    h, w = sem.shape[1:]
    out = np.zeros_like(sem)
    for c in range(sem.shape[0]):
        for k in range(1, int(inst[c].max()) + 1):
            rr, cc = np.nonzero(inst[c] == k)
            if cfg.hd_jitter > 0:
                dy, dx = rng.integers(-cfg.hd_jitter, cfg.hd_jitter + 1, 2)
                rr, cc = rr + dy, cc + dx
                ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
                rr, cc = rr[ok], cc[ok]
            out[c, rr, cc] = 1.0
    if cfg.hd_dropout > 0:
        drop = (rng.random(out.shape) < cfg.hd_dropout) & (out > 0)
        if not drop.any() and out.any():
            idx = np.flatnonzero(out)
            drop.flat[idx[int(rng.integers(len(idx)))]] = True
        out[drop] = 0.0
    return out


# ---------------------------------------------------------------- public API

def generate_scene(cfg: GenConfig, seed: int) -> SceneSample:
    cfg.validate()
    streams = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(4)
    geo, cam_rng, lid_rng, hd_rng = (np.random.default_rng(s) for s in streams)
    h, w = cfg.height, cfg.width
    sem = np.zeros((3, h, w), bool)
    while True:
        anchors = [_draw_divider(geo, cfg, sem[DIV])
                   for _ in range(int(geo.integers(cfg.dividers[0], cfg.dividers[1] + 1)))]
        for _ in range(int(geo.integers(cfg.boundaries[0], cfg.boundaries[1] + 1))):
            _draw_boundary(geo, cfg, sem[BOU])
        for _ in range(int(geo.integers(cfg.crossings[0], cfg.crossings[1] + 1))):
            _draw_crossing(geo, cfg, sem[PED], anchors)
        if sem.any():
            break
    sem = sem.astype(np.float64)
    inst = _label_instances(sem)
    return SceneSample(
        gt_sem=sem[None],
        gt_inst=inst[None],
        cam_view=render_camera(sem, cfg, cam_rng)[None],
        lidar_view=render_lidar(sem, cfg, lid_rng)[None],
        sd_prior=sd_from_gt(sem, cfg.sd_downsample)[None],
        hd_noisy=corrupt_hd(sem, inst, cfg, hd_rng)[None],
        seed=int(seed),
    )


_SPLIT_IDS = {"train": 0, "val": 1}


def sample_seed(base_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), _SPLIT_IDS.get(split, 2), int(index)])
    return int(ss.generate_state(1, np.uint64)[0] & np.uint64(2**63 - 1))


def generate_dataset(cfg: GenConfig, base_seed: int, split: str = "train", n: int | None = None) -> Dataset:
    if n is None:
        n = cfg.n_train if split == "train" else cfg.n_val
    return Dataset(cfg, [generate_scene(cfg, sample_seed(base_seed, split, i)) for i in range(n)])


def save_dataset(dataset: Dataset, path) -> int:
    records = []
    for s in dataset.samples:
        arrays = s.arrays()
        arrays["gt_inst"] = arrays["gt_inst"].astype(np.int32)
        arrays["seed"] = np.array([s.seed], dtype=np.int64)
        records.append(pack_arrays(arrays))
    return write_container(path, DATASET_MAGIC, cfgmod.to_text(dataset.config, "gen"), records)


def load_dataset(path) -> Dataset:
    header, records = read_container(path, DATASET_MAGIC)
    cfg = cfgmod.from_text(GenConfig, header, "gen")
    samples = []
    for rec in records:
        a = unpack_arrays(rec)
        try:
            seed = int(a.pop("seed")[0])
            samples.append(SceneSample(seed=seed, **a))
        except (KeyError, TypeError) as exc:
            raise ContainerError(f"{path}: malformed sample record ({exc})") from None
    return Dataset(cfg, samples)


def stack(samples, field_name: str) -> np.ndarray:
    return np.concatenate([getattr(s, field_name) for s in samples], axis=0)
