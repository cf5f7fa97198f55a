"""Toy-scale teacher, coach and student networks.

All three share the same decoder layout and produce BEV features at half
the raster resolution:

* teacher: camera + lidar encoders -> BEV projection -> SD fusion -> HD fusion
* coach:   camera encoder + pseudo-lidar encoder (both from the camera) ->
           same projection / fusion path as the teacher
* student: camera encoder -> BEV projection

The views already live in the BEV frame, so the student's inverse
perspective mapping reduces to a learned 1x1 reprojection.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .container import ContainerError, pack_arrays, read_container, unpack_arrays, write_container
from .diffcore import Tensor
from .scenegen import CAM_CHANNELS, LIDAR_CHANNELS

ROLES = ("teacher", "coach", "student")
BEV_WIDTH = {"student": 16, "coach": 24, "teacher": 32}
ENC_WIDTH = 16
DEC_WIDTH = 8
EMBED_DIM = 4
N_CLASSES = 3
CKPT_MAGIC = b"TCSP"


class RoleError(ValueError):
    pass


# (name, out_ch, in_ch, kernel, stride)
def _layout(role: str) -> list[tuple[str, int, int, int, int]]:
    c = BEV_WIDTH[role]
    enc_img = [("enc_img.0", 8, CAM_CHANNELS, 3, 2), ("enc_img.1", ENC_WIDTH, 8, 3, 1)]
    decoder = [("dec.0", DEC_WIDTH, c, 3, 1), ("dec.out", N_CLASSES, DEC_WIDTH, 3, 1),
               ("embed", EMBED_DIM, DEC_WIDTH, 1, 1)]
    if role == "student":
        return enc_img + [
            ("enc_img.2", ENC_WIDTH, ENC_WIDTH, 3, 1),
            ("bevproj", c, ENC_WIDTH, 1, 1),
        ] + decoder
    if role == "teacher":
        geo = [("enc_lidar.0", 8, LIDAR_CHANNELS, 3, 2), ("enc_lidar.1", ENC_WIDTH, 8, 3, 1)]
    elif role == "coach":
        geo = [("enc_3d.0", 8, CAM_CHANNELS, 3, 2), ("enc_3d.1", ENC_WIDTH, 8, 3, 1)]
    else:
        raise RoleError(f"unknown role {role!r}")
    return enc_img + geo + [
        ("bevproj", c, 2 * ENC_WIDTH, 1, 1),
        ("sdfusion", c, c + 1, 1, 1),
        ("hdfusion", c, c + N_CLASSES, 3, 1),
    ] + decoder


@dataclass
class ParamStore:
    """Ordered name -> tensor map with a freeze switch."""

    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.tensors[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=not self.frozen)

    def freeze(self) -> None:
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def thaw(self) -> None:
        self.frozen = False
        for t in self.tensors.values():
            t.requires_grad = True

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def to_bytes(self) -> bytes:
        return pack_arrays({k: t.data for k, t in self.tensors.items()})

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def copy(self) -> "ParamStore":
        out = type(self).__new__(type(self))
        out.__dict__.update(self.__dict__)
        out.tensors = OrderedDict()
        for k, t in self.tensors.items():
            out.tensors[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out


@dataclass
class NetParams(ParamStore):
    role: str = "student"


@dataclass
class ForwardOut:
    bev: Tensor
    logits: Tensor
    embed: Tensor
    geo: Tensor | None = None  # lidar (teacher) or pseudo-lidar (coach) features


def _rng(seed: int, *keys: int):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *keys]))


def init_params(role: str, seed: int) -> NetParams:
    """Fan-in scaled normal init, zero biases, zero final decoder layer."""
    if role not in ROLES:
        raise RoleError(f"unknown role {role!r}")
    rng = _rng(seed, ROLES.index(role))
    p = NetParams(role=role)
    for name, out_ch, in_ch, k, _ in _layout(role):
        fan_in = in_ch * k * k
        if name == "dec.out":
            w = np.zeros((out_ch, in_ch, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k))
        p.add(f"{name}.w", w)
        p.add(f"{name}.b", np.zeros(out_ch))
    return p


def save_params(p: ParamStore, path) -> int:
    role = getattr(p, "role", "store")
    header = f"role = {role}\nfrozen = {'true' if p.frozen else 'false'}\n"
    return write_container(path, CKPT_MAGIC, header, [p.to_bytes()])


def load_params(path) -> NetParams:
    header, records = read_container(path, CKPT_MAGIC)
    meta = dict(line.split(" = ", 1) for line in header.strip().splitlines())
    if len(records) != 1:
        raise ContainerError(f"{path}: expected one tensor record, found {len(records)}")
    p = NetParams(role=meta.get("role", "student"), frozen=meta.get("frozen") == "true")
    for k, v in unpack_arrays(records[0]).items():
        p.add(k, v)
    return p


# ---------------------------------------------------------------- forward passes

def _conv(p: ParamStore, name: str, x: Tensor, stride: int = 1, act: bool = True) -> Tensor:
    w = p[f"{name}.w"]
    y = dc.conv2d(x, w, p[f"{name}.b"], stride=stride, pad=w.shape[-1] // 2)
    return dc.relu(y) if act else y


def _as_input(x, channels: int | None, what: str) -> Tensor:
    if x is None:
        raise ValueError(f"missing {what} input")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise dc.ShapeError(what, x.shape, ("B", "C", "H", "W"))
    if channels is not None and x.shape[1] != channels:
        raise dc.ShapeError(what, x.shape, (x.shape[0], channels) + x.shape[2:],
                            f"{what} needs {channels} channels")
    return x


def _check_role(p: NetParams, role: str) -> None:
    if p.role != role:
        raise RoleError(f"{role}_forward called with {p.role} parameters")


def _decode(p: ParamStore, bev: Tensor) -> tuple[Tensor, Tensor]:
    h = dc.upsample_nearest(_conv(p, "dec.0", bev), 2)
    return _conv(p, "dec.out", h, act=False), _conv(p, "embed", h, act=False)


def _fuse_priors(p: ParamStore, bev: Tensor, sd, hd) -> Tensor:
    sd = _as_input(sd, 1, "sd_prior")
    hd = _as_input(hd, N_CLASSES, "hd_prior")
    up = bev.shape[2] // max(sd.shape[2], 1)
    if sd.shape[2] * up != bev.shape[2] or sd.shape[3] * up != bev.shape[3]:
        raise dc.ShapeError("sdfusion", bev.shape, sd.shape, "SD raster must tile the BEV grid")
    x = _conv(p, "sdfusion", dc.concat_channels([bev, dc.upsample_nearest(sd, up)]))
    return _conv(p, "hdfusion", dc.concat_channels([x, dc.avg_pool2d(hd, 2)]))


def student_forward(p: NetParams, cam) -> ForwardOut:
    _check_role(p, "student")
    x = _as_input(cam, CAM_CHANNELS, "cam_view")
    f = _conv(p, "enc_img.0", x, stride=2)
    f = _conv(p, "enc_img.2", _conv(p, "enc_img.1", f))
    bev = _conv(p, "bevproj", f)
    logits, embed = _decode(p, bev)
    return ForwardOut(bev, logits, embed)


def teacher_forward(p: NetParams, cam, lidar, sd_prior, hd_prior) -> ForwardOut:
    _check_role(p, "teacher")
    x = _as_input(cam, CAM_CHANNELS, "cam_view")
    l = _as_input(lidar, LIDAR_CHANNELS, "lidar_view")
    f_img = _conv(p, "enc_img.1", _conv(p, "enc_img.0", x, stride=2))
    f_lid = _conv(p, "enc_lidar.1", _conv(p, "enc_lidar.0", l, stride=2))
    bev = _conv(p, "bevproj", dc.concat_channels([f_img, f_lid]))
    fused = _fuse_priors(p, bev, sd_prior, hd_prior)
    logits, embed = _decode(p, fused)
    return ForwardOut(fused, logits, embed, geo=f_lid)


def coach_forward(p: NetParams, cam, sd_prior, hd_prior) -> ForwardOut:
    _check_role(p, "coach")
    x = _as_input(cam, CAM_CHANNELS, "cam_view")
    f_img = _conv(p, "enc_img.1", _conv(p, "enc_img.0", x, stride=2))
    f_pseudo = _conv(p, "enc_3d.1", _conv(p, "enc_3d.0", x, stride=2))
    bev = _conv(p, "bevproj", dc.concat_channels([f_img, f_pseudo]))
    fused = _fuse_priors(p, bev, sd_prior, hd_prior)
    logits, embed = _decode(p, fused)
    return ForwardOut(fused, logits, embed, geo=f_pseudo)


def forward(p: NetParams, batch: dict, hd_key: str = "hd_noisy") -> ForwardOut:
    """Dispatch on role using a batch dict of stacked scene arrays."""
    if p.role == "student":
        return student_forward(p, batch["cam_view"])
    if p.role == "teacher":
        return teacher_forward(p, batch["cam_view"], batch["lidar_view"], batch["sd_prior"], batch[hd_key])
    if p.role == "coach":
        return coach_forward(p, batch["cam_view"], batch["sd_prior"], batch[hd_key])
    raise RoleError(f"unknown role {p.role!r}")


def param_count(p: ParamStore) -> int:
    return p.count()


def parameters(stores: Iterable[ParamStore]) -> list[Tensor]:
    return [t for s in stores for t in s if t.requires_grad]
