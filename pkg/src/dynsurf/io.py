"""Dataset loading, synthetic-scene generation, image codecs, quality
metrics, and the binary checkpoint container.

Datasets are a ``manifest.json`` plus 8-bit PNG frames (and optional masks).
Frame times are normalized to [0, 1]; the train/validation split takes every
fourth frame for training and the middle frame between consecutive training
frames for validation (index mod 4 == 0 trains, == 2 validates).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from . import geom
from .errors import (BadImage, BadMagic, BadManifest, MissingFile, ShapeMismatch,
                     TruncatedFile, VersionMismatch)
from .geom import SE3, Rotation3
from .raster import Camera, render_bruteforce
from .surfel import BoneSet, SurfelCloud, N_SH, complete_tangent_frame, sh0_from_rgb


# ---------------------------------------------------------------------------
# deterministic PRNG (xoshiro256**), documented for cross-platform synth


class XorShiftRng:
    """xoshiro256** with splitmix64 seeding; 53-bit uniforms, Box-Muller
    normals. Used wherever bitwise-reproducible synthetic data is required."""

    _M = np.uint64(0xFFFFFFFFFFFFFFFF)

    def __init__(self, seed: int):
        s = np.uint64(seed)
        state = []
        for _ in range(4):
            s = np.uint64((int(s) + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
            z = int(s)
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
            state.append(np.uint64(z ^ (z >> 31)))
        self._s = state

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & 0xFFFFFFFFFFFFFFFF

    def next_u64(self) -> int:
        s0, s1, s2, s3 = (int(v) for v in self._s)
        result = (self._rotl((s1 * 5) & 0xFFFFFFFFFFFFFFFF, 7) * 9) & 0xFFFFFFFFFFFFFFFF
        t = (s1 << 17) & 0xFFFFFFFFFFFFFFFF
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = self._rotl(s3, 45)
        self._s = [np.uint64(s0), np.uint64(s1), np.uint64(s2), np.uint64(s3)]
        return result

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = np.array([self.next_u64() >> 11 for _ in range(n)], dtype=np.float64)
        out = vals * (1.0 / (1 << 53))
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = np.array([max(self.uniform(), 1e-300) for _ in range(m)])
        u2 = np.array([self.uniform() for _ in range(m)])
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else float(z[0])


# ---------------------------------------------------------------------------
# images


def write_png(path: str, img: np.ndarray):
    """img in [0, 1], (H, W, 3) or (H, W); written as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFile(path)
    try:
        img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    except Exception as exc:  # noqa: BLE001
        raise BadImage(f"{path}: {exc}") from exc
    return img


# ---------------------------------------------------------------------------
# dataset


@dataclass
class FrameRecord:
    image_path: str
    time: float
    video: int
    camera: SE3 | None = None
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    frames: list = dc_field(default_factory=list)


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray            # (F, H, W, 3) floats in [0, 1]
    masks: np.ndarray | None      # (F, H, W) in [0, 1] or None
    times: np.ndarray             # (F,)
    videos: np.ndarray            # (F,) int video index
    cameras: list                 # per-frame SE3 or None
    train_idx: np.ndarray
    val_idx: np.ndarray

    def camera_for(self, default_pose: SE3 | None = None) -> Camera:
        """Canonical fixed camera: the first frame's camera if present."""
        m = self.manifest
        pose = None
        for c in self.cameras:
            if c is not None:
                pose = c
                break
        if pose is None:
            pose = default_pose if default_pose is not None else SE3.identity()
        return Camera(m.fx, m.fy, m.cx, m.cy, m.width, m.height, pose)

    @property
    def n_videos(self) -> int:
        return int(self.videos.max()) + 1 if self.videos.size else 0


def _split_indices(n: int):
    idx = np.arange(n)
    return idx[idx % 4 == 0], idx[idx % 4 == 2]


def load_dataset(path: str) -> Dataset:
    """Load a manifest directory; decodes frames and computes the split."""
    mf = os.path.join(path, "manifest.json")
    if not os.path.exists(mf):
        raise MissingFile(mf)
    try:
        with open(mf, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BadManifest(f"{mf}:{exc.lineno}: {exc.msg}") from exc

    for key in ("width", "height", "intrinsics", "frames"):
        if key not in doc:
            raise BadManifest(f"{mf}: missing key '{key}'")
    if not doc["frames"]:
        raise BadManifest(f"{mf}: empty frame list")

    intr = doc["intrinsics"]
    man = DatasetManifest(int(doc["width"]), int(doc["height"]),
                          float(intr["fx"]), float(intr["fy"]),
                          float(intr["cx"]), float(intr["cy"]))
    images, masks, times, videos, cameras = [], [], [], [], []
    any_mask = False
    last_time_per_video: dict = {}
    for i, fr in enumerate(doc["frames"]):
        if "image" not in fr or "time" not in fr:
            raise BadManifest(f"{mf}: frame {i} missing 'image' or 'time'")
        t = float(fr["time"])
        v = int(fr.get("video", 0))
        if v in last_time_per_video and t < last_time_per_video[v]:
            raise BadManifest(f"{mf}: frame {i} time decreases within video {v}")
        last_time_per_video[v] = t
        rec = FrameRecord(os.path.join(path, fr["image"]), t, v)
        img = read_png(rec.image_path)
        if img.ndim != 3 or img.shape != (man.height, man.width, 3):
            raise BadImage(f"{rec.image_path}: expected {man.height}x{man.width}x3")
        images.append(img)
        if "mask" in fr and fr["mask"]:
            any_mask = True
            mk = read_png(os.path.join(path, fr["mask"]))
            if mk.ndim == 3:
                mk = mk[..., 0]
            masks.append(mk)
        else:
            masks.append(None)
        if "camera" in fr and fr["camera"]:
            cam = fr["camera"]
            cameras.append(SE3.from_rot_trans(np.array(cam["rot"], dtype=np.float64),
                                              np.array(cam["trans"], dtype=np.float64)))
        else:
            cameras.append(None)
        times.append(t)
        videos.append(v)
        man.frames.append(rec)

    mask_arr = None
    if any_mask:
        mask_arr = np.stack([m if m is not None else np.ones((man.height, man.width))
                             for m in masks])
    videos = np.asarray(videos, dtype=np.int64)
    # split is computed per video over its own frame ordering
    train, val = [], []
    for v in np.unique(videos):
        where = np.nonzero(videos == v)[0]
        tr, va = _split_indices(where.size)
        train.extend(where[tr])
        val.extend(where[va])
    return Dataset(man, np.stack(images), mask_arr, np.asarray(times), videos,
                   cameras, np.asarray(sorted(train), dtype=np.int64),
                   np.asarray(sorted(val), dtype=np.int64))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    n_frames: int = 20
    width: int = 64
    height: int = 64
    n_bones: int = 1
    n_surfels: int = 700
    capsule_radius: float = 0.28
    capsule_half_len: float = 0.35
    bone_rot_amp_deg: float = 2.0     # per-bone rocking amplitude
    bone_wobble_amp: float = 0.05     # per-bone translation sway, scene units
    orbit_deg: float = 40.0           # total root-pose orbit
    orbit_axis: tuple = (0.0, 1.0, 0.0)
    cam_distance: float = 2.6
    cam_height: float = 0.25
    fov_deg: float = 40.0
    background: tuple = (0.0, 0.0, 0.0)
    opacity: float = 0.95
    n_videos: int = 1
    write_masks: bool = True


@dataclass
class SynthGroundTruth:
    bone_transforms: np.ndarray    # (M, F, B, 4, 4) homogeneous J
    root_poses: np.ndarray         # (M, F, 4, 4) homogeneous G
    cloud: SurfelCloud
    frame_paths: list

    def root_se3(self, m: int, f: int) -> SE3:
        h = self.root_poses[m, f]
        return SE3.from_rot_trans(h[:3, :3], h[:3, 3])

    def bone_se3(self, m: int, f: int, b: int) -> SE3:
        h = self.bone_transforms[m, f, b]
        return SE3.from_rot_trans(h[:3, :3], h[:3, 3])


def _capsule_cloud(rng: XorShiftRng, cfg: SynthConfig) -> SurfelCloud:
    """Textured capsule along x: cylinder plus hemispherical caps."""
    r, hl, n = cfg.capsule_radius, cfg.capsule_half_len, cfg.n_surfels
    area_cyl = 2 * np.pi * r * (2 * hl)
    area_caps = 4 * np.pi * r * r
    n_cyl = int(round(n * area_cyl / (area_cyl + area_caps)))
    n_caps = n - n_cyl

    u = rng.uniform((n_cyl,))
    phi = rng.uniform((n_cyl,)) * 2 * np.pi
    x = (u * 2 - 1) * hl
    pts_cyl = np.stack([x, r * np.cos(phi), r * np.sin(phi)], axis=1)
    nrm_cyl = np.stack([np.zeros(n_cyl), np.cos(phi), np.sin(phi)], axis=1)

    zs = rng.uniform((n_caps,)) * 2 - 1
    phi2 = rng.uniform((n_caps,)) * 2 * np.pi
    rho = np.sqrt(np.maximum(1 - zs * zs, 0.0))
    sph = np.stack([zs, rho * np.cos(phi2), rho * np.sin(phi2)], axis=1)
    side = np.where(sph[:, 0] >= 0, 1.0, -1.0)
    pts_cap = sph * r
    pts_cap[:, 0] += side * hl
    nrm_cap = sph.copy()

    pts = np.concatenate([pts_cyl, pts_cap])
    nrm = np.concatenate([nrm_cyl, nrm_cap])
    frames = complete_tangent_frame(nrm, helper=np.array([1.0, 0.0, 0.0]))
    quats = geom.rotmat_to_quat(frames)

    area = area_cyl + area_caps
    s = 1.35 * np.sqrt(area / n)
    scales = np.full((n, 2), s)

    # smooth multi-frequency texture with enough contrast to anchor poses
    k = np.array([[5.1, 2.3, 0.7], [1.3, 6.2, 2.9], [3.1, 1.2, 5.3]])
    ph = np.array([0.0, 1.3, 2.6])
    rgb = 0.5 + 0.33 * np.sin(pts @ k.T / r + ph) + 0.12 * np.sin(pts @ (2.7 * k[::-1].T) / r)
    rgb = np.clip(rgb, 0.05, 0.95)
    sh = np.zeros((n, N_SH, 3))
    sh[:, 0, :] = sh0_from_rgb(rgb)

    bcount = cfg.n_bones
    bx = np.linspace(-hl, hl, bcount) if bcount > 1 else np.array([0.0])
    bcenters = np.stack([bx, np.zeros(bcount), np.zeros(bcount)], axis=1)
    lam = np.full((bcount, 3), 1.0 / (r * r))
    if bcount > 1:
        lam[:, 0] = 1.0 / (hl / bcount) ** 2   # tighter along the axis
    bones = BoneSet(bcenters, np.broadcast_to(np.eye(3), (bcount, 3, 3)).copy(), lam)
    return SurfelCloud(centers=pts, quats=quats, scales=scales,
                       opacities=np.full(n, cfg.opacity), sh=sh, bones=bones)


def _bone_se3(cfg: SynthConfig, b: int, B: int, t: float, m: int) -> SE3:
    phase = 2 * np.pi * (b / max(B, 1) + 0.13 * m)
    ang = np.radians(cfg.bone_rot_amp_deg) * np.sin(2 * np.pi * t + phase)
    axis = np.array([1.0, 0.0, 0.0]) if B == 1 else np.array([0.0, 0.0, 1.0])
    rot = Rotation3.from_axis_angle(axis, ang)
    wob = cfg.bone_wobble_amp * np.array([0.0,
                                          np.sin(2 * np.pi * t + phase),
                                          0.5 * np.cos(2 * np.pi * t + phase)])
    return SE3(rot, wob)


def _root_se3(cfg: SynthConfig, t: float, m: int) -> SE3:
    ang = np.radians(cfg.orbit_deg) * t + np.radians(360.0 / max(cfg.n_videos, 1)) * 0.0
    rot = Rotation3.from_axis_angle(np.asarray(cfg.orbit_axis, dtype=np.float64), ang)
    return SE3(rot, np.zeros(3))


def warp_cloud_arrays(cloud: SurfelCloud, bone_Ts: list[SE3], G: SE3):
    """Warp every surfel by DQB of the given per-bone transforms and the root
    pose; returns (centers, frames, scales3) arrays for rendering."""
    B = len(bone_Ts)
    reals = np.stack([geom.dq_from_se3(T).real for T in bone_Ts])
    duals = np.stack([geom.dq_from_se3(T).dual for T in bone_Ts])
    warped_bones = cloud.bones.warped(SE3(Rotation3(np.stack([T.rot.m for T in bone_Ts])),
                                          np.stack([T.trans for T in bone_Ts])))
    from .surfel import skinning_weights
    w = skinning_weights(cloud.centers, warped_bones)          # (K, B)
    qs = geom.UnitDualQuaternion(np.broadcast_to(reals, (len(cloud), B, 4)),
                                 np.broadcast_to(duals, (len(cloud), B, 4)))
    J = geom.dqb_blend(w, qs)                                  # batched SE3 (K,)
    W = G.compose(J)
    centers = W.apply(cloud.centers)
    frames = W.rot.m @ cloud.frames()
    scales = np.concatenate([cloud.scales, np.zeros((len(cloud), 1))], axis=1)
    return centers, frames, scales


def synth_scene(seed: int, cfg: SynthConfig, out_dir: str):
    """Generate a dataset and its ground truth; frames rendered with the
    brute-force oracle renderer. Deterministic given (seed, cfg)."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    if cfg.write_masks:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    rng = XorShiftRng(seed)
    cloud = _capsule_cloud(rng, cfg)
    B = cfg.n_bones
    F = cfg.n_frames
    M = cfg.n_videos

    cam = Camera.look_at(eye=(0.0, cfg.cam_height, cfg.cam_distance), target=(0, 0, 0),
                         width=cfg.width, height=cfg.height, fov_deg=cfg.fov_deg)

    frames_meta = []
    bone_T = np.zeros((M, F, B, 4, 4))
    root_T = np.zeros((M, F, 4, 4))
    paths = []
    for m in range(M):
        for f in range(F):
            t = f / (F - 1) if F > 1 else 0.0
            Ts = [_bone_se3(cfg, b, B, t, m) for b in range(B)]
            G = _root_se3(cfg, t, m)
            for b in range(B):
                bone_T[m, f, b] = Ts[b].as_matrix()
            root_T[m, f] = G.as_matrix()
            centers, frames, scales = warp_cloud_arrays(cloud, Ts, G)
            fb = render_bruteforce(centers, frames, scales, cloud.opacities, cloud.sh,
                                   cam, background=cfg.background)
            name = f"frames/f{f:04d}_m{m}.png"
            write_png(os.path.join(out_dir, name), fb.color)
            paths.append(name)    # dataset-relative, keeps outputs byte-stable
            rec = {"image": name, "time": t, "video": m,
                   "camera": {"rot": cam.pose.rot.m.tolist(), "trans": cam.pose.trans.tolist()}}
            if cfg.write_masks:
                mname = f"masks/f{f:04d}_m{m}.png"
                write_png(os.path.join(out_dir, mname), (fb.alpha > 0.5).astype(np.float64))
                rec["mask"] = mname
            frames_meta.append(rec)

    manifest = {"width": cfg.width, "height": cfg.height,
                "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy},
                "frames": frames_meta}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

    gt = SynthGroundTruth(bone_T, root_T, cloud, paths)
    save_groundtruth(os.path.join(out_dir, "groundtruth.dgs"), gt)
    return load_dataset(out_dir), gt


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1/MSE) for [0,1] images; 100 dB sentinel below MSE 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _blur_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode Gaussian blur over the two leading axes."""
    from numpy.lib.stride_tricks import sliding_window_view
    w = sliding_window_view(img, k.size, axis=0)
    img = np.tensordot(w, k, axes=([-1], [0]))
    w = sliding_window_view(img, k.size, axis=1)
    return np.tensordot(w, k, axes=([-1], [0]))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window, valid-mode, dynamic range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    k = _gauss_kernel(window, sigma)
    c1, c2 = k1 * k1, k2 * k2
    mu_a = _blur_valid(a, k)
    mu_b = _blur_valid(b, k)
    saa = _blur_valid(a * a, k) - mu_a * mu_a
    sbb = _blur_valid(b * b, k) - mu_b * mu_b
    sab = _blur_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# checkpoint container: magic "DGS1", version u32, named binary sections


MAGIC = b"DGS1"
VERSION = 1
_DTYPES = {0: np.float64, 1: np.float32, 2: np.int64, 3: np.int32, 4: np.uint8}
_DTAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2,
          np.dtype(np.int32): 3, np.dtype(np.uint8): 4}
_TAG_BYTES = 255


def save_checkpoint(path: str, sections: dict):
    """sections: name -> ndarray or bytes. Single-writer atomic rename."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        for name, value in sections.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            if isinstance(value, (bytes, bytearray)):
                fh.write(struct.pack("<BB", _TAG_BYTES, 1))
                fh.write(struct.pack("<Q", len(value)))
                fh.write(bytes(value))
            else:
                arr = np.asarray(value)
                if arr.ndim:
                    arr = np.ascontiguousarray(arr)
                if arr.dtype not in _DTAGS:
                    arr = arr.astype(np.float64)
                fh.write(struct.pack("<BB", _DTAGS[arr.dtype], arr.ndim))
                for d in arr.shape:
                    fh.write(struct.pack("<Q", d))
                fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedFile(f"{path}: header")
    version, n_sections = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    out = {}
    off = 12
    for _ in range(n_sections):
        name = "<unknown>"
        try:
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            raw_name = data[off:off + nlen]
            if len(raw_name) < nlen:
                raise TruncatedFile(f"{path}: section name")
            name = raw_name.decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            dims = []
            for _ in range(ndim):
                (d,) = struct.unpack_from("<Q", data, off)
                off += 8
                dims.append(d)
            if tag == _TAG_BYTES:
                nbytes = dims[0]
                payload = data[off:off + nbytes]
                if len(payload) < nbytes:
                    raise TruncatedFile(f"{path}: section '{name}' payload")
                out[name] = bytes(payload)
                off += nbytes
            else:
                dtype = np.dtype(_DTYPES[tag]).newbyteorder("<")
                nbytes = int(np.prod(dims)) * dtype.itemsize if dims else dtype.itemsize
                payload = data[off:off + nbytes]
                if len(payload) < nbytes:
                    raise TruncatedFile(f"{path}: section '{name}' payload")
                out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(_DTYPES[tag])
                off += nbytes
        except struct.error as exc:
            raise TruncatedFile(f"{path}: section '{name}': {exc}") from exc
    return out


def save_groundtruth(path: str, gt: SynthGroundTruth):
    cl = gt.cloud
    save_checkpoint(path, {
        "bone_transforms": gt.bone_transforms,
        "root_poses": gt.root_poses,
        "cloud.centers": cl.centers, "cloud.quats": cl.quats,
        "cloud.scales": cl.scales, "cloud.opacities": cl.opacities,
        "cloud.sh": cl.sh,
        "bones.centers": cl.bones.centers, "bones.orients": cl.bones.orients,
        "bones.prec": cl.bones.prec_scales,
        "frame_paths": "\n".join(gt.frame_paths).encode("utf-8"),
    })


def load_groundtruth(path: str) -> SynthGroundTruth:
    d = load_checkpoint(path)
    bones = BoneSet(d["bones.centers"], d["bones.orients"], d["bones.prec"])
    cloud = SurfelCloud(centers=d["cloud.centers"], quats=d["cloud.quats"],
                        scales=d["cloud.scales"], opacities=d["cloud.opacities"],
                        sh=d["cloud.sh"], bones=bones)
    return SynthGroundTruth(d["bone_transforms"], d["root_poses"], cloud,
                            d["frame_paths"].decode("utf-8").split("\n"))
