"""Differentiable reconstruction pipeline.

Parameter containers (bones, surfel cloud, fields, latent codes) plus the
composition used by training: field evaluation -> skinning weights -> dual
quaternion blending -> root pose -> rasterization. Held-out frames render
with latent codes linearly interpolated in time between the nearest trained
frames (the fields themselves are continuous in time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import geom, tape, tgeom
from .field import (DenseNet, FieldConfig, LatentTable, NeuralSDF, RootPoseField,
                    WarpField, _pe_time as _pe_time_np)
from .geom import SE3, Rotation3
from .raster import Camera, FrameBuffer, render_tape
from .surfel import BoneSet, SurfelCloud, MIN_SCALE
from .tape import Tensor, as_tensor, concat, parameter, stack


@dataclass
class ModelConfig:
    n_bones: int = 25
    n_videos: int = 1
    n_frames: int = 2
    temperature: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    dual_branch: bool = True
    max_surfels: int = 1200
    seed: int = 0
    field: FieldConfig = dc_field(default_factory=FieldConfig)


class BoneParams:
    """Learnable control bones: centers, orientation quats, log-precisions."""

    def __init__(self, bones: BoneSet):
        self.centers = parameter(bones.centers)
        self.vquats = parameter(geom.rotmat_to_quat(bones.orients))
        self.logprec = parameter(np.log(bones.prec_scales))

    def params(self, prefix: str = "bones") -> dict:
        return {f"{prefix}.centers": self.centers, f"{prefix}.vquats": self.vquats,
                f"{prefix}.logprec": self.logprec}

    def boneset(self) -> BoneSet:
        return BoneSet(self.centers.data.copy(),
                       geom.quat_to_rotmat(self.vquats.data),
                       np.exp(self.logprec.data))

    def orients_t(self) -> Tensor:
        return tgeom.quat_to_rotmat(tgeom.quat_normalize(self.vquats))

    def prec_t(self) -> Tensor:
        return tape.exp(self.logprec)


class CloudParams:
    """Learnable surfel cloud (and refinement deltas) on the tape."""

    def __init__(self, cloud: SurfelCloud):
        self.centers = parameter(cloud.centers)
        self.quats = parameter(cloud.quats)
        self.logscales = parameter(np.log(np.maximum(cloud.scales, MIN_SCALE)))
        op = np.clip(cloud.opacities, 1e-4, 1 - 1e-4)
        self.opac_logit = parameter(np.log(op / (1 - op)))
        self.sh = parameter(cloud.sh)
        # refinement deltas: identity rotation, softplus-raw scales near zero
        K = len(cloud)
        dq = cloud.delta_quats if cloud.has_deltas else np.tile([1.0, 0, 0, 0], (K, 1))
        self.delta_quats = parameter(dq)
        if cloud.has_deltas:
            ds = np.maximum(cloud.delta_scales, 1e-8)
            raw = np.log(np.expm1(np.maximum(ds, 1e-8)))
        else:
            raw = np.full((K, 3), -8.0)
        self.delta_raw = parameter(raw)

    def __len__(self):
        return self.centers.data.shape[0]

    def params(self, prefix: str = "cloud") -> dict:
        return {f"{prefix}.centers": self.centers, f"{prefix}.quats": self.quats,
                f"{prefix}.logscales": self.logscales, f"{prefix}.opac": self.opac_logit,
                f"{prefix}.sh": self.sh, f"{prefix}.dquats": self.delta_quats,
                f"{prefix}.draw": self.delta_raw}

    def opacities_t(self) -> Tensor:
        return tape.sigmoid(self.opac_logit)

    def scales_t(self) -> Tensor:
        return tape.exp(self.logscales)

    def delta_scales_t(self) -> Tensor:
        return tape.softplus(self.delta_raw)

    def to_cloud(self, bones: BoneSet) -> SurfelCloud:
        return SurfelCloud(centers=self.centers.data.copy(),
                           quats=geom.quat_normalize(self.quats.data),
                           scales=np.exp(self.logscales.data),
                           opacities=1.0 / (1.0 + np.exp(-self.opac_logit.data)),
                           sh=self.sh.data.copy(), bones=bones,
                           delta_quats=geom.quat_normalize(self.delta_quats.data),
                           delta_scales=np.log1p(np.exp(self.delta_raw.data)))

    def project_constraints(self):
        """Post-step projections: positive scales, finite quats."""
        np.maximum(self.logscales.data, np.log(MIN_SCALE), out=self.logscales.data)
        np.clip(self.logscales.data, None, np.log(2.0), out=self.logscales.data)


class Model:
    """Holds every learnable piece plus frame timing metadata."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 bones: BoneSet | None = None, calibrate_sdf: bool = True):
        self.cfg = cfg
        if bones is None:
            c = rng.normal(0.0, 0.15, size=(cfg.n_bones, 3))
            if cfg.n_bones == 1:
                c[:] = 0.0
            bones = BoneSet(c, np.broadcast_to(np.eye(3), (cfg.n_bones, 3, 3)).copy(),
                            np.full((cfg.n_bones, 3), 10.0))
        self.bones = BoneParams(bones)
        self.warp = WarpField(cfg.field, cfg.n_videos, rng)
        self.root = RootPoseField(cfg.field, cfg.n_videos, rng)
        self.latents = LatentTable(cfg.n_videos, cfg.n_frames, cfg.n_bones,
                                   cfg.field.latent_dim, rng)
        self.sdf: NeuralSDF | None = NeuralSDF(cfg.field, rng, calibrate=calibrate_sdf)
        self.cloud: CloudParams | None = None
        self.times = np.zeros((cfg.n_videos, cfg.n_frames))
        for m in range(cfg.n_videos):
            self.times[m] = (np.arange(cfg.n_frames) / max(cfg.n_frames - 1, 1))
        self.train_frames = [np.arange(cfg.n_frames) for _ in range(cfg.n_videos)]

    # -- latent interpolation for held-out frames ---------------------------

    def _code_weights(self, m: int, f_idx: int):
        tr = self.train_frames[m]
        if f_idx in tr:
            return [(f_idx, 1.0)]
        lo = tr[tr < f_idx]
        hi = tr[tr > f_idx]
        if lo.size == 0:
            return [(int(hi[0]), 1.0)]
        if hi.size == 0:
            return [(int(lo[-1]), 1.0)]
        a, b = int(lo[-1]), int(hi[0])
        t = (f_idx - a) / (b - a)
        return [(a, 1.0 - t), (b, t)]

    def bone_codes_for(self, m: int, f_idx: int) -> Tensor:
        parts = self._code_weights(m, f_idx)
        out = None
        for idx, w in parts:
            term = self.latents.bone_codes[m, idx] * w
            out = term if out is None else out + term
        return out

    def root_codes_for(self, m: int, f_idx: int) -> Tensor:
        parts = self._code_weights(m, f_idx)
        out = None
        for idx, w in parts:
            term = self.latents.root_codes[m, idx] * w
            out = term if out is None else out + term
        return out

    # -- field evaluation ----------------------------------------------------

    def root_rt(self, m: int, f_idx: int):
        f_norm = float(self.times[m, f_idx])
        code = self.root_codes_for(m, f_idx)
        pe_t = Tensor(_pe_time_np(f_norm, self.cfg.field.n_freq_t))
        inp = concat([code, pe_t], axis=-1).reshape(1, -1)
        tw = self.root.nets[m](inp).reshape(6)
        real, dual = tgeom.twist_to_dq(tw)
        R, t = tgeom.dq_to_rt(real, dual)
        return R, t, tw

    def bone_dqs_at(self, m: int, f_idx: int, x: Tensor, per_bone: bool = False):
        """Per-bone dual quaternions at points x; codes resolved per frame."""
        f_norm = float(self.times[m, f_idx])
        code = self.bone_codes_for(m, f_idx)                     # (B, D)
        B = code.shape[0]
        x = as_tensor(x)
        pe_t = _pe_time_np(f_norm, self.cfg.field.n_freq_t)
        pe_x = tgeom.positional_encoding(x, self.cfg.field.n_freq_x)
        if per_bone:
            tcol = Tensor(np.broadcast_to(pe_t, (B, pe_t.size)).copy())
            inp = concat([code, pe_x, tcol], axis=-1)
            tw = self.warp.nets[m](inp)
        else:
            N = x.shape[0]
            code_b = tape.broadcast_to(code.reshape(1, B, -1), (N, B, code.shape[1]))
            pe_xb = tape.broadcast_to(pe_x.reshape(N, 1, -1), (N, B, pe_x.shape[-1]))
            tcol = Tensor(np.broadcast_to(pe_t, (N, B, pe_t.size)).copy())
            tw = self.warp.nets[m](concat([code_b, pe_xb, tcol], axis=-1).reshape(N * B, -1)).reshape(N, B, 6)
        real, dual = tgeom.twist_to_dq(tw)
        return real, dual, tw

    def warp_bones(self, m: int, f_idx: int):
        """Bones moved to the frame: centers, orients, and the per-bone dqs."""
        real, dual, tw = self.bone_dqs_at(m, f_idx, self.bones.centers, per_bone=True)
        R, t = tgeom.dq_to_rt(real, dual)
        centers_w = tgeom.se3_apply(R, t, self.bones.centers)
        orients_w = R @ self.bones.orients_t()
        return dict(real=real, dual=dual, R=R, t=t, centers=centers_w,
                    orients=orients_w, prec=self.bones.prec_t(), twists=tw)

    def skin_weights(self, x: Tensor, bones_w: dict) -> Tensor:
        """softmax(-mahalanobis/T) against warped bones; x (N, 3) -> (N, B)."""
        N = x.shape[0]
        B = bones_w["centers"].shape[0]
        d = x.reshape(N, 1, 3) - bones_w["centers"].reshape(1, B, 3)
        y = (bones_w["orients"] @ d.reshape(N, B, 3, 1)).reshape(N, B, 3)
        delta = (y * y * bones_w["prec"].reshape(1, B, 3)).sum(axis=-1)
        return tape.softmax(-delta / self.cfg.temperature, axis=-1)

    def forward_warp(self, m: int, f_idx: int, x: Tensor, bones_w: dict | None = None):
        """Blended per-point rigid warp plus root pose: returns (R, t, aux)."""
        if bones_w is None:
            bones_w = self.warp_bones(m, f_idx)
        real, dual, tw = self.bone_dqs_at(m, f_idx, x, per_bone=False)
        w = self.skin_weights(x, bones_w)
        br, bd = tgeom.dq_blend(w, real, dual)
        Rj, tj = tgeom.dq_to_rt(br, bd)
        Rg, tg, tw_root = self.root_rt(m, f_idx)
        R, t = tgeom.se3_compose(Rg, tg, Rj, tj)
        aux = dict(twists=tw, root_twist=tw_root, weights=w, bones_w=bones_w)
        return R, t, aux

    def backward_warp(self, m: int, f_idx: int, xf: Tensor, bones_w: dict | None = None):
        """Frame-space points back to the static state (inverse DQB)."""
        if bones_w is None:
            bones_w = self.warp_bones(m, f_idx)
        Rg, tg, tw_root = self.root_rt(m, f_idx)
        Rgi, tgi = tgeom.se3_inverse(Rg, tg)
        x1 = tgeom.se3_apply(Rgi, tgi, xf)
        real, dual, tw = self.bone_dqs_at(m, f_idx, x1, per_bone=False)
        w = self.skin_weights(x1, bones_w)
        br, bd = tgeom.dq_blend(w, real * tgeom._CONJ, dual * tgeom._CONJ)
        Ri, ti = tgeom.dq_to_rt(br, bd)
        xs = tgeom.se3_apply(Ri, ti, x1)
        aux = dict(twists=tw, root_twist=tw_root, weights=w, bones_w=bones_w)
        return xs, aux

    # -- rendering -----------------------------------------------------------

    def render_frame(self, m: int, f_idx: int, camera: Camera, branch: str = "plain",
                     bones_w: dict | None = None):
        """Rasterize the warped cloud; returns (outs dict of Tensors, fb)."""
        if self.cloud is None:
            from .errors import EngineError
            raise EngineError("checkpoint has no surfel cloud (stage 1 only); run fit")
        cl = self.cloud
        K = len(cl)
        x = cl.centers
        R, t, aux = self.forward_warp(m, f_idx, x, bones_w)
        centers_w = tgeom.se3_apply(R, t, x)

        Rs = tgeom.quat_to_rotmat(tgeom.quat_normalize(cl.quats))
        s2 = cl.scales_t()
        zeros = Tensor(np.zeros((K, 1)))
        if branch == "refined":
            Rd = tgeom.quat_to_rotmat(tgeom.quat_normalize(cl.delta_quats))
            frames_local = Rd @ Rs
            scales3 = concat([s2, zeros], axis=-1) + cl.delta_scales_t()
        else:
            frames_local = Rs
            scales3 = concat([s2, zeros], axis=-1)
        frames_w = R @ frames_local

        packed, fb = render_tape(centers_w, frames_w, scales3, cl.opacities_t(),
                                 cl.sh, camera, background=self.cfg.background)
        alpha = packed[..., 3]
        safe = tape.where(alpha.data > 1e-12, alpha, Tensor(np.full(alpha.shape, 1e-12)))
        outs = dict(color=packed[..., 0:3], alpha=alpha,
                    depth=packed[..., 4] / safe, normal=packed[..., 5:8],
                    aux=aux, centers_w=centers_w)
        return outs, fb

    # -- diagnostics ----------------------------------------------------------

    def root_angles(self) -> np.ndarray:
        """Rotation angle (deg) of every root pose, detached, (M, F)."""
        M, F = self.times.shape
        out = np.zeros((M, F))
        codes = Tensor(self.latents.root_codes.data)
        for m in range(M):
            pe = np.stack([_pe_time_np(self.times[m, f], self.cfg.field.n_freq_t)
                           for f in range(F)])
            inp = concat([codes[m], Tensor(pe)], axis=-1)
            tw = self.root.nets[m](inp)
            real, dual = tgeom.twist_to_dq(tw)
            R, _ = tgeom.dq_to_rt(real, dual)
            out[m] = geom.rotation_angle_deg(SE3(Rotation3(R.data), np.zeros((F, 3))))
        return out

    def root_se3(self, m: int, f_idx: int) -> SE3:
        R, t, _ = self.root_rt(m, f_idx)
        return SE3(Rotation3(R.data), t.data)

    # -- parameter groups ------------------------------------------------------

    def stage1_params(self) -> dict:
        p = {}
        p.update(self.sdf.params("sdf"))
        p.update(self.warp.params("warp"))
        p.update(self.root.params("root"))
        p.update(self.latents.params("latent"))
        p.update(self.bones.params("bones"))
        return p

    def stage2_params(self) -> dict:
        p = {}
        p.update(self.cloud.params("cloud"))
        p.update(self.warp.params("warp"))
        p.update(self.root.params("root"))
        p.update(self.latents.params("latent"))
        p.update(self.bones.params("bones"))
        return p

    # -- serialization ----------------------------------------------------------

    def checkpoint_sections(self) -> dict:
        cfg = asdict(self.cfg)
        sections = {"config": json.dumps(cfg, sort_keys=True).encode("utf-8"),
                    "meta.times": self.times,
                    "meta.has_cloud": np.array(0 if self.cloud is None else 1, dtype=np.int64)}
        for m, tr in enumerate(self.train_frames):
            sections[f"meta.train_frames.{m}"] = np.asarray(tr, dtype=np.int64)
        for name, t in self.stage1_params().items():
            sections[f"param.{name}"] = t.data
        if self.cloud is not None:
            for name, t in self.cloud.params("cloud").items():
                sections[f"param.{name}"] = t.data
        return sections

    @staticmethod
    def from_sections(sections: dict) -> "Model":
        cfg_doc = json.loads(sections["config"].decode("utf-8"))
        fcfg = FieldConfig(**cfg_doc.pop("field"))
        cfg_doc["background"] = tuple(cfg_doc["background"])
        cfg = ModelConfig(field=fcfg, **cfg_doc)
        model = Model(cfg, np.random.default_rng(cfg.seed), calibrate_sdf=False)
        model.times = sections["meta.times"]
        model.train_frames = [sections[f"meta.train_frames.{m}"]
                              for m in range(cfg.n_videos)]
        if int(sections["meta.has_cloud"]):
            K = sections["param.cloud.centers"].shape[0]
            dummy = SurfelCloud(centers=np.zeros((K, 3)), quats=np.tile([1.0, 0, 0, 0], (K, 1)),
                                scales=np.full((K, 2), 0.01), opacities=np.full(K, 0.5),
                                sh=np.zeros((K, 16, 3)), bones=model.bones.boneset())
            model.cloud = CloudParams(dummy)
        params = model.stage1_params()
        if model.cloud is not None:
            params.update(model.cloud.params("cloud"))
        for name, t in params.items():
            key = f"param.{name}"
            if key in sections:
                t.data[...] = sections[key]
        return model


