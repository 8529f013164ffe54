"""
Occupancy Models Tool - unstructured (U), piecewise-rigid (R) and piecewise-deformable (D)
pose-conditioned occupancy decoders, part blending and the NASAW001 checkpoint file
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, NamedTuple, Tuple

import numpy as np

from tools.kinematics import PosedBones
from tools.neuralnet import MLPSpec, ParamSpec, ParamVector, ResidualMLP, init_params
from tools.synthbody import CapsuleBody, gt_occupancy, part_occupancy
from utils.binio import PayloadReader, PayloadWriter, read_container, write_container
from utils.errors import FormatError, InvalidInputError, UnsupportedModelError
from utils.logger import setup_logger

logger = setup_logger(__name__)

MODEL_KINDS = ("u", "r", "d")
BLEND_MODES = ("soft", "hard")
POSE_FEATURES = ("root_origin", "frames")
UNSTRUCTURED_INPUTS = ("global", "local")
RESIDUAL_MODES = ("post",)

CHECKPOINT_MAGIC = b"NASAW001"
CHECKPOINT_VERSION = 1
# version u16, kind u8, d u8, B u16, H u16, D u16, temperature f64, residual u8,
# pose features u8, unstructured input u8, use_projection u8, precision u8
CHECKPOINT_HEADER = struct.Struct("<HBBHHHdBBBBB")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    dim: int
    bone_count: int
    width: int = 0
    code_dim: int = 4
    temperature: float = 1.0
    residual: str = "post"
    pose_features: str = "root_origin"
    unstructured_input: str = "global"
    use_projection: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidInputError(f"Unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.dim not in (2, 3):
            raise InvalidInputError(f"Dimension must be 2 or 3, got {self.dim}")
        if self.bone_count < 1:
            raise InvalidInputError("Models need at least one bone")
        if self.width == 0:
            object.__setattr__(self, "width", 64 if self.kind == "u" else 24)
        if self.width < 1:
            raise InvalidInputError(f"Width must be positive, got {self.width}")
        if self.kind == "d" and self.use_projection and self.code_dim < 1:
            raise InvalidInputError(f"Projection size D must be positive, got {self.code_dim}")
        if not self.temperature > 0:
            raise InvalidInputError(f"Blend temperature must be positive, got {self.temperature}")
        if self.residual not in RESIDUAL_MODES:
            raise InvalidInputError(f"Unknown residual mode {self.residual!r}")
        if self.pose_features not in POSE_FEATURES:
            raise InvalidInputError(f"Unknown pose features {self.pose_features!r}")
        if self.unstructured_input not in UNSTRUCTURED_INPUTS:
            raise InvalidInputError(f"Unknown unstructured input {self.unstructured_input!r}")

    @property
    def feature_dim(self) -> int:
        return pose_feature_dim(self.pose_features, self.dim, self.bone_count)

    @property
    def effective_code_dim(self) -> int:
        """D, or the full pose-feature length when the projection is removed"""
        return self.code_dim if self.use_projection else self.feature_dim


class ModelGrads(NamedTuple):
    """Gradients of a scalar objective w.r.t. parameters, query points and inverse frames"""

    params: ParamVector
    points: np.ndarray
    inv_rotations: np.ndarray
    inv_translations: np.ndarray


# --- pose features -----------------------------------------------------------------


def pose_feature_dim(name: str, dim: int, bone_count: int) -> int:
    if name == "root_origin":
        return bone_count * dim
    return bone_count * (dim * dim + dim)


def root_origin_from_inverse(inv_rotations: np.ndarray, inv_translations: np.ndarray) -> np.ndarray:
    """t_0 recovered from C_0 without inverting a matrix"""
    return -inv_rotations[0].T @ inv_translations[0]


def pose_features(name: str, inv_rotations: np.ndarray, inv_translations: np.ndarray) -> np.ndarray:
    if name == "root_origin":
        t0 = root_origin_from_inverse(inv_rotations, inv_translations)
        return (inv_rotations @ t0 + inv_translations).ravel()
    B = inv_rotations.shape[0]
    return np.concatenate([inv_rotations.reshape(B, -1), inv_translations], axis=1).ravel()


def pose_features_backward(
    name: str,
    inv_rotations: np.ndarray,
    inv_translations: np.ndarray,
    grad_features: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    B, d = inv_translations.shape
    if name == "root_origin":
        g = grad_features.reshape(B, d)
        t0 = root_origin_from_inverse(inv_rotations, inv_translations)
        d_rot = np.einsum("bi,j->bij", g, t0)
        d_trans = g.copy()
        d_t0 = np.einsum("bji,bj->i", inv_rotations, g)
        d_rot[0] -= np.outer(inv_translations[0], d_t0)
        d_trans[0] -= inv_rotations[0] @ d_t0
        return d_rot, d_trans
    g = grad_features.reshape(B, d * d + d)
    return g[:, : d * d].reshape(B, d, d).copy(), g[:, d * d :].copy()


def local_points(inv_rotations: np.ndarray, inv_translations: np.ndarray, points: np.ndarray) -> np.ndarray:
    """{C_b x} as homogeneous point transforms, (B, N, d)"""
    return np.einsum("bij,nj->bni", inv_rotations, points) + inv_translations[:, None, :]


def local_points_backward(inv_rotations: np.ndarray, points: np.ndarray, grad_local: np.ndarray):
    d_points = np.einsum("bij,bni->nj", inv_rotations, grad_local)
    d_rot = np.einsum("bni,nj->bij", grad_local, points)
    d_trans = grad_local.sum(axis=1)
    return d_points, d_rot, d_trans


# --- blending ----------------------------------------------------------------------


def _softmax_weights(values: np.ndarray, temperature: float) -> np.ndarray:
    scaled = values / temperature
    scaled = scaled - scaled.max(axis=0, keepdims=True)
    w = np.exp(scaled)
    return w / w.sum(axis=0, keepdims=True)


def blend(values, mode: str = "soft", temperature: float = 1.0) -> np.ndarray:
    """Combine part values over axis 0: max (hard) or softmax-weighted sum (soft)"""
    values = np.asarray(values, dtype=np.float64)
    if mode == "hard":
        return values.max(axis=0)
    if mode != "soft":
        raise InvalidInputError(f"Unknown blend mode {mode!r}")
    if not temperature > 0:
        raise InvalidInputError(f"Blend temperature must be positive, got {temperature}")
    w = _softmax_weights(values, temperature)
    return (w * values).sum(axis=0)


def blend_backward(values, upstream, mode: str = "soft", temperature: float = 1.0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if mode == "hard":
        grad = np.zeros_like(values)
        winner = values.argmax(axis=0)
        np.put_along_axis(grad, winner[None], upstream[None], axis=0)
        return grad
    w = _softmax_weights(values, temperature)
    blended = (w * values).sum(axis=0)
    return upstream * (w + w * (values - blended) / temperature)


# --- models ------------------------------------------------------------------------


@dataclass
class ModelTape:
    points: np.ndarray
    inv_rotations: np.ndarray
    inv_translations: np.ndarray
    features: np.ndarray | None
    mlp_tape: Any
    parts: np.ndarray | None = None
    mode: str = "soft"


class OccupancyModel:
    """Shared plumbing: config, parameters and the value/gradient entry points"""

    part_based = False

    def __init__(self, config: ModelConfig, params: ParamVector | None = None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(self.layout(), seed)
        missing = [s.name for s in self.layout() if s.name not in self.params.index]
        if missing:
            raise InvalidInputError(f"{self.kind.upper()} model parameters lack {missing}")

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def parameter_count(self) -> int:
        return self.params.size

    @classmethod
    def layout_for(cls, config: ModelConfig):
        raise NotImplementedError

    def layout(self):
        return type(self).layout_for(self.config)

    def _check(self, posed: PosedBones, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[None]
        if posed.dim != self.config.dim or posed.bone_count != self.config.bone_count:
            raise InvalidInputError(
                f"Pose has {posed.bone_count} bones in {posed.dim}D, model expects "
                f"{self.config.bone_count} in {self.config.dim}D"
            )
        if points.ndim != 2 or points.shape[1] != self.config.dim:
            raise InvalidInputError(f"Query points must be (N, {self.config.dim}), got {points.shape}")
        return points

    def forward(self, posed: PosedBones, points, mode: str = "soft") -> Tuple[np.ndarray, ModelTape]:
        raise NotImplementedError

    def backward(self, tape: ModelTape, upstream, grads: ParamVector | None = None) -> ModelGrads:
        raise NotImplementedError

    def eval(self, posed: PosedBones, points, mode: str = "soft") -> np.ndarray:
        values, _ = self.forward(posed, points, mode)
        return values


class ModelU(OccupancyModel):
    """Single MLP on [x, pose features] (global) or on every {C_b x} (local)"""

    @staticmethod
    def _input_dim(c: ModelConfig) -> int:
        if c.unstructured_input == "local":
            return c.dim * c.bone_count
        return c.dim + c.feature_dim

    @classmethod
    def layout_for(cls, config: ModelConfig):
        return MLPSpec(cls._input_dim(config), config.width, groups=1).layout()

    @property
    def backbone(self) -> ResidualMLP:
        return ResidualMLP(MLPSpec(self._input_dim(self.config), self.config.width, groups=1), self.params)

    def forward(self, posed: PosedBones, points, mode: str = "soft"):
        points = self._check(posed, points)
        Cr, Ct = posed.inv_rotations, posed.inv_translations
        N = points.shape[0]
        features = None
        if self.config.unstructured_input == "local":
            inputs = np.transpose(local_points(Cr, Ct, points), (1, 0, 2)).reshape(N, -1)
        else:
            features = pose_features(self.config.pose_features, Cr, Ct)
            inputs = np.concatenate([points, np.broadcast_to(features, (N, features.size))], axis=1)
        values, mlp_tape = self.backbone.forward(inputs[None])
        return values[0], ModelTape(points, Cr, Ct, features, mlp_tape, mode=mode)

    def backward(self, tape: ModelTape, upstream, grads: ParamVector | None = None) -> ModelGrads:
        upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (tape.points.shape[0],))
        grads, d_in = self.backbone.backward(tape.mlp_tape, upstream[None], grads)
        d_in = d_in[0]
        B, d = tape.inv_translations.shape
        if self.config.unstructured_input == "local":
            d_local = np.transpose(d_in.reshape(-1, B, d), (1, 0, 2))
            d_points, d_rot, d_trans = local_points_backward(tape.inv_rotations, tape.points, d_local)
        else:
            d_points = d_in[:, :d].copy()
            d_rot, d_trans = pose_features_backward(
                self.config.pose_features, tape.inv_rotations, tape.inv_translations, d_in[:, d:].sum(axis=0)
            )
        return ModelGrads(grads, d_points, d_rot, d_trans)

    def part_forward(self, posed, points):
        raise UnsupportedModelError("The unstructured model has no per-part values")


class PartModel(OccupancyModel):
    """B grouped part networks evaluated in their bone frames, composed by blend"""

    part_based = True
    uses_features = False

    @staticmethod
    def _part_input_dim(c: ModelConfig) -> int:
        return c.dim

    @classmethod
    def _mlp_spec(cls, c: ModelConfig) -> MLPSpec:
        return MLPSpec(cls._part_input_dim(c), c.width, groups=c.bone_count)

    @classmethod
    def layout_for(cls, config: ModelConfig):
        return cls._mlp_spec(config).layout()

    @property
    def parts_mlp(self) -> ResidualMLP:
        return ResidualMLP(self._mlp_spec(self.config), self.params)

    def _part_inputs(self, local: np.ndarray, features: np.ndarray | None) -> np.ndarray:
        return local

    def part_forward(self, posed: PosedBones, points) -> Tuple[np.ndarray, ModelTape]:
        """Per-part values (B, N) before blending"""
        points = self._check(posed, points)
        Cr, Ct = posed.inv_rotations, posed.inv_translations
        features = pose_features(self.config.pose_features, Cr, Ct) if self.uses_features else None
        inputs = self._part_inputs(local_points(Cr, Ct, points), features)
        parts, mlp_tape = self.parts_mlp.forward(inputs)
        return parts, ModelTape(points, Cr, Ct, features, mlp_tape, parts=parts)

    def _code_backward(self, tape: ModelTape, d_inputs: np.ndarray, grads: ParamVector):
        return d_inputs, None

    def part_backward(self, tape: ModelTape, upstream, grads: ParamVector | None = None) -> ModelGrads:
        upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), tape.parts.shape)
        grads, d_inputs = self.parts_mlp.backward(tape.mlp_tape, upstream, grads)
        d_local, d_features = self._code_backward(tape, d_inputs, grads)
        d_points, d_rot, d_trans = local_points_backward(tape.inv_rotations, tape.points, d_local)
        if d_features is not None:
            f_rot, f_trans = pose_features_backward(
                self.config.pose_features, tape.inv_rotations, tape.inv_translations, d_features
            )
            d_rot = d_rot + f_rot
            d_trans = d_trans + f_trans
        return ModelGrads(grads, d_points, d_rot, d_trans)

    def forward(self, posed: PosedBones, points, mode: str = "soft"):
        parts, tape = self.part_forward(posed, points)
        tape.mode = mode
        return blend(parts, mode, self.config.temperature), tape

    def backward(self, tape: ModelTape, upstream, grads: ParamVector | None = None) -> ModelGrads:
        upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (tape.points.shape[0],))
        d_parts = blend_backward(tape.parts, upstream, tape.mode, self.config.temperature)
        return self.part_backward(tape, d_parts, grads)


class ModelR(PartModel):
    """Part b sees only C_b x"""


class ModelD(PartModel):
    """Part b sees concat(C_b x, Π_b · pose features); Π removed gives the raw features"""

    uses_features = True

    @staticmethod
    def _part_input_dim(c: ModelConfig) -> int:
        return c.dim + c.effective_code_dim

    @classmethod
    def layout_for(cls, config: ModelConfig):
        specs = cls._mlp_spec(config).layout()
        c = config
        if c.use_projection:
            specs.append(ParamSpec("proj", (c.bone_count, c.code_dim, c.feature_dim), c.feature_dim, c.code_dim))
        return specs

    def codes(self, features: np.ndarray) -> np.ndarray:
        """Per-part deformation codes (B, D)"""
        if not self.config.use_projection:
            return np.broadcast_to(features, (self.config.bone_count, features.size))
        return self.params.view("proj") @ features

    def _part_inputs(self, local: np.ndarray, features: np.ndarray) -> np.ndarray:
        B, N, _ = local.shape
        code = self.codes(features)
        return np.concatenate([local, np.broadcast_to(code[:, None, :], (B, N, code.shape[1]))], axis=2)

    def _code_backward(self, tape: ModelTape, d_inputs: np.ndarray, grads: ParamVector):
        d = self.config.dim
        d_code = d_inputs[:, :, d:].sum(axis=1)
        if not self.config.use_projection:
            return d_inputs[:, :, :d], d_code.sum(axis=0)
        grads.view("proj")[...] += np.einsum("bk,f->bkf", d_code, tape.features)
        d_features = np.einsum("bkf,bk->f", self.params.view("proj"), d_code)
        return d_inputs[:, :, :d], d_features


class OracleModel(OccupancyModel):
    """The analytic capsule body behind the model interface; no learnable parameters"""

    part_based = True

    def __init__(self, body: CapsuleBody):
        self.body = body
        super().__init__(ModelConfig(kind="r", dim=body.dim, bone_count=body.bone_count), ParamVector([]))

    @property
    def kind(self) -> str:
        return "oracle"

    @classmethod
    def layout_for(cls, config: ModelConfig):
        return []

    def part_forward(self, posed: PosedBones, points):
        points = self._check(posed, points)
        parts = part_occupancy(self.body, posed, points).astype(np.float64)
        return parts, ModelTape(points, posed.inv_rotations, posed.inv_translations, None, None, parts=parts)

    def forward(self, posed: PosedBones, points, mode: str = "soft"):
        points = self._check(posed, points)
        values = gt_occupancy(self.body, posed, points).astype(np.float64)
        return values, ModelTape(points, posed.inv_rotations, posed.inv_translations, None, None, mode=mode)

    def backward(self, tape, upstream, grads=None):
        raise UnsupportedModelError("The oracle is not differentiable")


MODEL_CLASSES = {"u": ModelU, "r": ModelR, "d": ModelD}


def build_model(config: ModelConfig, seed=0, params: ParamVector | None = None) -> OccupancyModel:
    model = MODEL_CLASSES[config.kind](config, params=params, seed=seed)
    logger.debug(f"Built {config.kind.upper()} model with {model.parameter_count} parameters")
    return model


# --- checkpoint file ---------------------------------------------------------------


def save_checkpoint(model: OccupancyModel, path: str | Path, precision: int = 8) -> None:
    if isinstance(model, OracleModel):
        raise UnsupportedModelError("The oracle has no parameters to checkpoint")
    if precision not in (4, 8):
        raise InvalidInputError(f"Checkpoint precision must be 4 or 8 bytes, got {precision}")
    c = model.config
    header = CHECKPOINT_HEADER.pack(
        CHECKPOINT_VERSION,
        MODEL_KINDS.index(c.kind),
        c.dim,
        c.bone_count,
        c.width,
        c.code_dim,
        c.temperature,
        RESIDUAL_MODES.index(c.residual),
        POSE_FEATURES.index(c.pose_features),
        UNSTRUCTURED_INPUTS.index(c.unstructured_input),
        int(c.use_projection),
        precision,
    )
    writer = PayloadWriter("<f4" if precision == 4 else "<f8")
    writer.add_array(model.params.data)
    write_container(path, CHECKPOINT_MAGIC, header, writer.payload())
    logger.info(f"Saved {c.kind.upper()} checkpoint to {path} ({model.parameter_count} parameters)")


def _lookup(table: tuple, index: int, what: str) -> str:
    if not 0 <= index < len(table):
        raise FormatError(f"Checkpoint has unknown {what} id {index}")
    return table[index]


def load_checkpoint(path: str | Path) -> OccupancyModel:
    fields, payload = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CHECKPOINT_HEADER)
    (_, kind, d, B, H, D, temperature, residual, features, u_input, use_projection, precision) = fields
    if precision not in (4, 8):
        raise FormatError(f"Checkpoint has unknown precision byte {precision}")

    try:
        config = ModelConfig(
            kind=_lookup(MODEL_KINDS, kind, "model kind"),
            dim=d,
            bone_count=B,
            width=H,
            code_dim=D,
            temperature=temperature,
            residual=_lookup(RESIDUAL_MODES, residual, "residual mode"),
            pose_features=_lookup(POSE_FEATURES, features, "pose feature"),
            unstructured_input=_lookup(UNSTRUCTURED_INPUTS, u_input, "unstructured input"),
            use_projection=bool(use_projection),
        )
    except InvalidInputError as e:
        raise FormatError(f"Checkpoint hyperparameters are invalid: {str(e)}") from e

    reader = PayloadReader(payload, "<f4" if precision == 4 else "<f8")
    data = reader.read_array()
    if not reader.done():
        raise FormatError(f"{path} has trailing payload after the parameters")

    layout = MODEL_CLASSES[config.kind].layout_for(config)
    params = ParamVector(layout)
    if data.shape != params.data.shape:
        raise FormatError(f"Checkpoint holds {data.size} parameters, architecture needs {params.size}")
    params.data[...] = data
    return build_model(config, params=params)


def describe(model: OccupancyModel) -> Dict[str, Any]:
    """Hyperparameters plus parameter count, for manifests and logs"""
    info = asdict(model.config)
    info["kind"] = model.kind
    info["parameter_count"] = model.parameter_count
    return info
