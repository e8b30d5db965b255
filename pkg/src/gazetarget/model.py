"""Head-conditioned spatiotemporal gaze-target network.

Data flow for one frame::

    head crop ──Head Conv──► head vector ─┐
    head box ──position image──► pooled ──┴─► Attention Layer ─► softmax grid
    scene ⊕ position image ──Scene Conv──► scene map × attention ⊕ tiled head vector
        ──Encode──► ConvLSTM ──┬─► Deconv stack ─► min-max map ─┐
                               └─► In Frame? head ─► alpha ─────┴─► modulated heatmap
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as gdata
from .tensor import ops
from .tensor import serialize
from .tensor.core import Tensor

logger = logging.getLogger(__name__)

#: parameter groups in network order; the temporal stage freezes the first four
GROUPS = (
    "head_backbone",
    "scene_backbone",
    "attention_fc",
    "encode_convs",
    "convlstm_cells",
    "deconv_stack",
    "inframe_head",
)
FROZEN_IN_TEMPORAL = GROUPS[:4]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    head_size: int = 32
    attention_grid: int = 8
    heatmap_size: int = 64
    backbone_channels: tuple[int, ...] = (8, 16, 32)
    encode_channels: int = 16
    convlstm_layers: int = 2
    convlstm_kernel: int = 3
    deconv_layers: int = 3
    deconv_channels: tuple[int, ...] = (16, 8)
    # (kernel, stride, pad) per deconvolution; empty means 4/2/1 doubling layers
    deconv_geometry: tuple[tuple[int, int, int], ...] = ()
    inframe_channels: tuple[int, int] = (16, 8)
    use_attention: bool = True
    mean: tuple[float, float, float] = gdata.DEFAULT_MEAN
    std: tuple[float, float, float] = gdata.DEFAULT_STD

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-resolution geometry: 224 input, 7x7 attention, 64x64 heatmap."""
        return cls(
            input_size=224,
            head_size=224,
            attention_grid=7,
            heatmap_size=64,
            backbone_channels=(64, 256, 512, 1024, 2048),
            encode_channels=512,
            deconv_layers=4,
            deconv_channels=(256, 128, 1),
            deconv_geometry=((3, 2, 0), (3, 2, 0), (4, 2, 0), (1, 1, 0)),
            inframe_channels=(128, 64),
        )

    @property
    def stages(self) -> int:
        return len(self.backbone_channels)

    @property
    def geometry(self) -> tuple[tuple[int, int, int], ...]:
        return self.deconv_geometry or ((4, 2, 1),) * self.deconv_layers

    @property
    def position_feature_size(self) -> int:
        return (self.input_size // 8) ** 2

    def decoder_sides(self) -> list[int]:
        sides = [self.attention_grid]
        for k, s, p in self.geometry:
            sides.append((sides[-1] - 1) * s - 2 * p + k)
        return sides

    def validate(self) -> "ModelConfig":
        if self.input_size % 8:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 8 (three 2x max pools)")
        if self.input_size % (2**self.stages) or self.input_size // 2**self.stages != self.attention_grid:
            raise ConfigError(
                f"attention_grid {self.attention_grid} does not match the scene backbone output side "
                f"{self.input_size / 2**self.stages:g} for input {self.input_size} and {self.stages} stages"
            )
        if self.head_size % (2**self.stages):
            raise ConfigError(f"head_size {self.head_size} must be divisible by 2**{self.stages}")
        if len(self.geometry) != self.deconv_layers:
            raise ConfigError("deconv_geometry must have one entry per deconvolution layer")
        if len(self.deconv_channels) != self.deconv_layers - 1:
            raise ConfigError(f"deconv_channels needs {self.deconv_layers - 1} hidden widths")
        sides = self.decoder_sides()
        if sides[-1] != self.heatmap_size:
            raise ConfigError(f"deconvolutions reach side {sides[-1]}, not heatmap_size {self.heatmap_size}")
        if self.convlstm_kernel % 2 == 0 or self.convlstm_layers < 1:
            raise ConfigError("convlstm_kernel must be odd and convlstm_layers positive")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        tuples = {k: tuple(v) for k, v in doc.items() if isinstance(v, list)}
        if "deconv_geometry" in tuples:
            tuples["deconv_geometry"] = tuple(tuple(g) for g in doc["deconv_geometry"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{**doc, **tuples}).validate()


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """Named learnable tensors; names are ``group.layer.kind``."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def group(self, group: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.split(".", 1)[0] == group}

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype)) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy()) for k, v in self.tensors.items()})


def _conv_shape(cout, cin, k):
    return (cout, cin, k, k)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases (forget-gate bias 1), near-uniform attention."""
    config.validate()
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k, scale=1.0):
        std = scale * math.sqrt(2.0 / (cin * k * k))
        p[f"{name}.w"] = rng.standard_normal(_conv_shape(cout, cin, k)) * std
        p[f"{name}.b"] = np.zeros(cout)

    def backbone(group, cin):
        for i, c in enumerate(config.backbone_channels):
            conv(f"{group}.stage{i}.down", c, cin, 3)
            conv(f"{group}.stage{i}.res1", c, c, 3)
            conv(f"{group}.stage{i}.res2", c, c, 3, scale=0.1)
            cin = c

    backbone("head_backbone", 3)
    backbone("scene_backbone", 4)
    c = config.backbone_channels[-1]
    g2 = config.attention_grid**2
    p["attention_fc.w"] = rng.standard_normal((g2, c + config.position_feature_size)) * 0.01
    p["attention_fc.b"] = np.zeros(g2)

    e = config.encode_channels
    conv("encode_convs.conv0", e, 2 * c, 3)
    # undo the 1/g² that near-uniform attention puts on the scene channels
    p["encode_convs.conv0.w"][:, :c] *= g2
    conv("encode_convs.conv1", e, e, 3)

    k = config.convlstm_kernel
    for layer in range(config.convlstm_layers):
        std = math.sqrt(1.0 / (2 * e * k * k))
        p[f"convlstm_cells.layer{layer}.wx"] = rng.standard_normal((4 * e, e, k, k)) * std
        p[f"convlstm_cells.layer{layer}.wh"] = rng.standard_normal((4 * e, e, k, k)) * std
        bias = np.zeros(4 * e)
        bias[e:2 * e] = 1.0
        p[f"convlstm_cells.layer{layer}.b"] = bias

    widths = (e,) + tuple(config.deconv_channels) + (1,)
    for i, (kk, _, _) in enumerate(config.geometry):
        cin, cout = widths[i], widths[i + 1]
        p[f"deconv_stack.layer{i}.w"] = rng.standard_normal((cin, cout, kk, kk)) * math.sqrt(2.0 / (cin * kk * kk))
        p[f"deconv_stack.layer{i}.b"] = np.zeros(cout)

    f0, f1 = config.inframe_channels
    conv("inframe_head.conv0", f0, e, 3)
    conv("inframe_head.conv1", f1, f0, 3)
    flat = f1 * config.attention_grid**2
    p["inframe_head.fc.w"] = rng.standard_normal((1, flat)) * math.sqrt(1.0 / flat)
    p["inframe_head.fc.b"] = np.zeros(1)

    return ModelParams({name: Tensor(arr.astype(dtype)) for name, arr in p.items()})


# ---------------------------------------------------------------------------
# inputs and outputs


def head_position_image(bbox: gdata.BBox, size: int) -> np.ndarray:
    """(1, size, size) mask: 1 inside the head box, 0 elsewhere.

    Box edges snap to the pixel grid by rounding half up; a box that snaps
    to nothing grows to one pixel.
    """
    x0, y0, x1, y1 = (int(math.floor(v * size + 0.5)) for v in bbox)
    x0, y0 = min(max(x0, 0), size - 1), min(max(y0, 0), size - 1)
    x1, y1 = max(min(x1, size), x0 + 1), max(min(y1, size), y0 + 1)
    img = np.zeros((1, size, size), dtype=np.float32)
    img[0, y0:y1, x0:x1] = 1.0
    return img


@dataclass
class FrameInputs:
    """Batched network inputs for one time step."""

    scene: np.ndarray  # (B, 3, S, S) standardized
    head: np.ndarray  # (B, 3, h, h) standardized crop
    position: np.ndarray  # (B, 1, S, S)

    def __len__(self) -> int:
        return self.scene.shape[0]

    def astype(self, dtype) -> "FrameInputs":
        return FrameInputs(self.scene.astype(dtype), self.head.astype(dtype), self.position.astype(dtype))


def prepare_inputs(frames: Sequence[np.ndarray], bboxes: Sequence[gdata.BBox], config: ModelConfig) -> FrameInputs:
    """Raw HWC frames plus head boxes -> standardized network inputs."""
    s, h = config.input_size, config.head_size
    scene = np.stack([gdata.preprocess(f, s, config.mean, config.std) for f in frames])
    head = np.stack([gdata.head_crop(f, b, h, config.mean, config.std) for f, b in zip(frames, bboxes)])
    pos = np.stack([head_position_image(b, s) for b in bboxes])
    return FrameInputs(scene, head, pos)


@dataclass
class GazePrediction:
    """Per-person, per-frame output."""

    heatmap: np.ndarray  # (hm, hm) modulated, in [0, 1]
    alpha: float
    raw_map: np.ndarray  # (hm, hm) min-max normalized, before modulation


@dataclass
class FrameOutput:
    """Batched tensors from one forward step (kept for the loss)."""

    decoded: Tensor  # (B, 1, hm, hm) decoder output before normalization
    raw_map: Tensor
    alpha_logit: Tensor  # (B, 1)
    alpha: Tensor
    heatmap: Tensor
    attention: Tensor  # (B, grid * grid)

    def predictions(self) -> list[GazePrediction]:
        return [
            GazePrediction(self.heatmap.data[i, 0].copy(), float(self.alpha.data[i, 0]), self.raw_map.data[i, 0].copy())
            for i in range(self.heatmap.shape[0])
        ]


class ConvLSTMState:
    """Per-layer (h, c) maps; ``None`` entries stand for the zero start state."""

    def __init__(self, layers: list[tuple[Optional[Tensor], Optional[Tensor]]]):
        self.layers = layers

    @classmethod
    def zeros(cls, n_layers: int) -> "ConvLSTMState":
        return cls([(None, None)] * n_layers)

    @property
    def is_zero(self) -> bool:
        return all(h is None and c is None for h, c in self.layers)

    def detach(self) -> "ConvLSTMState":
        return ConvLSTMState([(None if h is None else h.detach(), None if c is None else c.detach())
                              for h, c in self.layers])

    def select(self, index) -> "ConvLSTMState":
        return ConvLSTMState([(None if h is None else Tensor(h.data[index]), None if c is None else Tensor(c.data[index]))
                              for h, c in self.layers])


# ---------------------------------------------------------------------------
# network pieces (pure functions of params)


def _conv(p: ModelParams, name: str, x: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    return ops.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride, pad)


def backbone(p: ModelParams, group: str, x: Tensor, stages: int) -> Tensor:
    """Stride-2 conv + relu, then one residual block, per stage."""
    for i in range(stages):
        x = ops.relu(_conv(p, f"{group}.stage{i}.down", x, stride=2))
        r = ops.relu(_conv(p, f"{group}.stage{i}.res1", x))
        x = ops.relu(ops.add(x, _conv(p, f"{group}.stage{i}.res2", r)))
    return x


def head_position_feature(pos_img: Tensor) -> Tensor:
    """Three 2x2 max pools, flattened: (B, 1, S, S) -> (B, (S/8)^2)."""
    x = pos_img
    for _ in range(3):
        x = ops.max_pool2d(x, 2, 2)
    return ops.flatten(x)


def head_vector(p: ModelParams, head: Tensor, stages: int) -> Tensor:
    feat = backbone(p, "head_backbone", head, stages)
    return ops.flatten(ops.avg_pool2d(feat, feat.shape[2], feat.shape[2]))


def attention_weights(p: ModelParams, head_feat: Tensor, pos_feat: Tensor) -> Tensor:
    """Softmax over grid cells of a linear map of [head features, position features]."""
    both = ops.concat_channels(head_feat, pos_feat)
    return ops.softmax(ops.linear(both, p["attention_fc.w"], p["attention_fc.b"]), axis=1)


def scene_features(p: ModelParams, scene: Tensor, pos_img: Tensor, stages: int) -> Tensor:
    return backbone(p, "scene_backbone", ops.concat_channels(scene, pos_img), stages)


def fuse(scene_feat: Tensor, attn: Tensor, head_feat: Tensor) -> Tensor:
    """Attention-weighted scene map with the head vector tiled alongside."""
    b, _, s, s2 = scene_feat.shape
    if attn.shape[1] != s * s2:
        raise ops.ShapeError(f"fuse: attention has {attn.shape[1]} cells, scene grid is {s}x{s2}")
    weighted = ops.mul(scene_feat, ops.reshape(attn, (b, 1, s, s2)))
    return ops.concat_channels(weighted, ops.tile_spatial(head_feat, s))


def encode(p: ModelParams, fused: Tensor) -> Tensor:
    x = ops.relu(_conv(p, "encode_convs.conv0", fused))
    return ops.relu(_conv(p, "encode_convs.conv1", x))


def convlstm_cell(x: Tensor, h: Optional[Tensor], c: Optional[Tensor], wx: Tensor, wh: Tensor, b: Tensor):
    """One ConvLSTM layer. Gate channel blocks are ordered input, forget, output, candidate."""
    pad = wx.shape[2] // 2
    z = ops.conv2d(x, wx, b, 1, pad)
    if h is not None:
        z = ops.add(z, ops.conv2d(h, wh, None, 1, pad))
    hidden = wx.shape[0] // 4
    gi, gf, go, gg = ops.split_channels(z, [hidden] * 4)
    i, f, o, g = ops.sigmoid(gi), ops.sigmoid(gf), ops.sigmoid(go), ops.tanh(gg)
    c_new = ops.mul(i, g) if c is None else ops.add(ops.mul(f, c), ops.mul(i, g))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, c_new


def convlstm_step(p: ModelParams, x: Tensor, state: ConvLSTMState) -> tuple[Tensor, ConvLSTMState]:
    layers = []
    for n, (h, c) in enumerate(state.layers):
        if h is not None and h.shape[2:] != x.shape[2:]:
            raise ops.ShapeError(f"convlstm_step: input {x.shape} vs state {h.shape}")
        pre = f"convlstm_cells.layer{n}"
        h, c = convlstm_cell(x, h, c, p[f"{pre}.wx"], p[f"{pre}.wh"], p[f"{pre}.b"])
        layers.append((h, c))
        x = h
    return x, ConvLSTMState(layers)


def decode(p: ModelParams, feat: Tensor, geometry) -> Tensor:
    x = feat
    last = len(geometry) - 1
    for i, (_, stride, pad) in enumerate(geometry):
        x = ops.conv_transpose2d(x, p[f"deconv_stack.layer{i}.w"], p[f"deconv_stack.layer{i}.b"], stride, pad)
        if i < last:
            x = ops.relu(x)
    return x


def inframe_logit(p: ModelParams, feat: Tensor) -> Tensor:
    x = ops.relu(_conv(p, "inframe_head.conv0", feat))
    x = ops.relu(_conv(p, "inframe_head.conv1", x))
    return ops.linear(ops.flatten(x), p["inframe_head.fc.w"], p["inframe_head.fc.b"])


def modulate(raw_map: Tensor, alpha: Tensor) -> Tensor:
    """clip_min(raw_map - (1 - alpha), 0), alpha broadcast per sample."""
    a = ops.reshape(alpha, (alpha.shape[0],) + (1,) * (raw_map.ndim - 1))
    # subtract the gap itself so alpha = 1 leaves raw_map bit-identical
    gap = ops.sub(np.ones((), raw_map.dtype), a)
    return ops.clip_min(ops.sub(raw_map, gap), 0.0)


# ---------------------------------------------------------------------------
# the network


class GazeNet:
    """Parameterized network; every forward is a pure function of params and inputs."""

    def __init__(self, config: ModelConfig | None = None, params: ModelParams | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = (config or ModelConfig()).validate()
        self.params = params if params is not None else init_params(self.config, seed, dtype)

    @property
    def dtype(self):
        return next(iter(self.params.tensors.values())).dtype

    def zero_state(self) -> ConvLSTMState:
        return ConvLSTMState.zeros(self.config.convlstm_layers)

    def encode_frame(self, inputs: FrameInputs) -> tuple[Tensor, Tensor]:
        """Everything up to and including Encode: returns (encoded map, attention)."""
        cfg, p = self.config, self.params
        dt = self.dtype
        scene = Tensor(inputs.scene.astype(dt, copy=False))
        head = Tensor(inputs.head.astype(dt, copy=False))
        pos = Tensor(inputs.position.astype(dt, copy=False))
        head_feat = head_vector(p, head, cfg.stages)
        if cfg.use_attention:
            attn = attention_weights(p, head_feat, head_position_feature(pos))
        else:
            g2 = cfg.attention_grid**2
            attn = Tensor(np.full((len(inputs), g2), 1.0 / g2, dtype=dt))
        fused = fuse(scene_features(p, scene, pos, cfg.stages), attn, head_feat)
        return encode(p, fused), attn

    def step(self, encoded: Tensor, attn: Tensor, state: ConvLSTMState) -> tuple[FrameOutput, ConvLSTMState]:
        """Recurrent part and heads, given the encoded map of one time step."""
        h, state = convlstm_step(self.params, encoded, state)
        decoded = decode(self.params, h, self.config.geometry)
        logit = inframe_logit(self.params, h)
        raw = ops.minmax_normalize(decoded)
        alpha = ops.sigmoid(logit)
        return FrameOutput(decoded, raw, logit, alpha, modulate(raw, alpha), attn), state

    def forward_frame(self, inputs: FrameInputs, state: ConvLSTMState | None = None):
        encoded, attn = self.encode_frame(inputs)
        return self.step(encoded, attn, state or self.zero_state())

    def forward_sequence(self, frames: Sequence[np.ndarray], bboxes: Sequence[Optional[gdata.BBox]]
                         ) -> list[Optional[GazePrediction]]:
        """One person's track through a clip; frames without a box are skipped, state carried over."""
        if len(frames) != len(bboxes):
            raise ValueError("forward_sequence: one bbox (or None) per frame is required")
        state = self.zero_state()
        out: list[Optional[GazePrediction]] = []
        skipped = []
        for t, (frame, bbox) in enumerate(zip(frames, bboxes)):
            if bbox is None:
                skipped.append(t)
                out.append(None)
                continue
            res, state = self.forward_frame(prepare_inputs([frame], [bbox], self.config), state)
            out.append(res.predictions()[0])
        if skipped:
            logger.warning("forward_sequence skipped %d frame(s) without a head box: %s", len(skipped), skipped)
        return out

    def forward_batch_sequences(self, steps: Sequence[FrameInputs]) -> list[FrameOutput]:
        """Many equal-length sequences at once; ``steps[t]`` batches time step t."""
        state = self.zero_state()
        outs = []
        for inputs in steps:
            res, state = self.forward_frame(inputs, state)
            outs.append(res)
        return outs


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"


def save_checkpoint(model: GazeNet, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    """Manifest (config + parameter list) and one GZT1 blob per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in model.params:
        fname = f"params/{name}.gzt"
        serialize.save(tensor.data, directory / fname)
        entries.append({"name": name, "shape": list(tensor.shape), "file": fname})
    manifest = {"format": "gazetarget-checkpoint/1", "config": model.config.to_json(), "params": entries}
    if extra:
        manifest["extra"] = extra
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | os.PathLike) -> GazeNet:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    config = ModelConfig.from_json(manifest["config"])
    tensors = {}
    for entry in manifest["params"]:
        arr = serialize.load(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise serialize.FormatError(f"{entry['name']}: stored shape {arr.shape} != manifest {entry['shape']}")
        tensors[entry["name"]] = Tensor(arr)
    expected = init_params(config, 0).tensors
    if set(expected) != set(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
        raise serialize.FormatError("checkpoint parameters do not match the configured architecture")
    return GazeNet(config, ModelParams(tensors))
