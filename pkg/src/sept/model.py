"""Run configuration and the composed model for every ablation variant."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dgff import DGFF, ConcatFFN, FusionWeights
from .geometry import BevGrid
from .ikpd import IKPDHead
from .nn import Conv2d, Linear, Module
from .raster import FeatureTransform, RasterEncoder, film_modulate
from .synth import ObsEncoder
from .tensor import Tensor, concat, sigmoid, softmax_rows
from .vector import BevCrossAttention, SegmentTokens, VectorEncoder

VARIANTS = ("baseline", "raster_only", "vector_only", "hybrid", "hybrid_ikpd")
FUSIONS = ("dgff", "add", "concat_ffn", "cross_attn")
HYBRID = ("hybrid", "hybrid_ikpd")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "hybrid_ikpd"
    fusion: str = "dgff"
    mu: float = 0.5
    nu: float = 0.5
    sigma: float = 2.0
    sigma_t: float = 0.0
    sigma_theta: float = 0.0
    learning_rate: float = 0.05
    grad_clip: float = 1.0
    steps: int = 3000
    seed: int = 0
    data: str = "data"
    out: str = "runs"
    grid: str = "desk"
    channels: int = 16
    encoder_depth: int = 3
    use_ft: bool = True
    share_ft_projection: bool = False
    cross_attn_residual: bool = True
    tokens: int = 32
    token_points: int = 11
    token_length: float = 25.0
    heads: int = 4
    encoder_blocks: int = 2
    noise_p: float = 0.02
    eval_split: str = "val"
    eval_radius: float = 2.0
    ablate_variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    ablate_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    ft_pair: bool = True
    ft_pair_sigma_t: float = 1.0
    ft_pair_sigma_theta: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.fusion != "dgff" and self.variant not in HYBRID:
            raise ConfigError(f"fusion={self.fusion!r} is only meaningful for hybrid variants, not {self.variant!r}")
        if self.mu < 0 or self.nu < 0:
            raise ConfigError("mu and nu must be non-negative")
        if self.grid not in ("desk", "full"):
            raise ConfigError(f"grid must be 'desk' or 'full', got {self.grid!r}")
        if self.channels % 4 or self.channels % self.heads:
            raise ConfigError("channels must be divisible by 4 and by heads")
        if self.steps < 0 or self.learning_rate < 0 or self.grad_clip < 0:
            raise ConfigError("steps, learning_rate and grad_clip must be non-negative")

    @property
    def bev_grid(self) -> BevGrid:
        return BevGrid.desk() if self.grid == "desk" else BevGrid.full()

    def replace(self, **changes) -> "RunConfig":
        data = asdict(self)
        data.update(changes)
        return RunConfig(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
        return cls.from_dict(data)


class CellCrossAttention(Module):
    """Per-cell attention over the two branch features (fusion baseline)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.channels = channels

    def forward(self, f_r: Tensor, f_v: Tensor) -> Tensor:
        h, w, c = f_r.shape
        tokens = concat([f_r.reshape(h * w, 1, c), f_v.reshape(h * w, 1, c)], axis=1)
        q = self.q(f_r + f_v).reshape(h * w, 1, c)
        scores = (q * self.k(tokens)).sum(axis=-1) * (1.0 / np.sqrt(c))
        attn = softmax_rows(scores).reshape(h * w, 2, 1)
        return (attn * self.v(tokens)).sum(axis=1).reshape(h, w, c)


@dataclass
class ModelOutput:
    occupancy: Tensor
    heatmap: Tensor | None
    features: Tensor


class SeptModel(Module):
    def __init__(self, config: RunConfig, grid: BevGrid | None = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels
        grid = grid or config.bev_grid
        self.obs_encoder = ObsEncoder(c, rng, config.encoder_depth)
        self.raster_encoder = None
        self.feature_transform = None
        self.vector_encoder = None
        self.cross_attention = None
        self.fusion = None
        self.ikpd = None
        variant = config.variant
        if variant in ("raster_only",) + HYBRID:
            self.raster_encoder = RasterEncoder(c, rng, config.encoder_depth)
            if config.use_ft:
                self.feature_transform = FeatureTransform(c, rng, config.share_ft_projection)
        if variant in ("vector_only",) + HYBRID:
            self.vector_encoder = VectorEncoder(
                c, config.token_points, rng, config.encoder_blocks, config.heads,
                coord_scale=max(abs(v) for v in grid.window.as_list()),
            )
            self.cross_attention = BevCrossAttention(c, config.heads, grid, rng, config.cross_attn_residual)
        if variant in HYBRID:
            if config.fusion == "dgff":
                self.fusion = DGFF(c, rng, FusionWeights(config.mu, config.nu))
            elif config.fusion == "concat_ffn":
                self.fusion = ConcatFFN(c, rng)
            elif config.fusion == "cross_attn":
                self.fusion = CellCrossAttention(c, rng)
        self.occupancy_head = Conv2d(c, 1, 1, rng)
        if variant == "hybrid_ikpd":
            self.ikpd = IKPDHead(c, rng)
            # start heatmap predictions near a 0.1 prior so the focal loss begins small
            self.ikpd.out.bias.data[:] = np.log(0.1 / 0.9)

    def forward(self, obs: np.ndarray | Tensor, raster: np.ndarray | None = None, tokens: SegmentTokens | None = None
                ) -> ModelOutput:
        f_b = self.obs_encoder(obs if isinstance(obs, Tensor) else Tensor(obs))
        variant = self.config.variant
        f_v = f_r = None
        if self.vector_encoder is not None:
            f_sd_v = self.vector_encoder(tokens)
            f_v = self.cross_attention(f_b, f_sd_v, tokens)
        if self.raster_encoder is not None:
            f_sd_r = self.raster_encoder(Tensor(raster))
            if self.feature_transform is not None:
                anchor = f_v if f_v is not None else f_b
                f_r = film_modulate(f_sd_r, self.feature_transform(f_sd_r, anchor))
            else:
                f_r = f_sd_r
        if variant == "baseline":
            feat = f_b
        elif variant == "raster_only":
            feat = f_b + f_r
        elif variant == "vector_only":
            feat = f_v
        elif self.config.fusion == "add":
            feat = f_r + f_v
        else:
            feat = self.fusion(f_r, f_v)
        occupancy = sigmoid(self.occupancy_head(feat))
        heat = self.ikpd(feat) if self.ikpd is not None else None
        return ModelOutput(occupancy, heat, feat)


def build_model(config: RunConfig) -> SeptModel:
    return SeptModel(config)
