"""Encoder networks: image, coordinate, and gene MLPs, regression head,
fusion layer, projection heads, and a learnable softmax temperature.

All networks are small relu MLPs over the autodiff kernel.  Parameters live in
a flat ``name -> float64 array`` dict; a fresh ``Node`` view is created per
forward pass so graphs never share mutable state across steps.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractWarning, ShapeError
from .seeding import substream
from .tensorio import load_tensors, save_tensors

TAU_INIT = 0.07
CHECKPOINT_VERSION = 1

# parameter-group prefixes, in creation order (fixed for seeded init)
GROUPS = ("img", "coord", "gene", "head", "fuse", "proj_m", "proj_g")


@dataclass
class EncoderConfig:
    d_img: int
    g: int
    d_hidden: int = 64
    d_embed: int = 64
    d_proj: int = 32
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("d_img", "g", "d_hidden", "d_embed", "d_proj"):
            if getattr(self, name) < 1:
                raise ConfigError(f"EncoderConfig.{name} must be >= 1")
        if self.depth < 1:
            raise ConfigError("EncoderConfig.depth must be >= 1")


def _mlp_dims(d_in: int, d_out: int, cfg: EncoderConfig) -> list[int]:
    return [d_in] + [cfg.d_hidden] * (cfg.depth - 1) + [d_out]


def _mlp_shapes(prefix: str, dims: list[int]) -> list[tuple[str, tuple[int, int]]]:
    shapes = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((f"{prefix}.w{i}", (a, b)))
        shapes.append((f"{prefix}.b{i}", (1, b)))
    return shapes


def parameter_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, int]]]:
    """Every trainable tensor with its shape, in canonical order."""
    shapes: list[tuple[str, tuple[int, int]]] = []
    shapes += _mlp_shapes("img", _mlp_dims(cfg.d_img, cfg.d_embed, cfg))
    shapes += _mlp_shapes("coord", _mlp_dims(2, cfg.d_embed, cfg))
    shapes += _mlp_shapes("gene", _mlp_dims(cfg.g, cfg.d_embed, cfg))
    shapes += [("head.w", (cfg.d_embed, cfg.g)), ("head.b", (1, cfg.g))]
    shapes += [("fuse.w", (2 * cfg.d_embed, cfg.d_embed)), ("fuse.b", (1, cfg.d_embed))]
    shapes += [("proj_m.w", (cfg.d_embed, cfg.d_proj)), ("proj_g.w", (cfg.d_embed, cfg.d_proj))]
    shapes += [("log_tau", (1, 1))]
    return shapes


@dataclass
class ModelParams:
    """All trainable weights plus the config that fixes their shapes."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]

    def node_view(self, requires_grad: bool = False) -> dict[str, ad.Node]:
        make = ad.leaf if requires_grad else ad.constant
        return {name: make(arr) for name, arr in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.arrays[name]).tobytes())
        return h.hexdigest()

    @property
    def tau(self) -> float:
        return float(np.exp(self.arrays["log_tau"][0, 0]))

    # numpy inference helpers (no gradients)
    def embed_images(self, feats: np.ndarray) -> np.ndarray:
        nodes = self.node_view(requires_grad=False)
        return encode_image(ad.constant(np.atleast_2d(feats)), nodes, self.config).value

    def head_predict(self, f_h: np.ndarray) -> np.ndarray:
        nodes = self.node_view(requires_grad=False)
        return regress(ad.constant(np.atleast_2d(f_h)), nodes).value

    def save(self, path) -> None:
        save_tensors(path, self.arrays, meta={"version": CHECKPOINT_VERSION, "config": asdict(self.config)})

    @staticmethod
    def load(path) -> "ModelParams":
        arrays, meta = load_tensors(path)
        if "config" not in meta:
            raise ConfigError(f"{path}: checkpoint missing config header")
        cfg = EncoderConfig(**meta["config"])
        expected = dict(parameter_shapes(cfg))
        for name, shape in expected.items():
            if name not in arrays or arrays[name].shape != shape:
                raise ShapeError(f"{path}: tensor {name!r} missing or misshaped")
        return ModelParams(cfg, arrays)


def init_params(cfg: EncoderConfig) -> ModelParams:
    """He-style seeded initialization; biases and projection extras start at 0."""
    rng = substream(cfg.seed, "init")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg):
        if name == "log_tau":
            arrays[name] = np.full(shape, np.log(TAU_INIT))
        elif name.split(".")[-1].startswith("b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ModelParams(cfg, arrays)


def _mlp(x: ad.Node, params: Mapping[str, ad.Node], prefix: str, n_layers: int) -> ad.Node:
    h = x
    for i in range(n_layers):
        h = ad.add_rowvec(ad.matmul(h, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def encode_image(feat_batch: ad.Node, params: Mapping[str, ad.Node], cfg: EncoderConfig) -> ad.Node:
    """Image-feature MLP -> F_H (B x d_embed)."""
    if feat_batch.shape[1] != cfg.d_img:
        raise ShapeError(f"encode_image: input dim {feat_batch.shape[1]} != d_img {cfg.d_img}")
    return _mlp(feat_batch, params, "img", cfg.depth)


def regress(f_h: ad.Node, params: Mapping[str, ad.Node]) -> ad.Node:
    """Linear head on F_H; predictions live in standardized expression space."""
    return ad.add_rowvec(ad.matmul(f_h, params["head.w"]), params["head.b"])


def encode_coord(coords: ad.Node, params: Mapping[str, ad.Node], cfg: EncoderConfig) -> ad.Node:
    """Coordinate MLP -> F_C; expects per-slide [0,1]^2 normalized input."""
    if coords.shape[1] != 2:
        raise ShapeError(f"encode_coord: expected 2 columns, got {coords.shape[1]}")
    v = coords.value
    if np.any(v < -0.5) or np.any(v > 1.5):
        warnings.warn("encode_coord: coordinates outside the [-0.5, 1.5] guard band; "
                      "expected [0,1]-normalized input", ContractWarning, stacklevel=2)
    return _mlp(coords, params, "coord", cfg.depth)


def fuse(f_h: ad.Node, f_c: ad.Node, params: Mapping[str, ad.Node]) -> ad.Node:
    """Coordinate-guided morphology representation: linear over [F_H ; F_C]."""
    return ad.add_rowvec(ad.matmul(ad.concat_cols(f_h, f_c), params["fuse.w"]), params["fuse.b"])


def encode_gene(g_std: ad.Node, params: Mapping[str, ad.Node], cfg: EncoderConfig) -> ad.Node:
    """Gene-expression MLP -> F_G (raw, unnormalized rows)."""
    if g_std.shape[1] != cfg.g:
        raise ShapeError(f"encode_gene: input dim {g_std.shape[1]} != g {cfg.g}")
    return _mlp(g_std, params, "gene", cfg.depth)


def project(f: ad.Node, params: Mapping[str, ad.Node], head: str) -> ad.Node:
    """Bias-free linear projection followed by row L2 normalization."""
    if head not in ("proj_m", "proj_g"):
        raise ConfigError(f"unknown projection head {head!r}")
    return ad.row_l2_normalize(ad.matmul(f, params[f"{head}.w"]))
