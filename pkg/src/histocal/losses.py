"""Training objective: correlation-aware regression, symmetric contrastive
alignment, and multi-hop topology preservation, combined with fixed weights.

All three terms are built on the autodiff kernel so one backward pass yields
gradients for every encoder, the fusion layer, the projection heads, and the
temperature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractWarning, ContractError, NumericError
from .graph import TopoPrior, build_topo_prior
from .model import EncoderConfig, encode_coord, encode_gene, encode_image, fuse, project, regress

PCC_VAR_FLOOR = 1e-10  # genes below this batch variance are excluded from the PCC term
SPA_NORM_GATE = 1e-30  # Frobenius norms below this count as zero matrices


@dataclass
class LossWeights:
    lambda_mae: float = 0.5
    lambda_pcc: float = 0.5
    lambda_con: float = 1.0
    lambda_reg: float = 1.0
    lambda_spa: float = 0.1
    alpha: tuple[float, ...] = (1.0, 0.5)
    h_hop: int = 2
    k_knn: int = 6

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        for name in ("lambda_mae", "lambda_pcc", "lambda_con", "lambda_reg", "lambda_spa"):
            if getattr(self, name) < 0:
                raise ConfigError(f"LossWeights.{name} must be >= 0")
        if self.h_hop < 1 or self.k_knn < 1:
            raise ConfigError("LossWeights: h_hop and k_knn must be >= 1")
        if len(self.alpha) != self.h_hop:
            raise ConfigError(f"LossWeights: alpha has {len(self.alpha)} entries, h_hop={self.h_hop}")


@dataclass
class Batch:
    """One within-slide mini-batch in model-ready form."""

    feat: np.ndarray  # B x d_img
    coord_raw: np.ndarray  # B x 2, platform units (graph construction)
    coord01: np.ndarray  # B x 2, per-slide [0,1]-normalized (coordinate encoder)
    g_std: np.ndarray  # B x G, standardized expression

    @property
    def size(self) -> int:
        return self.feat.shape[0]


def batch_gene_pcc(pred: ad.Node, target: ad.Node) -> tuple[ad.Node | None, int]:
    """Mean Pearson correlation over admissible genes, as a graph node.

    Returns (node, n_admissible); node is None when no gene clears the
    variance floor in both prediction and target.
    """
    b = pred.shape[0]
    dx = ad.sub_rowvec(pred, ad.col_means(pred))
    dy = ad.sub_rowvec(target, ad.col_means(target))
    var_x = (dx.value * dx.value).mean(axis=0)
    var_y = (dy.value * dy.value).mean(axis=0)
    mask = (var_x >= PCC_VAR_FLOOR) & (var_y >= PCC_VAR_FLOOR)
    n_adm = int(mask.sum())
    if n_adm == 0:
        return None, 0
    ux = ad.row_l2_normalize(ad.transpose(dx))  # G x B unit rows
    uy = ad.row_l2_normalize(ad.transpose(dy))
    per_gene = ad.row_sums(ad.mul(ux, uy))  # G x 1
    masked = ad.mul_const(per_gene, mask.astype(np.float64).reshape(-1, 1))
    return ad.scale(ad.sum_all(masked), 1.0 / n_adm), n_adm


def loss_reg(pred: ad.Node, target, weights: LossWeights) -> ad.Node:
    """MSE + lambda_mae*MAE + lambda_pcc*(1 - mean gene-wise PCC) over a batch."""
    target = ad.as_node(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"loss_reg: {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target)
    out = ad.add(ad.mean_all(ad.square(diff)), ad.scale(ad.mean_all(ad.abs_(diff)), weights.lambda_mae))
    if weights.lambda_pcc == 0:
        return out
    if pred.shape[0] < 2:
        warnings.warn("loss_reg: batch of size < 2, PCC term skipped", ContractWarning, stacklevel=2)
        return out
    mean_pcc, n_adm = batch_gene_pcc(pred, target)
    if n_adm == 0:
        # no admissible gene: fixed penalty, no gradient
        return ad.add(out, ad.constant([[weights.lambda_pcc]]))
    return ad.add(out, ad.scale(ad.sub(ad.constant([[1.0]]), mean_pcc), weights.lambda_pcc))


def loss_contrastive(p_m: ad.Node, p_g: ad.Node, tau: ad.Node) -> ad.Node:
    """Symmetric InfoNCE over cosine similarities of projected embeddings.

    Each direction is the mean over the batch of logsumexp(row) minus the
    matched-pair logit, which keeps the uniform-logit closed forms exact.
    """
    if p_m.shape != p_g.shape:
        raise ad.ShapeError(f"loss_contrastive: {p_m.shape} vs {p_g.shape}")
    if tau.item() <= 0:
        raise ContractError("loss_contrastive: tau must be positive")
    for name, node in (("p_m", p_m), ("p_g", p_g)):
        norms = np.sqrt((node.value * node.value).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError(f"loss_contrastive: {name} rows are not unit-norm")
    b = p_m.shape[0]
    logits = ad.scale_by(ad.matmul(p_m, ad.transpose(p_g)), ad.reciprocal(tau))
    eye = np.eye(b)

    def direction(lg: ad.Node) -> ad.Node:
        pulled = ad.sub(ad.sum_all(ad.row_logsumexp(lg)), ad.sum_all(ad.mul_const(lg, eye)))
        return ad.scale(pulled, 1.0 / b)

    return ad.scale(ad.add(direction(logits), direction(ad.transpose(logits))), 0.5)


def _frobenius_unit(matrix: np.ndarray) -> np.ndarray:
    norm = np.sqrt((matrix * matrix).sum())
    if norm < SPA_NORM_GATE:
        return np.zeros_like(matrix)
    return matrix / norm


def loss_spa(f_g: ad.Node, prior: TopoPrior) -> ad.Node:
    """Squared Frobenius distance between the normalized cosine-similarity
    matrix of F_G and the normalized topology prior (diagonals zeroed)."""
    b = f_g.shape[0]
    if b < 2:
        warnings.warn("loss_spa: batch of size < 2, topology loss is 0", ContractWarning, stacklevel=2)
        return ad.constant([[0.0]])
    if prior.a_topo.shape != (b, b):
        raise ad.ShapeError(f"loss_spa: prior is {prior.a_topo.shape}, batch is {b}")
    offdiag = 1.0 - np.eye(b)
    fn = ad.row_l2_normalize(f_g)
    s0 = ad.mul_const(ad.matmul(fn, ad.transpose(fn)), offdiag)
    frob = ad.sqrt(ad.sum_all(ad.square(s0)))
    if frob.item() < SPA_NORM_GATE:
        s_unit: ad.Node = ad.constant(np.zeros((b, b)))
    else:
        s_unit = ad.scale_by(s0, ad.reciprocal(frob))
    a_unit = _frobenius_unit(prior.a_topo * offdiag)
    return ad.sum_all(ad.square(ad.sub(s_unit, ad.constant(a_unit))))


class TotalLoss(NamedTuple):
    total: ad.Node
    reg: ad.Node
    con: ad.Node
    spa: ad.Node


def total_loss(
    batch: Batch,
    params: Mapping[str, ad.Node],
    enc_cfg: EncoderConfig,
    weights: LossWeights,
    prior: TopoPrior | None = None,
) -> TotalLoss:
    """Wire the encoders and all three objective terms for one mini-batch."""
    try:
        f_h = encode_image(ad.constant(batch.feat), params, enc_cfg)
        g_hat = regress(f_h, params)
        f_c = encode_coord(ad.constant(batch.coord01), params, enc_cfg)
        f_m = fuse(f_h, f_c, params)
        f_g = encode_gene(ad.constant(batch.g_std), params, enc_cfg)
    except NumericError as e:
        raise NumericError(f"encoder forward: {e}") from e
    try:
        l_reg = loss_reg(g_hat, batch.g_std, weights)
    except NumericError as e:
        raise NumericError(f"L_reg: {e}") from e
    try:
        tau = ad.exp(params["log_tau"])
        l_con = loss_contrastive(project(f_m, params, "proj_m"), project(f_g, params, "proj_g"), tau)
    except NumericError as e:
        raise NumericError(f"L_con: {e}") from e
    try:
        if batch.size < 2:
            l_spa = loss_spa(f_g, TopoPrior(a_hops=[], a_topo=np.zeros((batch.size, batch.size))))
        else:
            if prior is None:
                prior = build_topo_prior(batch.coord_raw, weights.k_knn, weights.alpha)
            l_spa = loss_spa(f_g, prior)
    except NumericError as e:
        raise NumericError(f"L_spa: {e}") from e
    total = ad.add(
        ad.add(ad.scale(l_con, weights.lambda_con), ad.scale(l_reg, weights.lambda_reg)),
        ad.scale(l_spa, weights.lambda_spa),
    )
    return TotalLoss(total=total, reg=l_reg, con=l_con, spa=l_spa)
