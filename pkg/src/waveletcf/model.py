"""Layered embedding model: wavelet-filtered propagation and scoring.

Embeddings for all users and items are stacked into one (M+K) x P block
and pushed through L propagation layers. Each layer filters the block in
the retained eigenbasis with a learnable per-frequency gate, mixes
channels with a dense weight matrix, and applies a logistic nonlinearity.
The final representation concatenates every layer's output; a user-item
score is the dot product of the concatenated vectors.
"""

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import bundles
from .errors import ConfigError, DataError
from .spectral import (
    BoxCoxResult,
    SpectralDecomposition,
    build_wavelet_pair,
    filter_response,
)

CHECKPOINT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 3
    width: int = 64
    t: float = 0.5
    eta: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.t < 0:
            raise ConfigError(f"t must be >= 0, got {self.t}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")


@dataclass
class ModelParams:
    """Learnable tensors: initial embeddings, mixing weights, spectral gates."""

    x0: np.ndarray  # M x P
    y0: np.ndarray  # K x P
    w: List[np.ndarray]  # L matrices, each P x P
    theta: List[np.ndarray]  # L gate vectors, each Q

    def tensors(self):
        """(name, array) pairs in a fixed order."""
        out = [("x0", self.x0), ("y0", self.y0)]
        out += [(f"w{i}", wi) for i, wi in enumerate(self.w)]
        out += [(f"theta{i}", th) for i, th in enumerate(self.theta)]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            x0=self.x0.copy(),
            y0=self.y0.copy(),
            w=[wi.copy() for wi in self.w],
            theta=[th.copy() for th in self.theta],
        )


def init_params(
    config: ModelConfig, num_users: int, num_items: int, q: int
) -> ModelParams:
    """Draw initial parameters: N(0, 0.01^2) embeddings, Glorot-uniform
    mixing weights, all-ones gates. Deterministic for a fixed seed."""
    if config.width > min(num_users, num_items) / 2:
        warnings.warn(
            f"embedding width {config.width} exceeds half of "
            f"min(users, items) = {min(num_users, num_items)}; "
            "the model may be over-parameterized",
            stacklevel=2,
        )
    rng = np.random.default_rng(config.seed)
    p = config.width
    x0 = rng.normal(0.0, 0.01, (num_users, p))
    y0 = rng.normal(0.0, 0.01, (num_items, p))
    bound = math.sqrt(6.0 / (p + p))
    w = [rng.uniform(-bound, bound, (p, p)) for _ in range(config.layers)]
    theta = [np.ones(q) for _ in range(config.layers)]
    return ModelParams(x0=x0, y0=y0, w=w, theta=theta)


class PropagationOperator:
    """The fixed (non-learnable) spectral machinery of one layer.

    The fused path applies Phi diag(g * g_inv * lam * h) Phi^T exactly in
    the eigenbasis. The materialized path multiplies by the sparsified
    wavelet matrices instead, reproducing their thresholding error.
    """

    def __init__(
        self,
        decomp: SpectralDecomposition,
        bc: BoxCoxResult,
        t: float,
        exponent_mode: str = "power",
        materialize_wavelets: bool = False,
        drop_threshold: float = 1e-7,
    ):
        self.phi = decomp.phi
        self.lam = decomp.shifted_lambdas
        self.q = decomp.q
        self.n = decomp.n
        self.t = float(t)
        filt = filter_response(decomp, bc, t, exponent_mode)
        self.g = filt.response
        self.g_inv = 1.0 / filt.response
        self.materialized = bool(materialize_wavelets)
        if self.materialized:
            pair = build_wavelet_pair(decomp, bc, t, drop_threshold, exponent_mode)
            self.psi = pair.psi
            self.psi_inv = pair.psi_inv

    def gate(self, theta: np.ndarray) -> np.ndarray:
        """Per-frequency gate h = sigma(g * theta)."""
        return sigmoid(self.g * theta)

    def diag_factor(self, h: np.ndarray) -> np.ndarray:
        """Fused diagonal: forward response, inverse response, shifted
        eigenvalue, and gate, multiplied literally."""
        return self.g * self.g_inv * self.lam * h


@dataclass
class LayerCache:
    """Intermediates of one layer needed for reverse-mode gradients."""

    h: np.ndarray  # Q gate values
    coeff: np.ndarray  # Q x P eigenbasis coefficients of the layer input
    mixed: np.ndarray  # N x P block after the spectral operator
    pre: np.ndarray  # N x P pre-activation (mixed @ W)
    z_in_coeff: Optional[np.ndarray] = None  # materialized path only


@dataclass
class ForwardTrace:
    """Layer activations plus the concatenated final embeddings."""

    zs: List[np.ndarray]  # L+1 blocks of N x P (zs[0] = initial embeddings)
    caches: List[LayerCache]
    concat_users: np.ndarray  # M x (L+1)P
    concat_items: np.ndarray  # K x (L+1)P
    num_users: int = field(default=0)

    @property
    def width(self) -> int:
        return self.concat_users.shape[1]


def propagate_layer(
    z: np.ndarray, layer: int, params: ModelParams, oper: PropagationOperator
):
    """One propagation step; returns (activation, cache)."""
    if z.shape[0] != oper.n:
        raise DataError(f"input block has {z.shape[0]} rows, expected {oper.n}")
    w = params.w[layer]
    if z.shape[1] != w.shape[0]:
        raise DataError(
            f"input width {z.shape[1]} does not match weight shape {w.shape}"
        )
    h = oper.gate(params.theta[layer])
    if oper.materialized:
        z_in = oper.psi_inv @ z
        z_in_coeff = oper.phi.T @ z_in
        coeff = (oper.lam * h)[:, None] * z_in_coeff
        mixed = oper.psi @ (oper.phi @ coeff)
        cache_extra = z_in_coeff
    else:
        coeff = oper.phi.T @ z
        mixed = oper.phi @ (oper.diag_factor(h)[:, None] * coeff)
        cache_extra = None
    pre = mixed @ w
    out = sigmoid(pre)
    return out, LayerCache(
        h=h, coeff=coeff, mixed=mixed, pre=pre, z_in_coeff=cache_extra
    )


def forward(
    params: ModelParams, oper: PropagationOperator, config: ModelConfig
) -> ForwardTrace:
    """Run all layers from the initial embeddings and concatenate."""
    m = params.x0.shape[0]
    z = np.vstack([params.x0, params.y0])
    zs = [z]
    caches = []
    for layer in range(config.layers):
        z, cache = propagate_layer(z, layer, params, oper)
        zs.append(z)
        caches.append(cache)
    concat = np.hstack(zs)
    return ForwardTrace(
        zs=zs,
        caches=caches,
        concat_users=concat[:m],
        concat_items=concat[m:],
        num_users=m,
    )


def score_pairs(trace: ForwardTrace, users: np.ndarray, items: np.ndarray):
    """Scores for aligned (user, item) index arrays."""
    return np.sum(trace.concat_users[users] * trace.concat_items[items], axis=1)


def score_user(trace: ForwardTrace, user: int) -> np.ndarray:
    """All item scores for one user; never materializes the full matrix."""
    return trace.concat_items @ trace.concat_users[user]


def save_checkpoint(
    path,
    config: ModelConfig,
    params: ModelParams,
    dataset_hash: str,
    extra_meta: dict = None,
) -> None:
    """Persist config + parameters keyed by the dataset content hash."""
    meta = {
        "kind": "model-checkpoint",
        "version": CHECKPOINT_VERSION,
        "dataset_hash": dataset_hash,
        "config": asdict(config),
        "num_w": len(params.w),
        "num_theta": len(params.theta),
    }
    if extra_meta:
        meta.update(extra_meta)
    bundles.save_bundle(path, meta, dict(params.tensors()))


def load_checkpoint(path, expected_dataset_hash: str = None):
    """Load a checkpoint; refuses one built for a different dataset.

    Returns (config, params, meta).
    """
    meta, arrays = bundles.load_bundle(path)
    if meta.get("kind") != "model-checkpoint":
        raise DataError(f"{path}: not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {meta.get('version')} unsupported"
        )
    if (
        expected_dataset_hash is not None
        and meta["dataset_hash"] != expected_dataset_hash
    ):
        raise DataError(
            f"{path}: checkpoint was trained on dataset "
            f"{meta['dataset_hash'][:12]}..., not {expected_dataset_hash[:12]}..."
        )
    config = ModelConfig(**meta["config"])
    params = ModelParams(
        x0=arrays["x0"],
        y0=arrays["y0"],
        w=[arrays[f"w{i}"] for i in range(meta["num_w"])],
        theta=[arrays[f"theta{i}"] for i in range(meta["num_theta"])],
    )
    return config, params, meta
