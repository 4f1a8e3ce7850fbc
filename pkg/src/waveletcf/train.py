"""Pairwise-ranking training: triple sampling, loss, gradients, Adam, fit.

Gradients are computed by hand-written reverse-mode differentiation through
the layered propagation (no autodiff dependency), which keeps the whole
pipeline in float64 and bitwise-reproducible under a fixed seed.
"""

import json
import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from . import bundles
from .errors import ConfigError, DataError, NumericalError
from .evaluate import evaluate
from .ingest import InteractionSet, SplitSpec, split
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    PropagationOperator,
    forward,
    init_params,
    score_user,
)
from .seeds import TRIPLES, VAL_SPLIT, child_seed
from .spectral import BoxCoxResult, SpectralDecomposition

TRAIN_STATE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eta: float = 0.01
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(
                "learning_rate must be strictly positive; a zero rate cannot "
                f"train (got {self.learning_rate})"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")


@dataclass
class Gradients:
    """Gradient tensors mirroring ModelParams."""

    x0: np.ndarray
    y0: np.ndarray
    w: List[np.ndarray]
    theta: List[np.ndarray]

    def tensors(self):
        out = [("x0", self.x0), ("y0", self.y0)]
        out += [(f"w{i}", wi) for i, wi in enumerate(self.w)]
        out += [(f"theta{i}", th) for i, th in enumerate(self.theta)]
        return out


def sample_triples(
    train: InteractionSet, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw (user, positive, negative) index triples.

    The (user, positive) pair is uniform over training pairs; the negative
    is uniform over the user's unobserved items by rejection sampling.
    Users whose positives cover the whole catalog cannot yield a negative
    and are skipped with a warning. Returns an int64 array of shape
    (count, 3), deterministic given the generator state.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    degrees = train.user_degrees()
    exhausted = np.flatnonzero(degrees >= train.num_items)
    pairs = train.pairs
    if exhausted.size:
        warnings.warn(
            f"{exhausted.size} user(s) interact with every item and are "
            "skipped during sampling",
            stacklevel=2,
        )
        pairs = pairs[~np.isin(pairs[:, 0], exhausted)]
        if len(pairs) == 0:
            raise DataError("no users with any unobserved item to sample")
    encoded = np.sort(pairs[:, 0].astype(np.int64) * train.num_items + pairs[:, 1])

    def is_positive(users, items):
        key = users * train.num_items + items
        idx = np.clip(np.searchsorted(encoded, key), 0, len(encoded) - 1)
        return encoded[idx] == key

    picks = rng.integers(0, len(pairs), count)
    out = np.empty((count, 3), dtype=np.int64)
    out[:, 0] = pairs[picks, 0]
    out[:, 1] = pairs[picks, 1]
    js = rng.integers(0, train.num_items, count)
    bad = is_positive(out[:, 0], js)
    while bad.any():
        js[bad] = rng.integers(0, train.num_items, int(bad.sum()))
        bad = is_positive(out[:, 0], js)
    out[:, 2] = js
    return out


def _margins(trace: ForwardTrace, batch: np.ndarray) -> np.ndarray:
    cu = trace.concat_users
    ci = trace.concat_items
    return np.sum(cu[batch[:, 0]] * (ci[batch[:, 1]] - ci[batch[:, 2]]), axis=1)


def bpr_loss(trace: ForwardTrace, batch: np.ndarray, eta: float) -> float:
    """Pairwise ranking loss with batch-restricted L2 regularization.

    Sum of softplus(-margin) over triples plus (eta/2) times the squared
    norms of the distinct batch users' and distinct positive items'
    concatenated embeddings. Overflow-safe via logaddexp.
    """
    if len(batch) == 0:
        raise DataError("batch must be non-empty")
    z = _margins(trace, batch)
    loss = float(np.logaddexp(0.0, -z).sum())
    if eta != 0.0:
        users = np.unique(batch[:, 0])
        items = np.unique(batch[:, 1])
        loss += 0.5 * eta * float(
            np.sum(trace.concat_users[users] ** 2)
            + np.sum(trace.concat_items[items] ** 2)
        )
    return loss


def backward(
    trace: ForwardTrace,
    batch: np.ndarray,
    params: ModelParams,
    oper: PropagationOperator,
    eta: float,
) -> Gradients:
    """Reverse-mode gradients of the batch loss for every parameter.

    Differentiates through the concatenation, each layer's logistic
    activation, the mixing weights, the (self-adjoint) spectral operator,
    and the per-frequency gates.
    """
    if len(batch) == 0:
        raise DataError("batch must be non-empty")
    m = trace.num_users
    cu = trace.concat_users
    ci = trace.concat_items
    us, iis, js = batch[:, 0], batch[:, 1], batch[:, 2]

    z = _margins(trace, batch)
    dz = -(1.0 - 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500))))

    d_cu = np.zeros_like(cu)
    d_ci = np.zeros_like(ci)
    diff = ci[iis] - ci[js]
    np.add.at(d_cu, us, dz[:, None] * diff)
    np.add.at(d_ci, iis, dz[:, None] * cu[us])
    np.add.at(d_ci, js, -dz[:, None] * cu[us])
    if eta != 0.0:
        du = np.unique(us)
        di = np.unique(iis)
        d_cu[du] += eta * cu[du]
        d_ci[di] += eta * ci[di]

    d_concat = np.vstack([d_cu, d_ci])
    width = params.x0.shape[1]
    layers = len(params.w)
    d_slices = [
        d_concat[:, layer * width: (layer + 1) * width]
        for layer in range(layers + 1)
    ]

    grads = Gradients(
        x0=np.zeros_like(params.x0),
        y0=np.zeros_like(params.y0),
        w=[np.zeros_like(wi) for wi in params.w],
        theta=[np.zeros_like(th) for th in params.theta],
    )

    d_next = d_slices[layers]
    for layer in range(layers - 1, -1, -1):
        cache = trace.caches[layer]
        act = trace.zs[layer + 1]
        d_pre = d_next * act * (1.0 - act)
        grads.w[layer] = cache.mixed.T @ d_pre
        d_mixed = d_pre @ params.w[layer].T
        h = cache.h
        if oper.materialized:
            d_inner = oper.psi @ d_mixed
            d_coeff = oper.phi.T @ d_inner
            d_lamh = np.sum(d_coeff * cache.z_in_coeff, axis=1)
            grads.theta[layer] = d_lamh * oper.lam * oper.g * h * (1.0 - h)
            d_zc = (oper.lam * h)[:, None] * d_coeff
            d_z = oper.psi_inv @ (oper.phi @ d_zc)
        else:
            d_fc = oper.phi.T @ d_mixed
            d_f = np.sum(d_fc * cache.coeff, axis=1)
            base = oper.g * oper.g_inv * oper.lam
            grads.theta[layer] = d_f * base * oper.g * h * (1.0 - h)
            d_c = oper.diag_factor(h)[:, None] * d_fc
            d_z = oper.phi @ d_c
        d_next = d_slices[layer] + d_z

    grads.x0 = d_next[:m]
    grads.y0 = d_next[m:]

    for name, g in grads.tensors():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in {name}")
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    step: int
    m: dict
    v: dict

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros_like(t) for name, t in params.tensors()},
            v={name: np.zeros_like(t) for name, t in params.tensors()},
        )


def adam_step(
    params: ModelParams, grads: Gradients, state: AdamState, config: TrainConfig
):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    grad_map = dict(grads.tensors())
    for name, tensor in params.tensors():
        g = grad_map[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        tensor -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


@dataclass
class FitResult:
    best_params: ModelParams
    final_params: ModelParams
    best_epoch: int
    best_recall: float
    best_ndcg: float
    epochs_run: int
    log_lines: List[str]
    stopped_early: bool


def _save_train_state(path, params, best_params, adam, meta):
    arrays = {}
    for name, t in params.tensors():
        arrays[f"cur_{name}"] = t
    for name, t in best_params.tensors():
        arrays[f"best_{name}"] = t
    for name in adam.m:
        arrays[f"adam_m_{name}"] = adam.m[name]
        arrays[f"adam_v_{name}"] = adam.v[name]
    bundles.save_bundle(path, meta, arrays)


def _load_params_like(arrays, prefix, template: ModelParams) -> ModelParams:
    return ModelParams(
        x0=arrays[f"{prefix}x0"],
        y0=arrays[f"{prefix}y0"],
        w=[arrays[f"{prefix}w{i}"] for i in range(len(template.w))],
        theta=[arrays[f"{prefix}theta{i}"] for i in range(len(template.theta))],
    )


def fit(
    train_data: InteractionSet,
    decomp: SpectralDecomposition,
    bc: BoxCoxResult,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    exponent_mode: str = "power",
    materialize_wavelets: bool = False,
    drop_threshold: float = 1e-7,
    val_fraction: float = 0.1,
    log_fn: Optional[Callable[[str], None]] = None,
    state_path=None,
    resume: bool = False,
) -> FitResult:
    """Train with early stopping on a held-out validation slice.

    A per-user `val_fraction` of the training pairs is held out; after each
    epoch Recall@20 on that slice is measured and training stops once it
    fails to improve for more than `patience` epochs. Each epoch samples
    one triple per remaining training pair. Log lines follow
    "epoch loss val_recall@20 val_ndcg@20 elapsed_ms".

    Randomness derives from two seeds: model_config.seed drives parameter
    init, train_config.seed (as a root) drives the validation split and
    triple sampling via labeled child seeds. `state_path` enables per-epoch
    state saves; `resume=True` continues from such a save bit-exactly.
    """
    if not (0 < val_fraction < 1):
        raise ConfigError(f"val_fraction must lie in (0,1), got {val_fraction}")
    log = log_fn or (lambda line: None)

    inner_train, val = split(
        train_data,
        SplitSpec(
            train_fraction=1.0 - val_fraction,
            seed=child_seed(train_config.seed, VAL_SPLIT),
        ),
    )
    oper = PropagationOperator(
        decomp,
        bc,
        model_config.t,
        exponent_mode=exponent_mode,
        materialize_wavelets=materialize_wavelets,
        drop_threshold=drop_threshold,
    )
    rng = np.random.default_rng(child_seed(train_config.seed, TRIPLES))

    params = init_params(
        model_config, train_data.num_users, train_data.num_items, decomp.q
    )
    adam = AdamState.init(params)
    best_params = params.copy()
    best_epoch = 0
    best_recall = -np.inf
    best_ndcg = 0.0
    since_best = 0
    start_epoch = 0
    log_lines: List[str] = []

    if resume:
        if state_path is None:
            raise ConfigError("resume requires a state_path")
        meta, arrays = bundles.load_bundle(state_path)
        if meta.get("kind") != "train-state":
            raise DataError(f"{state_path}: not a training state file")
        if meta.get("version") != TRAIN_STATE_VERSION:
            raise DataError(f"{state_path}: unsupported training state version")
        params = _load_params_like(arrays, "cur_", params)
        best_params = _load_params_like(arrays, "best_", params)
        adam = AdamState(
            step=meta["adam_step"],
            m={name: arrays[f"adam_m_{name}"] for name, _ in params.tensors()},
            v={name: arrays[f"adam_v_{name}"] for name, _ in params.tensors()},
        )
        rng.bit_generator.state = json.loads(meta["rng_state"])
        start_epoch = meta["epoch"]
        best_epoch = meta["best_epoch"]
        best_recall = meta["best_recall"]
        best_ndcg = meta["best_ndcg"]
        since_best = meta["since_best"]
        log_lines = list(meta["log_lines"])

    count = inner_train.num_pairs
    stopped_early = False
    epoch = start_epoch
    while epoch < train_config.max_epochs:
        epoch += 1
        t0 = time.perf_counter()
        triples = sample_triples(inner_train, count, rng)
        total = 0.0
        for lo in range(0, count, train_config.batch_size):
            batch = triples[lo: lo + train_config.batch_size]
            trace = forward(params, oper, model_config)
            total += bpr_loss(trace, batch, train_config.eta)
            grads = backward(trace, batch, params, oper, train_config.eta)
            adam_step(params, grads, adam, train_config)
        loss = total / count

        trace = forward(params, oper, model_config)
        report = evaluate(
            lambda u: score_user(trace, u), inner_train, val, k_values=(20,)
        )
        recall, ndcg = report.recall[20], report.ndcg[20]
        elapsed_ms = int((time.perf_counter() - t0) * 1000)
        line = f"{epoch} {loss:.6f} {recall:.6f} {ndcg:.6f} {elapsed_ms}"
        log_lines.append(line)
        log(line)

        if recall > best_recall:
            best_recall = recall
            best_ndcg = ndcg
            best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1

        if state_path is not None:
            _save_train_state(
                state_path,
                params,
                best_params,
                adam,
                {
                    "kind": "train-state",
                    "version": TRAIN_STATE_VERSION,
                    "epoch": epoch,
                    "best_epoch": best_epoch,
                    "best_recall": best_recall,
                    "best_ndcg": best_ndcg,
                    "since_best": since_best,
                    "adam_step": adam.step,
                    "rng_state": json.dumps(rng.bit_generator.state),
                    "log_lines": log_lines,
                },
            )

        if since_best > train_config.patience:
            stopped_early = True
            break

    return FitResult(
        best_params=best_params,
        final_params=params,
        best_epoch=best_epoch,
        best_recall=float(best_recall),
        best_ndcg=float(best_ndcg),
        epochs_run=epoch,
        log_lines=log_lines,
        stopped_early=stopped_early,
    )


def grid_search(
    train_data: InteractionSet,
    decomp: SpectralDecomposition,
    bc: BoxCoxResult,
    model_config: ModelConfig,
    train_config: TrainConfig,
    learning_rates: List[float],
    t_values: List[float],
    log_fn: Optional[Callable[[str], None]] = None,
    **fit_kwargs,
):
    """Exhaustive search over (learning_rate, t) by validation Recall@20.

    Returns (rows, best_row, best_fit) where each row is
    (learning_rate, t, recall, ndcg, best_epoch).
    """
    if not learning_rates or not t_values:
        raise ConfigError("grid search needs non-empty learning_rate and t lists")
    log = log_fn or (lambda line: None)
    rows = []
    best_row = None
    best_fit = None
    for lr in learning_rates:
        for t in t_values:
            result = fit(
                train_data,
                decomp,
                bc,
                replace(model_config, t=float(t)),
                replace(train_config, learning_rate=float(lr)),
                **fit_kwargs,
            )
            row = (
                float(lr),
                float(t),
                result.best_recall,
                result.best_ndcg,
                result.best_epoch,
            )
            rows.append(row)
            log(
                f"grid lr={lr} t={t} recall@20={result.best_recall:.6f} "
                f"ndcg@20={result.best_ndcg:.6f} best_epoch={result.best_epoch}"
            )
            if best_row is None or row[2] > best_row[2]:
                best_row = row
                best_fit = result
    return rows, best_row, best_fit
