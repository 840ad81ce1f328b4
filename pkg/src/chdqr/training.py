"""Composite loss, alternating theta/prototype updates and prototype dynamics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import DynamicsConfig, LossConfig, TrainConfig
from .data import Dataset
from .errors import ChdqrError, DataError, NumericalError
from .geometry import DUPLICATE_TOL, BoundingBox, compute_bounding_box, voronoi_areas
from .network import Adam, DensityNetwork, log_softmax
from .quantizer import PrototypeSet, distances, soft_labels_from_distances, usage

log = logging.getLogger(__name__)

_INIT_JITTER = 0.01
_MAX_RESAMPLE = 10


@dataclass
class TrainState:
    net: DensityNetwork
    protos: PrototypeSet
    areas: np.ndarray
    loss_cfg: LossConfig
    dyn_cfg: DynamicsConfig | None
    feature_mean: np.ndarray
    feature_std: np.ndarray
    opt_theta: Adam
    opt_protos: Adam
    epoch: int = 0
    rng_seed: int = 0
    history: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.protos.K

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return (X - self.feature_mean) / self.feature_std


# ---------------------------------------------------------------- losses

def loss_cross_entropy(log_probs, labels) -> float:
    """Batch mean of -sum_i q_i log P_i."""
    log_probs = np.atleast_2d(log_probs)
    labels = np.atleast_2d(labels)
    return float(-(labels * log_probs).sum(axis=1).mean())


def loss_quantization(Y, coords, dist=None):
    """Mean distance to the nearest prototype and its gradient w.r.t. ``coords``.

    Only the nearest prototype of each target receives gradient (lowest index
    on ties); a target sitting exactly on its prototype contributes nothing.
    """
    coords = np.asarray(coords, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1, coords.shape[1])
    if dist is None:
        dist = distances(Y, coords)
    k = dist.argmin(axis=1)
    dmin = dist[np.arange(len(Y)), k]
    grad = np.zeros_like(coords)
    safe = dmin > 0
    unit = np.zeros_like(Y)
    unit[safe] = (coords[k[safe]] - Y[safe]) / dmin[safe, None]
    np.add.at(grad, k, unit / len(Y))
    return float(dmin.mean()), grad


def loss_repulsion(coords, delta_rep: float):
    """Hinge on closeness, summed over ordered pairs i != j.

    Returns the value and its gradient. Coincident pairs are pushed apart
    along the first axis (a valid subgradient direction).
    """
    coords = np.asarray(coords, dtype=float)
    grad = np.zeros_like(coords)
    if len(coords) < 2:
        return 0.0, grad
    pairs = cKDTree(coords).query_pairs(delta_rep, output_type="ndarray")
    if len(pairs) == 0:
        return 0.0, grad
    i, j = pairs[:, 0], pairs[:, 1]
    diff = coords[i] - coords[j]
    d = np.sqrt((diff * diff).sum(axis=1))
    active = d < delta_rep
    i, j, diff, d = i[active], j[active], diff[active], d[active]
    value = 2.0 * float((delta_rep - d).sum())
    unit = np.zeros_like(diff)
    pos = d > 0
    unit[pos] = diff[pos] / d[pos, None]
    unit[~pos, 0] = 1.0
    # d/dc_i of 2*(delta - |c_i - c_j|) is -2 * unit
    np.add.at(grad, i, -2.0 * unit)
    np.add.at(grad, j, 2.0 * unit)
    return value, grad


def composite_loss(net: DensityNetwork, coords, log_areas, X, Y, cfg: LossConfig,
                   labels=None, learnable=True):
    """Loss and routed gradients for one batch.

    Cross-entropy gradients go to the network only (soft labels and areas are
    constants); quantization and repulsion gradients go to the prototypes
    only. Pass ``labels`` to pin the soft labels (used by gradient checks).

    Returns
    -------
    loss : float
    parts : dict with "ce", "lq", "lrep"
    theta_grads : dict of arrays shaped like ``net.params()``
    proto_grad : array shaped like ``coords`` (zeros when not learnable)
    """
    coords = np.asarray(coords, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1, coords.shape[1])
    X = np.asarray(X, dtype=float)
    if len(Y) == 0:
        raise DataError("empty batch")
    B = len(Y)
    dist = distances(Y, coords)
    q = soft_labels_from_distances(dist, cfg.tau) if labels is None else labels

    if B > 1 and np.all(X == X[0]):
        # identical inputs share one forward pass; gradients sum over the batch
        logits, acts = net.forward(X[:1], return_cache=True)
        logp = log_softmax(logits + log_areas)
        ce = float(-(q @ logp[0]).mean())
        d_out = (B * np.exp(logp) - q.sum(axis=0, keepdims=True)) / B
    else:
        logits, acts = net.forward(X, return_cache=True)
        logp = log_softmax(logits + log_areas)
        ce = float(-(q * logp).sum(axis=1).mean())
        d_out = (np.exp(logp) - q) / B
    theta_grads = net.backward(acts, d_out)

    lq, lrep = 0.0, 0.0
    proto_grad = np.zeros_like(coords)
    if learnable:
        lq, g_q = loss_quantization(Y, coords, dist)
        lrep, g_rep = loss_repulsion(coords, cfg.delta_rep)
        proto_grad = cfg.lambda_q * g_q + cfg.lambda_rep * g_rep
    total = ce + cfg.lambda_q * lq + cfg.lambda_rep * lrep
    return total, {"ce": ce, "lq": lq, "lrep": lrep}, theta_grads, proto_grad


# ---------------------------------------------------------------- setup

def target_scale(Y) -> float:
    """RMS per-dimension standard deviation; the unit for ``tau``."""
    s = float(np.sqrt(np.mean(np.var(np.asarray(Y, dtype=float), axis=0))))
    return s if s > 0 else 1.0


K_INIT_1D = 100


def default_k_init(cfg: TrainConfig, dim: int) -> int:
    """Explicit ``k_init``, else 100 prototypes in 1D and the GRID lattice size in 2D.

    In 1D a 50-point start leaves the modal cells holding ~4% of the mass
    each, which makes coverage at small target levels noticeably lumpy.
    """
    if cfg.k_init is not None:
        return cfg.k_init
    return K_INIT_1D if dim == 1 else cfg.bins_per_dim ** dim


def resolve_hyperparameters(cfg: TrainConfig, Y, box: BoundingBox, k_init: int):
    """Turn config fields (some data-relative or unset) into absolute values."""
    d = box.dim
    delta_rep = cfg.delta_rep if cfg.delta_rep is not None else 0.5 * (box.volume / k_init) ** (1.0 / d)
    sigma = cfg.sigma if cfg.sigma is not None else 0.25 * delta_rep
    loss_cfg = LossConfig(cfg.lambda_q, cfg.lambda_rep, delta_rep, cfg.tau * target_scale(Y))
    dyn_cfg = DynamicsConfig(cfg.add_factor, cfg.del_factor, sigma, cfg.k_min, cfg.k_max)
    return loss_cfg, dyn_cfg


def init_prototypes(Y, box: BoundingBox, k: int, rng) -> PrototypeSet:
    """k training targets (without replacement) plus small jitter, clamped to the box.

    Falls back to uniform draws in the box when k exceeds the number of targets.
    """
    Y = np.asarray(Y, dtype=float)
    if k > len(Y):
        coords = box.lower + rng.random((k, box.dim)) * box.extent
    else:
        pick = rng.choice(len(Y), size=k, replace=False)
        coords = Y[pick] + rng.normal(0.0, _INIT_JITTER, size=(k, box.dim)) * box.extent
    return PrototypeSet(box.clamp(coords), box)


def _feature_stats(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def init_state(train: Dataset, cfg: TrainConfig, protos: PrototypeSet | None = None,
               areas=None, box: BoundingBox | None = None) -> tuple[TrainState, dict]:
    """Initial TrainState plus the per-purpose random generators.

    ``protos``/``areas`` override the data-seeded initialisation (GRID).
    """
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    rngs = dict(zip(("net", "protos", "shuffle", "dynamics"),
                    (np.random.Generator(np.random.Philox(s)) for s in streams)))
    Y = train.targets
    if box is None:
        box = protos.box if protos is not None else compute_bounding_box(Y, cfg.padding_fraction)
    k_init = len(protos) if protos is not None else default_k_init(cfg, box.dim)
    loss_cfg, dyn_cfg = resolve_hyperparameters(cfg, Y, box, k_init)
    if protos is None:
        protos = init_prototypes(Y, box, k_init, rngs["protos"])
    if areas is None:
        areas = voronoi_areas(protos, box)
    mean, std = _feature_stats(train.features)
    net = DensityNetwork(train.features.shape[1], cfg.hidden_sizes, protos.K, rngs["net"])
    state = TrainState(
        net=net, protos=protos, areas=np.asarray(areas, dtype=float), loss_cfg=loss_cfg,
        dyn_cfg=dyn_cfg if cfg.method == "chdqr-dynamic" else None,
        feature_mean=mean, feature_std=std,
        opt_theta=Adam(cfg.lr_theta), opt_protos=Adam(cfg.lr_protos), rng_seed=cfg.seed,
    )
    return state, rngs


# ---------------------------------------------------------------- dynamics

def add_remove_prototypes(state: TrainState, cfg: DynamicsConfig, train_targets, rng) -> TrainState:
    """Delete under-used prototypes, then split heavily used ones.

    Deletion runs in descending index order and stops at ``k_min``; every
    survivor whose usage reaches the add threshold gets a jittered copy (and a
    copy of its output unit) until ``k_max``. Areas are recomputed afterwards.
    """
    Y = np.asarray(train_targets, dtype=float).reshape(-1, state.protos.dim)
    if len(Y) == 0:
        raise DataError("prototype dynamics need training targets")
    coords = state.protos.coords
    box = state.protos.box
    U = usage(coords, Y, state.loss_cfg.tau)
    K = len(coords)
    delta_add, delta_del = cfg.thresholds(K)

    dead = np.flatnonzero(U <= delta_del)[::-1]
    remove = dead[:max(0, K - cfg.k_min)]
    if remove.size:
        coords = np.delete(coords, remove, axis=0)
        U = np.delete(U, remove)
        state.net.remove_output_units(remove)
        for name in ("head.W", "head.b"):
            state.opt_theta.remove_rows(name, remove)
        state.opt_protos.remove_rows("coords", remove)

    sources, new = [], []
    current = coords
    tree = cKDTree(current)
    for i in np.flatnonzero(U >= delta_add):
        if len(current) + len(new) >= cfg.k_max:
            break
        for _ in range(_MAX_RESAMPLE):
            cand = box.clamp(coords[i] + rng.normal(0.0, cfg.sigma, size=box.dim))
            if tree.query(cand)[0] <= DUPLICATE_TOL:
                continue
            if new and np.min(np.linalg.norm(np.array(new) - cand, axis=1)) <= DUPLICATE_TOL:
                continue
            sources.append(i)
            new.append(cand)
            break
        else:
            log.warning("skipping split of prototype %d: jitter kept colliding", i)
    if new:
        coords = np.vstack([coords, np.array(new)])
        state.net.duplicate_output_units(sources)
        for name in ("head.W", "head.b"):
            state.opt_theta.append_rows(name, len(new))
        state.opt_protos.append_rows("coords", len(new))

    state.protos = PrototypeSet(coords, box, state.protos.learnable)
    state.areas = voronoi_areas(state.protos, box)
    log.debug("dynamics: removed %d, added %d, K=%d", remove.size, len(new), len(coords))
    return state


# ---------------------------------------------------------------- loop

def train_epoch(state: TrainState, X, Y, batch_size: int, rng) -> dict:
    """One shuffled pass; returns mean loss parts over the batches."""
    N = len(Y)
    perm = rng.permutation(N)
    log_areas = np.log(state.areas)
    learnable = state.protos.learnable
    sums = {"loss": 0.0, "ce": 0.0, "lq": 0.0, "lrep": 0.0}
    n_batches = 0
    for b, start in enumerate(range(0, N, batch_size)):
        idx = perm[start:start + batch_size]
        coords = state.protos.coords
        try:
            loss, parts, g_theta, g_c = composite_loss(
                state.net, coords, log_areas, X[idx], Y[idx], state.loss_cfg, learnable=learnable)
            if not np.isfinite(loss):
                raise NumericalError("non-finite loss")
            state.opt_theta.step(state.net.params(), g_theta)
            if learnable:
                params = {"coords": coords}
                state.opt_protos.step(params, {"coords": g_c})
                state.protos.coords = state.protos.box.clamp(params["coords"])
        except ChdqrError as e:
            raise NumericalError(f"epoch {state.epoch} batch {b}: {e}") from e
        sums["loss"] += loss
        for k, v in parts.items():
            sums[k] += v
        n_batches += 1
    return {k: v / n_batches for k, v in sums.items()}


def fit(train: Dataset, cfg: TrainConfig, protos: PrototypeSet | None = None, areas=None,
        callback=None) -> TrainState:
    """Train the density model and (when learnable) its prototypes.

    Each epoch: shuffled minibatch updates of theta and the prototypes with
    the areas held fixed, then (dynamic variant) prototype add/remove, then
    area recomputation. Deterministic given ``cfg.seed``.
    """
    if len(train) == 0:
        raise DataError("training split is empty")
    state, rngs = init_state(train, cfg, protos, areas)
    X = state.standardize(train.features)
    Y = train.targets
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        stats = train_epoch(state, X, Y, cfg.batch_size, rngs["shuffle"])
        if state.dyn_cfg is not None:
            add_remove_prototypes(state, state.dyn_cfg, Y, rngs["dynamics"])
        elif state.protos.learnable:
            state.areas = voronoi_areas(state.protos, state.protos.box)
        stats.update(epoch=epoch, K=state.K)
        state.history.append(stats)
        log.info("epoch %d loss %.5f ce %.5f lq %.5f lrep %.5f K %d", epoch, stats["loss"],
                 stats["ce"], stats["lq"], stats["lrep"], state.K)
        if callback is not None:
            callback(state, stats)
    state.epoch = cfg.epochs
    return state
