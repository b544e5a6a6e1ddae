"""Desk-scale two-level attention-pooling aggregator.

A bag holds ``M`` regions of 64 tile feature vectors. Tiles are pooled into
a region vector by single-query softmax attention, projected to an
``e``-dim region embedding, pooled again across regions and projected to a
slide embedding; a linear head gives four hazard logits::

    a_m = softmax(X_m u1)        z_m = (X_m^T a_m) W1
    b   = softmax(Z u2)          g   = (Z^T b) W2
    logits = g H + c             hazards = sigmoid(logits)

Gradients are written out by hand and checked against finite differences
in :func:`grad_check`. Tiles and regions can be masked out, which is exactly
equivalent to deleting them because softmax renormalizes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from . import survival
from .concordance import cindex
from .errors import DataError, NumericalError, UndefinedCIndexError

logger = logging.getLogger(__name__)

TILES_PER_REGION = 64
PARAM_NAMES = ("u1", "W1", "u2", "W2", "H", "c")


@dataclass(frozen=True)
class FeatureBag:
    """``tiles`` has shape ``(M, T, d)``; ``mask`` flags present tiles."""

    tiles: np.ndarray
    mask: np.ndarray | None = None
    patient_id: str = ""

    def __post_init__(self):
        t = np.asarray(self.tiles, dtype=float)
        if t.ndim != 3 or t.shape[0] < 1 or t.shape[1] < 1:
            raise DataError(f"bag must have shape (regions, tiles, d), got {t.shape}")
        m = np.ones(t.shape[:2], bool) if self.mask is None else np.asarray(self.mask, bool)
        if m.shape != t.shape[:2]:
            raise DataError("mask shape must match (regions, tiles)")
        if not m.any():
            raise DataError("bag has no tiles")
        object.__setattr__(self, "tiles", t)
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_regions(cls, regions, patient_id="", strict=True):
        regions = [np.asarray(r, dtype=float) for r in regions]
        if not regions:
            raise DataError("bag needs at least one region")
        d = {r.shape[1] for r in regions}
        if len(d) != 1:
            raise DataError("feature dimension must be uniform across regions")
        if strict and any(r.shape[0] != TILES_PER_REGION for r in regions):
            raise DataError(f"every region must hold exactly {TILES_PER_REGION} tiles")
        T = max(r.shape[0] for r in regions)
        tiles = np.zeros((len(regions), T, d.pop()))
        mask = np.zeros((len(regions), T), bool)
        for i, r in enumerate(regions):
            tiles[i, : r.shape[0]] = r
            mask[i, : r.shape[0]] = True
        return cls(tiles, mask, patient_id)

    @property
    def dim(self) -> int:
        return self.tiles.shape[2]

    @property
    def n_regions(self) -> int:
        return self.tiles.shape[0]

    @property
    def n_tiles(self) -> int:
        return int(self.mask.sum())

    def tile_index(self) -> np.ndarray:
        """``(n_tiles, 2)`` (region, slot) of present tiles in region-major order."""
        return np.argwhere(self.mask)

    def canonical(self):
        """``(tiles, mask, region_order, tile_order)`` in a content-defined order.

        Present tiles are sorted by feature values with masked slots last
        (and zeroed), and regions by their sorted content, so pooling sums
        run in the same order for any permutation of the input. Row ``i`` of
        the result is region ``region_order[i]``, slots ``tile_order[i]``.
        """
        cached = self.__dict__.get("_canonical")
        if cached is not None:
            return cached
        X = np.where(self.mask[..., None], self.tiles, 0.0)
        M, T, d = X.shape
        tile_order = np.empty((M, T), dtype=int)
        for m in range(M):
            keys = [X[m, :, j] for j in range(d - 1, -1, -1)] + [~self.mask[m]]
            tile_order[m] = np.lexsort(keys)
        Xs = np.take_along_axis(X, tile_order[..., None], axis=1)
        Ms = np.take_along_axis(self.mask, tile_order, axis=1)
        region_order = np.array(sorted(range(M), key=lambda m: (not Ms[m].any(), Ms[m].tobytes(), Xs[m].tobytes())))
        out = (Xs[region_order], Ms[region_order], region_order, tile_order[region_order])
        object.__setattr__(self, "_canonical", out)
        return out

    def without_tile(self, region: int, slot: int) -> "FeatureBag":
        m = self.mask.copy()
        m[region, slot] = False
        return replace(self, mask=m)


@dataclass
class AggregatorParams:
    u1: np.ndarray
    W1: np.ndarray
    u2: np.ndarray
    W2: np.ndarray
    H: np.ndarray
    c: np.ndarray

    @classmethod
    def init(cls, d: int = 16, e: int = 8, seed: int = 0, scale: float = 1.0):
        rng = np.random.default_rng(seed)
        return cls(
            u1=rng.normal(0, scale / np.sqrt(d), d),
            W1=rng.normal(0, scale / np.sqrt(d), (d, e)),
            u2=rng.normal(0, scale / np.sqrt(e), e),
            W2=rng.normal(0, scale / np.sqrt(e), (e, e)),
            H=rng.normal(0, scale / np.sqrt(e), (e, survival.N_BINS)),
            c=np.zeros(survival.N_BINS),
        )

    @property
    def dims(self) -> tuple[int, int]:
        return self.W1.shape

    def copy(self) -> "AggregatorParams":
        return AggregatorParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def with_flat(self, v) -> "AggregatorParams":
        out, pos = {}, 0
        for n in PARAM_NAMES:
            a = getattr(self, n)
            out[n] = np.asarray(v[pos:pos + a.size], dtype=float).reshape(a.shape)
            pos += a.size
        return AggregatorParams(**out)

    def check(self, d: int):
        dd, e = self.W1.shape
        shapes = {"u1": (dd,), "u2": (e,), "W2": (e, e), "H": (e, survival.N_BINS), "c": (survival.N_BINS,)}
        for n, s in shapes.items():
            if getattr(self, n).shape != s:
                raise DataError(f"parameter {n} has shape {getattr(self, n).shape}, expected {s}")
        if dd != d:
            raise DataError(f"bag feature dim {d} does not match model dim {dd}")

    def save(self, path):
        np.savez(path, **{n: getattr(self, n) for n in PARAM_NAMES})

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls(**{n: f[n] for n in PARAM_NAMES})


def _masked_softmax(scores, mask, axis=-1):
    s = np.where(mask, scores, -np.inf)
    mx = np.max(s, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    w = np.where(mask, np.exp(s - mx), 0.0)
    tot = w.sum(axis=axis, keepdims=True)
    return w / np.where(tot > 0, tot, 1.0)


@dataclass
class _Cache:
    X: np.ndarray
    tmask: np.ndarray
    rmask: np.ndarray
    a: np.ndarray
    p: np.ndarray
    z: np.ndarray
    b: np.ndarray
    s: np.ndarray
    g: np.ndarray
    logits: np.ndarray = field(repr=False)


def _forward(bag: FeatureBag, P: AggregatorParams) -> _Cache:
    P.check(bag.dim)
    X, tmask, _, _ = bag.canonical()
    rmask = tmask.any(axis=1)
    a = _masked_softmax(X @ P.u1, tmask)  # (M, T)
    p = np.einsum("mt,mtd->md", a, X)  # (M, d)
    z = (p @ P.W1) * rmask[:, None]  # (M, e); projections are linear
    b = _masked_softmax(z @ P.u2, rmask)  # (M,)
    s = b @ z  # (e,)
    g = s @ P.W2
    logits = g @ P.H + P.c
    return _Cache(X, tmask, rmask, a, p, z, b, s, g, logits)


def forward(bag: FeatureBag, params: AggregatorParams) -> np.ndarray:
    """Hazard vector for one bag."""
    return survival.hazards_from_logits(_forward(bag, params).logits)


def predict_risk(bag: FeatureBag, params: AggregatorParams) -> float:
    return survival.risk_from_hazards(forward(bag, params))


def attention(bag: FeatureBag, params: AggregatorParams):
    """Tile weights within each region ``(M, T)`` and region weights ``(M,)``, in input order."""
    cache = _forward(bag, params)
    _, _, region_order, tile_order = bag.canonical()
    a = np.empty_like(cache.a)
    b = np.empty_like(cache.b)
    for i, m in enumerate(region_order):
        a[m, tile_order[i]] = cache.a[i]
        b[m] = cache.b[i]
    return a, b


def embeddings(bag: FeatureBag, params: AggregatorParams) -> np.ndarray:
    """Region embeddings ``(M, e)`` entering slide-level pooling, in input order."""
    z = _forward(bag, params).z
    out = np.empty_like(z)
    out[bag.canonical()[2]] = z
    return out


def loss_and_grad(bag: FeatureBag, label: survival.SurvivalLabel, P: AggregatorParams,
                  alpha: float = survival.DEFAULT_ALPHA):
    """Loss and gradient (as :class:`AggregatorParams`) for one bag."""
    k = _forward(bag, P)
    h = survival.hazards_from_logits(k.logits)
    loss = survival.nll_loss(h, label, alpha)
    dlogits = survival.nll_gradient(expit(k.logits), label, alpha)

    dH = np.outer(k.g, dlogits)
    dc = dlogits
    dv = P.H @ dlogits
    dW2 = np.outer(k.s, dv)
    ds = P.W2 @ dv

    # s = sum_m b_m z_m
    dz = np.outer(k.b, ds)
    db = k.z @ ds
    dsc2 = k.b * (db - k.b @ db)
    du2 = k.z.T @ dsc2
    dz += np.outer(dsc2, P.u2)

    dq = dz * k.rmask[:, None]
    dW1 = k.p.T @ dq
    dp = dq @ P.W1.T  # (M, d)

    # p_m = sum_t a_mt x_mt
    da = np.einsum("mtd,md->mt", k.X, dp)
    dsc = k.a * (da - np.sum(k.a * da, axis=1, keepdims=True))
    du1 = np.einsum("mt,mtd->d", dsc, k.X)
    return loss, AggregatorParams(du1, dW1, du2, dW2, dH, dc)


def grad_check(bag: FeatureBag, label: survival.SurvivalLabel, params: AggregatorParams,
               alpha: float = survival.DEFAULT_ALPHA, eps: float = 1e-6, floor: float = 1e-4) -> float:
    """Max relative error between backprop and central differences over all parameters.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off in near-zero components (about 1e-10 absolute at eps=1e-6)
    from reading as a large relative error.
    """
    _, grad = loss_and_grad(bag, label, params, alpha)
    analytic = grad.flat()
    theta = params.flat()
    worst = 0.0
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        lu = survival.nll_loss(forward(bag, params.with_flat(up)), label, alpha)
        ld = survival.nll_loss(forward(bag, params.with_flat(dn)), label, alpha)
        num = (lu - ld) / (2 * eps)
        err = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), floor)
        worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    halve_every: int = 20
    weight_decay: float = 1e-5
    max_epochs: int = 100
    patience: int = 20
    min_epochs: int = 50
    accumulation: int = 32
    seed: int = 0
    alpha: float = survival.DEFAULT_ALPHA
    optimizer: str = "sgd"
    tune_fraction: float = 0.2
    embed_dim: int = 8
    frozen: tuple = ()

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise DataError("learning rate and weight decay must be non-negative")
        if min(self.halve_every, self.max_epochs, self.patience, self.accumulation) < 1:
            raise DataError("epoch counts and accumulation steps must be positive")
        if self.patience > self.max_epochs:
            raise DataError("patience cannot exceed max_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.tune_fraction < 1:
            raise DataError("tune_fraction must lie in [0, 1)")
        unknown = set(self.frozen) - set(PARAM_NAMES)
        if unknown:
            raise DataError(f"unknown frozen parameters: {sorted(unknown)}")


@dataclass
class TrainResult:
    params: AggregatorParams
    best_epoch: int
    train_loss: list
    tune_loss: list


def mean_loss(data, params, alpha=survival.DEFAULT_ALPHA) -> float:
    return float(np.mean([survival.nll_loss(forward(b, params), y, alpha) for b, y in data]))


def _split_tuning(n, fraction, rng):
    n_tune = int(round(n * fraction))
    if n_tune == 0 or n_tune == n:
        return np.arange(n), np.array([], dtype=int)
    perm = rng.permutation(n)
    return np.sort(perm[n_tune:]), np.sort(perm[:n_tune])


def train(dataset, cfg: TrainConfig = TrainConfig(), tune=None, init: AggregatorParams | None = None,
          callback=None) -> TrainResult:
    """Fit the aggregator on ``[(bag, label), ...]``.

    Batch size one with gradient accumulation, learning rate halved every
    ``halve_every`` epochs, L2 weight decay. Early stopping watches the
    tuning loss (a ``tune_fraction`` hold-out of ``dataset`` unless ``tune``
    is given) and returns the best parameters seen. ``callback(epoch, params,
    train_loss, tune_loss)`` is invoked after every epoch.
    """
    dataset = list(dataset)
    if not dataset:
        raise DataError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if tune is None:
        tr_idx, tu_idx = _split_tuning(len(dataset), cfg.tune_fraction, rng)
        tune = [dataset[i] for i in tu_idx]
        dataset = [dataset[i] for i in tr_idx]
    tune = list(tune)
    d = dataset[0][0].dim
    params = init.copy() if init is not None else AggregatorParams.init(d, cfg.embed_dim, seed=cfg.seed)
    theta = params.flat()
    trainable = np.concatenate([
        np.full(getattr(params, n).size, n not in cfg.frozen) for n in PARAM_NAMES])
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    best = (np.inf, theta.copy(), 0)
    since_best = 0
    train_hist, tune_hist = [], []

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.lr * 0.5 ** ((epoch - 1) // cfg.halve_every)
        order = rng.permutation(len(dataset))
        acc = np.zeros_like(theta)
        n_acc = 0
        losses = []
        current = params.with_flat(theta)
        for pos, i in enumerate(order):
            bag, label = dataset[i]
            loss, grad = loss_and_grad(bag, label, current, cfg.alpha)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, bag {bag.patient_id or i}")
            losses.append(loss)
            acc += grad.flat()
            n_acc += 1
            if n_acc == cfg.accumulation or pos == len(order) - 1:
                gvec = acc / n_acc + cfg.weight_decay * theta
                gvec = np.where(trainable, gvec, 0.0)
                step += 1
                if cfg.optimizer == "adam":
                    m1 = 0.9 * m1 + 0.1 * gvec
                    m2 = 0.999 * m2 + 0.001 * gvec**2
                    upd = (m1 / (1 - 0.9**step)) / (np.sqrt(m2 / (1 - 0.999**step)) + 1e-8)
                else:
                    upd = gvec
                theta = theta - lr * upd
                if not np.all(np.isfinite(theta)):
                    raise NumericalError(f"parameters diverged at epoch {epoch}")
                current = params.with_flat(theta)
                acc[:] = 0.0
                n_acc = 0
        train_hist.append(float(np.mean(losses)))
        monitor = mean_loss(tune, current, cfg.alpha) if tune else train_hist[-1]
        tune_hist.append(monitor)
        if not np.isfinite(monitor):
            raise NumericalError(f"non-finite tuning loss at epoch {epoch}")
        if callback is not None:
            callback(epoch, current, train_hist[-1], monitor)
        if monitor < best[0]:
            best = (monitor, theta.copy(), epoch)
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience and epoch >= cfg.min_epochs:
            logger.info("early stop at epoch %d (best %d)", epoch, best[2])
            break
    return TrainResult(params.with_flat(best[1]), best[2], train_hist, tune_hist)


def evaluate_cindex(data, times, events, params) -> float:
    risks = [predict_risk(b, params) for b, _ in data]
    try:
        return cindex(times, events, risks)
    except UndefinedCIndexError:
        return float("nan")
