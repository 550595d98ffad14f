"""Preference-conditioned session recommender with hand-written gradients.

Architecture: recency-weighted pooling over item embeddings of the session
prefix, one ReLU hidden layer, plus a learned linear projection of the
preference vector added to the session state. Click scores are dot
products against the shared item embeddings; the order head is a bilinear
elementwise-product head on the target item.

Everything is float64 and deterministic; gradients are analytic and
verified against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import objectives
from .objectives import LossBreakdown, LossConfig
from .tensorio import TensorFileError, read_tensor_file, write_tensor_file

CHECKPOINT_MAGIC = b"PPB1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    catalog_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    pref_dim: int = 2
    max_prefix_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.catalog_size, self.embed_dim, self.hidden_dim, self.max_prefix_len) < 1:
            raise ModelError("all dimensions must be >= 1")
        if self.pref_dim < 2:
            raise ModelError("need at least two objectives")


@dataclass
class ModelParams:
    item_embed: np.ndarray    # (c, d) shared input/output embeddings
    pref_proj: np.ndarray     # (m, d)
    enc_w: np.ndarray         # (d, h)
    enc_b: np.ndarray         # (h,)
    out_w: np.ndarray         # (h, d)
    out_b: np.ndarray         # (d,)
    order_w: np.ndarray       # (d,)
    order_b: np.ndarray       # () scalar
    position_decay: np.ndarray  # () scalar in (0, 1]


@dataclass
class Gradients:
    item_embed: np.ndarray
    pref_proj: np.ndarray
    enc_w: np.ndarray
    enc_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    order_w: np.ndarray
    order_b: np.ndarray
    position_decay: np.ndarray


PARAM_FIELDS = tuple(f.name for f in dataclass_fields(ModelParams))


@dataclass
class Batch:
    """Padded next-item training examples.

    ``prefixes`` is (n, P) int64 padded with -1; row i holds the last
    ``lengths[i]`` clicked items before the target, oldest first.
    """

    prefixes: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    orders: np.ndarray

    def __post_init__(self):
        if len(self.targets) == 0:
            raise ModelError("empty batch")

    def __len__(self) -> int:
        return len(self.targets)


def init_model(hp: Hyperparams, position_decay: float = 0.8) -> ModelParams:
    """Uniform(-0.05, 0.05) weights, zero biases, from the seeded RNG."""
    if not (0.0 < position_decay <= 1.0):
        raise ModelError(f"position_decay {position_decay} outside (0, 1]")
    rng = np.random.default_rng(hp.seed)
    u = lambda *shape: rng.uniform(-0.05, 0.05, size=shape)
    return ModelParams(
        item_embed=u(hp.catalog_size, hp.embed_dim),
        pref_proj=u(hp.pref_dim, hp.embed_dim),
        enc_w=u(hp.embed_dim, hp.hidden_dim),
        enc_b=np.zeros(hp.hidden_dim),
        out_w=u(hp.hidden_dim, hp.embed_dim),
        out_b=np.zeros(hp.embed_dim),
        order_w=u(hp.embed_dim),
        order_b=np.zeros(()),
        position_decay=np.full((), position_decay),
    )


def hyperparams_of(p: ModelParams, max_prefix_len: int = 20, seed: int = 0) -> Hyperparams:
    c, d = p.item_embed.shape
    return Hyperparams(
        catalog_size=c,
        embed_dim=d,
        hidden_dim=p.enc_b.shape[0],
        pref_dim=p.pref_proj.shape[0],
        max_prefix_len=max_prefix_len,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# forward

@dataclass
class _EncodeCache:
    idx: np.ndarray
    valid: np.ndarray
    w: np.ndarray
    wsum: np.ndarray
    wnorm: np.ndarray
    expo: np.ndarray
    pool: np.ndarray
    hpre: np.ndarray
    hid: np.ndarray
    state: np.ndarray


def _encode(p: ModelParams, prefixes: np.ndarray, lengths: np.ndarray,
            preference: np.ndarray) -> _EncodeCache:
    n, width = prefixes.shape
    gamma = float(p.position_decay[()])
    pos = np.arange(width)
    expo = lengths[:, None] - 1 - pos[None, :]
    valid = pos[None, :] < lengths[:, None]
    w = np.where(valid, np.power(gamma, np.maximum(expo, 0)), 0.0)
    wsum = w.sum(axis=1, keepdims=True)
    wnorm = w / wsum
    emb = p.item_embed[np.maximum(prefixes, 0)]
    pool = np.einsum("np,npd->nd", wnorm, emb)
    hpre = pool @ p.enc_w + p.enc_b
    hid = np.maximum(hpre, 0.0)
    state = hid @ p.out_w + p.out_b + preference @ p.pref_proj
    return _EncodeCache(idx=prefixes, valid=valid, w=w, wsum=wsum, wnorm=wnorm,
                        expo=expo, pool=pool, hpre=hpre, hid=hid, state=state)


def encode_session(p: ModelParams, prefix, preference, max_prefix_len: int = 20) -> np.ndarray:
    """Session state for one prefix; older items beyond the limit are dropped."""
    prefix = list(prefix)
    if not prefix:
        raise ModelError("empty prefix")
    prefix = prefix[-max_prefix_len:]
    arr = np.asarray(prefix, dtype=np.int64)[None, :]
    lengths = np.array([len(prefix)], dtype=np.int64)
    pref = np.asarray(preference, dtype=np.float64)
    return _encode(p, arr, lengths, pref[None, :]).state[0]


def click_scores(p: ModelParams, state: np.ndarray) -> np.ndarray:
    """Dot-product scores over the catalog for one session state."""
    return p.item_embed @ state


def order_logits(p: ModelParams, state: np.ndarray) -> np.ndarray:
    """Order-propensity logits for every item given one session state."""
    return p.item_embed @ (p.order_w * state) + p.order_b[()]


def _order_logit_batch(p: ModelParams, state: np.ndarray, targets: np.ndarray) -> np.ndarray:
    emb_t = p.item_embed[targets]
    return np.einsum("nd,nd->n", state * emb_t, np.broadcast_to(p.order_w, state.shape)) + p.order_b[()]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def draw_negatives(rng: np.random.Generator, targets: np.ndarray, catalog_size: int,
                   n_negatives: int) -> np.ndarray:
    """Uniform non-target negatives with replacement, (n, n_negatives)."""
    n = len(targets)
    raw = rng.integers(0, catalog_size - 1, size=(n, n_negatives))
    return raw + (raw >= targets[:, None])


def _needs_negatives(cfg: LossConfig, catalog_size: int) -> bool:
    sampled_click = cfg.exact_softmax_threshold < catalog_size
    contrastive_order = not cfg.use_distortion and cfg.order_negative_weight > 0
    return sampled_click or contrastive_order


def _forward_losses(p: ModelParams, batch: Batch, preference: np.ndarray, cfg: LossConfig,
                    cache: _EncodeCache, negatives: np.ndarray | None):
    """Per-example raw loss pieces plus the tensors backward needs."""
    n = len(batch)
    c = p.item_embed.shape[0]
    state = cache.state
    exact = cfg.exact_softmax_threshold >= c
    if negatives is None and _needs_negatives(cfg, c):
        raise ModelError("this loss configuration requires drawn negatives")
    full_scores = None
    probs = None
    cand = cand_probs = None
    if exact or cfg.use_distortion:
        full_scores = state @ p.item_embed.T
        smax = full_scores.max(axis=1, keepdims=True)
        ex = np.exp(full_scores - smax)
        denom = ex.sum(axis=1, keepdims=True)
        probs = ex / denom
        lse = smax[:, 0] + np.log(denom[:, 0])
    if exact:
        l_click_vec = lse - full_scores[np.arange(n), batch.targets]
    else:
        cand = np.concatenate([batch.targets[:, None], negatives], axis=1)
        cand_scores = np.einsum("nd,nkd->nk", state, p.item_embed[cand])
        corr = np.full(cand.shape[1], np.log(negatives.shape[1] / (c - 1)))
        corr[0] = 0.0
        adj = cand_scores - corr[None, :]
        amax = adj.max(axis=1, keepdims=True)
        aex = np.exp(adj - amax)
        cand_probs = aex / aex.sum(axis=1, keepdims=True)
        l_click_vec = -np.log(cand_probs[:, 0])
    z = _order_logit_batch(p, state, batch.targets)
    l_order_vec = np.maximum(z, 0) - z * batch.orders + np.log1p(np.exp(-np.abs(z)))
    z_neg = None
    if not cfg.use_distortion and cfg.order_negative_weight > 0:
        emb_neg = p.item_embed[negatives]
        z_neg = np.einsum("nd,nkd->nk", state * p.order_w[None, :], emb_neg) + p.order_b[()]
        # label-0 BCE on sampled non-target items, averaged then weighted
        l_order_vec = l_order_vec + cfg.order_negative_weight * (
            np.maximum(z_neg, 0) + np.log1p(np.exp(-np.abs(z_neg)))
        ).mean(axis=1)
    if cfg.use_distortion:
        l_dist_vec = lse - full_scores.mean(axis=1)
    else:
        l_dist_vec = None
    return full_scores, probs, cand, cand_probs, z, z_neg, l_click_vec, l_order_vec, l_dist_vec


def forward_loss(p: ModelParams, batch: Batch, preference, cfg: LossConfig,
                 negatives: np.ndarray | None = None) -> LossBreakdown:
    """Scalarized objective of one batch at one preference (no gradients)."""
    pref = np.asarray(preference, dtype=np.float64)
    cache = _encode(p, batch.prefixes, batch.lengths, np.broadcast_to(pref, (len(batch), pref.size)))
    _, _, _, _, _, _, l_click_vec, l_order_vec, l_dist_vec = _forward_losses(
        p, batch, pref, cfg, cache, negatives)
    l_click = float(l_click_vec.mean())
    if cfg.use_distortion:
        second = float(l_dist_vec.mean())
        return objectives.scalarized_loss(l_click, second, pref, cfg)
    return objectives.scalarized_loss(l_click, float(l_order_vec.mean()), pref, cfg)


def backward(p: ModelParams, batch: Batch, preference, cfg: LossConfig,
             rng: np.random.Generator | None = None,
             negatives: np.ndarray | None = None) -> tuple[LossBreakdown, Gradients]:
    """Analytic gradient of the scalarized objective for one sampled preference.

    The regularizer couples the objectives: total weight on each loss is
    pi_k + reg_weight * d(reg)/d(loss_k), evaluated at the batch means.
    """
    pref = np.asarray(preference, dtype=np.float64)
    n = len(batch)
    c = p.item_embed.shape[0]
    exact = cfg.exact_softmax_threshold >= c
    if negatives is None and _needs_negatives(cfg, c):
        if rng is None:
            raise ModelError("this loss configuration requires an rng or precomputed negatives")
        negatives = draw_negatives(rng, batch.targets, c, cfg.n_negatives)
    cache = _encode(p, batch.prefixes, batch.lengths, np.broadcast_to(pref, (n, pref.size)))
    state = cache.state
    full_scores, probs, cand, cand_probs, z, z_neg, l_click_vec, l_order_vec, l_dist_vec = \
        _forward_losses(p, batch, pref, cfg, cache, negatives)

    l_click = float(l_click_vec.mean())
    l_order = float(l_order_vec.mean())
    if cfg.use_distortion:
        second = float(l_dist_vec.mean())
    else:
        second = l_order
    breakdown = objectives.scalarized_loss(l_click, second, pref, cfg)
    if not np.isfinite(breakdown.scalarized):
        bad = {k: getattr(breakdown, k) for k in
               ("l_click", "l_order", "l_distortion", "l_reg", "scalarized")}
        raise ModelError(f"non-finite loss: {bad}")

    _, dreg = objectives.nonuniformity_reg_grad(pref, np.array([l_click, second]))
    a_click = pref[0] + cfg.reg_weight * dreg[0]
    a_second = pref[1] + cfg.reg_weight * dreg[1]

    grads = Gradients(
        item_embed=np.zeros_like(p.item_embed),
        pref_proj=np.zeros_like(p.pref_proj),
        enc_w=np.zeros_like(p.enc_w),
        enc_b=np.zeros_like(p.enc_b),
        out_w=np.zeros_like(p.out_w),
        out_b=np.zeros_like(p.out_b),
        order_w=np.zeros_like(p.order_w),
        order_b=np.zeros(()),
        position_decay=np.zeros(()),
    )
    g_state = np.zeros_like(state)
    rows = np.arange(n)

    # click loss (and distortion, which shares the full softmax)
    if exact:
        g_scores = (a_click / n) * probs
        g_scores[rows, batch.targets] -= a_click / n
        if cfg.use_distortion:
            g_scores += (a_second / n) * (probs - 1.0 / c)
        g_state += g_scores @ p.item_embed
        grads.item_embed += g_scores.T @ state
    else:
        g_cand = (a_click / n) * cand_probs
        g_cand[:, 0] -= a_click / n
        g_state += np.einsum("nk,nkd->nd", g_cand, p.item_embed[cand])
        emb_dim = p.item_embed.shape[1]
        np.add.at(grads.item_embed, cand.ravel(),
                  (g_cand[:, :, None] * state[:, None, :]).reshape(-1, emb_dim))
        if cfg.use_distortion:
            g_scores = (a_second / n) * (probs - 1.0 / c)
            g_state += g_scores @ p.item_embed
            grads.item_embed += g_scores.T @ state

    # order head (inactive when distortion substitutes for the order objective)
    if not cfg.use_distortion:
        emb_t = p.item_embed[batch.targets]
        g_z = (a_second / n) * (_sigmoid(z) - batch.orders)
        grads.order_w += (g_z[:, None] * state * emb_t).sum(axis=0)
        grads.order_b += g_z.sum()
        g_state += g_z[:, None] * p.order_w[None, :] * emb_t
        np.add.at(grads.item_embed, batch.targets, g_z[:, None] * p.order_w[None, :] * state)
        if cfg.order_negative_weight > 0:
            n_neg = negatives.shape[1]
            emb_neg = p.item_embed[negatives]
            g_zn = (a_second * cfg.order_negative_weight / (n * n_neg)) * _sigmoid(z_neg)
            grads.order_w += np.einsum("nk,nd,nkd->d", g_zn, state, emb_neg)
            grads.order_b += g_zn.sum()
            g_state += np.einsum("nk,nkd->nd", g_zn, emb_neg) * p.order_w[None, :]
            emb_dim = p.item_embed.shape[1]
            np.add.at(grads.item_embed, negatives.ravel(),
                      (g_zn[:, :, None] * (p.order_w[None, None, :] * state[:, None, :]))
                      .reshape(-1, emb_dim))

    # encoder
    grads.pref_proj += pref[:, None] * g_state.sum(axis=0)[None, :]
    grads.out_b += g_state.sum(axis=0)
    grads.out_w += cache.hid.T @ g_state
    g_hid = g_state @ p.out_w.T
    g_hpre = g_hid * (cache.hpre > 0)
    grads.enc_b += g_hpre.sum(axis=0)
    grads.enc_w += cache.pool.T @ g_hpre
    g_pool = g_hpre @ p.enc_w.T

    # pooled embeddings
    contrib = cache.wnorm[:, :, None] * g_pool[:, None, :]
    flat_idx = cache.idx[cache.valid]
    np.add.at(grads.item_embed, flat_idx, contrib[cache.valid])

    # position decay
    gamma = float(p.position_decay[()])
    expo = cache.expo
    dw = np.where(cache.valid & (expo > 0), expo * np.power(gamma, np.maximum(expo - 1, 0)), 0.0)
    emb = p.item_embed[np.maximum(cache.idx, 0)]
    sum_dw_e = np.einsum("np,npd->nd", dw, emb)
    dpool_dgamma = (sum_dw_e - cache.pool * dw.sum(axis=1, keepdims=True)) / cache.wsum
    grads.position_decay += np.einsum("nd,nd->", g_pool, dpool_dgamma)

    return breakdown, grads


# ---------------------------------------------------------------------------
# batched scoring used by evaluation and serving

def score_batch(p: ModelParams, prefixes: np.ndarray, lengths: np.ndarray,
                preference) -> np.ndarray:
    """Click scores (n, c) for padded prefixes under one preference vector."""
    pref = np.asarray(preference, dtype=np.float64)
    cache = _encode(p, prefixes, lengths, np.broadcast_to(pref, (len(lengths), pref.size)))
    return cache.state @ p.item_embed.T


# ---------------------------------------------------------------------------
# persistence

def save_checkpoint(p: ModelParams, hp: Hyperparams, path: str,
                    epochs_trained: int = 0) -> None:
    meta = {
        "catalog_size": hp.catalog_size,
        "embed_dim": hp.embed_dim,
        "hidden_dim": hp.hidden_dim,
        "pref_dim": hp.pref_dim,
        "max_prefix_len": hp.max_prefix_len,
        "seed": hp.seed,
        "epochs_trained": epochs_trained,
    }
    write_tensor_file(path, CHECKPOINT_MAGIC, meta,
                      {name: np.asarray(getattr(p, name)) for name in PARAM_FIELDS})


def load_checkpoint(path: str) -> tuple[ModelParams, Hyperparams, int]:
    try:
        meta, tensors = read_tensor_file(path, CHECKPOINT_MAGIC)
    except TensorFileError as exc:
        raise ModelError(f"bad checkpoint: {exc}") from exc
    hp = Hyperparams(
        catalog_size=int(meta["catalog_size"]),
        embed_dim=int(meta["embed_dim"]),
        hidden_dim=int(meta["hidden_dim"]),
        pref_dim=int(meta["pref_dim"]),
        max_prefix_len=int(meta["max_prefix_len"]),
        seed=int(meta["seed"]),
    )
    expected = {
        "item_embed": (hp.catalog_size, hp.embed_dim),
        "pref_proj": (hp.pref_dim, hp.embed_dim),
        "enc_w": (hp.embed_dim, hp.hidden_dim),
        "enc_b": (hp.hidden_dim,),
        "out_w": (hp.hidden_dim, hp.embed_dim),
        "out_b": (hp.embed_dim,),
        "order_w": (hp.embed_dim,),
        "order_b": (),
        "position_decay": (),
    }
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise ModelError(f"bad checkpoint: tensor {name} missing or mis-shaped")
    params = ModelParams(**{name: tensors[name] for name in PARAM_FIELDS})
    return params, hp, int(meta.get("epochs_trained", 0))
