"""Synthetic ground-truth world: the user behavior that generates both the
training data and the simulated online outcomes.

Each item has a click attractiveness weight, an order propensity, and a
low-rank latent vector; item-to-item affinity is the latent dot product.
Attractiveness and propensity are coupled through a Gaussian copula so a
negative correlation can be dialed in, which is what makes click-oriented
and order-oriented ranking genuinely compete.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sessions import ClickOrderSession, Dataset
from .tensorio import read_tensor_file, write_tensor_file

WORLD_MAGIC = b"PPW1"
_CHUNK = 4096
MIN_SESSION_CLICKS = 2
MAX_SESSION_CLICKS = 50


class WorldError(ValueError):
    pass


@dataclass
class World:
    catalog_size: int
    attract: np.ndarray  # (c,) positive click attractiveness
    convert: np.ndarray  # (c,) order propensity in [0, 1]
    latents: np.ndarray  # (c, d_w) transition affinity factors
    seed: int
    corr_target: float
    corr_achieved: float

    def __post_init__(self):
        c = self.catalog_size
        if self.attract.shape != (c,) or self.convert.shape != (c,) or self.latents.shape[0] != c:
            raise WorldError("world array shapes inconsistent with catalog size")
        if not np.all(self.attract > 0):
            raise WorldError("attract weights must be positive")
        if np.any(self.convert < 0) or np.any(self.convert > 1):
            raise WorldError("convert propensities must lie in [0, 1]")

    def affinity(self, i: int, j: int) -> float:
        return float(self.latents[i] @ self.latents[j])


def generate_world(cfg, seed: int) -> World:
    """Deterministically sample a world from config; see WorldSettings."""
    if not (-1.0 <= cfg.attract_convert_corr <= 0.0):
        raise WorldError(f"attract_convert_corr {cfg.attract_convert_corr} outside [-1, 0]")
    if cfg.catalog_size < 50:
        raise WorldError(f"catalog_size {cfg.catalog_size} < 50")
    rng = np.random.default_rng(seed)
    c = cfg.catalog_size
    rho = cfg.attract_convert_corr
    z_attract = rng.standard_normal(c)
    z_indep = rng.standard_normal(c)
    z_convert = rho * z_attract + np.sqrt(1.0 - rho * rho) * z_indep
    log_attract = cfg.attract_sigma * z_attract
    logit_convert = cfg.convert_logit_mean + cfg.convert_logit_sigma * z_convert
    latents = cfg.affinity_scale * rng.standard_normal((c, cfg.latent_dim))
    corr = float(np.corrcoef(log_attract, logit_convert)[0, 1])
    return World(
        catalog_size=c,
        attract=np.exp(log_attract),
        convert=1.0 / (1.0 + np.exp(-logit_convert)),
        latents=latents,
        seed=seed,
        corr_target=rho,
        corr_achieved=corr,
    )


def _gumbel_argmax(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample one index per row from softmax(logits) via the Gumbel trick."""
    u = rng.random(logits.shape)
    return np.argmax(logits - np.log(-np.log(u)), axis=1)


def markov_walk(world: World, start_items: np.ndarray, n_steps: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Walk the world's click process: each next click drawn from
    softmax(affinity to current + log attract), excluding the current item.

    Returns an int array (n, max_steps) padded with -1 past each row's length.
    ``n_steps`` counts total clicks including the start item.
    """
    n = len(start_items)
    max_len = int(n_steps.max())
    items = np.full((n, max_len), -1, dtype=np.int64)
    items[:, 0] = start_items
    log_attract = np.log(world.attract)
    for step in range(1, max_len):
        active = np.flatnonzero(n_steps > step)
        if len(active) == 0:
            break
        cur = items[active, step - 1]
        logits = world.latents[cur] @ world.latents.T + log_attract[None, :]
        logits[np.arange(len(active)), cur] = -np.inf
        items[active, step] = _gumbel_argmax(logits, rng)
    return items


def _draw_lengths(n: int, mean_len: float, rng: np.random.Generator) -> np.ndarray:
    lengths = rng.geometric(p=1.0 / mean_len, size=n)
    return np.clip(lengths, MIN_SESSION_CLICKS, MAX_SESSION_CLICKS)


def sample_sessions(world: World, n_sessions: int, seed: int,
                    mean_session_len: float = 5.0, ts_stride: int = 200) -> Dataset:
    """Generate sessions from the world process.

    Start item drawn proportional to attract, next clicks via markov_walk,
    each click ordered with probability convert[item]. Session start
    timestamps advance by ``ts_stride`` so a temporal split is well defined.
    """
    if n_sessions < 1:
        raise WorldError("n_sessions must be >= 1")
    rng = np.random.default_rng(seed)
    lengths = _draw_lengths(n_sessions, mean_session_len, rng)
    p_start = world.attract / world.attract.sum()
    starts = rng.choice(world.catalog_size, size=n_sessions, p=p_start)
    sessions: list[ClickOrderSession] = []
    for lo in range(0, n_sessions, _CHUNK):
        hi = min(lo + _CHUNK, n_sessions)
        chunk_items = markov_walk(world, starts[lo:hi], lengths[lo:hi], rng)
        mask = chunk_items >= 0
        flat = chunk_items[mask]
        ordered_flat = (rng.random(flat.shape) < world.convert[flat]).astype(np.int64)
        ordered = np.zeros_like(chunk_items)
        ordered[mask] = ordered_flat
        for row in range(hi - lo):
            idx = lo + row
            n_clicks = int(lengths[idx])
            pairs = tuple(
                (int(chunk_items[row, t]), int(ordered[row, t])) for t in range(n_clicks)
            )
            sessions.append(
                ClickOrderSession(session_id=idx, pairs=pairs, start_ts=idx * ts_stride)
            )
    return Dataset(sessions=sessions, catalog_size=world.catalog_size)


def save_world(world: World, path: str) -> None:
    meta = {
        "catalog_size": world.catalog_size,
        "seed": world.seed,
        "corr_target": world.corr_target,
        "corr_achieved": world.corr_achieved,
    }
    write_tensor_file(path, WORLD_MAGIC, meta, {
        "attract": world.attract,
        "convert": world.convert,
        "latents": world.latents,
    })


def load_world(path: str) -> World:
    meta, tensors = read_tensor_file(path, WORLD_MAGIC)
    return World(
        catalog_size=int(meta["catalog_size"]),
        attract=tensors["attract"],
        convert=tensors["convert"],
        latents=tensors["latents"],
        seed=int(meta["seed"]),
        corr_target=float(meta["corr_target"]),
        corr_achieved=float(meta["corr_achieved"]),
    )
