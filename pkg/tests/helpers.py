"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np


def planted_superposition(
    seed: int, n_rows: int = 20000, n: int = 4, m0: int = 8, p: float = 0.05, max_coherence: float = 0.8
):
    """Sparse non-negative combinations of a random unit dictionary.

    Dictionaries with a pair of atoms closer than ``max_coherence`` are
    redrawn: two atoms at |cos| > 0.9 cannot be told apart at the matching
    threshold, so the recovery question is ill-posed for them.
    Returns ``(X [n_rows, n], D [m0, n])``.
    """
    rng = np.random.default_rng(seed)
    while True:
        d = rng.normal(size=(m0, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        gram = np.abs(d @ d.T)
        np.fill_diagonal(gram, 0.0)
        if gram.max() <= max_coherence:
            break
    coef = (rng.random((n_rows, m0)) < p) * rng.uniform(0.5, 1.5, size=(n_rows, m0))
    return (coef @ d).astype(np.float32), d


def greedy_match(truth: np.ndarray, learned: np.ndarray) -> np.ndarray:
    """One-to-one greedy matching by |cos|; returns the matched |cos| per truth row.

    ``truth`` is [m0, n]; ``learned`` is [n, M] (decoder columns).
    """
    t = truth / np.linalg.norm(truth, axis=1, keepdims=True)
    w = learned / np.maximum(np.linalg.norm(learned, axis=0, keepdims=True), 1e-12)
    sim = np.abs(t @ w)
    out = np.zeros(len(t))
    used_t: set[int] = set()
    used_w: set[int] = set()
    for flat in np.argsort(-sim, axis=None, kind="stable"):
        i, j = divmod(int(flat), sim.shape[1])
        if i in used_t or j in used_w:
            continue
        out[i] = sim[i, j]
        used_t.add(i)
        used_w.add(j)
        if len(used_t) == len(t):
            break
    return out


def hand_sae(we: np.ndarray, be: np.ndarray, wd: np.ndarray):
    """An SAE with hand-set weights (relu, no decoder bias)."""
    from splab.sae import Sae, SaeConfig

    m, n = we.shape
    sae = Sae.init(SaeConfig(n=n, M=m, l1_coeff=0.0))
    sae.we = np.asarray(we, dtype=np.float32)
    sae.be = np.asarray(be, dtype=np.float32)
    sae.wd = np.asarray(wd, dtype=np.float32)
    return sae


def noise_readers(n: int, dims: range) -> tuple[np.ndarray, np.ndarray]:
    """Paired +/- unit readers for ``dims`` (encoder rows, decoder columns)."""
    rows = []
    for d in dims:
        for sign in (1.0, -1.0):
            v = np.zeros(n)
            v[d] = sign
            rows.append(v)
    rows = np.array(rows).reshape(-1, n)
    return rows, rows.T.copy()


def planted_classes(n_classes: int = 3, per_class: int = 400, n: int = 8, M: int = 16, slot=None, seed: int = 0):
    """Class c lives on axis c; latent ``slot[c]`` reads exactly that axis.

    Returns ``(x, labels, sae)``; remaining axes carry small noise read by
    +/- latents so that enough latents are alive.
    """
    rng = np.random.default_rng(seed)
    slot = list(range(n_classes)) if slot is None else list(slot)
    labels = np.repeat(np.arange(n_classes), per_class)
    x = rng.normal(0, 0.05, size=(len(labels), n))
    x[np.arange(len(labels)), labels] = rng.uniform(1.0, 2.0, size=len(labels))
    we = np.zeros((M, n))
    wd = np.zeros((n, M))
    be = np.full(M, -100.0)
    for c, j in enumerate(slot):
        we[j, c] = 1.0
        wd[c, j] = 1.0
        be[j] = 0.0
    free = [j for j in range(M) if j not in slot]
    r_we, r_wd = noise_readers(n, range(n_classes, n))
    for i, j in enumerate(free[: len(r_we)]):
        we[j], wd[:, j], be[j] = r_we[i], r_wd[:, i], 0.0
    return x.astype(np.float32), labels, hand_sae(we, be, wd)


def split_fixture(seed=0):
    """Class B (id 0) tokens; a subset A additionally carries axis 1.

    latent 0 = "B except A", latent 1 = A latent whose decoder points at a + b.
    """
    rng = np.random.default_rng(seed)
    n_b, n_c = 500, 500
    is_a = rng.random(n_b) < 0.2
    xb = np.zeros((n_b, 4))
    xb[:, 0] = rng.uniform(0.8, 1.2, n_b)
    xb[is_a, 1] = xb[is_a, 0]
    xc = np.zeros((n_c, 4))
    xc[:, 2] = rng.uniform(0.8, 1.2, n_c)
    x = np.vstack([xb, xc]) + rng.normal(0, 0.01, size=(n_b + n_c, 4))
    labels = np.r_[np.zeros(n_b, int), np.ones(n_c, int)]
    we = np.zeros((8, 4))
    wd = np.zeros((4, 8))
    be = np.full(8, -100.0)
    we[0] = [1, -2, 0, 0]
    wd[:, 0] = [1, 0, 0, 0]
    we[1] = [0, np.sqrt(2), 0, 0]
    wd[:, 1] = np.array([1, 1, 0, 0]) / np.sqrt(2)
    we[2] = [0, 0, 1, 0]
    wd[:, 2] = [0, 0, 1, 0]
    be[:3] = 0
    return x.astype(np.float32), labels, hand_sae(we, be, wd), is_a
