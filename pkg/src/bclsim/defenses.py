"""Server-side aggregation rules.

FedAvg, MultiKrum, FLAME, FLTrust, RLR, and a layer-wise MultiKrum
variant.  Every rule consumes the current global model plus the round's
client models and returns an AggregationVerdict: the next global model,
the accepted/rejected client ids, and per-client diagnostics.

Distances and norms are computed on update vectors (model - global) in
float64; storage stays float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledSet
from .layermap import LayerMap, average_layermaps, check_aligned
from .models import Architecture

__all__ = [
    "DefenseConfig", "AggregationVerdict", "aggregate",
    "agg_fedavg", "krum_scores", "agg_multikrum", "agg_flame",
    "agg_fltrust", "agg_rlr", "agg_layerwise_multikrum",
    "single_linkage_cluster", "pairwise_cosine_distances",
]

DEFENSE_RULES = ("fedavg", "multikrum", "flame", "fltrust", "rlr",
                 "layerwise_multikrum")


@dataclass(frozen=True)
class DefenseConfig:
    rule: str = "fedavg"
    f: int = 2                      # Krum tolerance
    m_select: int = 4               # MultiKrum acceptance count
    theta: int = 4                  # RLR sign threshold
    server_lr: float = 1.0
    root_size: int = 300            # FLTrust root dataset size
    flame_min_cluster_size: int | None = None  # default n//2 + 1
    flame_noise: float = 0.001
    krum_neighbors: str = "n-f-2"   # "n-f-2" (original Krum) | "nc-f"
    distance_on: str = "update"     # "update" | "model"

    def __post_init__(self):
        if self.rule not in DEFENSE_RULES:
            raise ValueError(f"unknown defense rule {self.rule!r}")
        if self.f < 0 or self.m_select < 1 or self.theta < 0:
            raise ValueError("invalid defense configuration")
        if self.krum_neighbors not in ("n-f-2", "nc-f"):
            raise ValueError(f"unknown krum_neighbors mode {self.krum_neighbors!r}")
        if self.distance_on not in ("update", "model"):
            raise ValueError(f"unknown distance_on mode {self.distance_on!r}")


@dataclass
class AggregationVerdict:
    next_global: LayerMap
    accepted: list
    rejected: list
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.accepted) & set(self.rejected):
            raise ValueError("a client cannot be both accepted and rejected")


def _client_vectors(global_model: LayerMap, updates, on: str) -> np.ndarray:
    """Stack client models (or updates) as float64 rows."""
    g = global_model.to_vector(np.float64)
    rows = []
    for _, model in updates:
        check_aligned(global_model, model)
        v = model.to_vector(np.float64)
        rows.append(v - g if on == "update" else v)
    return np.stack(rows)


# -- FedAvg ---------------------------------------------------------------

def agg_fedavg(global_model: LayerMap, updates, weights=None) -> AggregationVerdict:
    """Weighted per-parameter average of the client models; accepts everyone."""
    if not updates:
        raise ValueError("no client updates")
    ids = [cid for cid, _ in updates]
    models = [m for _, m in updates]
    check_aligned(global_model, *models)
    if weights is None:
        weights = np.full(len(models), 1.0 / len(models))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if abs(weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"weights sum to {weights.sum()}, expected 1")
    uniform = np.all(weights == weights[0])
    arrays = []
    for j in range(len(global_model)):
        acc = np.zeros(global_model.entries[j].values.size, dtype=np.float64)
        if uniform:  # plain mean; bit-identical to average_layermaps
            for m in models:
                acc += m.entries[j].values
            acc /= len(models)
        else:
            for wgt, m in zip(weights, models):
                acc += wgt * m.entries[j].values
        arrays.append(acc.astype(np.float32))
    return AggregationVerdict(LayerMap.from_arrays(global_model, arrays),
                              accepted=list(ids), rejected=[])


# -- (Multi)Krum -----------------------------------------------------------

def krum_scores(vectors: np.ndarray, f: int, neighbors: int | None = None) -> np.ndarray:
    """Krum score per row: sum of squared L2 distances to its closest peers.

    The neighbor count defaults to n - f - 2 (the original construction).
    """
    n = len(vectors)
    if neighbors is None:
        neighbors = n - f - 2
    if n < f + 3:
        raise ValueError(f"Krum needs >= f + 3 = {f + 3} updates, got {n}")
    if not 1 <= neighbors <= n - 1:
        raise ValueError(f"invalid neighbor count {neighbors} for n={n}")
    sq = np.einsum("ij,ij->i", vectors, vectors)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (vectors @ vectors.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    d2.sort(axis=1)
    return d2[:, :neighbors].sum(axis=1)


def _krum_neighbor_count(cfg: DefenseConfig, n: int) -> int | None:
    if cfg.krum_neighbors == "nc-f":
        return max(1, min(n - 1, n - cfg.f))
    return None  # krum_scores applies n - f - 2


def agg_multikrum(global_model: LayerMap, updates,
                  cfg: DefenseConfig) -> AggregationVerdict:
    """Accept the m_select lowest-score clients, average them uniformly."""
    n = len(updates)
    if cfg.m_select > n:
        raise ValueError(f"m_select={cfg.m_select} exceeds {n} updates")
    vecs = _client_vectors(global_model, updates, cfg.distance_on)
    scores = krum_scores(vecs, cfg.f, _krum_neighbor_count(cfg, n))
    order = np.argsort(scores, kind="stable")  # ties broken by client order
    chosen = sorted(order[:cfg.m_select])
    ids = [cid for cid, _ in updates]
    accepted = [ids[i] for i in chosen]
    rejected = [ids[i] for i in range(n) if i not in set(chosen)]
    next_global = average_layermaps([updates[i][1] for i in chosen])
    return AggregationVerdict(next_global, accepted, rejected,
                              {"krum_scores": {ids[i]: float(scores[i]) for i in range(n)}})


# -- FLAME ------------------------------------------------------------------

def pairwise_cosine_distances(vectors: np.ndarray) -> np.ndarray:
    """1 - cosine similarity; zero-norm rows sit at distance 1 from everything."""
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    dist = 1.0 - sim
    zero = norms == 0
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    np.fill_diagonal(dist, 0.0)
    return dist


def single_linkage_cluster(dist: np.ndarray, min_size: int):
    """Merge closest clusters (single linkage) until one reaches min_size.

    Returns the member indices of the first cluster whose size reaches
    ``min_size`` (the lowest dendrogram cut that produces one), or None
    when min_size is unreachable (> n).
    """
    n = len(dist)
    if min_size > n:
        return None
    if min_size <= 1:
        return {0} if n else None
    # cluster-to-cluster min distances, updated on merge
    d = dist.astype(np.float64).copy()
    np.fill_diagonal(d, np.inf)
    members: dict[int, set[int]] = {i: {i} for i in range(n)}
    alive = set(range(n))
    while len(alive) > 1:
        keys = sorted(alive)
        sub = d[np.ix_(keys, keys)]
        flat = np.argmin(sub)
        i, j = divmod(flat, len(keys))
        a, b = keys[min(i, j)], keys[max(i, j)]
        members[a] |= members[b]
        alive.discard(b)
        d[a, :] = np.minimum(d[a, :], d[b, :])
        d[:, a] = d[a, :]
        d[a, a] = np.inf
        d[b, :] = np.inf
        d[:, b] = np.inf
        if len(members[a]) >= min_size:
            return members[a]
    return members[next(iter(alive))]


def agg_flame(global_model: LayerMap, updates, cfg: DefenseConfig,
              rng: np.random.Generator | None = None) -> AggregationVerdict:
    """Cosine clustering + norm clipping + Gaussian noise.

    Single-linkage clustering on pairwise cosine distances of the client
    model vectors (the shared global bulk makes this a lenient relative
    filter, which is the defense's documented behavior), cut at the
    smallest height that yields a cluster of min_cluster_size (n//2 + 1
    by default); accepted updates are clipped to the median accepted L2
    norm, averaged, and perturbed with zero-mean noise of
    sigma = flame_noise * clip_norm.
    """
    n = len(updates)
    if n < 3:
        raise ValueError("FLAME needs at least 3 updates")
    min_size = cfg.flame_min_cluster_size or (n // 2 + 1)
    vecs = _client_vectors(global_model, updates, "update")
    models = _client_vectors(global_model, updates, "model")
    dist = pairwise_cosine_distances(models)
    members = single_linkage_cluster(dist, min_size)
    ids = [cid for cid, _ in updates]
    if members is None:
        members = set(range(n))  # unreachable threshold: accept all
    members = sorted(members)
    norms = np.linalg.norm(vecs, axis=1)
    clip = float(np.median(norms[members]))
    g = global_model.to_vector(np.float64)
    acc = np.zeros_like(g)
    for i in members:
        scale = min(1.0, clip / norms[i]) if norms[i] > 0 else 0.0
        acc += vecs[i] * scale
    acc /= len(members)
    new = g + acc
    if cfg.flame_noise > 0:
        noise_rng = rng if rng is not None else np.random.default_rng(0)
        new = new + noise_rng.normal(0.0, cfg.flame_noise * clip, size=new.shape)
    accepted = [ids[i] for i in members]
    rejected = [ids[i] for i in range(n) if i not in set(members)]
    return AggregationVerdict(
        LayerMap.from_vector(global_model, new.astype(np.float32)),
        accepted, rejected,
        {"cluster": {ids[i]: (i in set(members)) for i in range(n)},
         "clip_norm": clip})


# -- FLTrust ----------------------------------------------------------------

def agg_fltrust(global_model: LayerMap, updates, root_data: LabeledSet,
                arch: Architecture, train_spec) -> AggregationVerdict:
    """Cosine-similarity trust scores against a server-trained root update."""
    from .train import train_local  # local import to avoid a cycle

    if len(root_data) == 0:
        raise ValueError("FLTrust root dataset is empty")
    server_model = train_local(global_model, arch, root_data, train_spec)
    g = global_model.to_vector(np.float64)
    server_update = server_model.to_vector(np.float64) - g
    server_norm = np.linalg.norm(server_update)
    ids = [cid for cid, _ in updates]
    if server_norm == 0:
        return AggregationVerdict(global_model, [], list(ids),
                                  {"degenerate": True, "trust": {}})
    vecs = _client_vectors(global_model, updates, "update")
    norms = np.linalg.norm(vecs, axis=1)
    cos = np.zeros(len(updates))
    nz = norms > 0
    cos[nz] = (vecs[nz] @ server_update) / (norms[nz] * server_norm)
    trust = np.maximum(cos, 0.0)
    total = trust.sum()
    if total == 0:
        return AggregationVerdict(global_model, [], list(ids),
                                  {"trust": dict(zip(ids, trust.tolist()))})
    acc = np.zeros_like(g)
    for i in range(len(updates)):
        if trust[i] > 0 and norms[i] > 0:
            acc += trust[i] * (vecs[i] * (server_norm / norms[i]))
    new = g + acc / total
    accepted = [ids[i] for i in range(len(ids)) if trust[i] > 0]
    rejected = [ids[i] for i in range(len(ids)) if trust[i] <= 0]
    return AggregationVerdict(
        LayerMap.from_vector(global_model, new.astype(np.float32)),
        accepted, rejected, {"trust": dict(zip(ids, trust.tolist()))})


# -- RLR ---------------------------------------------------------------------

def agg_rlr(global_model: LayerMap, updates, cfg: DefenseConfig) -> AggregationVerdict:
    """Robust learning rate: flip the server lr on non-consensus dimensions.

    Dimensions whose summed update signs fall below theta get -server_lr;
    the update applied is the plain mean.  Clients are never filtered, so
    everyone is accepted and the flipped fraction lands in diagnostics.
    """
    if not updates:
        raise ValueError("no client updates")
    vecs = _client_vectors(global_model, updates, "update")
    sign_sum = np.abs(np.sign(vecs).sum(axis=0))
    lr = np.where(sign_sum >= cfg.theta, cfg.server_lr, -cfg.server_lr)
    mean_update = vecs.mean(axis=0)
    g = global_model.to_vector(np.float64)
    new = g + lr * mean_update
    ids = [cid for cid, _ in updates]
    diag = {"flipped_fraction": float((lr < 0).mean())}
    if cfg.theta > len(updates):
        diag["theta_exceeds_n"] = True  # every dimension flips
    return AggregationVerdict(
        LayerMap.from_vector(global_model, new.astype(np.float32)),
        list(ids), [], diag)


# -- layer-wise MultiKrum ------------------------------------------------------

def agg_layerwise_multikrum(global_model: LayerMap, updates,
                            cfg: DefenseConfig) -> AggregationVerdict:
    """MultiKrum selection run independently on each layer's vectors.

    The next global model is assembled layer by layer from each layer's
    accepted average; a client counts as accepted overall when at least
    half of the layers accepted it.
    """
    n = len(updates)
    if cfg.m_select > n:
        raise ValueError(f"m_select={cfg.m_select} exceeds {n} updates")
    ids = [cid for cid, _ in updates]
    models = [m for _, m in updates]
    check_aligned(global_model, *models)
    neighbors = _krum_neighbor_count(cfg, n)
    arrays = []
    per_layer_accepted: dict[str, list] = {}
    accept_counts = np.zeros(n, dtype=int)
    for j, entry in enumerate(global_model.entries):
        g = entry.values.astype(np.float64)
        rows = np.stack([m.entries[j].values.astype(np.float64) for m in models])
        vecs = rows - g if cfg.distance_on == "update" else rows
        scores = krum_scores(vecs, cfg.f, neighbors)
        order = np.argsort(scores, kind="stable")
        chosen = sorted(order[:cfg.m_select])
        accept_counts[chosen] += 1
        per_layer_accepted[entry.name] = [ids[i] for i in chosen]
        arrays.append(rows[chosen].mean(axis=0).astype(np.float32))
    threshold = len(global_model) / 2
    accepted = [ids[i] for i in range(n) if accept_counts[i] >= threshold]
    rejected = [ids[i] for i in range(n) if accept_counts[i] < threshold]
    return AggregationVerdict(
        LayerMap.from_arrays(global_model, arrays), accepted, rejected,
        {"per_layer_accepted": per_layer_accepted,
         "accept_counts": dict(zip(ids, accept_counts.tolist()))})


def aggregate(rule: str, global_model: LayerMap, updates, cfg: DefenseConfig,
              *, weights=None, root_data=None, arch=None, train_spec=None,
              rng=None) -> AggregationVerdict:
    """Dispatch a round of aggregation by rule name."""
    if rule == "fedavg":
        return agg_fedavg(global_model, updates, weights)
    if rule == "multikrum":
        return agg_multikrum(global_model, updates, cfg)
    if rule == "flame":
        return agg_flame(global_model, updates, cfg, rng)
    if rule == "fltrust":
        return agg_fltrust(global_model, updates, root_data, arch, train_spec)
    if rule == "rlr":
        return agg_rlr(global_model, updates, cfg)
    if rule == "layerwise_multikrum":
        return agg_layerwise_multikrum(global_model, updates, cfg)
    raise ValueError(f"unknown defense rule {rule!r}")
