"""Single-network generative optimization model over LEI windows.

One network both scores a window (how data-like it is) and, through
gradient ascent on that score, generates windows. The network maps a
window, a schedule matrix and the federation graph to a window-shaped
reconstruction ``R``; the scalar score is the reconstruction energy
``exp(-MSE(R, Z) / tau)``.

Shapes: windows are ``(m + p, n, k)`` (host rows first, then task rows),
schedules ``(p, m)`` one-hot. A leading batch axis is accepted everywhere.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericalError
from .optim import (
    AdaHessianState,
    AdamState,
    CosineRestartSchedule,
    adahessian_step,
    adam_step,
    cosine_lr,
)

CHECKPOINT_VERSION = 1
D_CLAMP = 1e-6


@dataclass
class TopologyGraph:
    """Federation graph as seen by one broker.

    ``features`` holds one flattened ``n * k`` window slice per host, either
    ``(H, n*k)`` or batched ``(B, H, n*k)``. ``focus`` lists the hosts whose
    rows lead the window being modeled, in row order.
    """

    features: np.ndarray
    worker_broker: np.ndarray
    broker_broker: np.ndarray
    lei_of: np.ndarray
    focus: np.ndarray

    @property
    def n_hosts(self):
        return self.worker_broker.shape[0]

    @property
    def n_leis(self):
        return len(np.unique(self.lei_of))

    def channels(self):
        eye = np.eye(self.n_hosts)
        return np.stack([self.worker_broker, self.broker_broker, eye])

    def edge_set(self):
        """Edges of the transformed graph: support of length-2 adjacency paths."""
        c = self.channels()
        a = c.sum(axis=0) > 0
        two = (a.astype(int) @ a.astype(int)) > 0
        np.fill_diagonal(two, False)
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(two)))}

    def with_features(self, features):
        return TopologyGraph(features, self.worker_broker, self.broker_broker, self.lei_of, self.focus)


@dataclass
class GonConfig:
    n: int
    k: int
    m_max: int
    hidden: int = 128
    r: int = 2
    tau: float = 1.0
    seed: int = 0


@dataclass
class GenerationConfig:
    gamma: float = 1e-3
    max_iters: int = 20
    convergence_eps: float = 1e-5
    restart_period: int = 10
    hutchinson_samples: int = 1

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractError("gamma must be positive")
        if self.max_iters < 0:
            raise ContractError("max_iters must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    m_batch: int = 10
    generation: GenerationConfig = field(default_factory=GenerationConfig)


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _param_shapes(cfg: GonConfig):
    nk, h = cfg.n * cfg.k, cfg.hidden
    shapes = {
        "win_w": (nk, h),
        "win_b": (h,),
        "sch_w": (cfg.m_max, h),
        "sch_b": (h,),
        "gt_logits": (2, 3),
        "gc_w": (nk, h),
        "gc_b": (h,),
    }
    for q in range(cfg.r):
        shapes[f"gc_q{q}"] = (h, h)
    shapes.update({"att_w": (h, 2 * h), "att_b": (2 * h,), "out_w": (2 * h, nk), "out_b": (nk,)})
    return shapes


def count_params(cfg: GonConfig) -> int:
    return int(sum(np.prod(s) for s in _param_shapes(cfg).values()))


def two_network_param_count(cfg: GonConfig) -> int:
    """Parameters of a generator + discriminator pair at the same widths.

    The generator is this architecture; the discriminator shares the trunk
    and ends in a scalar head instead of a window-shaped output.
    """
    nk, h = cfg.n * cfg.k, cfg.hidden
    gen = count_params(cfg)
    disc = gen - (2 * h * nk + nk) + (2 * h + 1)
    return gen + disc


@dataclass
class Sample:
    graph: TopologyGraph
    window: np.ndarray
    schedule: np.ndarray


class GonNetwork:
    def __init__(self, cfg: GonConfig, params=None):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {}
            for name, shape in _param_shapes(cfg).items():
                if len(shape) == 1:
                    params[name] = np.zeros(shape)
                elif name == "gt_logits":
                    params[name] = np.zeros(shape)
                else:
                    params[name] = _glorot(rng, *shape)
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.opt_state: dict[str, AdamState] = {}
        self.train_steps = 0

    @property
    def num_params(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self):
        other = GonNetwork(self.cfg, {k: v.copy() for k, v in self.params.items()})
        other.opt_state = {
            k: AdamState(s.m.copy(), s.v.copy(), s.step, s.beta1, s.beta2, s.eps, s.lr, s.weight_decay)
            for k, s in self.opt_state.items()
        }
        other.train_steps = self.train_steps
        return other

    # ------------------------------------------------------------ forward graph

    def graph_forward(self, P, G: TopologyGraph, W, S):
        """Build the forward graph. ``P`` maps names to Nodes, ``W`` may be a Node."""
        cfg = self.cfg
        h, nk = cfg.hidden, cfg.n * cfg.k
        Wn = ad.as_node(W)
        if Wn.ndim != 4:
            raise ContractError(f"window must be (B, m+p, n, k), got {Wn.shape}")
        B, R, n, k = Wn.shape
        if (n, k) != (cfg.n, cfg.k):
            raise ContractError(f"window feature shape {(n, k)} != model {(cfg.n, cfg.k)}")
        focus = np.asarray(G.focus, dtype=np.int64)
        m = len(focus)
        p = R - m
        if p < 0:
            raise ContractError("window has fewer rows than LEI hosts")
        S = np.asarray(S, dtype=float)
        if S.ndim == 2:
            S = np.broadcast_to(S, (B,) + S.shape)
        if S.shape != (B, p, m):
            raise ContractError(f"schedule shape {S.shape} != {(B, p, m)}")
        if m > cfg.m_max:
            raise ContractError(f"LEI has {m} hosts, model supports {cfg.m_max}")

        # window and schedule encoders, factored over rows
        X = ad.reshape(Wn, (B, R, nk))
        EW = ad.relu(X @ P["win_w"] + P["win_b"])
        if p:
            S_pad = np.zeros((B, p, cfg.m_max))
            S_pad[:, :, :m] = S
            ES = ad.relu(ad.constant(S_pad) @ P["sch_w"] + P["sch_b"])
            es = ad.mean(ES, axis=1, keepdims=True)
        else:
            es = ad.constant(np.zeros((B, 1, h)))
        es = ad.broadcast_to(es, (B, R, h))

        # graph transformer: two soft channel selections, composed
        sel = ad.softmax(P["gt_logits"])
        chans = ad.constant(G.channels())
        H = G.n_hosts
        mats = []
        for i in range(2):
            w = ad.reshape(ad.slice_axis(sel, i, i + 1, 0), (3, 1, 1))
            mats.append(ad.sum(w * chans, axis=0))
        A = mats[0] @ mats[1]
        A = A / (ad.sum(A, axis=-1, keepdims=True) + 1e-9)

        feats = np.asarray(G.features, dtype=float)
        if feats.ndim == 2:
            feats = np.broadcast_to(feats, (B,) + feats.shape)
        if feats.shape != (B, H, nk):
            raise ContractError(f"graph features {feats.shape} != {(B, H, nk)}")
        E = ad.tanh(ad.constant(feats) @ P["gc_w"] + P["gc_b"])
        r_eff = min(cfg.r, max(G.n_leis - 1, 0))
        for q in range(r_eff):
            E = (A @ E) @ P[f"gc_q{q}"]
        EH1 = ad.softmax(E @ P["att_w"] + P["att_b"])

        # attention: host rows use their node, task rows the node they run on
        att = ad.take(EH1, focus, axis=1)
        if p:
            att = ad.concatenate([att, ad.constant(S) @ att], axis=1)
        att = att * float(2 * h)
        feat = ad.concatenate([EW, es], axis=-1)
        out = ad.sigmoid((att * feat) @ P["out_w"] + P["out_b"])
        return ad.reshape(out, (B, R, n, k))

    def _nodes(self, trainable):
        return {k: ad.Node(v, requires_grad=trainable) for k, v in self.params.items()}

    def log_score_graph(self, P, G, Z, S):
        """Per-sample log score, ``-MSE(R(Z), Z) / tau``."""
        Zn = ad.as_node(Z)
        R = self.graph_forward(P, G, Zn, S)
        err = ad.square(R - Zn)
        return ad.mean(err, axis=(1, 2, 3)) * (-1.0 / self.cfg.tau)


# ---------------------------------------------------------------- helpers


def _batched(W, S):
    W = np.asarray(W, dtype=float)
    single = W.ndim == 3
    if single:
        W = W[None]
    S = np.asarray(S, dtype=float)
    if S.ndim == 2:
        S = np.broadcast_to(S, (W.shape[0],) + S.shape)
    if S.size == 0:
        S = np.zeros((W.shape[0], S.shape[-2] if S.ndim == 3 else 0, S.shape[-1] if S.ndim == 3 else 0))
    return W, S, single


def forward(net: GonNetwork, G, W, S):
    """Reconstruction of ``W`` with the same shape, entries in (0, 1)."""
    W, S, single = _batched(W, S)
    with ad.no_grad():
        R = net.graph_forward(net._nodes(False), G, W, S).value
    if not np.all(np.isfinite(R)):
        raise NumericalError("non-finite reconstruction")
    return R[0] if single else R


def log_score(net, G, Z, S):
    Z, S, single = _batched(Z, S)
    with ad.no_grad():
        ls = net.log_score_graph(net._nodes(False), G, Z, S).value
    return float(ls[0]) if single else ls


def score(net, G, Z, S):
    """Discriminator score in (0, 1]; 1 exactly when R(Z) == Z."""
    return np.exp(log_score(net, G, Z, S))


def score_from_mse(mse, tau=1.0):
    return np.exp(-np.asarray(mse) / tau)


@dataclass
class GenerationResult:
    window: np.ndarray
    log_score: np.ndarray
    iterations: int
    degraded: bool
    trajectory: list


def generate(net, G, W, S, cfg: GenerationConfig | None = None, rng=None, return_info=False):
    """Ascend the log score from ``Z = W`` with AdaHessian and cosine restarts.

    Returns the best iterate seen (clamped to [0, 1]); with ``return_info``
    a ``GenerationResult`` instead.
    """
    cfg = cfg or GenerationConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    W, S, single = _batched(W, S)
    P = net._nodes(False)
    Z = np.clip(W.copy(), 0.0, 1.0)
    state = AdaHessianState.zeros_like(Z, lr=cfg.gamma, hutchinson_samples=cfg.hutchinson_samples)
    sched = CosineRestartSchedule(cfg.gamma, cfg.restart_period)
    best = Z.copy()
    best_ls = None
    prev = None
    degraded = False
    traj = []
    it = 0
    for it in range(cfg.max_iters):
        Zn = ad.Node(Z, requires_grad=True)
        ls = net.log_score_graph(P, G, Zn, S)
        if not np.all(np.isfinite(ls.value)):
            degraded = True
            break
        cur = ls.value.copy()
        if best_ls is None:
            best_ls = cur.copy()
        better = cur > best_ls
        best[better] = Z[better]
        best_ls = np.maximum(best_ls, cur)
        traj.append(best_ls.copy())
        if prev is not None and np.max(np.abs(cur - prev)) < cfg.convergence_eps:
            break
        prev = cur
        g, hdiag = ad.grad_and_hutchinson(ad.sum(ls), Zn, cfg.hutchinson_samples, rng)
        state.lr = cosine_lr(sched)
        sched.t += 1
        try:
            Z = np.clip(adahessian_step(state, Z, g, hdiag, ascent=True), 0.0, 1.0)
        except NumericalError:
            degraded = True
            break
    else:
        if cfg.max_iters > 0:
            final = log_score(net, G, Z, S)
            final = np.atleast_1d(final)
            if np.all(np.isfinite(final)):
                better = final > best_ls
                best[better] = Z[better]
                best_ls = np.maximum(best_ls, final)
                traj.append(best_ls.copy())
    if best_ls is None:
        best_ls = np.atleast_1d(log_score(net, G, W, S))
    out = best[0] if single else best
    if return_info:
        return GenerationResult(out, best_ls[0] if single else best_ls, it, degraded, traj)
    return out


# ---------------------------------------------------------------- training


def _stack(samples):
    W = np.stack([s.window for s in samples])
    S = np.stack([np.asarray(s.schedule, dtype=float).reshape(s.schedule.shape) for s in samples])
    g0 = samples[0].graph
    feats = np.stack([np.asarray(s.graph.features, dtype=float) for s in samples])
    return g0.with_features(feats), W, S


def _group_by_shape(samples):
    groups = {}
    for s in samples:
        key = (s.window.shape, np.asarray(s.schedule).shape, tuple(np.asarray(s.graph.focus)), s.graph.n_hosts)
        groups.setdefault(key, []).append(s)
    return list(groups.values())


def _adam_update(net, grads, cfg: TrainConfig):
    for name, g in grads.items():
        st = net.opt_state.get(name)
        if st is None:
            st = AdamState.zeros_like(net.params[name], lr=cfg.lr, weight_decay=cfg.weight_decay)
            net.opt_state[name] = st
        st.lr, st.weight_decay = cfg.lr, cfg.weight_decay
        net.params[name] = adam_step(st, net.params[name], g)
    net.train_steps += 1


def _gan_loss(net, P, G, W, Zf, S):
    """Mean of -log D(W) - log(1 - D(Z*)) over the batch."""
    B = W.shape[0]
    both = np.concatenate([W, Zf])
    S2 = np.concatenate([S, S])
    feats = np.asarray(G.features)
    if feats.ndim == 3:
        feats = np.concatenate([feats, feats])
    G2 = G.with_features(feats)
    ls = net.log_score_graph(P, G2, both, S2)
    real = ad.slice_axis(ls, 0, B, 0)
    fake = ad.slice_axis(ls, B, 2 * B, 0)
    d_fake = ad.clip(ad.exp(fake), D_CLAMP, 1.0 - D_CLAMP)
    real = ad.clip(real, np.log(D_CLAMP), np.log(1.0 - D_CLAMP))
    loss = ad.neg(ad.mean(real + ad.log(1.0 - d_fake)))
    return loss


def loss_value(net, G, W, Zf, S):
    W, S, _ = _batched(W, S)
    Zf = np.asarray(Zf, dtype=float)
    if Zf.ndim == 3:
        Zf = Zf[None]
    with ad.no_grad():
        return float(_gan_loss(net, net._nodes(False), G, W, Zf, S).value)


def train_step(net, G, W, S, Zf, cfg: TrainConfig):
    """One Adam step on the real/fake cross-entropy; returns the loss."""
    W, S, _ = _batched(W, S)
    Zf = np.asarray(Zf, dtype=float)
    if Zf.ndim == 3:
        Zf = Zf[None]
    P = net._nodes(True)
    loss = _gan_loss(net, P, G, W, Zf, S)
    if not np.isfinite(loss.value):
        raise NumericalError("non-finite training loss")
    grads = ad.grad(loss, list(P.values()))
    _adam_update(net, {k: g.value for k, g in zip(P.keys(), grads)}, cfg)
    return float(loss.value)


def train_minibatch(net, batch, m_batch=None, rng=None, cfg: TrainConfig | None = None):
    """Sample ``m_batch`` windows, generate fakes from them, take one step.

    Returns the mean batch loss (pre-update).
    """
    cfg = cfg or TrainConfig()
    m_batch = m_batch or cfg.m_batch
    if not batch:
        raise ContractError("empty batch")
    if m_batch < 1:
        raise ContractError("m_batch must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.choice(len(batch), size=min(m_batch, len(batch)), replace=False)
    chosen = [batch[i] for i in idx]
    losses, weights = [], []
    for group in _group_by_shape(chosen):
        G, W, S = _stack(group)
        Zf = generate(net, G, W, S, cfg.generation, rng)
        losses.append(train_step(net, G, W, S, Zf, cfg))
        weights.append(len(group))
    return float(np.average(losses, weights=weights))


def finetune(net, G, W_next, W_hat, S, cfg: TrainConfig | None = None):
    """Single online Adam step on the observed next window and its generation."""
    cfg = cfg or TrainConfig()
    return train_step(net, G, W_next, S, W_hat, cfg)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net, path, extra=None):
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(net.cfg), "train_steps": net.train_steps}
    arrays = {f"p:{k}": v for k, v in net.params.items()}
    for k, st in net.opt_state.items():
        arrays[f"m:{k}"] = st.m
        arrays[f"v:{k}"] = st.v
        meta.setdefault("opt_steps", {})[k] = st.step
    for k, v in (extra or {}).items():
        arrays[f"x:{k}"] = np.asarray(v)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expect: dict | None = None):
    """Load a network; ``expect`` optionally pins config fields (n, k, m_max, ...)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = GonConfig(**meta["config"])
        for key, val in (expect or {}).items():
            if getattr(cfg, key) != val:
                raise ContractError(f"checkpoint {key}={getattr(cfg, key)}, expected {val}")
        params = {k[2:]: data[k] for k in data.files if k.startswith("p:")}
        for name, shape in _param_shapes(cfg).items():
            if name not in params or params[name].shape != shape:
                raise ContractError(f"checkpoint parameter {name} missing or mis-shaped")
        net = GonNetwork(cfg, params)
        net.train_steps = meta.get("train_steps", 0)
        for k, step in meta.get("opt_steps", {}).items():
            net.opt_state[k] = AdamState(data[f"m:{k}"], data[f"v:{k}"], step)
        extra = {k[2:]: data[k] for k in data.files if k.startswith("x:")}
    return net, extra
