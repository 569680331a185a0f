"""PCGCN and the GCN / MLP baselines, with hand-written backward passes.

All models share one calling convention::

    model = build_model("pcgcn", bundle, config, train_mask, init_rng)
    loss, logits = model.loss_and_grad(training=True, rng=dropout_rng)

``loss_and_grad`` fills ``Parameter.grad`` for every trainable tensor.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .graph import LabelSet, NormalizedAdjacency, normalize_adjacency
from .numerics import Parameter

MODEL_KINDS = ("pcgcn", "gcn", "mlp", "stacked-gcn")


@dataclass(frozen=True)
class PCGCNConfig:
    layers: int = 2
    hidden: int = 64
    dropout: float = 0.5
    lr: float = 0.01
    wd: float = 5e-4
    lam: float = 1.0
    beta: float = 0.5
    tau: float = 1.0
    epochs: int = 1000
    patience: int = 100
    seed: int = 0
    control_mask: tuple | None = None
    oracle_fraction: float = 0.0
    no_hom_p: bool = False
    no_het_p: bool = False
    no_mp: bool = False
    no_cl: bool = False
    tie_transforms: bool = False
    consistency_source: str = "S"  # "S" or "S_tilde"
    reduction: str = "sum"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.oracle_fraction <= 1:
            raise ValueError("oracle_fraction must lie in [0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.no_hom_p and self.no_het_p:
            raise ValueError("cannot drop both similarity propagation terms")
        if self.consistency_source not in ("S", "S_tilde"):
            raise ValueError("consistency_source must be 'S' or 'S_tilde'")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    @property
    def consistency_weight(self) -> float:
        return 0.0 if self.no_cl else self.lam

    def delta(self, n: int) -> np.ndarray | None:
        if self.control_mask is None:
            return None
        mask = np.asarray(self.control_mask, dtype=bool)
        if mask.shape != (n,):
            raise ValueError(f"control mask has {mask.size} entries, graph has {n} nodes")
        return mask

    def snapshot(self) -> dict:
        out = asdict(self)
        if self.control_mask is not None:
            out["control_mask"] = [int(v) for v in self.control_mask]
        return out

    @classmethod
    def from_snapshot(cls, doc: dict) -> "PCGCNConfig":
        doc = dict(doc)
        if doc.get("control_mask") is not None:
            doc["control_mask"] = tuple(bool(v) for v in doc["control_mask"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class PrototypeSet:
    embeddings: np.ndarray  # c x d
    free: np.ndarray  # bool per class: True -> free-learnable row
    members: list = field(default_factory=list)  # training node ids per class


@dataclass
class MatchState:
    S: np.ndarray
    S_tilde: np.ndarray
    assignment: np.ndarray
    z_tilde: np.ndarray
    match_probs: np.ndarray = None


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def onehot(idx, c):
    out = np.zeros((len(idx), c))
    out[np.arange(len(idx)), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# PCGCN building blocks
# ---------------------------------------------------------------------------

def compute_prototypes(features, labels: LabelSet, train_mask, params) -> PrototypeSet:
    """Class centroids of the transformed training features.

    ``params`` needs ``proto.weight``/``proto.bias`` (or ``input.*`` when
    they are tied) and, if some class has no training node,
    ``free_prototypes`` with one row per such class in class order.
    """
    w = params["proto.weight"].value
    b = params["proto.bias"].value
    c = labels.num_classes
    y = labels.labels
    train_mask = np.asarray(train_mask, dtype=bool)
    emb = np.zeros((c, w.shape[1]))
    free = np.zeros(c, dtype=bool)
    members = []
    for j in range(c):
        idx = np.flatnonzero(train_mask & (y == j))
        members.append(idx)
        if idx.size:
            emb[j] = (features[idx] @ w + b).mean(axis=0)
        else:
            free[j] = True
    if free.any():
        emb[free] = params["free_prototypes"].value
    return PrototypeSet(emb, free, members)


def compute_prototypes_backward(d_emb, protos: PrototypeSet, features, params):
    wp, bp = params["proto.weight"], params["proto.bias"]
    for j, idx in enumerate(protos.members):
        if idx.size:
            g = d_emb[j] / idx.size
            # mean_i (x_i W + b) -> grads: W += sum_i x_i^T g, b += |T_j| g
            wp.grad += np.outer(features[idx].sum(axis=0), g)
            bp.grad += g * idx.size
    if protos.free.any():
        params["free_prototypes"].grad += d_emb[protos.free]


def pin_similarity(H, protos):
    emb = protos.embeddings if isinstance(protos, PrototypeSet) else protos
    if H.shape[1] != emb.shape[1]:
        raise nx.ShapeError(f"node width {H.shape[1]} != prototype width {emb.shape[1]}")
    return H @ emb.T


def pin_similarity_backward(d_S, H, emb):
    return d_S @ emb, d_S.T @ H


def propagate_similarity(S, adj: NormalizedAdjacency, alpha: float, no_hom_p=False, no_het_p=False):
    """α·ÂS + (1-α)·(I-Â)S, optionally with one of the two terms removed.

    Returns ``(S_tilde, AS)``; ``AS`` is needed by the backward pass.
    """
    AS = nx.spmm(adj, S)
    out = np.zeros_like(S)
    if not no_hom_p:
        out += alpha * AS
    if not no_het_p:
        out += (1.0 - alpha) * (S - AS)
    return out, AS


def propagate_similarity_backward(d_St, S, AS, adj, alpha, no_hom_p=False, no_het_p=False):
    """Returns ``(dS, dalpha)``."""
    d_hom = np.zeros_like(d_St) if no_hom_p else alpha * d_St
    d_het = np.zeros_like(d_St) if no_het_p else (1.0 - alpha) * d_St
    dS = nx.spmm_backward(adj, d_hom - d_het) + d_het
    d_alpha = 0.0
    if not no_hom_p:
        d_alpha += float((d_St * AS).sum())
    if not no_het_p:
        d_alpha -= float((d_St * (S - AS)).sum())
    return dS, d_alpha


def match_nodes(S_tilde, tau, labels: LabelSet | None = None, train_mask=None,
                oracle_fraction: float = 0.0, rng=None):
    """Hard node-to-prototype assignment.

    Returns ``(assignment, probs)`` where ``probs`` is the temperature
    softmax of ``S_tilde``. Ties go to the lowest class index. With
    ``oracle_fraction > 0`` a seeded subset of the non-training labeled
    nodes is forced onto its ground-truth class.
    """
    probs = nx.row_softmax(S_tilde, tau)
    # argmax on the scores themselves: invariant to tau and exact on ties
    assignment = np.argmax(S_tilde, axis=1)
    if oracle_fraction > 0:
        y = labels.labels
        pool = np.flatnonzero(~np.asarray(train_mask, dtype=bool) & (y >= 0))
        k = int(round(oracle_fraction * pool.size))
        if k:
            chosen = np.sort(rng.choice(pool, size=k, replace=False))
            assignment = assignment.copy()
            assignment[chosen] = y[chosen]
    return assignment, probs


def hybrid_layer(H, adj, W, BP, beta, delta=None, no_mp=False, activation=True):
    """σ(ÂHW + β·δ⊙(H − BP)W). Returns ``(H_next, cache)``."""
    W = W.value if isinstance(W, Parameter) else W
    if H.shape != BP.shape or H.shape[1] != W.shape[0]:
        raise nx.ShapeError(f"hybrid layer shapes: H {H.shape}, BP {BP.shape}, W {W.shape}")
    M = H if no_mp else nx.spmm(adj, H)
    C = H - BP
    if delta is not None:
        C = C * delta[:, None]
    U = M + beta * C
    Z = U @ W
    out = nx.relu(Z) if activation else Z
    return out, (U, Z, W, delta, no_mp, beta, activation)


def hybrid_layer_backward(d_out, cache, adj):
    """Returns ``(dH, dW, dBP)``."""
    U, Z, W, delta, no_mp, beta, activation = cache
    dZ = nx.relu_backward(d_out, Z) if activation else d_out
    dW = U.T @ dZ
    dU = dZ @ W.T
    dH = dU if no_mp else nx.spmm_backward(adj, dU)
    dC = beta * dU
    if delta is not None:
        dC = dC * delta[:, None]
    dH = dH + dC
    return dH, dW, -dC


def consistency_loss(scores, labels: LabelSet, train_mask, reduction="sum"):
    """-Σ_{i∈T} ln softmax(scores_i)[y_i] and its gradient."""
    return nx.masked_cross_entropy(scores, labels.labels, train_mask, reduction)


def total_loss(logits, match_states, labels: LabelSet, train_mask, lam, source="S", reduction="sum"):
    """Classification loss plus λ times the per-layer consistency terms.

    Returns ``(loss, d_logits, d_scores)`` with one ``d_scores`` entry per
    layer (gradient w.r.t. ``S`` or ``S_tilde`` depending on ``source``).
    """
    loss, d_logits = nx.masked_cross_entropy(logits, labels.labels, train_mask, reduction)
    d_scores = []
    if lam != 0:
        for st in match_states:
            scores = st.S if source == "S" else st.S_tilde
            l_c, d_c = consistency_loss(scores, labels, train_mask, reduction)
            loss += lam * l_c
            d_scores.append(lam * d_c)
    return loss, d_logits, d_scores


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class Model:
    kind = "base"

    def __init__(self, bundle, config: PCGCNConfig, train_mask, adj=None):
        self.bundle = bundle
        self.config = config
        self.train_mask = np.asarray(train_mask, dtype=bool)
        self.features = bundle.features
        self.labels = bundle.labels
        self.adj = adj if adj is not None else normalize_adjacency(bundle.graph)
        self.params: dict[str, Parameter] = {}

    def add(self, name, value):
        self.params[name] = Parameter(name, value)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def predict(self):
        logits, _ = self.forward(training=False, rng=None)
        return logits

    def loss_and_grad(self, training=True, rng=None):
        logits, cache = self.forward(training, rng)
        loss, d_logits = nx.masked_cross_entropy(
            logits, self.labels.labels, self.train_mask, self.config.reduction)
        self.backward(d_logits, cache)
        return loss, logits


class MLP(Model):
    kind = "mlp"

    def __init__(self, bundle, config, train_mask, rng, adj=None):
        super().__init__(bundle, config, train_mask, adj)
        f, d, c = bundle.num_features, config.hidden, bundle.num_classes
        self.add("layer0.weight", glorot(rng, f, d))
        self.add("layer0.bias", np.zeros(d))
        self.add("layer1.weight", glorot(rng, d, c))
        self.add("layer1.bias", np.zeros(c))

    def propagate(self, m):
        return m

    def propagate_backward(self, d):
        return d

    def forward(self, training, rng):
        p = self.params
        x, s0 = nx.dropout(self.features, self.config.dropout, training, rng)
        z0 = self.propagate(x @ p["layer0.weight"].value) + p["layer0.bias"].value
        h = nx.relu(z0)
        h_d, s1 = nx.dropout(h, self.config.dropout, training, rng)
        logits = self.propagate(h_d @ p["layer1.weight"].value) + p["layer1.bias"].value
        return logits, (x, z0, h_d, s1)

    def backward(self, d_logits, cache):
        p = self.params
        x, z0, h_d, s1 = cache
        d = self.propagate_backward(d_logits)
        p["layer1.bias"].grad += d_logits.sum(axis=0)
        p["layer1.weight"].grad += h_d.T @ d
        dh = nx.dropout_backward(d @ p["layer1.weight"].value.T, s1)
        dz0 = nx.relu_backward(dh, z0)
        p["layer0.bias"].grad += dz0.sum(axis=0)
        p["layer0.weight"].grad += x.T @ self.propagate_backward(dz0)


class GCN(MLP):
    """Two-layer GCN: Â·ReLU(Â·X·W0 + b0)·W1 + b1, linear maps applied before Â."""

    kind = "gcn"

    def propagate(self, m):
        return nx.spmm(self.adj, m)

    def propagate_backward(self, d):
        return nx.spmm_backward(self.adj, d)


class StackedGCN(Model):
    """Linear encoder, ``layers`` GCN layers of width d, linear classifier.

    This is the PCGCN pipeline with the pinning term removed; used as the
    reduction target for PCGCN with β = 0 and λ = 0.
    """

    kind = "stacked-gcn"

    def __init__(self, bundle, config, train_mask, rng, adj=None):
        super().__init__(bundle, config, train_mask, adj)
        f, d, c = bundle.num_features, config.hidden, bundle.num_classes
        self.add("input.weight", glorot(rng, f, d))
        self.add("input.bias", np.zeros(d))
        for l in range(config.layers):
            self.add(f"layer{l}.weight", glorot(rng, d, d))
        self.add("classifier.weight", glorot(rng, d, c))
        self.add("classifier.bias", np.zeros(c))

    def encode(self, training, rng):
        p = self.params
        h0 = self.features @ p["input.weight"].value + p["input.bias"].value
        return nx.dropout(h0, self.config.dropout, training, rng)

    def encode_backward(self, dH, s0):
        p = self.params
        d = nx.dropout_backward(dH, s0)
        p["input.weight"].grad += self.features.T @ d
        p["input.bias"].grad += d.sum(axis=0)

    def classify(self, H):
        p = self.params
        return H @ p["classifier.weight"].value + p["classifier.bias"].value

    def classify_backward(self, d_logits, H):
        p = self.params
        p["classifier.weight"].grad += H.T @ d_logits
        p["classifier.bias"].grad += d_logits.sum(axis=0)
        return d_logits @ p["classifier.weight"].value.T

    def forward(self, training, rng):
        H, s0 = self.encode(training, rng)
        layers = []
        L = self.config.layers
        for l in range(L):
            W = self.params[f"layer{l}.weight"].value
            M = H if self.config.no_mp else nx.spmm(self.adj, H)
            Z = M @ W
            H_next = nx.relu(Z)
            scale = None
            if l < L - 1:
                H_next, scale = nx.dropout(H_next, self.config.dropout, training, rng)
            layers.append((M, Z, scale))
            H = H_next
        return self.classify(H), (s0, layers, H)

    def backward(self, d_logits, cache):
        s0, layers, H_last = cache
        dH = self.classify_backward(d_logits, H_last)
        for l in reversed(range(len(layers))):
            M, Z, scale = layers[l]
            W = self.params[f"layer{l}.weight"]
            dH = nx.dropout_backward(dH, scale)
            dZ = nx.relu_backward(dH, Z)
            W.grad += M.T @ dZ
            dM = dZ @ W.value.T
            dH = dM if self.config.no_mp else nx.spmm_backward(self.adj, dM)
        self.encode_backward(dH, s0)


class PCGCN(StackedGCN):
    kind = "pcgcn"

    def __init__(self, bundle, config, train_mask, rng, adj=None, aux_rng=None):
        super().__init__(bundle, config, train_mask, rng, adj)
        f, d = bundle.num_features, config.hidden
        # created after the shared tensors so their init draws match StackedGCN
        if not config.tie_transforms:
            self.add("proto.weight", glorot(rng, f, d))
            self.add("proto.bias", np.zeros(d))
        for l in range(config.layers):
            self.add(f"layer{l}.alpha", np.zeros(()))
        y = self.labels.labels
        present = np.array([np.any(self.train_mask & (y == j)) for j in range(self.labels.num_classes)])
        n_free = int((~present).sum())
        if n_free:
            aux_rng = aux_rng if aux_rng is not None else rng
            self.add("free_prototypes", aux_rng.standard_normal((n_free, d)) / math.sqrt(d))
        self.delta = config.delta(bundle.num_nodes)
        self._oracle_seed = int(np.random.SeedSequence([config.seed, 7]).generate_state(1)[0])

    def proto_params(self):
        p = self.params
        if self.config.tie_transforms:
            view = {"proto.weight": p["input.weight"], "proto.bias": p["input.bias"]}
        else:
            view = {"proto.weight": p["proto.weight"], "proto.bias": p["proto.bias"]}
        if "free_prototypes" in p:
            view["free_prototypes"] = p["free_prototypes"]
        return view

    def alpha(self, l):
        return sigmoid(float(self.params[f"layer{l}.alpha"].value))

    def forward(self, training, rng):
        cfg = self.config
        H, s0 = self.encode(training, rng)
        protos = compute_prototypes(self.features, self.labels, self.train_mask, self.proto_params())
        P = protos.embeddings
        c = self.labels.num_classes
        states, layers = [], []
        L = cfg.layers
        for l in range(L):
            S = pin_similarity(H, P)
            alpha = self.alpha(l)
            St, AS = propagate_similarity(S, self.adj, alpha, cfg.no_hom_p, cfg.no_het_p)
            oracle_rng = np.random.default_rng(self._oracle_seed) if cfg.oracle_fraction > 0 else None
            idx, probs = match_nodes(St, cfg.tau, self.labels, self.train_mask, cfg.oracle_fraction, oracle_rng)
            BP = P[idx]
            W = self.params[f"layer{l}.weight"].value
            H_next, hcache = hybrid_layer(H, self.adj, W, BP, cfg.beta, self.delta, cfg.no_mp)
            scale = None
            if l < L - 1:
                H_next, scale = nx.dropout(H_next, cfg.dropout, training, rng)
            states.append(MatchState(S, St, idx, nx.row_softmax(S), probs))
            layers.append((H, AS, hcache, scale, alpha))
            H = H_next
        logits = self.classify(H)
        return logits, (s0, protos, states, layers, H, c)

    def loss_and_grad(self, training=True, rng=None):
        cfg = self.config
        logits, cache = self.forward(training, rng)
        states = cache[2]
        loss, d_logits, d_scores = total_loss(
            logits, states, self.labels, self.train_mask, cfg.consistency_weight,
            cfg.consistency_source, cfg.reduction)
        self.backward(d_logits, cache, d_scores)
        return loss, logits

    def backward(self, d_logits, cache, d_scores=()):
        cfg = self.config
        s0, protos, states, layers, H_last, c = cache
        P = protos.embeddings
        dP = np.zeros_like(P)
        dH = self.classify_backward(d_logits, H_last)
        for l in reversed(range(len(layers))):
            H_in, AS, hcache, scale, alpha = layers[l]
            dH = nx.dropout_backward(dH, scale)
            dH_in, dW, dBP = hybrid_layer_backward(dH, hcache, self.adj)
            self.params[f"layer{l}.weight"].grad += dW
            dP += onehot(states[l].assignment, c).T @ dBP
            if d_scores:
                dS = d_scores[l]
                if cfg.consistency_source == "S_tilde":
                    dS, d_alpha = propagate_similarity_backward(
                        dS, states[l].S, AS, self.adj, alpha, cfg.no_hom_p, cfg.no_het_p)
                    self.params[f"layer{l}.alpha"].grad += d_alpha * alpha * (1.0 - alpha)
                dHs, dPs = pin_similarity_backward(dS, H_in, P)
                dH_in = dH_in + dHs
                dP += dPs
            dH = dH_in
        self.encode_backward(dH, s0)
        compute_prototypes_backward(dP, protos, self.features, self.proto_params())


def build_model(kind, bundle, config, train_mask, rng, adj=None, aux_rng=None) -> Model:
    if kind == "pcgcn":
        return PCGCN(bundle, config, train_mask, rng, adj, aux_rng)
    if kind == "gcn":
        return GCN(bundle, config, train_mask, rng, adj)
    if kind == "mlp":
        return MLP(bundle, config, train_mask, rng, adj)
    if kind == "stacked-gcn":
        return StackedGCN(bundle, config, train_mask, rng, adj)
    raise ValueError(f"unknown model {kind!r}; choose from {', '.join(MODEL_KINDS)}")


def pcgcn_forward(bundle, params, config, rng=None, train_mask=None, training=False):
    """Functional entry point: logits and per-layer match states for given params."""
    model = PCGCN.__new__(PCGCN)
    Model.__init__(model, bundle, config, train_mask if train_mask is not None else np.zeros(bundle.num_nodes, bool))
    model.params = params
    model.delta = config.delta(bundle.num_nodes)
    model._oracle_seed = int(np.random.SeedSequence([config.seed, 7]).generate_state(1)[0])
    logits, cache = model.forward(training, rng)
    return logits, cache[2]


def gcn_forward(bundle, params, config, rng=None, training=False):
    model = GCN.__new__(GCN)
    Model.__init__(model, bundle, config, np.zeros(bundle.num_nodes, bool))
    model.params = params
    return model.forward(training, rng)[0]


def mlp_forward(bundle, params, config, rng=None, training=False):
    model = MLP.__new__(MLP)
    Model.__init__(model, bundle, config, np.zeros(bundle.num_nodes, bool))
    model.params = params
    return model.forward(training, rng)[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model):
    arrays = {f"param/{name}": p.value for name, p in model.params.items()}
    meta = {"kind": model.kind, "config": model.config.snapshot()}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(kind, config, {name: array})``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    return meta["kind"], PCGCNConfig.from_snapshot(meta["config"]), params


def restore(model: Model, params: dict):
    missing = set(model.params) ^ set(params)
    if missing:
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, value in params.items():
        model.params[name].value = np.array(value, dtype=np.float64)
    return model


def with_overrides(config: PCGCNConfig, **kw) -> PCGCNConfig:
    return replace(config, **kw)
