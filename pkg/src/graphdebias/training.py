"""Two-stage adversarial training loop, configuration, history and checkpoints.

Stage 1 fixes the bias head and minimizes BPR on both dropout views plus the
weighted cross-view InfoNCE over the node embeddings. Stage 2 fixes the
embeddings and ascends InfoNCE with respect to the bias head using ARM
gradients through the discrete edge masks.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .bias import (BiasHead, MaskPair, arm_gradient, arm_mask_pairs, edge_features, head_gradient,
                   popularity_probabilities, sample_masks)
from .data import Dataset, with_validation
from .graph import InteractionGraph, build_graph, normalize
from .losses import bpr_loss, invariance_loss
from .metrics import evaluate_ranking, prediction_bias
from .model import EmbeddingModel, backward_propagate, propagate, readout
from .optim import Adam, DivergenceError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BIAS_MODES = ("learned", "fixed", "popularity")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    k_stage1: int = 7
    k_stage2: int = 10
    lr_main: float = 1e-3
    lr_adv: float = 1e-2
    lam: float = 1.0
    tau: float = 0.1
    dim: int = 30
    batch_size: int = 128
    n_layers: int = 2
    contrast_size: int = 100
    max_rounds: int = 500
    patience: int = 10
    early_stopping: bool = True
    tol: float = 0.0
    seed: int = 0
    init_std: float = 0.1
    l2_reg: float = 0.0
    val_fraction: float = 0.1
    eval_k: int = 3
    dropout: bool = True
    bias_mode: str = "learned"
    arm_samples: int = 1
    ablation: str = "full"

    def __post_init__(self):
        for name in ("k_stage1", "dim", "batch_size", "contrast_size", "max_rounds", "eval_k", "arm_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.k_stage2 < 0 or self.n_layers < 0 or self.patience < 1:
            raise ConfigError("k_stage2/n_layers must be >= 0 and patience >= 1")
        if self.lr_main <= 0 or self.lr_adv <= 0 or self.tau <= 0 or self.lam < 0:
            raise ConfigError("learning rates and tau must be positive, lam non-negative")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {BIAS_MODES}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")

    @property
    def adversarial(self) -> bool:
        return self.dropout and self.bias_mode == "learned" and self.k_stage2 > 0

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {},
    "no_pb": {"bias_mode": "fixed", "k_stage2": 0},
    "randomdrop": {"bias_mode": "fixed", "k_stage2": 0},
    "no_pb_no_inv": {"bias_mode": "fixed", "k_stage2": 0, "lam": 0.0},
    "popdrop": {"bias_mode": "popularity", "k_stage2": 0},
    "lightgcn": {"dropout": False, "k_stage2": 0, "lam": 0.0},
    "mf": {"dropout": False, "k_stage2": 0, "lam": 0.0, "n_layers": 0},
}

# Per-dataset tuned settings; shared ones (lam, tau, layers, contrast size) stay at defaults.
DATASET_DEFAULTS: dict[str, dict[str, Any]] = {
    "coat": dict(k_stage1=7, k_stage2=10, lr_main=1e-3, lr_adv=1e-2, dim=30, batch_size=128, eval_k=3),
    "yahoo": dict(k_stage1=15, k_stage2=5, lr_main=3e-3, lr_adv=1e-3, dim=30, batch_size=128, eval_k=3),
    "kuairec": dict(k_stage1=3, k_stage2=5, lr_main=5e-4, lr_adv=1e-3, dim=30, batch_size=512, eval_k=20),
    "yelp2018": dict(k_stage1=7, k_stage2=15, lr_main=5e-4, lr_adv=1e-2, dim=64, batch_size=1024, eval_k=20),
    "douban": dict(k_stage1=10, k_stage2=3, lr_main=5e-4, lr_adv=1e-2, dim=64, batch_size=4096, eval_k=20),
    # hand-tuned for the default SyntheticSpec shape on generator seeds 0-4
    "synthetic": dict(k_stage1=5, k_stage2=20, lr_main=5e-3, lr_adv=0.3, dim=32, batch_size=512,
                      eval_k=20, max_rounds=40, patience=5),
}


def _coerce(value: str, target: Any) -> Any:
    if isinstance(target, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return type(target)(value) if not isinstance(target, int) else int(float(value))
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(target).__name__}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def make_config(*, dataset: Optional[str] = None, file_values: Optional[dict[str, str]] = None,
                overrides: Optional[dict[str, str]] = None, ablation: Optional[str] = None) -> TrainConfig:
    """Resolve a config with precedence CLI overrides > file > dataset defaults > built-ins.

    The ablation preset is applied last and pins the switches it owns.
    """
    base = TrainConfig()
    fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
    values: dict[str, Any] = dict(fields)
    merged: dict[str, str] = {}
    merged.update(file_values or {})
    merged.update(overrides or {})
    name = merged.pop("dataset", dataset)
    if name is not None:
        if name.lower() not in DATASET_DEFAULTS:
            raise ConfigError(f"no defaults for dataset {name!r}; known: {sorted(DATASET_DEFAULTS)}")
        values.update(DATASET_DEFAULTS[name.lower()])
    for key, raw in merged.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(fields))}")
        values[key] = _coerce(raw, fields[key])
    if ablation is not None:
        values["ablation"] = ablation
    if values["ablation"] not in ABLATIONS:
        raise ConfigError(f"unknown ablation {values['ablation']!r}; choose from {sorted(ABLATIONS)}")
    values.update(ABLATIONS[values["ablation"]])
    return TrainConfig(**values)


# ---------------------------------------------------------------------------

def sample_negatives(users: np.ndarray, positives: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform non-interacted item per user by vectorized rejection."""
    n_items = positives.shape[1]
    full = positives.all(axis=1)
    if full[users].any():
        raise ValueError(f"user {int(users[full[users]][0])} has interacted with every item; no negative exists")
    neg = rng.integers(0, n_items, size=users.size)
    bad = positives[users, neg]
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, n_items, size=idx.size)
        bad[idx] = positives[users[idx], neg[idx]]
    return neg


def bpr_on_repr(z: np.ndarray, n_users: int, u: np.ndarray, i: np.ndarray, j: np.ndarray
                ) -> tuple[float, np.ndarray]:
    """BPR over triplets using inner-product scores of readout representations."""
    zu, zi, zj = z[u], z[n_users + i], z[n_users + j]
    loss, g_pos, g_neg = bpr_loss(np.sum(zu * zi, axis=1), np.sum(zu * zj, axis=1))
    rows = np.concatenate([u, n_users + i, n_users + j])
    vals = np.concatenate([g_pos[:, None] * zi + g_neg[:, None] * zj, g_pos[:, None] * zu, g_neg[:, None] * zu])
    return loss, scatter_rows(z.shape[0], rows, vals)


def scatter_rows(n_rows: int, rows: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum ``vals`` into an ``n_rows``-row array at (possibly repeated) ``rows``."""
    sel = sp.csr_matrix((np.ones(rows.size), (rows, np.arange(rows.size))), shape=(n_rows, rows.size))
    return np.asarray(sel @ vals)


def stage1_objective(model: EmbeddingModel, adjs: list[sp.spmatrix], u: np.ndarray, i: np.ndarray,
                     j: np.ndarray, contrast_users: np.ndarray, contrast_items: np.ndarray,
                     lam: float, tau: float, l2_reg: float = 0.0) -> tuple[float, float, np.ndarray]:
    """Recommendation and invariance losses on one minibatch, and the gradient of
    ``rec + lam * inv (+ l2)`` with respect to the layer-0 embeddings.

    ``adjs`` holds the (plus, minus) views, or a single adjacency when dropout is off.
    """
    traces = [propagate(model, a) for a in adjs]
    zs = [readout(t) for t in traces]
    rec = 0.0
    grads = []
    for z in zs:
        loss, g = bpr_on_repr(z, model.n_users, u, i, j)
        rec += loss
        grads.append(g)
    inv = 0.0
    if lam > 0 and len(zs) == 2:
        inv, gp, gm = invariance_loss(zs[0], zs[1], model.n_users, contrast_users, contrast_items, tau)
        grads[0] += lam * gp
        grads[1] += lam * gm
    grad = sum(backward_propagate(t, g) for t, g in zip(traces, grads))
    if l2_reg > 0:
        nodes = np.concatenate([u, model.n_users + i, model.n_users + j])
        rows = model.weights[nodes]
        rec += 0.5 * l2_reg * float(np.sum(rows * rows))
        grad += scatter_rows(grad.shape[0], nodes, l2_reg * rows)
    return rec, inv, grad


def view_invariance(model: EmbeddingModel, graph: InteractionGraph, masks: MaskPair,
                    contrast_users: np.ndarray, contrast_items: np.ndarray, tau: float) -> float:
    zp = readout(propagate(model, normalize(graph, masks.plus)))
    zm = readout(propagate(model, normalize(graph, masks.minus)))
    return invariance_loss(zp, zm, model.n_users, contrast_users, contrast_items, tau)[0]


def arm_logit_gradient(model: EmbeddingModel, graph: InteractionGraph, phi: np.ndarray,
                       contrast_users: np.ndarray, contrast_items: np.ndarray, tau: float,
                       rng: np.random.Generator, n_samples: int = 1) -> tuple[np.ndarray, float]:
    """ARM estimate of d E[L_inv] / d logits, averaged over ``n_samples`` antithetic draws.

    Also returns the mean of the evaluated invariance losses.
    """
    grad = np.zeros_like(phi)
    seen = 0.0
    for _ in range(n_samples):
        v1 = rng.random(phi.shape)
        v2 = rng.random(phi.shape)
        gt, lt = arm_mask_pairs(phi, v1, v2)
        l_gt = view_invariance(model, graph, gt, contrast_users, contrast_items, tau)
        l_lt = view_invariance(model, graph, lt, contrast_users, contrast_items, tau)
        grad += arm_gradient(l_gt, l_lt, v1, v2)
        seen += 0.5 * (l_gt + l_lt)
    return grad / n_samples, seen / n_samples


def stage2_step(model: EmbeddingModel, head: BiasHead, graph: InteractionGraph, adam: Adam,
                config: TrainConfig, rng: np.random.Generator) -> float:
    """One bias-identification step: gradient ascent on InfoNCE w.r.t. the bias head."""
    feats = edge_features(model, graph)
    phi = feats @ head.weight + head.bias
    cu, ci = contrast_sample(graph, config.contrast_size, rng)
    g_phi, loss = arm_logit_gradient(model, graph, phi, cu, ci, config.tau, rng, config.arm_samples)
    gw, gb = head_gradient(feats, g_phi)
    bias = np.array([head.bias])
    adam.step({"weight": head.weight, "bias": bias}, {"weight": -gw, "bias": -np.array([gb])})
    head.bias = float(bias[0])
    return loss


def contrast_sample(graph: InteractionGraph, size: int, rng: np.random.Generator
                    ) -> tuple[np.ndarray, np.ndarray]:
    users = rng.choice(graph.n_users, size=min(size, graph.n_users), replace=False)
    items = rng.choice(graph.n_items, size=min(size, graph.n_items), replace=False)
    return users, items


# ---------------------------------------------------------------------------

class Evaluator:
    """Inference without dropout on the full training graph."""

    def __init__(self, graph: InteractionGraph, exclude: np.ndarray, relevant: Optional[np.ndarray],
                 attributes: Optional[dict] = None):
        self.adj = normalize(graph)
        self.exclude = exclude
        self.relevant = relevant
        self.attributes = {name: t for name, t in (attributes or {}).items() if len(t.domain) >= 2}

    def scores(self, model: EmbeddingModel) -> np.ndarray:
        z = readout(propagate(model, self.adj))
        return z[:model.n_users] @ z[model.n_users:].T

    def ranking(self, scores: np.ndarray, ks) -> dict[str, float]:
        return evaluate_ranking(scores, self.exclude, self.relevant, ks)

    def biases(self, scores: np.ndarray) -> dict[str, float]:
        return {name: prediction_bias(scores, t) for name, t in self.attributes.items()}


def prepare_data(data: Dataset, config: TrainConfig) -> Dataset:
    """Attach the seeded per-user validation holdout when the dataset has none."""
    return with_validation(data, config.val_fraction, config.seed)


def holdout_evaluator(data: Dataset) -> Evaluator:
    """Full-graph evaluator on the test split; every training or validation item is excluded."""
    graph = build_graph(data.train, data.n_users, data.n_items)
    seen = data.matrix("train") | data.matrix("validation")
    return Evaluator(graph, seen, data.matrix("test"), data.attributes)


@dataclass
class TrainResult:
    model: EmbeddingModel
    head: BiasHead
    config: TrainConfig
    history: list[dict[str, Any]] = field(default_factory=list)
    best_round: int = 0
    rounds_run: int = 0
    rng_state: Optional[dict] = None

    @property
    def history_columns(self) -> list[str]:
        return history_columns(self.config, self.history)


def history_columns(config: TrainConfig, history: list[dict]) -> list[str]:
    base = ["round", "stage", "epoch", "loss_rec", "loss_inv", f"val_ndcg@{config.eval_k}"]
    extra = sorted({k for row in history for k in row if k.startswith("pred_bias_")})
    return base + extra


def train(config: TrainConfig, data: Dataset,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    graph = build_graph(data.train, data.n_users, data.n_items)
    positives = graph.dense()
    has_val = len(data.validation) > 0
    evaluator = Evaluator(graph, positives, data.matrix("validation") if has_val else None, data.attributes)
    model = EmbeddingModel.init(data.n_users, data.n_items, config.dim, config.n_layers, rng, config.init_std)
    head = BiasHead.zeros(config.dim)
    adam_main = Adam(config.lr_main)
    adam_adv = Adam(config.lr_adv)
    pb_fixed = (popularity_probabilities(graph) if config.bias_mode == "popularity"
                else np.full(graph.n_edges, 0.5))
    full_adj = normalize(graph)
    val_key = f"val_ndcg@{config.eval_k}"
    history: list[dict] = []

    def snapshot_metrics() -> dict[str, float]:
        s = evaluator.scores(model)
        row = {val_key: evaluator.ranking(s, [config.eval_k])[f"ndcg@{config.eval_k}"] if has_val else math.nan}
        row.update({f"pred_bias_{k}": v for k, v in evaluator.biases(s).items()})
        return row

    def record(row: dict) -> None:
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)

    best = (-math.inf, model.copy(), head.copy(), 0)
    stale = 0
    rounds_run = 0
    for rnd in range(1, config.max_rounds + 1):
        rounds_run = rnd
        # Stage 1: representation learning with the bias head fixed.
        for epoch in range(1, config.k_stage1 + 1):
            if config.dropout:
                p_b = expit(edge_features(model, graph) @ head.weight + head.bias) \
                    if config.bias_mode == "learned" else pb_fixed
                masks = sample_masks(p_b, rng)
                adjs = [normalize(graph, masks.plus), normalize(graph, masks.minus)]
            else:
                adjs = [full_adj]
            neg = sample_negatives(graph.users, positives, rng)
            order = rng.permutation(graph.n_edges)
            tot_rec = tot_inv = 0.0
            for start in range(0, order.size, config.batch_size):
                b = order[start:start + config.batch_size]
                cu, ci = contrast_sample(graph, config.contrast_size, rng)
                rec, inv, grad = stage1_objective(model, adjs, graph.users[b], graph.items[b], neg[b],
                                                  cu, ci, config.lam, config.tau, config.l2_reg)
                if not (math.isfinite(rec) and math.isfinite(inv)):
                    raise DivergenceError(f"non-finite loss in round {rnd}, stage 1 epoch {epoch}")
                adam_main.step({"embeddings": model.weights}, {"embeddings": grad})
                tot_rec += rec
                tot_inv += inv
            record({"round": rnd, "stage": 1, "epoch": epoch, "loss_rec": tot_rec, "loss_inv": tot_inv,
                    **snapshot_metrics()})

        # Stage 2: bias identification with the embeddings fixed.
        if config.adversarial:
            frozen = snapshot_metrics()
            for epoch in range(1, config.k_stage2 + 1):
                loss = stage2_step(model, head, graph, adam_adv, config, rng)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss in round {rnd}, stage 2 epoch {epoch}")
                record({"round": rnd, "stage": 2, "epoch": epoch, "loss_rec": None, "loss_inv": loss, **frozen})

        if has_val and config.early_stopping:
            score = history[-1][val_key]
            if score > best[0] + config.tol:
                best = (score, model.copy(), head.copy(), rnd)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop after round %d (best round %d)", rnd, best[3])
                    break

    if has_val and config.early_stopping:
        _, model, head, best_round = best
    else:
        best_round = rounds_run
    return TrainResult(model, head, config, history, best_round, rounds_run, rng.bit_generator.state)


# ---------------------------------------------------------------------------

def _fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_history(path: str | Path, result: TrainResult) -> None:
    """CSV ``round,stage,epoch,loss_rec,loss_inv,val_ndcg@K,pred_bias_<attr>...``."""
    cols = result.history_columns
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.history:
            w.writerow([_fmt(row.get(c)) for c in cols])


def read_history(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else math.nan) for k, v in row.items()} for row in csv.DictReader(fh)]


def save_checkpoint(path: str | Path, model: EmbeddingModel, head: BiasHead, config: TrainConfig,
                    rng_state: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """``.npz`` with arrays ``embeddings``, ``head_weight``, ``head_bias`` and JSON ``meta``."""
    meta = {"version": CHECKPOINT_VERSION, "n_users": model.n_users, "n_layers": model.n_layers,
            "config": config.to_dict(), "rng_state": rng_state, **(extra or {})}
    with open(path, "wb") as fh:
        np.savez(fh, embeddings=model.weights, head_weight=head.weight, head_bias=np.array(head.bias),
                 meta=np.array(json.dumps(meta, sort_keys=True, default=int)))


def load_checkpoint(path: str | Path) -> tuple[EmbeddingModel, BiasHead, TrainConfig, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        model = EmbeddingModel(z["embeddings"].copy(), meta["n_users"], meta["n_layers"])
        head = BiasHead(z["head_weight"].copy(), float(z["head_bias"]))
    return model, head, TrainConfig(**meta["config"]), meta
