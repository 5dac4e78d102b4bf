"""Acceptance checks, one test per criterion.

Each test records a ``[criterion N] PASS|FAIL|BLOCKED ...`` line; the lines are
echoed at the end of the pytest run (see ``conftest.pytest_terminal_summary``).

Criteria 1, 6 and 7 need the public Coat release. Point ``GRAPHDEBIAS_COAT``
at a directory holding ``train.ascii``, ``test.ascii`` and
``user_item_features/`` (or place it at ``data/coat`` in the repo). Without
it those criteria are reported BLOCKED and skipped.
"""

import itertools
import os
import warnings
from pathlib import Path

import numpy as np
import pytest

from graphdebias.bias import MaskPair, arm_gradient, arm_mask_pairs, bias_probabilities, head_gradient
from graphdebias.cli import main as cli_main
from graphdebias.data import SyntheticSpec, generate_synthetic, load_dataset, save_bundle
from graphdebias.graph import build_graph, normalize
from graphdebias.losses import bpr_loss, infonce_loss
from graphdebias.metrics import AttributeTable, evaluate_ranking, group_means, popularity_groups, prediction_bias
from graphdebias.model import EmbeddingModel, backward_propagate, propagate, readout
from graphdebias.training import holdout_evaluator, make_config, prepare_data, stage1_objective, train, view_invariance
from oracles import (brute_ndcg, brute_prediction_bias, brute_recall, central_diff, enumerate_grad, naive_bpr,
                     rel_err)

REPORT: list[str] = []

# tolerances
COAT_TOL = 0.03
COAT_LGN_NDCG3, COAT_LGN_RECALL3 = 0.499, 0.394
COAT_ADV_NDCG3, COAT_ADV_RECALL3 = 0.532, 0.418
COAT_MIN_GAIN = 0.015
ARM_SAMPLES = 100_000
ARM_INSTANCES = 20
ARM_MAX_EDGES = 5
ARM_SE_MULT = 4.0
GRAD_INSTANCES = 50
GRAD_REL_TOL = 1e-4
METRIC_EXACT = 1e-12
PB_SEEDS, PB_MIN_HOLD = 5, 3
BIAS_RATIO = 0.5
ABLATION_SEEDS = 5

# Synthetic data used for the ablation ordering: the generator defaults (popularity-skewed
# exposure, MAR test split).
ABLATION_DATA: dict = {}


def record(n: int, status: str, detail: str) -> None:
    line = f"[criterion {n}] {status}: {detail}"
    REPORT.append(line)
    print(line)


def coat_dir() -> Path | None:
    for cand in (os.environ.get("GRAPHDEBIAS_COAT"), Path(__file__).resolve().parents[1] / "data" / "coat"):
        if cand and (Path(cand) / "train.ascii").exists():
            return Path(cand)
    return None


def require_coat(n: int) -> Path:
    d = coat_dir()
    if d is None:
        record(n, "BLOCKED", "Coat data not found (set GRAPHDEBIAS_COAT or add data/coat); not evaluated")
        pytest.skip("Coat data unavailable")
    return d


_COAT_CACHE: dict = {}


def coat_run(ablation: str, seed: int = 0):
    key = (ablation, seed)
    if key not in _COAT_CACHE:
        cfg = make_config(dataset="coat", ablation=ablation, overrides={"seed": str(seed)})
        ds = prepare_data(load_dataset(coat_dir()), cfg)
        result = train(cfg, ds)
        _COAT_CACHE[key] = (ds, result)
    return _COAT_CACHE[key]


def test_criterion_1_coat_reproduction():
    require_coat(1)
    ds, lgn = coat_run("lightgcn")
    _, adv = coat_run("full")
    ev = holdout_evaluator(ds)
    m_lgn = ev.ranking(ev.scores(lgn.model), [3])
    m_adv = ev.ranking(ev.scores(adv.model), [3])
    lgn_ok = abs(m_lgn["ndcg@3"] - COAT_LGN_NDCG3) <= COAT_TOL and abs(m_lgn["recall@3"] - COAT_LGN_RECALL3) <= COAT_TOL
    gain_ok = m_adv["ndcg@3"] >= m_lgn["ndcg@3"] + COAT_MIN_GAIN
    target = abs(m_adv["ndcg@3"] - COAT_ADV_NDCG3) <= COAT_TOL and abs(m_adv["recall@3"] - COAT_ADV_RECALL3) <= COAT_TOL
    ok = lgn_ok and gain_ok
    record(1, "PASS" if ok else "FAIL",
           f"LightGCN NDCG@3={m_lgn['ndcg@3']:.4f} Recall@3={m_lgn['recall@3']:.4f} (band {lgn_ok}); "
           f"AdvDrop NDCG@3={m_adv['ndcg@3']:.4f} Recall@3={m_adv['recall@3']:.4f}; "
           f"gain>={COAT_MIN_GAIN}: {gain_ok}; absolute target band: {target}")
    assert ok


def test_criterion_2_ablation_ordering():
    variants = ("full", "no_pb", "no_pb_no_inv")
    scores = {v: [] for v in variants}
    for seed in range(ABLATION_SEEDS):
        ds = prepare_data(generate_synthetic(SyntheticSpec(seed=seed, **ABLATION_DATA)),
                          make_config(dataset="synthetic", overrides={"seed": str(seed)}))
        ev = holdout_evaluator(ds)
        for v in variants:
            cfg = make_config(dataset="synthetic", ablation=v, overrides={"seed": str(seed)})
            scores[v].append(ev.ranking(ev.scores(train(cfg, ds).model), [20])["ndcg@20"])
    full, no_pb, no_inv = (np.array(scores[v]) for v in variants)
    top = bool(np.all(full > no_pb))
    low = bool(np.all(no_pb > no_inv))
    fmt = lambda a: "[" + " ".join(f"{x:.4f}" for x in a) + "]"
    record(2, "PASS" if top and low else "FAIL",
           f"NDCG@20 per seed full={fmt(full)} no_pb={fmt(no_pb)} no_pb_no_inv={fmt(no_inv)}; "
           f"full>no_pb on {int(np.sum(full > no_pb))}/{ABLATION_SEEDS}, "
           f"no_pb>no_pb_no_inv on {int(np.sum(no_pb > no_inv))}/{ABLATION_SEEDS}")
    assert top and low


def _config_index(plus: np.ndarray, minus: np.ndarray) -> np.ndarray:
    bits = np.concatenate([plus, minus], axis=-1).astype(np.int64)
    return bits @ (1 << np.arange(bits.shape[-1]))


def test_criterion_3_arm_unbiased():
    rng = np.random.default_rng(2024)
    worst = 0.0
    failures = 0
    for _ in range(ARM_INSTANCES):
        n_users, n_items = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pairs = [(u, i) for u in range(n_users) for i in range(n_items)]
        keep = rng.choice(len(pairs), size=min(len(pairs), int(rng.integers(1, ARM_MAX_EDGES + 1))), replace=False)
        g = build_graph([pairs[k] for k in keep], n_users, n_items)
        n = g.n_edges
        model = EmbeddingModel.init(n_users, n_items, 3, 2, rng, std=1.0)
        phi = rng.normal(size=n)
        cu, ci = np.arange(n_users), np.arange(n_items)
        # InfoNCE between the two views for every mask configuration
        table = np.empty(2 ** (2 * n))
        for bits in itertools.product((0, 1), repeat=2 * n):
            b = np.array(bits, dtype=bool)
            table[_config_index(b[:n], b[n:])] = view_invariance(model, g, MaskPair(b[:n], b[n:]), cu, ci, 0.1)
        truth, _ = enumerate_grad(lambda mp, mm: table[_config_index(mp, mm)], phi)
        v1, v2 = rng.random((ARM_SAMPLES, n)), rng.random((ARM_SAMPLES, n))
        gt, lt = arm_mask_pairs(phi, v1, v2)
        samples = arm_gradient(table[_config_index(gt.plus, gt.minus)], table[_config_index(lt.plus, lt.minus)], v1, v2)
        mean = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(ARM_SAMPLES)
        z = np.abs(mean - truth) / np.maximum(se, 1e-300)
        z[(se == 0) & (np.abs(mean - truth) <= 1e-12)] = 0.0
        worst = max(worst, float(z.max()))
        failures += int(np.any(z > ARM_SE_MULT))
    ok = failures == 0
    record(3, "PASS" if ok else "FAIL",
           f"{ARM_INSTANCES} instances, <= {2 * ARM_MAX_EDGES} mask bits, {ARM_SAMPLES} samples; "
           f"worst |mean - exact| = {worst:.2f} SE (limit {ARM_SE_MULT}); failing instances: {failures}")
    assert ok


def test_criterion_4_gradients():
    rng = np.random.default_rng(7)
    worst = {"propagation": 0.0, "bpr": 0.0, "infonce": 0.0, "bias_head": 0.0, "stage1": 0.0}
    for _ in range(GRAD_INSTANCES):
        nu, ni, d = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pairs = [(u, i) for u in range(nu) for i in range(ni) if rng.random() < 0.7] or [(0, 0)]
        g = build_graph(pairs, nu, ni)
        layers = int(rng.integers(0, 4))
        adj = normalize(g, rng.random(g.n_edges) < 0.8)
        w = rng.normal(size=(nu + ni, d))
        c = rng.normal(size=(nu + ni, d))

        def prop_obj(x):
            z = readout(propagate(EmbeddingModel(x, nu, layers), adj))
            return float(np.sum(c * z) + 0.5 * np.sum(z * z))

        tr = propagate(EmbeddingModel(w, nu, layers), adj)
        worst["propagation"] = max(worst["propagation"], rel_err(backward_propagate(tr, c + readout(tr)),
                                                                 central_diff(prop_obj, w.copy())))

        pos, neg = rng.normal(size=5) * 2, rng.normal(size=5) * 2
        _, gp, gn = bpr_loss(pos, neg)
        fd = np.concatenate([central_diff(lambda x: naive_bpr(x, neg), pos.copy()),
                             central_diff(lambda x: naive_bpr(pos, x), neg.copy())])
        worst["bpr"] = max(worst["bpr"], rel_err(np.concatenate([gp, gn]), fd))

        a = int(rng.integers(2, 5))
        vp, vm = rng.normal(size=(a, 3)), rng.normal(size=(a, 3))
        tau = float(rng.choice([0.1, 0.5, 1.0]))
        _, gvp, gvm = infonce_loss(vp, vm, tau)
        fd = np.concatenate([central_diff(lambda x: infonce_loss(x, vm, tau)[0], vp.copy()),
                             central_diff(lambda x: infonce_loss(vp, x, tau)[0], vm.copy())])
        worst["infonce"] = max(worst["infonce"], rel_err(np.concatenate([gvp, gvm]), fd))

        # bias head: exact expected invariance loss (by enumeration) as a function of (w, b).
        # Needs >= 2 nodes per side and d >= 2, otherwise the loss ignores the masks and the
        # gradient is identically zero.
        hu, hi, hd = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
        cells = [(a, b) for a in range(hu) for b in range(hi)]
        small = build_graph([cells[k] for k in rng.choice(len(cells), size=3, replace=False)], hu, hi)
        model = EmbeddingModel(rng.normal(size=(hu + hi, hd)), hu, 1)
        feats = np.concatenate([model.user_embed[small.users], model.item_embed[small.items]], axis=1)
        hp = rng.normal(size=2 * hd + 1) * 0.5
        cu, ci = np.arange(hu), np.arange(hi)
        f = lambda mp, mm: view_invariance(model, small, MaskPair(mp, mm), cu, ci, 0.5)
        expected = lambda p: enumerate_grad(f, feats @ p[:-1] + p[-1])[1]
        g_phi, _ = enumerate_grad(f, feats @ hp[:-1] + hp[-1])
        gw, gb = head_gradient(feats, g_phi)
        worst["bias_head"] = max(worst["bias_head"], rel_err(np.append(gw, gb), central_diff(expected, hp.copy())))

        # full stage-1 objective: BPR on two views plus weighted InfoNCE, through propagation
        adjs = [normalize(g, rng.random(g.n_edges) < 0.7), normalize(g, rng.random(g.n_edges) < 0.7)]
        cu, ci = np.arange(nu), np.arange(ni)
        u, i = g.users, g.items
        j = rng.integers(0, ni, size=g.n_edges)
        lam = float(rng.uniform(0.1, 2.0))

        def s1(x):
            rec, inv, _ = stage1_objective(EmbeddingModel(x, nu, 2), adjs, u, i, j, cu, ci, lam, 0.3)
            return rec + lam * inv

        _, _, grad = stage1_objective(EmbeddingModel(w, nu, 2), adjs, u, i, j, cu, ci, lam, 0.3)
        worst["stage1"] = max(worst["stage1"], rel_err(grad, central_diff(s1, w.copy())))
    ok = all(v < GRAD_REL_TOL for v in worst.values())
    record(4, "PASS" if ok else "FAIL", f"{GRAD_INSTANCES} instances each; worst relative error "
           + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f" (limit {GRAD_REL_TOL:g})")
    assert ok


def test_criterion_5_metric_oracles():
    checked = mismatched = 0
    for n_items in range(1, 6):
        ks = list(range(1, n_items + 1))
        for perm in itertools.permutations(range(n_items)):
            scores = -np.array(perm, dtype=float)[None, :]
            ranked = sorted(range(n_items), key=lambda it: perm[it])
            for mask in range(1, 2 ** n_items):
                rel = {it for it in range(n_items) if mask >> it & 1}
                relevant = np.array([[it in rel for it in range(n_items)]])
                res = evaluate_ranking(scores, np.zeros_like(relevant), relevant, ks)
                for k in ks:
                    checked += 2
                    mismatched += abs(res[f"ndcg@{k}"] - brute_ndcg(ranked, rel, k)) > METRIC_EXACT
                    mismatched += abs(res[f"recall@{k}"] - brute_recall(ranked, rel, k)) > METRIC_EXACT
    rng = np.random.default_rng(5)
    for side in ("user", "item"):
        for n in range(2, 6):
            for m in range(1, 6):
                scores = rng.normal(size=(n, m) if side == "user" else (m, n))
                for labels in itertools.product([-1, 0, 1, 2], repeat=n):
                    labels = np.array(labels)
                    table = AttributeTable("a", side, labels)
                    if len(table.domain) < 2:
                        continue
                    checked += 1
                    mismatched += abs(prediction_bias(scores, table)
                                      - brute_prediction_bias(scores, labels, side)) > METRIC_EXACT
    ok = mismatched == 0
    record(5, "PASS" if ok else "FAIL", f"{checked} exhaustive comparisons up to 5x5; mismatches: {mismatched} "
           f"(float tolerance {METRIC_EXACT:g})")
    assert ok


def test_criterion_6_pb_trend():
    require_coat(6)
    held = 0
    lines = []
    for seed in range(PB_SEEDS):
        ds, res = coat_run("full", seed)
        g = build_graph(ds.train, ds.n_users, ds.n_items)
        p_b = bias_probabilities(res.head, res.model, g)
        means = group_means(p_b, popularity_groups(g).labels[g.items], 4)
        monotone = bool(np.all(np.diff(means) >= 0))
        only_top = bool(means[3] > 0.5 and np.all(means[:3] <= 0.5))
        if monotone and only_top:
            held += 1
        else:
            warnings.warn(f"P_B trend violated on seed {seed}: {np.round(means, 3)}")
        lines.append(f"seed {seed}: {np.round(means, 3).tolist()}")
    ok = held >= PB_MIN_HOLD
    record(6, "PASS" if ok else "FAIL", f"trend held on {held}/{PB_SEEDS} seeds (need {PB_MIN_HOLD}); " + "; ".join(lines))
    assert ok


def test_criterion_7_prediction_bias():
    require_coat(7)
    ds, lgn = coat_run("lightgcn")
    _, adv = coat_run("full")
    ev = holdout_evaluator(ds)
    if "item_color" not in ev.attributes:
        record(7, "BLOCKED", "Coat item features (color) missing from the data directory")
        pytest.skip("no item color attribute")
    b_lgn = ev.biases(ev.scores(lgn.model))["item_color"]
    b_adv = ev.biases(ev.scores(adv.model))["item_color"]
    ok = b_adv <= BIAS_RATIO * b_lgn
    record(7, "PASS" if ok else "FAIL",
           f"item color prediction bias AdvDrop={b_adv:.4f} LightGCN={b_lgn:.4f} (gate ratio {BIAS_RATIO})")
    assert ok


def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "syn"
    save_bundle(generate_synthetic(SyntheticSpec(seed=0, **ABLATION_DATA)), data)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["train", "--data", str(data), "--dataset", "synthetic", "--set", "seed=3",
                         "--set", "max_rounds=3", "--out", str(out)]) == 0
        outs.append((out / "history.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    record(8, "PASS" if ok else "FAIL", f"two seeded CLI runs, history.csv {len(outs[0])} bytes, "
           f"byte-identical: {outs[0] == outs[1]}")
    assert ok
