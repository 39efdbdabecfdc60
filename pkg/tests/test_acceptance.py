"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line (run with ``pytest -s tests/test_acceptance.py`` to watch them live).

Oracles here are independent of the code paths they check: finite
differences for every gradient, brute-force enumeration for assignments and
neighbors, literal formula evaluation for the dispersion ratio, and frozen
raw-feature baselines (derived before the training loop was tuned) for the
improvement properties.
"""

import itertools
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner
from conftest import fd_gradcheck, unit_rows

from fsgcd import losses
from fsgcd.affinity import nearest_neighbors
from fsgcd.cli import main as cli_main
from fsgcd.config import resolve_config
from fsgcd.data import SyntheticConfig, generate_split, make_synthetic
from fsgcd.encoder import (TRAINABLE_FIELDS, EncoderConfig, encode,
                           encode_backward, encode_with_cache,
                           init_encoder_params)
from fsgcd.evaluate import ch_index, cluster_accuracy, hungarian, kmeans
from fsgcd.pipeline import run_eval, run_train

GRAD_TOL = 1e-4
N_GRAD_INSTANCES = 100


def _report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[ACCEPTANCE] {name}: {status}{suffix}")


# --- 1. gradient suite ---------------------------------------------------------

def test_gradient_suite_all_losses_and_encoder():
    start = time.time()
    rng = np.random.default_rng(2024)
    worst: dict[str, float] = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(N_GRAD_INSTANCES):
        dim = int(rng.integers(3, 7))

        a, p, n = unit_rows(rng, 3, dim)
        _, (da, dp, dn) = losses.triplet_loss(a, p, n, 0.3)
        track("triplet", fd_gradcheck(
            lambda: losses.triplet_loss(a, p, n, 0.3)[0], [a, p, n], [da, dp, dn]))

        b = int(rng.integers(6, 9))
        emb = unit_rows(rng, b, dim)
        labels = rng.integers(0, 3, size=b)
        labels[:3] = [0, 0, 1]  # guarantee a positive pair and a negative
        seed = int(rng.integers(1 << 31))
        _, d_emb, _ = losses.known_triplet_loss(emb, labels, 0.3,
                                                np.random.default_rng(seed))
        track("known_triplet", fd_gradcheck(
            lambda: losses.known_triplet_loss(emb, labels, 0.3,
                                              np.random.default_rng(seed))[0],
            [emb], [d_emb]))

        mixed = labels.copy()
        mixed[3:] = [rng.choice([-1, 1, 2]) for _ in range(b - 3)]
        _, d_emb, _ = losses.affinity_supervised_loss(emb, mixed, 0.07)
        track("affinity_supervised", fd_gradcheck(
            lambda: losses.affinity_supervised_loss(emb, mixed, 0.07)[0],
            [emb], [d_emb]))

        u = int(rng.integers(2, b))
        upos = np.sort(rng.choice(b, size=u, replace=False))
        partners = unit_rows(rng, u, dim)
        _, d_e, d_p, _ = losses.knowledge_transfer_loss(
            emb, upos, partners, 0.3, np.random.default_rng(seed))
        track("knowledge_transfer", fd_gradcheck(
            lambda: losses.knowledge_transfer_loss(
                emb, upos, partners, 0.3, np.random.default_rng(seed))[0],
            [emb, partners], [d_e, d_p]))

        stacks = [unit_rows(rng, u, dim) for _ in range(4)]
        _, grads = losses.affinity_loss(*stacks)
        track("affinity", fd_gradcheck(
            lambda: losses.affinity_loss(*stacks)[0], stacks, list(grads)))

        views = unit_rows(rng, b, dim)
        _, d_e, d_v = losses.unsupervised_contrastive_loss(emb, views, 1.0)
        track("unsupervised_contrastive", fd_gradcheck(
            lambda: losses.unsupervised_contrastive_loss(emb, views, 1.0)[0],
            [emb, views], [d_e, d_v]))

        member = unit_rows(rng, b, dim)
        view = unit_rows(rng, b, dim)
        partner = unit_rows(rng, b, dim)
        partner_view = unit_rows(rng, b, dim)
        is_labeled = np.zeros(b, dtype=bool)
        is_labeled[:3] = True
        member_labels = np.where(is_labeled, labels, -1)
        member_labels[3] = 1  # one pseudo-labeled member
        partner_labels = np.where(rng.random(b) < 0.5, rng.integers(0, 3, b), -1)
        cfg = losses.LossConfig()
        _, grads, _, _ = losses.total_loss(
            member, view, partner, partner_view, member_labels, is_labeled,
            partner_labels, cfg, np.random.default_rng(seed))
        track("total", fd_gradcheck(
            lambda: losses.total_loss(
                member, view, partner, partner_view, member_labels, is_labeled,
                partner_labels, cfg, np.random.default_rng(seed))[0],
            [member, view, partner, partner_view], list(grads)))

        # encoder backward through adapter + head + normalization
        enc = init_encoder_params(
            EncoderConfig(input_dim=5, adapter_dim=2, head_hidden=6, embed_dim=4),
            rng)
        for name in TRAINABLE_FIELDS:
            getattr(enc, name)[...] += rng.normal(0, 0.3, getattr(enc, name).shape)
        x = rng.normal(size=(3, 5))
        r = rng.normal(size=(3, 4))
        _, cache = encode_with_cache(x, enc)
        enc_grads = encode_backward(cache, r)
        track("encoder", fd_gradcheck(
            lambda: float((encode(x, enc) * r).sum()),
            [getattr(enc, name) for name in TRAINABLE_FIELDS],
            [getattr(enc_grads, name) for name in TRAINABLE_FIELDS]))

    elapsed = time.time() - start
    ok = all(err <= GRAD_TOL for err in worst.values()) and elapsed < 60.0
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    _report("gradient-suite", ok, f"{N_GRAD_INSTANCES} instances each, "
                                  f"{elapsed:.1f}s, worst: {detail}")
    assert elapsed < 60.0
    for name, err in worst.items():
        assert err <= GRAD_TOL, f"{name} gradient error {err:.3e}"


# --- 2. assignment oracle ------------------------------------------------------

def test_hungarian_brute_force_oracle():
    start = time.time()
    rng = np.random.default_rng(7)
    perm_cache = {k: np.array(list(itertools.permutations(range(k)))) for k in range(2, 8)}
    for _ in range(200):
        k = int(rng.integers(2, 8))
        cost = rng.normal(size=(k, k)) * 10
        _, total = hungarian(cost)
        perms = perm_cache[k]
        brute = cost[np.arange(k)[None, :], perms].sum(axis=1).min()
        assert total == pytest.approx(brute, rel=1e-12, abs=1e-12)
    elapsed = time.time() - start
    _report("hungarian-oracle", elapsed < 5.0, f"200 matrices, {elapsed:.2f}s")
    assert elapsed < 5.0


# --- 3. neighbor oracle --------------------------------------------------------

def test_affinity_brute_force_oracle():
    start = time.time()
    rng = np.random.default_rng(11)
    for trial in range(50):
        n = int(rng.integers(20, 501))
        emb = unit_rows(rng, n, 8)
        ids = rng.permutation(n)
        n_lab = int(rng.integers(1, max(2, n // 3)))
        labeled = np.sort(ids[:n_lab])
        unlabeled = np.sort(ids[n_lab:])
        nn_of, _ = nearest_neighbors(emb, labeled, unlabeled)

        sims = emb @ emb.T
        labeled_set = set(labeled.tolist())
        for i in range(n):
            if i in labeled_set:
                pool = unlabeled
            else:
                pool = np.concatenate([np.arange(i), np.arange(i + 1, n)])
            assert nn_of[i] == pool[np.argmax(sims[i, pool])]
    elapsed = time.time() - start
    _report("affinity-oracle", elapsed < 10.0, f"50 sets up to n=500, {elapsed:.2f}s")
    assert elapsed < 10.0


# --- 4. dispersion-ratio oracle ------------------------------------------------

def _ch_direct(x, assignment):
    # literal formula evaluation, scalar loops only
    n, dim = x.shape
    clusters = sorted(set(int(c) for c in assignment))
    k = len(clusters)
    mean = [sum(x[i][j] for i in range(n)) / n for j in range(dim)]
    tr_b = 0.0
    tr_w = 0.0
    for c in clusters:
        members = [i for i in range(n) if assignment[i] == c]
        centroid = [sum(x[i][j] for i in members) / len(members) for j in range(dim)]
        tr_b += len(members) * sum((centroid[j] - mean[j]) ** 2 for j in range(dim))
        for i in members:
            tr_w += sum((x[i][j] - centroid[j]) ** 2 for j in range(dim))
    return (tr_b / (k - 1)) / (tr_w / (n - k))


def test_ch_index_oracle_and_invariances():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(10, 40))
        x = rng.normal(size=(n, 4))
        assignment = rng.integers(0, 3, size=n)
        if np.unique(assignment).size < 2:
            continue
        ours = ch_index(x, assignment)
        direct = _ch_direct(x, assignment)
        worst = max(worst, abs(ours - direct) / abs(direct))

        base = ch_index(x, assignment)
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        for transformed in (x @ q, x + 3.7, x * 2.5):
            err = abs(ch_index(transformed, assignment) - base) / abs(base)
            worst = max(worst, err)
    _report("ch-index-oracle", worst <= 1e-9, f"worst rel err {worst:.2e}")
    assert worst <= 1e-9


# --- 5. separable recovery -----------------------------------------------------

def test_separable_instance_recovered_exactly(tmp_path):
    start = time.time()
    cfg = resolve_config(preset="synthetic-smoke", overrides={"seed": 0})
    assert cfg.values["synthetic_separation"] >= 10.0
    assert cfg.values["synthetic_classes"] == 20
    assert cfg.values["synthetic_dim"] == 32
    assert cfg.values["synthetic_samples_per_class"] == 50
    assert cfg.c_l == 0.2 and cfg.p_l == 0.1
    summary = run_train(cfg, out_dir=str(tmp_path / "run"))
    best_all = max(r["acc_all"] for r in summary["metrics"])
    elapsed = time.time() - start
    ok = best_all == 1.0 and elapsed < 180.0
    _report("separable-recovery", ok, f"best acc_all={best_all:.4f}, {elapsed:.1f}s")
    assert elapsed < 180.0
    assert best_all == 1.0


# --- 6. improvement over the raw-feature baseline ------------------------------

# Raw-feature baselines on the moderate instance (20 classes, 32-dim,
# separation 3, 25/class, split c_l=0.2/p_l=0.1, k-means seed = data seed),
# frozen before the training loop was calibrated.
RAW_BASELINE = {
    0: (0.9324, 184.8),
    1: (0.9365, 187.2),
    2: (0.9385, 155.2),
    3: (1.0000, 219.1),
    4: (0.9426, 186.9),
}


def _moderate_instance(seed):
    fs = make_synthetic(SyntheticConfig(class_count=20, samples_per_class=25,
                                        dim=32, class_separation=3.0, seed=seed))
    split = generate_split(fs, 0.2, 0.1, seed=seed)
    return fs, split


def test_improvement_property_over_raw_baseline(tmp_path):
    seeds = sorted(RAW_BASELINE)
    acc_wins = 0
    ch_wins = 0
    rows = []
    for seed in seeds:
        fs, split = _moderate_instance(seed)
        ids = split.unlabeled_ids
        km = kmeans(fs.features[ids], fs.class_count, seed=seed)
        raw_acc, _, _, _ = cluster_accuracy(km.assignment, fs.labels[ids],
                                            split.known_classes,
                                            n_classes=fs.class_count,
                                            n_clusters=fs.class_count)
        raw_ch = ch_index(fs.features[ids], km.assignment)
        frozen_acc, frozen_ch = RAW_BASELINE[seed]
        assert raw_acc == pytest.approx(frozen_acc, abs=5e-5)
        assert raw_ch == pytest.approx(frozen_ch, abs=0.05)

        cfg = resolve_config(preset="synthetic-moderate", overrides={"seed": seed})
        summary = run_train(cfg, out_dir=str(tmp_path / f"run{seed}"))
        rec = run_eval(summary["features"], summary["split"],
                       summary["best_checkpoint"], seed=seed)
        acc_wins += rec["acc_all"] >= frozen_acc
        ch_wins += rec["ch_index"] > frozen_ch
        rows.append((seed, round(rec["acc_all"], 4), round(rec["ch_index"], 1)))
    ok = acc_wins > len(seeds) / 2 and ch_wins > len(seeds) / 2
    _report("improvement-property", ok,
            f"acc wins {acc_wins}/{len(seeds)}, ch wins {ch_wins}/{len(seeds)}, {rows}")
    assert acc_wins > len(seeds) / 2
    assert ch_wins > len(seeds) / 2


# --- 7. ablation direction ------------------------------------------------------

def test_ablation_direction_is_non_decreasing(tmp_path):
    ladder = [
        ("ucl-only", {"stage1_epochs": 0, "components": ""}),
        ("+stage1", {"components": ""}),
        ("+asl+ktl", {"components": "asl,ktl"}),
        ("+al", {"components": "asl,ktl,al"}),
    ]
    seeds = [0, 1, 2, 3, 4]
    medians = []
    for step, (name, overrides) in enumerate(ladder):
        accs = []
        for seed in seeds:
            cfg = resolve_config(preset="synthetic-moderate",
                                 overrides={"seed": seed, **overrides})
            out = str(tmp_path / f"{step}_{seed}")
            summary = run_train(cfg, out_dir=out)
            rec = run_eval(summary["features"], summary["split"],
                           summary["best_checkpoint"], seed=seed)
            accs.append(rec["acc_all"])
        medians.append(float(np.median(accs)))
    monotone = all(b >= a for a, b in zip(medians, medians[1:]))
    _report("ablation-direction", monotone,
            "medians " + " -> ".join(f"{m:.4f}" for m in medians))
    assert monotone, f"medians not non-decreasing: {medians}"


# --- 8. determinism -------------------------------------------------------------

def test_cmd_train_is_bit_reproducible(tmp_path):
    runner = CliRunner()
    outs = []
    for name in ("d1", "d2"):
        out_dir = str(tmp_path / name)
        result = runner.invoke(cli_main, [
            "train", "--preset", "synthetic-smoke", "--seed", "7",
            "--out-dir", out_dir], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        outs.append(out_dir)
    pairs = [("metrics.jsonl", True), ("trainlog.jsonl", True),
             ("final.fsgp", True), ("best.fsgp", True)]
    same = {}
    for fname, _ in pairs:
        a = open(f"{outs[0]}/{fname}", "rb").read()
        b = open(f"{outs[1]}/{fname}", "rb").read()
        same[fname] = a == b
    ok = all(same.values())
    _report("determinism", ok, ", ".join(f"{k}={'=' if v else '!='}"
                                         for k, v in same.items()))
    assert ok
    # the metrics stream is valid JSON lines with the config echoed first
    first = json.loads(open(f"{outs[0]}/metrics.jsonl").readline())
    assert first["type"] == "config"
    assert first["values"]["seed"] == 7
