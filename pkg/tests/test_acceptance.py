"""End-to-end acceptance checks, one test per criterion."""
import math
import time
import warnings

import numpy as np

from collabinfer.cli import client_models, fairness_cell, resolve_config
from collabinfer.ensemble import (
    centered_covariance,
    entropy_weights,
    principal_eigenvector,
    run_ensemble_inference,
    weights_from_instability,
)
from collabinfer.escrow import CompletionProof, EscrowLedger, generate_keypair, replay, sign_completion
from collabinfer.errors import (
    AlreadyCompleted,
    BadSignature,
    DuplicateJob,
    EscrowReject,
    NotClient,
    ZeroDeposit,
)
from collabinfer.fixedpoint import DEFAULT_PARAMS, RingParams, decode, encode
from collabinfer.incentive import fairness, reward_uniform
from collabinfer.nn import accuracy, build_model, forward, load_digits_dataset, train_test_split
from collabinfer.pipeline import PHASES, FaultPlan, run_job, setup_deployment
from collabinfer.secure_nn import ApproxConfig, provision, relu, reveal, secure_forward, secure_softmax, share_input
from collabinfer.sharing import Dealer, SharedTensor, matmul, reconstruct, share
from collabinfer.transport import PRESET_ORDER, Transport, load_preset

F = DEFAULT_PARAMS.frac_bits


def test_share_round_trip(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    bad = 0
    for i in range(10_000):
        parties = 2 + i % 4
        x = rng.integers(0, 2**64 - 1, size=rng.integers(1, 9, size=2), dtype=np.uint64, endpoint=True)
        bad += not np.array_equal(reconstruct(share(x, parties, rng)), x)
    elapsed = time.perf_counter() - start
    criterion(1, bad == 0 and elapsed < 5.0, f"share round-trip: {bad} mismatches in 10000, {elapsed:.2f}s")


def test_beaver_matmul(criterion):
    rng = np.random.default_rng(2)
    t, d = Transport(3), Dealer(3, seed=2)
    inexact = over_tol = wrong_rounds = 0
    worst = 0.0
    for _ in range(1000):
        m, n, p = rng.integers(1, 17, size=3)
        x, w = rng.uniform(-1, 1, (m, n)), rng.uniform(-1, 1, (n, p))
        ex, ew = encode(x), encode(w)
        before = t.ledger.rounds
        out = matmul(SharedTensor.from_shares(share(ex, 3, rng), F), SharedTensor.from_shares(share(ew, 3, rng), F), d, t)
        wrong_rounds += t.ledger.rounds - before != 1
        ring = np.array(ex.astype(object).dot(ew.astype(object)) % 2**64, dtype=np.uint64)
        inexact += not np.array_equal(out.reconstruct(), ring)
        err = np.max(np.abs(decode(out.reconstruct(), frac_bits=out.frac) - x @ w))
        worst = max(worst, err / (n * 2.0 ** (-F + 1)))
        over_tol += err > n * 2.0 ** (-F + 1)
    criterion(2, inexact == over_tol == wrong_rounds == 0,
              f"beaver matmul: {inexact} ring mismatches, {over_tol} over tolerance "
              f"(worst {worst:.3f} of bound), {wrong_rounds} calls not 1 round")


def test_small_mlp_forward(criterion):
    rng = np.random.default_rng(3)
    m = build_model("small_mlp", seed=3)
    start = time.perf_counter()
    t, d = Transport(3), Dealer(3, seed=3)
    x = rng.uniform(-1, 1, (200, 3072))
    out = reveal(secure_forward(provision(m, 3, rng), share_input(x, 3, rng), t, d), t)
    elapsed = time.perf_counter() - start
    ref = forward(m, x)
    err = float(np.max(np.abs(out - ref)))
    agree = float(np.mean(out.argmax(1) == ref.argmax(1)))
    ok = m.num_params == 789_258 and err <= 0.05 and agree >= 0.99 and elapsed < 120
    criterion(3, ok, f"small_mlp ({m.num_params} params): max error {err:.2e}, argmax agreement {agree:.3f}, "
                     f"{elapsed:.1f}s")


def _r_squared(xs, ys):
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    slope, icpt = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + icpt)
    return 1 - resid @ resid / np.sum((ys - ys.mean()) ** 2)


def test_round_complexity(criterion):
    rng = np.random.default_rng(4)
    t, d = Transport(3), Dealer(3, seed=4)
    x = share_input(rng.uniform(-1, 1, (4, 8)), 3, rng)
    w = share_input(rng.uniform(-1, 1, (8, 5)), 3, rng)
    h = matmul(x, w, d, t)
    fc = t.ledger.rounds
    h + share_input(rng.uniform(size=(4, 5)), 3, rng).rescale(h.frac)
    h.add_public(0.5)
    add = t.ledger.rounds - fc

    ells, relu_rounds = [16, 32, 64], []
    for ell in ells:
        params = RingParams(comparison_bitlength=ell)
        tr = Transport(3)
        relu(share_input(rng.normal(size=(2, 3)), 3, rng), tr, Dealer(3, params=params, seed=ell))
        relu_rounds.append(tr.ledger.rounds)

    iters, soft_rounds = [6, 7, 8, 9, 10], []
    for n in iters:
        ts = Transport(3)
        secure_softmax(share_input(rng.uniform(-4, 4, (2, 10)), 3, rng),
                       ApproxConfig(exp_iterations=n, input_clamp=(-4, 4)), ts, Dealer(3, seed=n))
        soft_rounds.append(ts.ledger.rounds)
    r2_relu, r2_soft = _r_squared(ells, relu_rounds), _r_squared(iters, soft_rounds)
    ok = fc == 1 and add == 0 and r2_relu >= 0.99 and r2_soft >= 0.99
    criterion(4, ok, f"rounds: FC={fc}, add/bias={add}, ReLU {relu_rounds} over ell {ells} (R2 {r2_relu:.4f}), "
                     f"softmax {soft_rounds} over iterations {iters} (R2 {r2_soft:.4f})")


def test_latency_presets(criterion):
    m = build_model("small_mlp", seed=5)
    x = np.random.default_rng(5).uniform(-1, 1, (1, 3072))
    elapsed = []
    for name in PRESET_ORDER:
        rng = np.random.default_rng(5)
        t = Transport(3, load_preset(name))
        reveal(secure_forward(provision(m, 3, rng), share_input(x, 3, rng), t, Dealer(3, seed=5)), t)
        elapsed.append(t.ledger.simulated_elapsed_ms)
    increasing = all(a < b for a, b in zip(elapsed, elapsed[1:]))
    ratio = elapsed[PRESET_ORDER.index("inter_continent")] / elapsed[PRESET_ORDER.index("intra_zone")]
    criterion(5, increasing and ratio > 100,
              "presets elapsed ms " + ", ".join(f"{n}={e:.1f}" for n, e in zip(PRESET_ORDER, elapsed))
              + f"; inter_continent/intra_zone = {ratio:.0f}x")


def test_ensemble_cost_ordering(criterion, tiny_models):
    models, test_set = tiny_models
    x = test_set.inputs[:8]
    costs = {}
    for scheme in ("soft_uniform", "entropy", "spectral", "tta"):
        res = run_ensemble_inference(models, x, scheme, "secure", transport=Transport(3),
                                     image_shape=test_set.image_shape, seed=6)
        costs[scheme] = (res.ledger["rounds"], res.ledger["bytes_total"])
    order = list(costs.values())
    ok = all(a[0] < b[0] and a[1] < b[1] for a, b in zip(order, order[1:]))
    criterion(6, ok, "ensemble cost (rounds, bytes): " + ", ".join(f"{k}={v}" for k, v in costs.items()))


def test_weighting_closed_forms(criterion):
    w_ent = entropy_weights(np.stack([np.eye(10)[0], np.full(10, 0.1)]), beta=1.0).w[0]
    w_tta = weights_from_instability(np.array([0.0, math.log(3)]), gamma=1.0).w
    rng = np.random.default_rng(7)
    worst = 1.0
    for _ in range(100):
        c = centered_covariance(rng.uniform(size=(5, 200)))
        v = principal_eigenvector(c)
        ref = np.linalg.eigh(c)[1][:, -1]
        worst = min(worst, abs(v @ ref) / (np.linalg.norm(v) * np.linalg.norm(ref)))
    ok = abs(w_ent - 10 / 11) <= 1e-9 and np.all(np.abs(w_tta - [0.25, 0.75]) <= 1e-9) and worst >= 0.999
    criterion(7, ok, f"entropy weight {w_ent:.12f} (10/11), tta weights {w_tta.round(12).tolist()}, "
                     f"worst spectral cosine {worst:.6f}")


def test_fairness_metric(criterion):
    vals = [fairness([0.3, 0.7], [0.3, 0.7]), fairness([1, 0], [0, 1]), fairness([0.5, 0.5], [0.6, 0.4])]
    uni = reward_uniform(5).r
    ok = (abs(vals[0] - 1) <= 1e-9 and abs(vals[1]) <= 1e-9 and abs(vals[2] - 0.9) <= 1e-9
          and np.all(np.abs(uni - 0.2) <= 1e-9))
    criterion(8, ok, f"fairness values {vals}, uniform K=5 {uni.tolist()}")


def test_fairness_trend(criterion):
    start = time.perf_counter()
    cfg = resolve_config("fairness-sweep", {}, {"seed": "0"})
    means = {}
    for alpha in (0.05, 1000.0):
        per_scheme = {}
        for seed in range(10):
            for row in fairness_cell(cfg, alpha, 5, seed):
                per_scheme.setdefault(row["scheme"], []).append(row["fairness"])
        means[alpha] = {k: float(np.mean(v)) for k, v in per_scheme.items()}
    elapsed = time.perf_counter() - start
    ok = all(means[1000.0][s] > means[0.05][s] for s in means[0.05]) and elapsed < 600
    detail = ", ".join(f"{s}: {means[0.05][s]:.3f} -> {means[1000.0][s]:.3f}" for s in means[0.05])
    criterion(9, ok, f"mean fairness alpha 0.05 -> 1000 over 10 seeds, K=5: {detail}; {elapsed:.1f}s")


def test_soft_voting_beats_single_models_under_iid(criterion):
    cfg = resolve_config("ensemble-sweep", {}, {"seed": "0"})
    results = {}
    for k in (3, 5):
        soft, single = [], []
        for seed in range(3):
            models, _, test_set = client_models(cfg, 1000.0, k, seed)
            pred = run_ensemble_inference(models, test_set.inputs, "soft", seed=seed).prediction
            soft.append(np.mean(pred == test_set.labels))
            single.append(np.mean([accuracy(m, test_set) for m in models]))
        results[k] = (float(np.mean(soft)), float(np.mean(single)))
    ok = all(s >= a for s, a in results.values())
    criterion(10, ok, "alpha=1000 soft vs single avg: "
                      + ", ".join(f"K={k}: {s:.4f} vs {a:.4f}" for k, (s, a) in results.items()))


def test_escrow(criterion):
    names = ["p0", "p1", "p2"]
    keys = {n: generate_keypair(n.encode()) for n in names}

    def proof(job_id, client, forge=None):
        return CompletionProof([sign_completion(keys[names[(i + 1) % 3] if i == forge else n], job_id, client)
                                for i, n in enumerate(names)])

    ledger = EscrowLedger()
    for acct in ("alice", "bob"):
        ledger.mint(acct, 50_000)
    for n in names:
        ledger.register_key(n, keys[n].public)

    hit = set()
    ledger.create_job(b"a", "alice", names, 9)
    for exc, action in [
        (DuplicateJob, lambda: ledger.create_job(b"a", "alice", names, 9)),
        (ZeroDeposit, lambda: ledger.create_job(b"b", "alice", names, 0)),
        (NotClient, lambda: ledger.complete_job(b"a", "bob", proof(b"a", "alice"))),
        (BadSignature, lambda: ledger.complete_job(b"a", "alice", proof(b"a", "alice", forge=2))),
    ]:
        try:
            action()
        except exc:
            hit.add(exc.__name__)
    ledger.complete_job(b"a", "alice", proof(b"a", "alice"))
    try:
        ledger.complete_job(b"a", "alice", proof(b"a", "alice"))
    except AlreadyCompleted:
        hit.add("AlreadyCompleted")

    rng = np.random.default_rng(11)
    total = ledger.total_currency
    violations = 0
    open_jobs = []
    for step in range(10_000):
        try:
            if rng.random() < 0.5 or not open_jobs:
                jid = int(rng.integers(0, 3000)).to_bytes(2, "little")
                client = ("alice", "bob")[int(rng.integers(0, 2))]
                ledger.create_job(jid, client, names, int(rng.integers(0, 30)))
                open_jobs.append((jid, client))
            else:
                jid, client = open_jobs[int(rng.integers(0, len(open_jobs)))]
                caller = client if rng.random() < 0.9 else "mallory"
                forge = int(rng.integers(0, 3)) if rng.random() < 0.1 else None
                ledger.complete_job(jid, caller, proof(jid, client, forge))
        except EscrowReject:
            pass
        violations += ledger.total_currency != total or min(ledger.balances.values()) < 0
    replayed = replay(ledger.journal).state_digest() == ledger.state_digest()
    ok = len(hit) == 5 and violations == 0 and replayed
    criterion(11, ok, f"escrow: rejects covered {sorted(hit)}, {violations} conservation violations in 10000 ops, "
                      f"replay {'identical' if replayed else 'diverged'}")


def test_fail_stop(criterion, tiny_models):
    models, test_set = tiny_models
    rng = np.random.default_rng(12)
    good = 0
    x = test_set.inputs[:2]
    for trial in range(100):
        dep = setup_deployment(3, funds=100, seed=trial)
        fault = FaultPlan(int(rng.integers(1, 6)), int(rng.integers(0, 3)), int(rng.integers(0, 300)))
        scheme = ("soft", "entropy", "hard")[trial % 3]
        out = run_job(models, x, dep, b"job", 9, scheme, seed=trial, fault=fault)
        job = dep.ledger.jobs.get(b"job")
        unsettled = job is None or not job.completed
        good += out.status == "aborted" and out.prediction is None and unsettled and not out.payouts
    criterion(12, good == 100, f"fail-stop: {good}/100 injected aborts left no output and an unsettled job")
