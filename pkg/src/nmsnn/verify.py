"""Self-contained oracle checks, runnable from the command line.

Each suite returns a list of ``Check`` rows. A suite never reads or writes
files; everything it needs is generated from a seed.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import comb, softmax

from .eid import BlockTargets, eid_loss
from .masks import (
    AnnealSchedule,
    BlockLogits,
    MaskConfig,
    anneal_tau,
    compose_mask,
    enumerate_mask_space,
    expected_loss_enumeration,
    finalize_hard_masks,
    gumbel_draw,
    prob_sum,
    straight_through,
    verify_representation,
)
from .oracles import central_difference, relative_error, relaxed_network_loss, scalar_lif_reference
from .snn import LIFParams, backward_network, cross_entropy_over_time, forward_network, init_network, simulate_layer

__all__ = ["Check", "SUITES", "run_suites", "format_table"]

GRAD_TOL = 1e-4
EID_TOL = 1e-6
REPRESENTATION_CASES = ((1, 2), (1, 4), (2, 4), (2, 8), (3, 5))


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def representation(seed: int = 0) -> list[Check]:
    out = []
    for n, m in REPRESENTATION_CASES:
        t0 = time.perf_counter()
        cfg = MaskConfig(n, m)
        ok = verify_representation(cfg)
        size = len(enumerate_mask_space(cfg))
        want = int(sum(comb(m, k, exact=True) for k in range(1, n + 1)))
        out.append(Check("representation", f"{n}:{m}", ok and size == want,
                         f"|space|={size} expected {want}", time.perf_counter() - t0))
    # 2:16 is too big for the brute-force pass: sample tuples and check both
    # directions by popcount class
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    eye = np.eye(16)
    ok = True
    for _ in range(2000):
        a, b = rng.integers(0, 16, size=2)
        bits = compose_mask([eye[a], eye[b]])
        ok &= bits.sum() == (1 if a == b else 2)
    for k in (1, 2):
        idx = rng.choice(16, size=k, replace=False)
        target = np.zeros(16)
        target[idx] = 1
        tup = list(idx) + [idx[0]] * (2 - k)
        ok &= np.array_equal(compose_mask([eye[i] for i in tup]), target)
    out.append(Check("representation", "2:16 sampled", bool(ok), "popcount classes 1 and 2",
                     time.perf_counter() - t0))
    return out


def lif(seed: int = 0, trials: int = 20) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    spikes_equal = True
    for _ in range(trials):
        n, m, T = rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 6)
        p = LIFParams(leak_alpha=float(rng.uniform(0.2, 1.0)), v_threshold=float(rng.uniform(0.3, 1.5)))
        w = rng.normal(size=(n, m))
        x = (rng.random((T, m)) < 0.5).astype(float)
        tr = simulate_layer(w, x[None], p)
        pre, spk = scalar_lif_reference(w.tolist(), x.tolist(), p)
        worst = max(worst, float(np.max(np.abs(tr.pre_reset[0] - np.array(pre)))))
        spikes_equal &= np.array_equal(tr.spikes[0], np.array(spk))
    ok = spikes_equal and worst < 1e-12
    return [Check("lif", "scalar reference", bool(ok), f"max |du|={worst:.2e}", time.perf_counter() - t0)]


def _random_net(rng):
    T = int(rng.integers(1, 6))
    sizes = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 4)))] + [int(rng.integers(2, 5))]
    p = LIFParams(
        leak_alpha=float(rng.uniform(0.3, 1.0)),
        v_threshold=float(rng.uniform(0.3, 1.2)),
        surrogate_width=0.25,
    )
    net = init_network(sizes, p, rng)
    for w in net.layers:
        w *= 3.0  # enough drive that most layers spike
    B = int(rng.integers(1, 4))
    x = (rng.random((B, T, sizes[0])) < 0.5).astype(float)
    y = rng.integers(0, sizes[-1], size=B)
    return net, x, y


def gradcheck(seed: int = 0, nets: int = 100) -> list[Check]:
    """Analytic STBP gradients against central differences of the relaxed forward."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(nets):
        net, x, y = _random_net(rng)
        fwd = forward_network(net, x)
        g = backward_network(net, fwd, y)

        def f():
            return relaxed_network_loss(net, x, y, net.layers, fwd)

        # error over the net's whole gradient vector: a layer whose surrogate
        # underflows has an exactly-zero gradient that finite differences
        # only resolve to rounding noise
        analytic = np.concatenate([*(a.ravel() for a in g.layers), g.readout.ravel()])
        numeric = np.concatenate([*(central_difference(f, w).ravel() for w in net.layers),
                                  central_difference(f, net.readout).ravel()])
        worst = max(worst, relative_error(analytic, numeric))
    return [Check("gradcheck", f"{nets} random nets", worst < GRAD_TOL,
                  f"max rel err {worst:.2e} < {GRAD_TOL:g}", time.perf_counter() - t0)]


def sampler(seed: int = 0, draws: int = 100_000) -> list[Check]:
    """Hard-draw frequencies against softmax(theta) by chi-square."""
    rng = np.random.default_rng(seed)
    out = []
    for M in (2, 4, 8):
        t0 = time.perf_counter()
        theta = rng.normal(size=M)
        lg = BlockLogits(np.tile(theta, (draws, 1)))
        s = gumbel_draw(lg, rng, 1.0, 1)
        counts = s.hard[:, 0, :].sum(axis=0)
        expected = softmax(theta) * draws
        p = stats.chisquare(counts, expected).pvalue
        out.append(Check("sampler", f"M={M}", bool(p > 0.01), f"chi-square p={p:.3f}", time.perf_counter() - t0))
    t0 = time.perf_counter()
    lg = BlockLogits(rng.normal(size=(64, 4)))
    s = gumbel_draw(lg, rng, 1e-4, 2)
    gap = float(np.max(np.abs(s.soft - s.hard)))
    out.append(Check("sampler", "tau -> 0 limit", gap < 1e-6, f"max |soft-hard|={gap:.1e} at tau=1e-4",
                     time.perf_counter() - t0))
    return out


def _tiny_loss_problem(rng, n_blocks: int, M: int):
    """A one-layer spiking net whose fan-in is exactly ``n_blocks`` blocks of M."""
    p = LIFParams(leak_alpha=0.7, v_threshold=0.8)
    net = init_network([n_blocks * M, 3, 3], p, rng)
    net.layers[0] *= 4.0
    x = (rng.random((4, 4, n_blocks * M)) < 0.5).astype(float)
    y = rng.integers(0, 3, size=4)
    cfg = MaskConfig(1, M)
    layout = cfg.layout((3, n_blocks * M))

    def loss(block_masks):
        # the same block mask is shared by every output row
        bits = np.tile(np.concatenate(block_masks), 3).reshape(3, -1)
        fwd = forward_network(net, x, [net.layers[0] * bits])
        return cross_entropy_over_time(fwd.logits, y)

    return loss, layout


def estimator(seed: int = 0, draws: int = 100_000) -> list[Check]:
    """Monte-Carlo mean over Gumbel draws against exact enumeration."""
    rng = np.random.default_rng(seed)
    out = []
    for n_blocks, M, N in ((1, 4, 2), (2, 4, 2), (2, 3, 1)):
        t0 = time.perf_counter()
        loss, _ = _tiny_loss_problem(rng, n_blocks, M)
        thetas = [rng.normal(size=M) for _ in range(n_blocks)]
        exact = expected_loss_enumeration(thetas, loss, N)
        # one BlockLogits row per (draw, block); the loss is a function of the
        # mask bits, so cache it per distinct mask
        lg = BlockLogits(np.tile(np.stack(thetas), (draws, 1)))
        bits = finalize_hard_masks(gumbel_draw(lg, rng, 1.0, N)).reshape(draws, n_blocks * M)
        keys, inverse = np.unique(bits, axis=0, return_inverse=True)
        table = np.array([loss(list(k.reshape(n_blocks, M).astype(float))) for k in keys])
        samples = table[np.ravel(inverse)]
        mean = samples.mean()
        se = samples.std(ddof=1) / math.sqrt(draws)
        ok = abs(mean - exact) <= 3 * se if se > 0 else mean == exact
        out.append(Check("estimator", f"{n_blocks} block(s) {N}:{M}", bool(ok),
                         f"|MC-exact|={abs(mean - exact):.2e} <= 3SE={3 * se:.2e}", time.perf_counter() - t0))
    # the straight-through forward value is the hard mask itself
    t0 = time.perf_counter()
    loss, _ = _tiny_loss_problem(rng, 2, 4)
    lg = BlockLogits(rng.normal(size=(2, 4)))
    identical = True
    for _ in range(200):
        s = gumbel_draw(lg, rng, float(rng.uniform(0.05, 2.0)), 2)
        st = straight_through(s)
        hard = finalize_hard_masks(s.hard).astype(float)
        identical &= loss(list(st.mask())) == loss(list(hard))
    out.append(Check("estimator", "straight-through forward", bool(identical), "bit-identical loss over 200 draws",
                     time.perf_counter() - t0))
    return out


def eid(seed: int = 0, instances: int = 1000) -> list[Check]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    min_kl = math.inf
    for _ in range(instances):
        B, M = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        lg = BlockLogits(rng.normal(size=(B, M)))
        q = softmax(rng.normal(size=(B, M)), axis=1)
        tg = BlockTargets(q=q, tau_q=1.0)
        kl, grad = eid_loss(tg, lg)
        min_kl = min(min_kl, kl)
        fd = central_difference(lambda: eid_loss(tg, lg)[0], lg.theta, h=1e-5)
        worst = max(worst, float(np.max(np.abs(grad - fd))))
    out = [
        Check("eid", "gradient vs finite differences", worst < EID_TOL, f"max abs err {worst:.1e} < {EID_TOL:g}",
              time.perf_counter() - t0),
        Check("eid", "KL >= 0", min_kl >= 0.0, f"min KL {min_kl:.3e}"),
    ]
    lg = BlockLogits(rng.normal(size=(5, 4)))
    kl0, g0 = eid_loss(BlockTargets(q=lg.probs(), tau_q=1.0), lg)
    out.append(Check("eid", "KL = 0 at q = pi", abs(kl0) < 1e-15 and np.max(np.abs(g0)) < 1e-15,
                     f"KL={kl0:.1e}"))
    return out


def anneal(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    ok_ends = ok_mono = True
    for _ in range(200):
        hi = float(rng.uniform(0.1, 5.0))
        lo = float(rng.uniform(1e-3, hi))
        T = int(rng.integers(1, 50))
        s = AnnealSchedule(hi, lo, T)
        taus = [anneal_tau(s, t) for t in range(T + 1)]
        ok_ends &= taus[0] == hi and taus[-1] == lo
        ok_mono &= all(a >= b for a, b in zip(taus, taus[1:]))
    return [
        Check("anneal", "endpoints exact", bool(ok_ends), "tau(0)=tau_max, tau(T)=tau_min"),
        Check("anneal", "non-increasing", bool(ok_mono), "200 random schedules"),
    ]


def algebra(seed: int = 0, trials: int = 10_000) -> list[Check]:
    rng = np.random.default_rng(seed)
    a, b, c = (rng.random((trials, 8)) for _ in range(3))
    tol = 1e-12
    comm = np.max(np.abs(prob_sum(a, b) - prob_sum(b, a)))
    assoc = np.max(np.abs(prob_sum(prob_sum(a, b), c) - prob_sum(a, prob_sum(b, c))))
    ident = np.max(np.abs(prob_sum(a, np.zeros_like(a)) - a))
    bits = (rng.random((trials, 8)) < 0.5).astype(float)
    idem = np.max(np.abs(prob_sum(bits, bits) - bits))
    return [
        Check("algebra", "commutative", comm <= tol, f"{comm:.1e}"),
        Check("algebra", "associative", assoc <= tol, f"{assoc:.1e}"),
        Check("algebra", "identity 0", ident <= tol, f"{ident:.1e}"),
        Check("algebra", "idempotent on bits", idem <= tol, f"{idem:.1e}"),
    ]


SUITES = {
    "representation": representation,
    "algebra": algebra,
    "lif": lif,
    "gradcheck": gradcheck,
    "sampler": sampler,
    "estimator": estimator,
    "eid": eid,
    "anneal": anneal,
}


def run_suites(names=None, seed: int = 0) -> list[Check]:
    names = list(SUITES) if not names or "all" in names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    rows = []
    for n in names:
        rows.extend(SUITES[n](seed=seed))
    return rows


def format_table(rows: list[Check]) -> str:
    w1 = max(len(r.suite) for r in rows)
    w2 = max(len(r.name) for r in rows)
    lines = []
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.suite:<{w1}}  {r.name:<{w2}}  {r.detail}  ({r.seconds:.2f}s)")
    return "\n".join(lines)
