"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section of the
terminal summary. Thresholds are the contract values and are not tuned here.
"""

import time
from collections import defaultdict

import numpy as np
import pytest

from qlens.harness import preset_config, run
from qlens.harness.runner import csv_body
from qlens.metrics import spearman
from qlens.perturb import (
    Gaussian,
    MagNeg,
    MagPos,
    MatchQuantL2,
    PerturbSpec,
    Rademacher,
    Uniform,
    clip_fraction,
    gen_perturbation,
    kind_name,
)
from qlens.quant import (
    AbsmaxSymmetric,
    Identity,
    MinMaxAsymmetric,
    PerChannel,
    PerGroup,
    PerTensor,
    QuantScheme,
    SignedPower,
    fake_quant,
    grid_values,
    quant_perturbation,
    quantize,
    resolve_alpha,
    scale_sweep,
)
from qlens.tensor import Laplace, Normal, OutlierMixture, RngStream, Uniform as UniformDist, l2, sample
from qlens.toymodel import ModelConfig, TaskSpec, grad_check, init, weight_scheme

N_PAIRS = 1000


def _random_pair(rng: RngStream):
    g = rng.generator
    rows, cols = int(g.integers(1, 49)), int(g.integers(1, 9)) * 8
    dist = [Normal(0.0, float(g.uniform(0.01, 10))), UniformDist(-3.0, 5.0), Laplace(0.5, 2.0), OutlierMixture(0.01, 50.0)][
        int(g.integers(0, 4))
    ]
    t = sample(dist, [rows, cols], rng.substream(1))
    gran = [PerTensor(), PerChannel(0), PerChannel(1), PerGroup(1, 8)][int(g.integers(0, 4))]
    scheme = QuantScheme(
        bits=int(g.integers(2, 9)),
        policy=[AbsmaxSymmetric(), MinMaxAsymmetric()][int(g.integers(0, 2))],
        granularity=gran,
        transform=[Identity(), SignedPower()][int(g.integers(0, 2))],
    )
    return t, scheme


def _groups(x: np.ndarray, gran) -> np.ndarray:
    """Independent regrouping oracle: one row per scale group."""
    if isinstance(gran, PerTensor):
        return x.reshape(1, -1)
    if isinstance(gran, PerChannel):
        return np.moveaxis(x, gran.axis, 0).reshape(x.shape[gran.axis], -1)
    return np.moveaxis(x, gran.axis, -1).reshape(-1, gran.group_size)


@pytest.fixture(scope="module")
def pairs():
    root = RngStream(20240601)
    return [_random_pair(root.substream(i)) for i in range(N_PAIRS)]


def test_criterion_01_quantizer_correctness(pairs, acceptance):
    start = time.perf_counter()
    failures = defaultdict(int)
    for t, scheme in pairs:
        q = quantize(t, scheme)
        fq = fake_quant(t, scheme).data.astype(np.float64)
        codes = _groups(q.codes.astype(np.int64), scheme.granularity)
        x = _groups(t.data.astype(np.float64), scheme.granularity)
        s = q.scales.astype(np.float64)[:, None]
        z = q.zero_points[:, None]
        if codes.min() < 0 or codes.max() > scheme.qmax:
            failures["range"] += 1
        order = np.argsort(x, axis=1, kind="stable")
        if (np.diff(np.take_along_axis(codes, order, axis=1), axis=1) < 0).any():
            failures["monotone"] += 1
        # rounding bound in the quantization domain, for values inside the grid's half-step hull
        y = scheme.transform.forward(x)
        inside = (y >= (0 - z) * s - s / 2) & (y <= (scheme.qmax - z) * s + s / 2)
        if isinstance(scheme.transform, Identity):
            err = np.abs(x - _groups(fq, scheme.granularity))
        else:
            err = np.abs(y - (codes - z) * s)
        if (err > s / 2 + 1e-6 * s)[inside].any():
            failures["bound"] += 1
        if isinstance(scheme.policy, AbsmaxSymmetric) and t.data.ndim == 2:
            s_tensor = quantize(t, QuantScheme(scheme.bits, transform=scheme.transform)).scales[0]
            for axis in (0, 1):
                per = quantize(t, QuantScheme(scheme.bits, granularity=PerChannel(axis), transform=scheme.transform))
                live = np.abs(t.data).max(axis=1 - axis) > 0
                if (per.scales[live] > s_tensor).any():
                    failures["refine"] += 1
    seconds = time.perf_counter() - start
    ok = not failures and seconds < 30
    acceptance(1, "quantizer correctness suite", ok, f"{N_PAIRS} pairs, failures={dict(failures)}, {seconds:.1f}s")
    assert ok


def test_criterion_02_exact_identity(pairs, acceptance):
    """``t == fake_quant(t) + quant_perturbation(t)`` bit for bit in float32."""
    bad = defaultdict(int)
    total = defaultdict(int)
    for t, scheme in pairs:
        fq = fake_quant(t, scheme).data
        delta = quant_perturbation(t, scheme).data
        key = "identity" if isinstance(scheme.transform, Identity) else "signed-power"
        total[key] += 1
        if not np.array_equal(fq + delta, t.data):
            bad[key] += 1
    ok = sum(bad.values()) == 0
    detail = ", ".join(f"{k}: {bad[k]}/{total[k]} pairs inexact" for k in sorted(total))
    acceptance(2, "exact reconstruction identity", ok, detail)
    assert ok, detail


def test_criterion_03_scale_sweep_shape(acceptance):
    t = sample(Normal(0, 1), [100_000], RngStream(0))
    scheme = QuantScheme(8)
    labels = ["0.25x", "1x", "2x", "4x"]
    rows = scale_sweep(t, scheme, [resolve_alpha(a, t, scheme) for a in labels])
    l2s = [r.l2_delta for r in rows[1:]]
    ok = l2s[0] <= l2s[1] <= l2s[2] and rows[0].clip_fraction > 0.2
    acceptance(3, "scale-sweep shape", ok, f"l2(1x,2x,4x)={[round(v, 3) for v in l2s]}, clip(0.25x)={rows[0].clip_fraction:.3f}")
    assert ok


def _matrices(trained_checkpoint):
    params = trained_checkpoint["params"]
    mats = [(name, params[name].numpy(), weight_scheme(8)) for name in params.sites]
    root = RngStream(4)
    for i, dist in enumerate([Normal(0, 1), Laplace(0, 1), OutlierMixture(0.001, 100)]):
        mats.append((f"random-{i}", sample(dist, [256, 256], root.substream(i)).data, QuantScheme(8)))
    return mats


STOCHASTIC = [Gaussian(), Uniform(), Rademacher(), MagPos(), MagNeg()]


def test_criterion_04_intensity_matching(trained_checkpoint, acceptance):
    worst = 0.0
    count = 0
    for name, w, scheme in _matrices(trained_checkpoint):
        target = l2(quant_perturbation(w, scheme))
        for kind in STOCHASTIC:
            for seed in range(2):
                d = gen_perturbation(w, PerturbSpec(kind, MatchQuantL2(scheme), seed))
                worst = max(worst, abs(l2(d) - target) / target)
                count += 1
    ok = worst < 1e-6
    acceptance(4, "intensity matching", ok, f"{count} draws, max rel err {worst:.2e}")
    assert ok


def test_criterion_05_magnitude_laws(acceptance):
    t = sample(Normal(0, 1), [100_000], RngStream(1))
    x = np.abs(t.data.astype(np.float64))
    dp = np.abs(gen_perturbation(t, PerturbSpec(MagPos(), seed=1)).data.astype(np.float64))
    nz = x > 0
    ratio = dp[nz] / x[nz]
    pos_spread = np.ptp(ratio) / ratio.mean()
    kind = MagNeg()
    dn = np.abs(gen_perturbation(t, PerturbSpec(kind, seed=1)).data.astype(np.float64))
    prod = dn * (x + kind.eps_rel * x.max())
    neg_spread = np.ptp(prod) / prod.mean()
    rhos = {
        kind_name(k): spearman(np.abs(gen_perturbation(t, PerturbSpec(k, seed=2)).data), x)
        for k in (Gaussian(), Uniform())
    }
    # Rademacher magnitudes are exactly equal, so the rank correlation is 0/0.
    # Assert the stronger fact directly: |delta| carries no information about |t|.
    rad = np.abs(gen_perturbation(t, PerturbSpec(Rademacher(), seed=2)).data)
    rad_constant = np.unique(rad).size == 1
    ok = pos_spread < 1e-6 and neg_spread < 1e-6 and rad_constant and all(-0.1 < r < 0.1 for r in rhos.values())
    acceptance(5, "magnitude laws", ok, f"M+ spread {pos_spread:.1e}, M- spread {neg_spread:.1e}, rho={ {k: round(v, 4) for k, v in rhos.items()} }, rademacher |delta| constant={rad_constant}")
    assert ok


def test_criterion_06_clipping_tails(acceptance):
    t = sample(Normal(0, 1), [1_000_000], RngStream(2))
    f3, f5 = clip_fraction(t, 3), clip_fraction(t, 5)
    ok = 0.0022 <= f3 <= 0.0032 and f5 < 1e-5
    acceptance(6, "clipping tails", ok, f"k=3: {f3:.5f}, k=5: {f5:.1e}")
    assert ok


def test_criterion_07_non_uniform_bins(acceptance):
    results = {}
    for bits in (4, 8):
        scheme = QuantScheme(bits, transform=SignedPower())
        grid = grid_values(scheme, 1.0 / scheme.symmetric_zero_point).astype(np.float64)
        pos = grid[grid >= 0]
        neg = -grid[grid <= 0][::-1]
        results[bits] = bool((np.diff(np.diff(pos)) > 0).all() and (np.diff(np.diff(neg)) > 0).all())
    ok = all(results.values())
    acceptance(7, "non-uniform bin structure", ok, f"strictly growing gaps: {results}")
    assert ok


def test_criterion_08_small_value_advantage(acceptance):
    start = time.perf_counter()
    t = sample(Normal(0, 1), [100_000], RngStream(3))
    x = np.abs(t.data)
    amax = x.max()
    small, large = x <= 0.1 * amax, x >= 0.9 * amax
    du = np.abs(quant_perturbation(t, QuantScheme(8)).data.astype(np.float64))
    dn = np.abs(quant_perturbation(t, QuantScheme(8, transform=SignedPower())).data.astype(np.float64))
    seconds = time.perf_counter() - start
    ok = dn[small].mean() < du[small].mean() and dn[large].mean() > du[large].mean() and seconds < 5
    acceptance(
        8,
        "non-uniform small-value advantage",
        ok,
        f"small: {dn[small].mean():.2e} vs {du[small].mean():.2e}; large: {dn[large].mean():.2e} vs {du[large].mean():.2e}; {seconds:.2f}s",
    )
    assert ok


def test_criterion_09_gradient_check(trained_checkpoint, acceptance):
    task = TaskSpec("copy")
    res_init = grad_check(init(ModelConfig()), task, n_coords=128, seed=0)
    res_trained = grad_check(trained_checkpoint["params"], task, n_coords=128, seed=1)
    worst = max(res_init.max_rel_error, res_trained.max_rel_error)
    ok = worst < 1e-2 and min(res_init.n_coords, res_trained.n_coords) >= 100
    acceptance(9, "gradient check (float32)", ok, f"max rel err init {res_init.max_rel_error:.2e}, trained {res_trained.max_rel_error:.2e}")
    assert ok


def test_criterion_10_toy_training(trained_checkpoint, acceptance):
    acc = trained_checkpoint["eval"].accuracy
    seconds = trained_checkpoint["seconds"]
    ok = acc >= 0.95 and seconds < 600 and len(trained_checkpoint["curve"]) <= 2000
    acceptance(10, "toy training (copy)", ok, f"held-out accuracy {acc:.4f} after 2000 steps in {seconds:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def figure2_run(trained_checkpoint, tmp_path_factory):
    cfg = preset_config(
        "figure2", checkpoint=str(trained_checkpoint["path"]), output_dir=str(tmp_path_factory.mktemp("fig2-p1"))
    )
    return cfg, run(cfg, parallelism=1)


def test_criterion_11_figure2_ordering(figure2_run, acceptance):
    _, res = figure2_run
    acc = defaultdict(dict)
    for t in res.trials:
        for r in t.rows:
            acc[r.kind][t.coords["repeat"]] = r.value
    mean = {k: float(np.mean(list(v.values()))) for k, v in acc.items()}
    families = ["gaussian", "uniform", "rademacher"]
    ordered = all(mean["mag-pos"] >= mean[k] >= mean["mag-neg"] for k in families)
    others = [k for k in acc if k != "mag-neg"]
    strict = sum(all(acc["mag-neg"][r] < acc[k][r] for k in others) for r in range(4))
    ok = len(res.rows) == 24 and ordered and strict >= 3
    acceptance(
        11,
        "figure-2 ordering",
        ok,
        f"rows={len(res.rows)}, mean acc " + ", ".join(f"{k}={v:.3f}" for k, v in mean.items()) + f"; M- strict worst in {strict}/4",
    )
    assert ok


def test_criterion_12_clipping_severity(trained_checkpoint, tmp_path, acceptance):
    cfg = preset_config(
        "figure3",
        perturbations=["gaussian", "clip:3"],
        metrics=["perplexity", "ce_loss"],
        checkpoint=str(trained_checkpoint["path"]),
        output_dir=str(tmp_path),
    )
    res = run(cfg)
    deg = defaultdict(dict)
    for t in res.trials:
        for r in t.rows:
            if r.metric == "perplexity":
                deg[r.kind][t.coords["repeat"]] = r.delta
    wins = sum(deg["clip:3"][r] > deg["gaussian"][r] for r in range(4))
    ok = wins >= 3
    acceptance(
        12,
        "clipping severity",
        ok,
        f"ppl degradation clip:3={deg['clip:3'][0]:.5f} vs gaussian={[round(v, 5) for v in deg['gaussian'].values()]}; clip worse in {wins}/4",
    )
    assert ok


def test_criterion_13_table1_direction(trained_checkpoint, tmp_path, acceptance):
    cfg = preset_config(
        "table1", metrics=["perplexity"], checkpoint=str(trained_checkpoint["path"]), output_dir=str(tmp_path)
    )
    res = run(cfg)
    ppl = defaultdict(dict)
    for t in res.trials:
        for r in t.rows:
            ppl[(r.kind, r.transform)][t.coords["repeat"]] = r.value
    good = 0
    notes = []
    for rep in range(4):
        fp = ppl[("fp", "none")][rep]
        w4u, w4n = ppl[("w4a8", "identity")][rep], ppl[("w4a8", "signed-power")][rep]
        w8u, w8n = ppl[("w8a8", "identity")][rep], ppl[("w8a8", "signed-power")][rep]
        cond = w4n <= w4u and abs(w8n - fp) / fp <= 0.05 and w8u > w8n
        good += cond
        notes.append(f"r{rep}: fp {fp:.4f} w8a8 {w8u:.4f}/{w8n:.4f} w4a8 {w4u:.4f}/{w4n:.4f}")
    ok = good >= 3
    acceptance(13, "table-1 direction (uniform/non-uniform)", ok, f"{good}/4 repeats; " + "; ".join(notes))
    assert ok


def test_criterion_14_parallel_determinism(figure2_run, tmp_path, acceptance):
    cfg, serial = figure2_run
    parallel = run(cfg.model_copy(update={"output_dir": str(tmp_path)}), parallelism=8)
    same = csv_body(serial.csv_path).encode() == csv_body(parallel.csv_path).encode()
    ok = same and len(serial.rows) > 0
    acceptance(14, "harness determinism (parallelism 1 vs 8)", ok, f"{len(serial.rows)} rows, byte-identical={same}")
    assert ok
