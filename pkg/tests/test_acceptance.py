"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (2-4) run the full-size protocols and take tens of
minutes on one CPU; select them out with ``-m "not slow"`` when iterating.
"""
import math
import time

import numpy as np
import pytest

from mfsnn import numerics as nm
from mfsnn.cli import main as cli_main
from mfsnn.datakit import class_rate_table, generate_synthetic, make_preset
from mfsnn.encoder import (EncoderConfig, SubEncoderWeights, channel_attention, concat_subencoders,
                           fuse, global_avg_pool, linear_transform, split_channels, tcn_conv,
                           temporal_avg_pool)
from mfsnn.energy import E_AC_PJ, E_MAC_PJ, energy_report, measure_rates
from mfsnn.model import MfsnnModel, ModelConfig, ablated_model
from mfsnn.numerics import Tensor
from mfsnn.spiking import LifParams, run_window, surrogate_grad
from mfsnn.training import (ABLATION_VARIANTS, DEFAULT_RATIOS, TrainConfig, ablation_suite,
                            cross_entropy, ratio_sweep, single_day_run)

from test_encoder import ENCODER_GRAD_CASES
from test_energy import brute_force_rates
from test_numerics import DIFFERENTIABLE_OPS, central_diff, rel_err

slow = pytest.mark.slow


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_energy_arithmetic(verdict):
    t0 = time.perf_counter()
    rep = energy_report(ModelConfig(), 0.02093, 20)
    elapsed = time.perf_counter() - t0
    d = rep.to_dict()
    constants = d["e_mac_pj"] == 4.6 and d["e_ac_pj"] == 0.9 and (E_MAC_PJ, E_AC_PJ) == (4.6, 0.9)
    in_band = abs(rep.reduction_fraction - 0.909) <= 0.005
    ok = in_band and constants and elapsed < 1.0
    verdict(1, ok, f"reduction {100 * rep.reduction_fraction:.2f}% (target 90.9 +- 0.5), "
                   f"constants {'ok' if constants else 'missing'}, {elapsed * 1e3:.1f} ms")
    assert ok


# -- 2 ----------------------------------------------------------------------

@slow
def test_criterion_2_single_day(verdict):
    seeds = range(5)
    t0 = time.perf_counter()
    acc = {k: [] for k in ("mfsnn", "mfann", "mlp")}
    for seed in seeds:
        ds = make_preset("grasp-touch", seed=seed, drift=False, n_days=1)
        for kind in acc:
            _, rep = single_day_run(ModelConfig(kind=kind), ds, 0, TrainConfig(epochs=50, seed=seed))
            acc[kind].append(rep.test_accuracy)
    elapsed = time.perf_counter() - t0
    means = {k: float(np.mean(v)) for k, v in acc.items()}
    ok = all(m >= 0.95 for m in means.values()) and elapsed < 600
    verdict(2, ok, ", ".join(f"{k} {m:.4f}" for k, m in means.items()) + f"; {elapsed:.0f} s")
    assert ok


# -- 3 ----------------------------------------------------------------------

@slow
def test_criterion_3_cross_day(verdict):
    t0 = time.perf_counter()
    per_seed = []
    for seed in range(10):
        ds = make_preset("grasp-touch", seed=seed, n_days=4)
        rows = ratio_sweep(ds, 0, [1, 2, 3], DEFAULT_RATIOS, TrainConfig(epochs=50, seed=seed),
                           ModelConfig())
        per_seed.append([r["accuracy"] for r in rows])
    elapsed = time.perf_counter() - t0
    curve = np.mean(per_seed, axis=0)
    at = dict(zip(DEFAULT_RATIOS, curve))
    gap = at[0.078] - at[0.0]
    monotone = all(b >= a - 0.02 for a, b in zip(curve, curve[1:]))
    ok = gap >= 0.10 and at[0.078] >= 0.80 and monotone and elapsed < 1800
    verdict(3, ok, "curve " + " ".join(f"{r:g}:{a:.3f}" for r, a in at.items())
            + f"; gap {100 * gap:.1f} pt; monotone {monotone}; {elapsed:.0f} s")
    assert ok


# -- 4 ----------------------------------------------------------------------

@slow
def test_criterion_4_ablation(verdict):
    seeds = list(range(10))
    ds = make_preset("grasp-touch", seed=0, n_days=4)
    reps = ablation_suite(ModelConfig(), ds, TrainConfig(epochs=50), seeds)
    four = list(reps) == list(ABLATION_VARIANTS)
    shared = all(r.per_day["seeds"] == seeds and r.config["test_days"] == reps["full"].config["test_days"]
                 for r in reps.values())

    probe = ds.day(0).as_batch()[:16]
    m = ablated_model(ModelConfig(), {"TCN"}, seed=0)
    enc = m.config.encoder
    lt = concat_subencoders([linear_transform(b, m.encoder_weights.select(i).lt_matrix)
                             for i, b in enumerate(split_channels(Tensor(probe), enc))]).data
    exact = np.array_equal(m.encode(probe).data, lt)

    ordering = " > ".join(sorted(reps, key=lambda k: -reps[k].test_accuracy))
    ok = four and shared and exact
    verdict(4, ok, ", ".join(f"{k} {r.per_day['mean']:.4f}+-{r.per_day['std']:.4f}" for k, r in reps.items())
            + f"; ordering {ordering}; no-TCN == LT exactly: {exact}")
    assert ok


# -- 5 ----------------------------------------------------------------------

def _fd_instances(build, shapes, rng, n, kink=False):
    worst = 0.0
    for _ in range(n):
        xs = [rng.uniform(-1, 1, s) for s in shapes]
        if kink:
            xs = [np.where(np.abs(x) < 0.05, 0.5, x) for x in xs]
        probe = rng.normal(size=build(*[Tensor(x) for x in xs]).shape)
        leaves = [Tensor(x, requires_grad=True) for x in xs]
        nm.backward((build(*leaves) * probe).sum())
        for k in range(len(xs)):
            def f(v, k=k):
                return float((build(*[Tensor(v if j == k else xs[j]) for j in range(len(xs))]).data
                              * probe).sum())
            worst = max(worst, rel_err(leaves[k].grad, central_diff(f, xs[k])))
    return worst


def _hand_chain(current, p):
    """Forward-mode d(rate)/d(current) with a detached reset."""
    a = 1.0 / p.tau_m
    v, dv, drate = 0.0, 0.0, 0.0
    for _ in range(p.t_window):
        u = v + a * (current - v)
        du = (1 - a) * dv + a
        drate += surrogate_grad(np.array([u - p.v_threshold]), p.surrogate_alpha)[0] * du
        if u - p.v_threshold >= 0:
            v, dv = p.v_reset, 0.0
        else:
            v, dv = u, du
    return drate / p.t_window


def test_criterion_5_gradients(verdict):
    cases = dict(DIFFERENTIABLE_OPS)
    cases.update(ENCODER_GRAD_CASES)
    cases["global_avg_pool"] = (lambda x: global_avg_pool(x), [(3, 1, 7)])
    cases["cross_entropy"] = (lambda z: cross_entropy(z, np.array([0, 3, 1])) * 1.0, [(3, 4)])
    rng = np.random.default_rng(2024)
    worst = {name: _fd_instances(b, s, rng, 100, kink=(name == "relu")) for name, (b, s) in cases.items()}
    fd_ok = all(v < 1e-3 for v in worst.values())

    chain_err = 0.0
    for _ in range(100):
        p = LifParams(tau_m=rng.uniform(1.2, 5), v_threshold=rng.uniform(0.5, 2),
                      surrogate_alpha=rng.uniform(0.5, 4), t_window=int(rng.integers(1, 21)))
        x, w0 = rng.uniform(0.1, 3), rng.uniform(-1, 3)
        w = Tensor([w0], requires_grad=True)
        nm.backward(run_window(Tensor([x]) * w, None, p).sum())
        chain_err = max(chain_err, abs(w.grad[0] - _hand_chain(w0 * x, p) * x))
    ok = fd_ok and chain_err < 1e-10
    verdict(5, ok, f"{len(cases)} ops x 100 instances, worst rel err {max(worst.values()):.2e} "
                   f"({max(worst, key=worst.get)}); spiking chain max abs err {chain_err:.1e}")
    assert ok


# -- 6 ----------------------------------------------------------------------

def _random_ca(rng, c, cr):
    z = lambda *s: Tensor(np.zeros(s))
    return SubEncoderWeights(lt_matrix=z(1, 1), ca_compress=Tensor(rng.normal(0, 3, (cr, c))),
                             ca_compress_bias=Tensor(rng.normal(size=cr)),
                             ca_expand=Tensor(rng.normal(0, 3, (c, cr))),
                             ca_expand_bias=Tensor(rng.normal(size=c)),
                             tcn_kernels=z(c, 3), tcn_bias=z(c))


def test_criterion_6_structural_invariants(verdict):
    rng = np.random.default_rng(6)
    causal = 0
    for _ in range(1000):
        k, d, t_len = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 30))
        t = int(rng.integers(0, t_len))
        x, w, b = rng.normal(size=(3, 1, t_len)), rng.normal(size=(3, k)), rng.normal(size=3)
        y = x.copy()
        y[..., t:] += rng.normal(size=y[..., t:].shape)
        a = tcn_conv(Tensor(x), Tensor(w), Tensor(b), k, d).data
        c = tcn_conv(Tensor(y), Tensor(w), Tensor(b), k, d).data
        causal += np.array_equal(a[..., :t], c[..., :t])

    round_trip = True
    for ns in (1, 2, 4, 8, 16):
        cfg = EncoderConfig(n_channels=16, n_subencoders=ns, t_in=10, t_out=5,
                            bottleneck_ratio=1)
        x = rng.normal(size=(3, 16, 1, 10))
        round_trip &= np.array_equal(concat_subencoders(split_channels(Tensor(x), cfg)).data, x)

    in_unit = 0
    spikes_binary = True
    lif = LifParams()
    for _ in range(1000):
        probe = {}
        gate = channel_attention(Tensor(rng.poisson(2.0, (8, 1, 20)).astype(float)),
                                 _random_ca(rng, 8, 2), lif, probe=probe).data
        in_unit += bool(np.all((gate >= 0) & (gate <= 1)))
        for key in ("ca_compress", "ca_expand"):
            spikes_binary &= set(np.unique(probe[key])) <= {0.0, 1.0}
    mprobe = {}
    MfsnnModel(ModelConfig(), seed=1).forward(rng.poisson(0.5, (4, 128, 1, 50)).astype(float), probe=mprobe)
    for key in ("ca_compress", "ca_expand", "classifier"):
        spikes_binary &= set(np.unique(mprobe[key])) <= {0.0, 1.0}

    lt, tcn = rng.normal(size=(8, 1, 10)), rng.normal(size=(8, 1, 10))
    gates = (np.array_equal(fuse(Tensor(lt), Tensor(np.zeros((8, 1, 1))), Tensor(tcn)).data, lt)
             and np.array_equal(fuse(Tensor(lt), Tensor(np.ones((8, 1, 1))), Tensor(tcn)).data, lt + tcn))

    ok = causal == 1000 and round_trip and in_unit == 1000 and spikes_binary and gates
    verdict(6, ok, f"causality {causal}/1000, round-trip {round_trip}, gates in [0,1] {in_unit}/1000, "
                   f"binary spikes {spikes_binary}, degenerate gates {gates}")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_criterion_7_oracles(verdict):
    enc = EncoderConfig(n_channels=8, n_subencoders=2, t_in=6, t_out=3, bottleneck_ratio=2)
    cfg = ModelConfig(encoder=enc, n_classes=3)
    rates_exact = 0
    for seed in range(5):
        table = class_rate_table(3, 8, 0.2 + 0.2 * seed, 1.0 + seed, seed=seed)
        ts = generate_synthetic(3, 8, 6, 20, table, seed=seed)
        assert ts.trials.size <= 10_000
        model = MfsnnModel(cfg, seed=seed)
        rates_exact += measure_rates(model, ts, batch_size=16) == brute_force_rates(model, ts)

    rng = np.random.default_rng(7)
    ce_err = 0.0
    for _ in range(100):
        b, k = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        z, y = rng.normal(scale=4, size=(b, k)), rng.integers(0, k, b)
        direct = sum(-(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(b)) / b
        ce_err = max(ce_err, abs(cross_entropy(z, y).item() - direct))

    s = nm.LrSchedule(0.01, 0.0001, 1000)
    ends = nm.cosine_lr(s, 0) == 0.01 and nm.cosine_lr(s, 1000) == 0.0001
    ok = rates_exact == 5 and ce_err < 1e-12 and ends
    verdict(7, ok, f"measure_rates exact {rates_exact}/5, cross_entropy max err {ce_err:.1e}, "
                   f"cosine endpoints exact {ends}")
    assert ok


# -- 8 ----------------------------------------------------------------------

def _pipeline(root):
    data, run = root / "data", root / "run"
    codes = [cli_main(["generate", "--preset", "grasp-touch", "--seed", "3", "--out", str(data)]),
             cli_main(["train", "--dataset", str(data), "--out", str(run), "--seed", "3",
                       "--set", "epochs=2"]),
             cli_main(["eval", "--dataset", str(data), "--checkpoint", str(run / "model.ckpt"),
                       "--out", str(run)])]
    files = {str(p.relative_to(root)): p.read_bytes()
             for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run.log"}
    return codes, files


def test_criterion_8_determinism(verdict, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, a = _pipeline(tmp_path / "a")
    codes_b, b = _pipeline(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0, 0, 0] and not differing and len(a) >= 8
    verdict(8, ok, f"{len(a)} files compared, {len(differing)} differ {differing[:3]}")
    assert ok
