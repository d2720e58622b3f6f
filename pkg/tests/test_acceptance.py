"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL criterion N: ...`` line (visible
even without ``-s``) before asserting, so a plain ``pytest -v`` run doubles
as the acceptance report.
"""
import math
import struct
import time
from fractions import Fraction

import numpy as np
from scipy import stats as sps

from mitransfer import data as eeg
from mitransfer import functional as F
from mitransfer.cli import main
from mitransfer.data import EpochedDataset, FormatError, SubjectRecord
from mitransfer.evaluation import FoldResult, loso_split, run_loso, summarize
from mitransfer.gradcheck import check_gradients
from mitransfer.models import ModelSpec, build_model
from mitransfer.stats import friedman, holm_adjust, shapiro_wilk, wilcoxon_signed_rank
from mitransfer.tensor import Tensor, clip, concatenate, precision
from mitransfer.training import TrainConfig, accuracy, fit, simulate_schedule
from oracles import (
    FROZEN_PARAM_COUNTS,
    SW_PUBLISHED_W,
    SW_REFERENCE,
    SW_SAMPLE,
    brute_friedman,
    deepconvnet_params,
    eegnet_params,
    enumerate_wilcoxon,
    min2net_params,
)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# ----------------------------------------------------------------------
# 1. gradient correctness

OPS = {
    "add_mul": lambda a, b, w: ((a + b) * a - b).sum(),
    "div_pow": lambda a, b, w: ((a / b) ** 3 + (2.0 - a) ** 2).sum(),
    "matmul": lambda a, b, w: ((a @ w) ** 2).sum(),
    "sum_mean": lambda a, b, w: (a.sum(axis=0) * b).sum() + (a.mean(axis=1, keepdims=True) * a).sum(),
    "reshape_transpose": lambda a, b, w: (a.reshape(2, 6).transpose() ** 2).sum(),
    "index": lambda a, b, w: (a[np.array([0, 2, 0]), np.array([1, 3, 1])] ** 2).sum(),
    "exp_log_sqrt": lambda a, b, w: (a.exp() + a.log() * b + a.sqrt()).sum(),
    "clip": lambda a, b, w: (clip(a, 0.8, 1.6) ** 2).sum(),
    "concat": lambda a, b, w: (concatenate([a, a * 2], axis=0) ** 2).sum(),
}

LAYER_OPS = {
    "conv2d": lambda x, r: F.conv2d(x, r["k"], stride=(2, 1), padding=((1, 0), (2, 1))),
    "depthwise_conv2d": lambda x, r: F.depthwise_conv2d(x, r["dk"], 2, stride=(1, 2), padding=1),
    "max_pool": lambda x, r: F.pool2d(x, "max", (2, 3), (2, 2)),
    "average_pool": lambda x, r: F.pool2d(x, "average", (2, 3), (2, 2)),
    "batch_norm": lambda x, r: F.batch_norm(x, r["g"], r["b"], np.zeros(3), np.ones(3), True),
    "elu": lambda x, r: F.activation(x, "elu"),
    "relu": lambda x, r: F.activation(x, "relu"),
    "softmax": lambda x, r: F.softmax(x, 1),
    "upsample": lambda x, r: F.upsample(x, (1, 2)),
    "pad": lambda x, r: F.pad(x, ((1, 0), (0, 2))),
    "flatten_linear": lambda x, r: F.linear(F.flatten(x), r["W"], r["bias"]),
}

SMALL_MODELS = {
    "eegnet": dict(n_channels=3, n_samples=32, temporal_kernel=5, separable_kernel=3, f1=2, depth=2, f2=3,
                   eegnet_pools=(2, 2)),
    "deepconvnet": dict(n_channels=3, n_samples=60, deep_filters=(3, 3, 4, 4, 5), deep_kernel=3, deep_pool=2),
    "min2net": dict(n_channels=2, n_samples=16, latent_dim=3, min2net_pools=(2, 2), min2net_kernels=(3, 3)),
}  # fmt: skip


def _op_errors():
    rng = np.random.default_rng(1)
    errors = {}
    with precision("double"):
        a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        for name, op in OPS.items():
            errors[name] = check_gradients(lambda: op(a, b, w), [a, b, w])
        x = Tensor(rng.normal(size=(2, 3, 5, 7)), requires_grad=True)
        extra = {
            "k": Tensor(rng.normal(size=(4, 3, 2, 3)), requires_grad=True),
            "dk": Tensor(rng.normal(size=(6, 1, 2, 2)), requires_grad=True),
            "g": Tensor(rng.normal(size=3), requires_grad=True),
            "b": Tensor(rng.normal(size=3), requires_grad=True),
            "W": Tensor(rng.normal(size=(105, 4)), requires_grad=True),
            "bias": Tensor(rng.normal(size=4), requires_grad=True),
        }
        for name, op in LAYER_OPS.items():
            weight = Tensor(rng.normal(size=op(x, extra).shape))
            errors[name] = check_gradients(lambda: (op(x, extra) * weight).sum(), [x, *extra.values()])
    return errors


def _model_error(kind):
    spec = ModelSpec(kind, precision="double", seed=3, bn_momentum=0.9, **SMALL_MODELS[kind])
    model = build_model(spec)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, spec.n_channels, spec.n_samples))
    y = np.array([0, 1, 0, 1])

    def loss():
        model.reseed(0)  # identical dropout masks on every evaluation
        return model.loss(x, y, training=True)[0]

    with precision("double"):
        return check_gradients(loss, model.parameters(), max_entries=12, rng=np.random.default_rng(5))


def test_criterion_1_gradient_correctness(capsys):
    start = time.perf_counter()
    op_errors = _op_errors()
    model_errors = {kind: _model_error(kind) for kind in SMALL_MODELS}
    elapsed = time.perf_counter() - start
    worst_op = max(op_errors, key=op_errors.get)
    ok = max(op_errors.values()) < 1e-6 and max(model_errors.values()) < 1e-4 and elapsed < 300
    detail = (
        f"{len(op_errors)} ops, worst {worst_op} {op_errors[worst_op]:.1e} (< 1e-6); "
        + ", ".join(f"{k} {v:.1e}" for k, v in model_errors.items())
        + f" (< 1e-4); {elapsed:.0f} s (< 300 s)"
    )
    verdict(capsys, 1, ok, detail)


# ----------------------------------------------------------------------
# 2. architecture fidelity


def test_criterion_2_architecture(capsys):
    x = np.random.default_rng(0).normal(size=(2, 16, 2000)).astype(np.float32)
    formulas = {"eegnet": eegnet_params, "deepconvnet": deepconvnet_params, "min2net": min2net_params}
    rows, ok = [], True
    for kind, formula in formulas.items():
        model = build_model(ModelSpec(kind, 16, 2000, 2))
        out = model.forward(x)
        probs = (out[-1] if isinstance(out, tuple) else out).data
        simplex = probs.shape == (2, 2) and np.all(probs >= 0) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        count = model.parameter_count()
        ok &= bool(simplex) and count == formula(16, 2000, 2) == FROZEN_PARAM_COUNTS[kind]
        rows.append(f"{kind} {count} params{'' if simplex else ' NOT simplex'}")
    verdict(capsys, 2, ok, "; ".join(rows) + " at (16, 2000, 2)")


# ----------------------------------------------------------------------
# 3. schedule fidelity

EXPECTED_LRS = {
    "eegnet": [0.1, 0.025, 0.00625, 0.0015625, 0.001],
    "deepconvnet": [0.01, 0.0025, 0.001],
    "min2net": [0.01, 0.005, 0.0025, 0.00125, 0.000625, 0.0006],
}


def test_criterion_3_schedule(capsys):
    ok, rows = True, []
    for kind, expected in EXPECTED_LRS.items():
        cfg = TrainConfig.for_model(kind)
        # all-flat monitor; stopping disabled so the whole LR ladder is visible
        lrs = simulate_schedule([1.0] * cfg.epochs, cfg, early_stopping=False).lrs
        distinct = [lr for i, lr in enumerate(lrs) if i == 0 or lr != lrs[i - 1]]
        ladder = len(distinct) == len(expected) and all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(distinct, expected))
        stopped = simulate_schedule([1.0] * cfg.epochs, cfg)
        non_improving = len(stopped) - stopped.best_epoch
        fires = stopped.stopped_early and non_improving == cfg.es_patience
        ok &= ladder and fires
        rows.append(f"{kind} {'ladder ok' if ladder else distinct}, stop after {non_improving} flat epochs")
    verdict(capsys, 3, ok, "; ".join(rows))


# ----------------------------------------------------------------------
# 4. overfit smoke


def test_criterion_4_overfit(capsys):
    ds = eeg.synthesize_dataset(eeg.SynthConfig(n_subjects=1, trials_per_subject=32, n_samples=500, noise_scale=0.5, seed=3))
    X, y, _ = ds.stack(ds.subject_ids)
    start = time.perf_counter()
    ok, rows = True, []
    for kind in ("eegnet", "deepconvnet", "min2net"):
        Xk = eeg.standardize(X, [X])[0][0] if kind == "min2net" else X
        spec = ModelSpec(kind, n_samples=500, seed=0, bn_momentum=0.9)
        cfg = TrainConfig.for_model(kind, batch_size=8, monitor="train_loss")
        model, trace = fit(build_model(spec), Xk, y, cfg)
        acc = accuracy(model, Xk, y)
        ok &= acc >= 0.95 and len(trace) <= cfg.epochs
        rows.append(f"{kind} {acc:.2f} in {len(trace)}/{cfg.epochs} epochs")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 600
    verdict(capsys, 4, ok, "; ".join(rows) + f" (>= 0.95); {elapsed:.0f} s (< 600 s)")


# ----------------------------------------------------------------------
# 5. synthetic LOSO


def _shuffled(ds, seed):
    rng = np.random.default_rng(seed)
    subjects = [SubjectRecord(s.subject_id, s.trials, rng.permutation(s.labels)) for s in ds.subjects]
    return EpochedDataset(subjects, ds.montage, ds.sample_rate_hz)


def test_criterion_5_synthetic_loso(capsys, tmp_path):
    cfg_data = eeg.SynthConfig(n_subjects=8, trials_per_subject=40, n_samples=500, noise_scale=0.5, erd_depth=0.8, seed=11)
    ds = eeg.synthesize_dataset(cfg_data)
    spec = ModelSpec("eegnet", n_samples=500, seed=0, bn_momentum=0.9)
    cfg = TrainConfig.for_model("eegnet", seed=0)
    start = time.perf_counter()
    real = np.mean([r.accuracy for r in run_loso(ds, spec, cfg, tmp_path / "real")])
    control = np.mean([r.accuracy for r in run_loso(_shuffled(ds, 99), spec, cfg, tmp_path / "shuffled")])
    elapsed = time.perf_counter() - start
    ok = real >= 0.85 and abs(control - 0.5) <= 0.10 and elapsed < 1800
    detail = f"EEGNet mean {real:.3f} (>= 0.85); shuffled control {control:.3f} (0.50 +- 0.10); {elapsed:.0f} s (< 1800 s)"
    verdict(capsys, 5, ok, detail)


# ----------------------------------------------------------------------
# 6. protocol invariants


def test_criterion_6_protocol(capsys):
    ok = True
    for n in (2, 8, 55):
        ids = [f"S{i:02d}" for i in range(n)]
        plans = loso_split(ids)
        ok &= [p.held_out_subject for p in plans] == ids
        ok &= all(p.held_out_subject not in p.train_subjects and set(p.train_subjects) | {p.held_out_subject} == set(ids)
                  for p in plans)  # fmt: skip
    grid = all(
        Fraction(FoldResult("S", 120, k).accuracy).limit_denominator(120) == Fraction(k, 120) for k in range(121)
    )
    inclusive = summarize([84 / 120, 83 / 120, 0.70]).count_above_threshold == 2
    ok &= grid and inclusive
    verdict(capsys, 6, ok, f"LOSO disjoint and covering for n in (2, 8, 55); k/120 grid {grid}; 0.70 inclusive {inclusive}")


# ----------------------------------------------------------------------
# 7. statistics oracles


def test_criterion_7_statistics(capsys):
    rng = np.random.default_rng(0)
    friedman_ok = 0
    for trial in range(100):
        n, k = rng.integers(2, 12), rng.integers(2, 6)
        m = rng.integers(0, 5, size=(n, k)).astype(float) if trial % 2 else rng.normal(size=(n, k))
        if np.all(m == m[:, :1]):
            m[0, 0] += 1.0
        friedman_ok += math.isclose(friedman(m)[0], brute_friedman(m), rel_tol=1e-10, abs_tol=1e-10)

    wilcoxon_ok = True
    rng = np.random.default_rng(3)
    for n in range(1, 13):
        d = rng.normal(size=n)
        _, p = wilcoxon_signed_rank(d, np.zeros(n))
        wilcoxon_ok &= math.isclose(p, enumerate_wilcoxon(d)[1], abs_tol=1e-12)

    holm_ok = np.allclose(holm_adjust([0.01, 0.04, 0.03]), [0.03, 0.06, 0.06])
    w3 = shapiro_wilk([1, 2, 3])[0]
    w_ref, p_ref = shapiro_wilk(SW_SAMPLE)
    shapiro_ok = w3 == 1.0 and abs(w_ref - SW_PUBLISHED_W) < 1e-2 and abs(p_ref - SW_REFERENCE[1]) < 1e-2
    for n in (5, 11, 20, 55):
        x = np.random.default_rng(n).gamma(2.0, size=n)
        shapiro_ok &= abs(shapiro_wilk(x)[0] - sps.shapiro(x).statistic) < 1e-2

    rng = np.random.default_rng(2024)
    alpha, trials = 0.05, 1000
    rate = sum(friedman(rng.normal(size=(55, 3)))[2] < alpha for _ in range(trials)) / trials
    sigma = math.sqrt(alpha * (1 - alpha) / trials)
    null_ok = abs(rate - alpha) <= 2 * sigma

    ok = friedman_ok == 100 and wilcoxon_ok and holm_ok and shapiro_ok and null_ok
    detail = (
        f"Friedman {friedman_ok}/100 match; Wilcoxon exact n<=12 {wilcoxon_ok}; Holm {holm_ok}; "
        f"Shapiro W(1,2,3)={w3:.3f}, reference W={w_ref:.4f}; null rejection {rate:.3f} (0.05 +- {2 * sigma:.3f})"
    )
    verdict(capsys, 7, ok, detail)


# ----------------------------------------------------------------------
# 8. reproducibility


def _pipeline(root):
    data = root / "data"
    assert main(["synth", "--subjects", "3", "--trials", "20", "--samples", "500", "--seed", "5", "--out", str(data)]) == 0
    runs = []
    for kind in ("eegnet", "deepconvnet", "min2net"):
        out = root / kind
        argv = ["loso", "--model", kind, "--data", str(data), "--out", str(out), "--epochs", "2", "--batch-size", "8"]
        assert main(argv + ["--seed", "5"]) == 0
        runs.append(out)
    assert main(["stats", *[str(r / "folds.csv") for r in runs], "--out", str(root / "stats.json")]) == 0
    assert main(["report", *map(str, runs), "--out", str(root / "report")]) == 0
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.suffix in (".csv", ".json", ".svg")
    }


def test_criterion_8_reproducibility(capsys, tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    differing = [name for name in first if first[name] != second.get(name)]
    ok = bool(first) and first.keys() == second.keys() and not differing
    kinds = sorted({name.rsplit(".", 1)[1] for name in first})
    verdict(capsys, 8, ok, f"{len(first)} output files ({', '.join(kinds)}), {len(differing)} differ between two runs")


# ----------------------------------------------------------------------
# 9. format robustness


def test_criterion_9_format(capsys, tmp_path):
    rng = np.random.default_rng(0)
    trials = rng.normal(size=(5, 16, 33)).astype(np.float32)
    trials[0, 0, :3] = [np.float32(1e-40), -0.0, np.float32(3.4e38)]
    ds = EpochedDataset([SubjectRecord("S01", trials, [0, 1, 1, 0, 1])])
    eeg.save_dataset(ds, tmp_path / "ds")
    back = eeg.load_dataset(tmp_path / "ds").subjects[0]
    exact = back.trials.tobytes() == trials.tobytes() and back.labels.tolist() == [0, 1, 1, 0, 1]

    raw = (tmp_path / "ds" / "S01.miep").read_bytes()
    cases = {
        "magic": (b"XXXX" + raw[4:], "offset 0"),
        "version": (raw[:4] + struct.pack("<H", 7) + raw[6:], "offset 4"),
        "header": (raw[:9], "offset"),
        "payload": (raw[:-3], "offset"),
        "label": (raw[:20] + b"\x05" + raw[21:], "offset 20"),
    }
    located = {}
    for name, (blob, where) in cases.items():
        path = tmp_path / f"{name}.miep"
        path.write_bytes(blob)
        try:
            eeg.read_subject(path)
            located[name] = False
        except FormatError as err:
            located[name] = where in str(err) and path.name in str(err)
    ok = exact and all(located.values())
    detail = f"round-trip bit-exact {exact}; located errors: " + ", ".join(f"{k} {v}" for k, v in located.items())
    verdict(capsys, 9, ok, detail)
