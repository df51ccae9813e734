"""Acceptance criteria, each at its stated tolerance, one PASS/FAIL line apiece.

The two behavioural experiments (5, 7) train on the default synthetic dataset
and dominate the runtime of this file (several minutes on one core).
"""
import hashlib
import math
import time

import numpy as np
import pytest

from brainmvp import autonet, synthgen, trainer
from brainmvp import downstream as D
from brainmvp import tape as T
from brainmvp.losses import contrastive_loss, info_nce
from brainmvp.maskops import cross_modal_mask
from brainmvp.optim import AdamW, cosine_lr
from brainmvp.volcore import Volume, decode_volume, encode_volume, load_volume, save_volume

from test_downstream import auc_oracle, hd95_oracle
from test_losses import info_nce_loop, unit_rows
from test_optim import adamw_oracle

T_CORR = 0.8           # template vs population-mean correlation threshold
LABELED = 8            # labeled training studies for the label-efficiency analog
A7_NET = autonet.NetConfig(stage_channels=(8, 16))
A7_FINETUNE_EPOCHS = 150


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


@pytest.fixture(scope="module")
def default_data():
    return synthgen.gen_dataset(synthgen.GenConfig(), 64)


@pytest.fixture(scope="module")
def default_pretrain(default_data):
    """Default-config pre-training on all 64 studies, tracking per-epoch template correlation."""
    studies, _ = default_data
    mods = ("T1", "T1CE", "T2")
    means = {m: synthgen.population_mean(studies, m).ravel() for m in mods}
    curves = {m: [] for m in mods}

    def track(epoch, state, bank):
        for m in mods:
            t = bank.templates[m].ravel()
            curves[m].append(float(np.corrcoef(t, means[m])[0, 1]) if t.std() > 0 else 0.0)

    t0 = time.perf_counter()
    state, bank, runlog = trainer.run_pretrain(trainer.PretrainConfig(), autonet.NetConfig(), studies,
                                               on_epoch_end=track)
    return runlog, curves, time.perf_counter() - t0


# ---------------------------------------------------------------- 1

def test_1_mask_coverage(report):
    rng = np.random.default_rng(1)
    vols = {n: (Volume(rng.random((n,) * 3).astype(np.float32)),
                Volume(rng.random((n,) * 3).astype(np.float32))) for n in (8, 16, 32)}
    bad = []
    t0 = time.perf_counter()
    for i in range(10_000):
        n = int(rng.choice([8, 16, 32]))
        r = int(rng.choice([2, 4, 8]))
        p = float(rng.choice([0.0, 0.5, 0.875, 1.0]))
        x, y = vols[n]
        res = cross_modal_mask(x, y, r, p, int(rng.integers(0, 2**63)))
        occ = res.occupancy
        frac = occ.sum() / occ.size
        ok = (p <= frac <= min(1.0, p + r ** 3 / occ.size)
              and np.array_equal(res.masked.data[~occ], x.data[~occ])
              and np.array_equal(res.masked.data[occ], y.data[occ]))
        if not ok:
            bad.append((n, r, p))
    dt = time.perf_counter() - t0
    ok = not bad and dt < 30
    report(1, ok, f"10000 masks, {len(bad)} violations, {dt:.1f}s (< 30s)")
    assert not bad, bad[:5]
    assert dt < 30


# ---------------------------------------------------------------- 2

def test_2_gradient_check(report):
    cfg = autonet.NetConfig(stage_channels=(2, 4), embed_dim=4, dtype="float64")
    h = 1e-4
    worst = 0.0
    t0 = time.perf_counter()
    for seed in range(20):
        st = autonet.init_state(cfg, seed)
        assert st.param_count <= 5000
        rng = np.random.default_rng(100 + seed)
        x, tgt = rng.random((8, 8, 8)), rng.random((8, 8, 8))

        def lf(o):
            d = o.reconstruction - tgt[None, None]
            return T.tmean(d * d) + 0.1 * T.tsum(o.embedding * o.embedding)

        def loss(s):
            p = {k: T.Tensor(v) for k, v in s.params.items()}
            return float(lf(autonet.apply(cfg, p, T.Tensor(x[None, None]))).data)

        g = autonet.backward(st, x, lf)
        for k, v in st.params.items():
            for flat in rng.choice(v.size, min(v.size, 4), replace=False):
                i = np.unravel_index(flat, v.shape)
                s2 = st.copy()
                s2.params[k][i] += h
                a = loss(s2)
                s2.params[k][i] -= 2 * h
                b = loss(s2)
                num = (a - b) / (2 * h)
                an = g.params[k][i]
                worst = max(worst, abs(an - num) / max(abs(an), abs(num), 1e-8))
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 120
    report(2, ok, f"max rel err {worst:.2e} (< 1e-5) over 20 seeds, {dt:.1f}s (< 120s)")
    assert worst < 1e-5
    assert dt < 120


# ---------------------------------------------------------------- 3

def test_3_contrastive_closed_forms(report):
    errs = {}
    f = np.tile([[0.6, 0.8]], (4, 1))
    errs["ln4"] = abs(contrastive_loss(f, f) - math.log(4))
    # |B|=2, tau=1, f1.g1 = 1, f1.g2 = -1: row-1 term ln(1 + e^-2).  With f = g = (e1, -e1)
    # row 2 mirrors row 1, so both directions and the mean equal that term.
    fb = np.array([[1.0, 0.0], [-1.0, 0.0]])
    target = math.log1p(math.exp(-2))
    errs["b2_row"] = abs(info_nce(fb, fb, 1.0) - target)
    errs["b2_sym"] = abs(contrastive_loss(fb, fb, 1.0) - target)
    # mixed batch: row 1 as above, row 2 uniform -> mean of ln(1 + e^-2) and ln 2
    f2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    g2 = np.array([[1.0, 0.0], [-1.0, 0.0]])
    errs["b2_mixed"] = abs(info_nce(f2, g2, 1.0) - 0.5 * (target + math.log(2)))
    rng = np.random.default_rng(0)
    a, b = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    swap = contrastive_loss(a, b) == contrastive_loss(b, a)
    loop = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 10))
        a, b = unit_rows(rng, n, 8), unit_rows(rng, n, 8)
        tau = float(rng.uniform(0.05, 1.0))
        ref = 0.5 * (info_nce_loop(a, b, tau) + info_nce_loop(b, a, tau))
        loop = max(loop, abs(info_nce(a, b, tau) - info_nce_loop(a, b, tau)),
                   abs(contrastive_loss(a, b, tau) - ref))
    ok = all(e < 1e-9 for e in errs.values()) and swap and loop < 1e-10
    report(3, ok, f"closed forms max err {max(errs.values()):.1e} (< 1e-9), swap exact {swap}, "
                  f"oracle err {loop:.1e} (< 1e-10)")
    assert ok, (errs, swap, loop)


# ---------------------------------------------------------------- 4

def test_4_optimizer_oracle(report):
    rng = np.random.default_rng(4)
    p0 = float(rng.normal())
    grads = rng.normal(size=100)
    lrs = [cosine_lr(s, 100, 1e-2) for s in range(100)]
    p = {"w": np.array(p0)}
    opt = AdamW(weight_decay=1e-2)
    for g, lr in zip(grads, lrs):
        opt.step(p, {"w": np.array(g)}, lr)
    err = abs(float(p["w"]) - adamw_oracle(p0, grads, lrs, wd=1e-2))
    report(4, err < 1e-12, f"|AdamW - oracle| after 100 steps = {err:.1e} (< 1e-12)")
    assert err < 1e-12


# ---------------------------------------------------------------- 5

def test_5_template_distillation(default_pretrain, report):
    _, curves, dt = default_pretrain
    finals = {m: c[-1] for m, c in curves.items()}
    mono = {m: bool(np.all(np.diff(trainer.smooth(c, 10)) >= 0)) for m, c in curves.items()}
    ok = all(v >= T_CORR for v in finals.values()) and all(mono.values()) and dt < 600
    detail = ", ".join(f"{m} r={finals[m]:.3f} mono={mono[m]}" for m in curves)
    report(5, ok, f"{detail} (need r >= {T_CORR}, monotone), {dt:.0f}s (< 600s)")
    assert dt < 600
    assert all(v >= T_CORR for v in finals.values()), finals
    assert all(mono.values()), mono


# ---------------------------------------------------------------- 6

def test_6_training_behavior(default_pretrain, report):
    runlog, _, _ = default_pretrain
    cfg = trainer.PretrainConfig()
    s = trainer.smooth(runlog.column("l_ssl"), 10)
    ratio = s[200] / s[10]
    gate_ok = all(r["cl_active"] == 0 and r["l_cl"] == 0.0
                  and r["l_ssl"] == r["l_cmr"] + cfg.weights.lambda_md * r["l_md"]
                  for r in runlog.records if r["epoch"] < cfg.gate_epoch())
    after = [r for r in runlog.records if r["epoch"] >= cfg.gate_epoch()]
    gate_ok = gate_ok and bool(after) and all(r["cl_active"] == 1 for r in after)
    ok = ratio < 0.7 and gate_ok
    report(6, ok, f"smoothed L_SSL step200/step10 = {ratio:.3f} (< 0.7), gate decomposition exact {gate_ok}")
    assert ratio < 0.7
    assert gate_ok


# ---------------------------------------------------------------- 7

def test_7_label_efficiency(default_data, report):
    studies, splits = default_data
    by_id = {s.study_id: s for s in studies}
    t0 = time.perf_counter()
    pre, bank, _ = trainer.run_pretrain(trainer.PretrainConfig(), A7_NET,
                                        [by_id[i] for i in splits["train"]])
    frac = LABELED / len(splits["train"])
    cfg = D.FinetuneConfig(label_fractions=(frac,), epochs=A7_FINETUNE_EPOCHS)
    rows = D.run_label_efficiency(cfg, A7_NET, studies, splits, pre, bank, seeds=(0, 1, 2))
    dt = time.perf_counter() - t0
    assert all(r["n_train"] == LABELED for r in rows)
    mean = {k: float(np.mean([r["dice_mean"] for r in rows if r["init"] == k])) for k in ("scratch", "pretrained")}
    ok = mean["pretrained"] >= mean["scratch"] + 0.02 and dt < 900
    report(7, ok, f"test Dice pretrained {mean['pretrained']:.3f} vs scratch {mean['scratch']:.3f} "
                  f"(need +0.02), {dt:.0f}s (< 900s)")
    assert dt < 900
    assert mean["pretrained"] >= mean["scratch"] + 0.02, mean


# ---------------------------------------------------------------- 8

def test_8_metric_oracles(report):
    checks = {}
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, :4] = True
    b[0, 0, :2] = True
    checks["dice"] = abs(D.dice_score(a, b) - 2 / 3) < 1e-12 and D.dice_score(a, a) == 1.0
    p = np.zeros((8, 8, 8), bool)
    q = np.zeros((8, 8, 8), bool)
    p[1, 1, 1] = True
    q[1, 1, 4] = True
    checks["hd95_unit"] = D.hd95(p, q) == 3.0 and D.hd95(p, p) == 0.0
    rng = np.random.default_rng(95)
    brute = True
    for _ in range(50):
        x = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)
        y = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)
        brute &= abs(D.hd95(x, y) - hd95_oracle(x, y)) < 1e-12
    checks["hd95_brute_50"] = bool(brute)
    ex = [(0.9, 1), (0.4, 0), (0.6, 1), (0.3, 0)]
    checks["acc_auc_f1"] = D.cls_metrics(ex) == (1.0, 1.0, 1.0)
    checks["auc_inverted"] = D.cls_metrics([(1 - s, l) for s, l in ex])[1] == 0.0
    s = np.round(rng.random(20), 1)
    y = (rng.random(20) < 0.5).astype(int)
    y[:2] = [0, 1]
    checks["auc_pairwise"] = abs(D.cls_metrics(list(zip(s, y)))[1] - auc_oracle(s, y)) < 1e-12
    checks["f1_half"] = abs(D.cls_metrics([(0.9, 1), (0.8, 0), (0.1, 1), (0.2, 0)])[2] - 0.5) < 1e-12
    ok = all(checks.values())
    report(8, ok, " ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()))
    assert ok, checks


# ---------------------------------------------------------------- 9

def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_9_determinism_and_formats(tmp_path, report):
    studies, _ = synthgen.gen_dataset(synthgen.GenConfig(), 10, workers=1)
    cfg = trainer.PretrainConfig(epochs=2, batch_size=4)
    net = autonet.NetConfig(stage_channels=(4, 8), embed_dim=8)
    for run in ("a", "b"):
        trainer.run_pretrain(cfg, net, studies, out_dir=tmp_path / run)
    same_log = _sha(tmp_path / "a" / "runlog.tsv") == _sha(tmp_path / "b" / "runlog.tsv")
    same_ck = _sha(tmp_path / "a" / "checkpoint.mvpc") == _sha(tmp_path / "b" / "checkpoint.mvpc")

    rng = np.random.default_rng(9)
    mvpv = True
    for dt in (np.float32, np.float64):
        arr = rng.normal(size=(5, 7, 3)).astype(dt)
        arr.flat[0] = np.finfo(dt).max
        arr.flat[1] = -np.finfo(dt).tiny
        v = Volume(arr)
        back = decode_volume(encode_volume(v))
        mvpv &= back.data.dtype == dt and back.data.tobytes() == v.data.tobytes()
        save_volume(v, tmp_path / "v.mvpv")
        mvpv &= load_volume(tmp_path / "v.mvpv").data.tobytes() == v.data.tobytes()
    st = autonet.init_state(net, 5)
    autonet.save_checkpoint(st, tmp_path / "c.mvpc")
    back = autonet.load_checkpoint(tmp_path / "c.mvpc", net)
    ck = back.digest() == st.digest() and all(back.params[k].tobytes() == v.tobytes() for k, v in st.params.items())
    autonet.save_checkpoint(back, tmp_path / "c2.mvpc")
    ck &= _sha(tmp_path / "c.mvpc") == _sha(tmp_path / "c2.mvpc")
    ok = same_log and same_ck and bool(mvpv) and ck
    report(9, ok, f"runlog hash equal {same_log}, checkpoint hash equal {same_ck}, "
                  f"MVPV round-trip {bool(mvpv)}, checkpoint round-trip {ck}")
    assert ok
