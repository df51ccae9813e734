import itertools
import math

import numpy as np
import pytest

from brainmvp import autonet
from brainmvp import downstream as D
from brainmvp.distill import FrozenBankError, init_bank
from brainmvp.optim import AdamW
from brainmvp.volcore import ModalityRegistry, Study, Volume

SMALL = autonet.NetConfig(stage_channels=(4, 8), embed_dim=8)
REG3 = ModalityRegistry(("T1", "T1CE", "T2"))

GOLDEN_STEP = 1.9763878411949773  # seeded scratch model, two studies, random bank


# ---------------------------------------------------------------- oracles

def surface_oracle(mask):
    """Straight-line surface: foreground voxels with a 6-neighbour that is background or off-grid."""
    out = []
    D_, H, W = mask.shape
    for z, y, x in itertools.product(range(D_), range(H), range(W)):
        if not mask[z, y, x]:
            continue
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = z + dz, y + dy, x + dx
            if not (0 <= a < D_ and 0 <= b < H and 0 <= c < W) or not mask[a, b, c]:
                out.append((z, y, x))
                break
    return np.array(out, dtype=float).reshape(-1, 3)


def hd95_oracle(a, b):
    sa, sb = surface_oracle(a), surface_oracle(b)
    if len(sa) == 0 and len(sb) == 0:
        return 0.0
    if len(sa) == 0 or len(sb) == 0:
        return math.inf
    dist = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))

    def pct(d):
        d = np.sort(d)
        return d[max(1, math.ceil(0.95 * len(d))) - 1]
    return max(pct(dist.min(axis=1)), pct(dist.min(axis=0)))


def auc_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l != 1]
    tot = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return tot / (len(pos) * len(neg))


def frozen_bank(dims=(16, 16, 16), seed=0):
    bank = init_bank(REG3, dims)
    r = np.random.default_rng(seed)
    for m in REG3:
        bank.templates[m][...] = r.random(dims).astype(np.float32)
    return bank.freeze()


# ---------------------------------------------------------------- metrics

class TestDice:
    def test_worked_example(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, :4] = True
        b[0, 0, :2] = True
        assert D.dice_score(a, b) == pytest.approx(2 / 3, abs=1e-12)

    def test_identical_and_disjoint(self):
        a = np.zeros((4, 4, 4), bool)
        a[1:3, 1:3, 1:3] = True
        assert D.dice_score(a, a) == 1.0
        assert D.dice_score(a, ~a) == 0.0

    def test_both_empty(self):
        z = np.zeros((4, 4, 4), bool)
        assert D.dice_score(z, z) == 1.0

    def test_symmetric(self, rng):
        a, b = rng.random((2, 6, 6, 6)) > 0.5
        assert D.dice_score(a, b) == D.dice_score(b, a)


class TestHD95:
    def test_identical_zero(self):
        a = np.zeros((8, 8, 8), bool)
        a[2:5, 2:6, 3:7] = True
        assert D.hd95(a, a) == 0.0

    def test_single_voxels(self):
        a = np.zeros((8, 8, 8), bool)
        b = np.zeros((8, 8, 8), bool)
        a[1, 1, 1] = True
        b[1, 1, 4] = True
        assert D.hd95(a, b) == 3.0

    def test_empty_cases(self):
        z = np.zeros((8, 8, 8), bool)
        a = z.copy()
        a[3, 3, 3] = True
        assert D.hd95(z, z) == 0.0
        assert math.isinf(D.hd95(a, z)) and math.isinf(D.hd95(z, a))

    def test_brute_force_equivalence(self):
        r = np.random.default_rng(95)
        for i in range(50):
            dens = r.uniform(0.05, 0.6, size=2)
            a = r.random((8, 8, 8)) < dens[0]
            b = r.random((8, 8, 8)) < dens[1]
            if i % 10 == 0:
                a = np.zeros_like(a)
                a[2:6, 2:6, 2:6] = True
            assert D.hd95(a, b) == pytest.approx(hd95_oracle(a, b), abs=1e-12), i

    def test_surface_matches_oracle(self, rng):
        m = rng.random((8, 8, 8)) < 0.5
        got = {tuple(v) for v in D.surface_voxels(m)}
        assert got == {tuple(int(c) for c in v) for v in surface_oracle(m)}

    def test_bounded_by_hausdorff(self, rng):
        for _ in range(20):
            a, b = rng.random((2, 8, 8, 8)) < 0.3
            assert D.hd95(a, b) <= D.hausdorff(a, b) + 1e-12

    def test_symmetric(self, rng):
        a, b = rng.random((2, 8, 8, 8)) < 0.3
        assert D.hd95(a, b) == D.hd95(b, a)


class TestClsMetrics:
    EXAMPLE = [(0.9, 1), (0.4, 0), (0.6, 1), (0.3, 0)]

    def test_worked_example(self):
        acc, auc, f1 = D.cls_metrics(self.EXAMPLE)
        assert (acc, auc, f1) == (1.0, 1.0, 1.0)

    def test_inverted_scores(self):
        acc, auc, f1 = D.cls_metrics([(1 - s, l) for s, l in self.EXAMPLE])
        assert auc == 0.0 and acc == 0.0 and f1 == 0.0

    def test_auc_against_pairwise_oracle(self, rng):
        for _ in range(20):
            s = np.round(rng.random(15), 1)  # rounding forces ties
            y = (rng.random(15) < 0.5).astype(int)
            y[:2] = [0, 1]
            _, auc, _ = D.cls_metrics(list(zip(s, y)))
            assert auc == pytest.approx(auc_oracle(s, y), abs=1e-12)

    def test_auc_monotone_invariant(self, rng):
        s = rng.random(30)
        y = (rng.random(30) < 0.4).astype(int)
        y[:2] = [0, 1]
        _, a1, _ = D.cls_metrics(list(zip(s, y)))
        _, a2, _ = D.cls_metrics(list(zip(np.exp(3 * s) - 7, y)))
        assert a1 == a2

    def test_f1_no_positives_anywhere(self):
        acc, auc, f1 = D.cls_metrics([(0.1, 0), (0.2, 0)])
        assert acc == 1.0 and f1 == 1.0 and math.isnan(auc)

    def test_f1_formula(self):
        # tp=1, fp=1, fn=1
        _, _, f1 = D.cls_metrics([(0.9, 1), (0.8, 0), (0.1, 1), (0.2, 0)])
        assert f1 == pytest.approx(0.5)


class TestReport:
    def test_evaluate_predictions_perfect(self, rng):
        tg = [rng.random((8, 8, 8)) < 0.3 for _ in range(3)]
        rep = D.evaluate_predictions(tg, tg)
        assert rep.dice == [1.0, 1.0, 1.0] and rep.dice_mean == 1.0
        assert rep.hd95_mean == 0.0 and rep.hd95_missing == 0

    def test_missing_hd95_counted(self):
        a = np.zeros((8, 8, 8), bool)
        b = a.copy()
        b[4, 4, 4] = True
        rep = D.evaluate_predictions([a, b], [b, b])
        assert rep.hd95_missing == 1 and rep.hd95_mean == 0.0
        assert '"hd95": [\n    null,' in rep.to_json()


# ---------------------------------------------------------------- template replacement

class TestReplacement:
    def test_k_zero_and_all(self, small_dataset):
        st = small_dataset[0][0]
        bank = frozen_bank()
        same = D.replace_with_templates(st, bank, 0, np.random.default_rng(0))
        for m in st.modality_names:
            np.testing.assert_array_equal(same.modalities[m].data, st.modalities[m].data)
        full = D.replace_with_templates(st, bank, 3, np.random.default_rng(0))
        for m in st.modality_names:
            np.testing.assert_array_equal(full.modalities[m].data, bank.templates[m])
        np.testing.assert_array_equal(full.seg_label.data, st.seg_label.data)

    def test_exactly_k_replaced(self, small_dataset):
        st = small_dataset[0][0]
        bank = frozen_bank()
        for k in range(4):
            out = D.replace_with_templates(st, bank, k, np.random.default_rng(k))
            n = sum(np.array_equal(out.modalities[m].data, bank.templates[m]) for m in st.modality_names)
            assert n == k

    def test_unfrozen_rejected(self, small_dataset):
        bank = init_bank(REG3, (16, 16, 16))
        with pytest.raises(FrozenBankError):
            D.replace_with_templates(small_dataset[0][0], bank, 1, np.random.default_rng(0))

    def test_seeded(self, small_dataset):
        st = small_dataset[0][0]
        bank = frozen_bank()
        a = D.replace_with_templates(st, bank, 2, np.random.default_rng(5))
        b = D.replace_with_templates(st, bank, 2, np.random.default_rng(5))
        for m in st.modality_names:
            np.testing.assert_array_equal(a.modalities[m].data, b.modalities[m].data)

    def test_template_fit_crop(self):
        tpl = np.arange(8 ** 3, dtype=np.float32).reshape(8, 8, 8)
        np.testing.assert_array_equal(D._fit_template(tpl, (4, 4, 4)), tpl[2:6, 2:6, 2:6])
        assert D._fit_template(tpl[:4, :4, :4], (8, 8, 8)).shape == (8, 8, 8)


class TestUnimodal:
    def test_p_zero_identity(self, rng):
        x = Volume(rng.random((8, 8, 8)).astype(np.float32))
        t = Volume(np.full((8, 8, 8), -1.0, np.float32))
        np.testing.assert_array_equal(D.unimodal_template_mask(x, t, 2, 0.0, rng).data, x.data)

    def test_p_one_is_template(self, rng):
        x = Volume(rng.random((8, 8, 8)).astype(np.float32))
        t = Volume(np.full((8, 8, 8), -1.0, np.float32))
        np.testing.assert_array_equal(D.unimodal_template_mask(x, t, 2, 1.0, rng).data, t.data)

    def test_single_modality_copies_differ(self, rng):
        reg = ModalityRegistry(("T1", "T2"))
        x = Volume(rng.random((8, 8, 8)).astype(np.float32))
        st = Study("s", {"T1": x}, Volume(np.zeros((8, 8, 8), np.float32)))
        bank = init_bank(reg, (8, 8, 8)).freeze()
        a, b = D.make_copies(st, bank, D.FinetuneConfig(r=2, p_star=0.5), rng)
        assert a.shape == b.shape == (1, 8, 8, 8)
        assert not np.array_equal(a, b)
        assert np.all((a == x.data) | (a == 0))


# ---------------------------------------------------------------- fine-tuning

class TestFinetuneStep:
    def _state(self, cfg, seed=0):
        return D.build_model(SMALL, 3, cfg, None, seed)

    def test_no_replacement_cons_zero(self, small_dataset):
        studies = small_dataset[0][:2]
        cfg = D.FinetuneConfig(replace_m=0, replace_n=0, init="scratch")
        st = self._state(cfg)
        rec = D.finetune_step(st, studies, frozen_bank(), cfg, AdamW(), 1e-3,
                              np.random.default_rng(0), update=False)
        assert rec["identical_copies"]
        assert rec["l_cons"] == 0.0
        assert rec["l_sl1"] == rec["l_sl2"]
        assert rec["l_ft"] == pytest.approx(2 * rec["l_sl1"], rel=1e-15)

    def test_replacement_makes_cons_positive(self, small_dataset):
        cfg = D.FinetuneConfig(replace_m=0, replace_n=2, init="scratch")
        st = self._state(cfg)
        rec = D.finetune_step(st, small_dataset[0][:2], frozen_bank(), cfg, AdamW(), 1e-3,
                              np.random.default_rng(0), update=False)
        assert not rec["identical_copies"] and rec["l_cons"] > 0

    def test_golden_loss(self, small_dataset):
        cfg = D.FinetuneConfig(init="scratch")
        st = self._state(cfg, seed=3)
        rec = D.finetune_step(st, small_dataset[0][:2], frozen_bank(seed=1), cfg, AdamW(), 1e-3,
                              np.random.default_rng(11))
        assert rec["l_ft"] == pytest.approx(GOLDEN_STEP, abs=1e-6)

    def test_bank_untouched(self, small_dataset):
        bank = frozen_bank()
        before = bank.digest()
        cfg = D.FinetuneConfig(epochs=2, batch_size=2)
        pre = autonet.init_state(SMALL, 0)
        D.run_finetune(cfg, SMALL, small_dataset[0][:4], pre, bank)
        assert bank.digest() == before

    def test_classification_step(self, small_dataset):
        cfg = D.FinetuneConfig(task="classification", init="scratch")
        st = D.build_model(SMALL, 3, cfg, None, 0)
        assert st.config.cls_out == 2 and st.config.seg_out == 0
        rec = D.finetune_step(st, small_dataset[0][:3], None, cfg, AdamW(), 1e-3, np.random.default_rng(0))
        assert rec["l_ft"] == pytest.approx(2 * rec["l_sl1"]) and np.isfinite(rec["l_ft"])

    def test_pretrained_widening(self):
        pre = autonet.init_state(SMALL, 4)
        st = D.build_model(SMALL, 3, D.FinetuneConfig(), pre, 0)
        assert st.params["enc0.w"].shape[1] == 3
        np.testing.assert_allclose(st.params["enc0.w"].sum(axis=1), pre.params["enc0.w"][:, 0], rtol=1e-6)


class TestRuns:
    def test_run_finetune_deterministic(self, small_dataset):
        cfg = D.FinetuneConfig(epochs=2, batch_size=2, init="scratch")
        a, ra = D.run_finetune(cfg, SMALL, small_dataset[0][:4], seed=2)
        b, rb = D.run_finetune(cfg, SMALL, small_dataset[0][:4], seed=2)
        assert a.digest() == b.digest() and ra == rb
        assert len(ra) == 4

    def test_empty_train_rejected(self):
        with pytest.raises(ValueError):
            D.run_finetune(D.FinetuneConfig(init="scratch"), SMALL, [])

    def test_nested_subsets(self):
        ids = [f"s{i}" for i in range(20)]
        subs = D.nested_subsets(ids, [0.2, 0.4, 1.0], seed=0)
        assert [len(s) for s in subs] == [4, 8, 20]
        assert subs[1][:4] == subs[0] and sorted(subs[2]) == sorted(ids)
        assert D.nested_subsets(ids, [0.2], 0) == D.nested_subsets(ids, [0.2], 0)
        assert D.nested_subsets(ids, [0.5], 0) != D.nested_subsets(ids, [0.5], 1)

    def test_label_efficiency_single_fraction(self, small_dataset):
        studies, splits = small_dataset
        cfg = D.FinetuneConfig(label_fractions=(1.0,), epochs=1, batch_size=4)
        pre = autonet.init_state(SMALL, 0)
        rows = D.run_label_efficiency(cfg, SMALL, studies, splits, pre, frozen_bank(), seeds=(0,))
        assert [r["init"] for r in rows] == ["scratch", "pretrained"]
        assert all(r["n_train"] == len(splits["train"]) and r["n_samples"] == 3 for r in rows)
        tsv = D.curves_tsv(rows).splitlines()
        assert tsv[0].split("\t")[:4] == ["init", "fraction", "seed", "n_train"] and len(tsv) == 3

    @pytest.mark.parametrize("bad", [(), (0.5, 0.5), (0.0,), (1.2,), (0.6, 0.4)])
    def test_bad_fractions(self, bad):
        with pytest.raises(ValueError):
            D.FinetuneConfig(label_fractions=bad)
