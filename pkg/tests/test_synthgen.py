import numpy as np
import pytest
from scipy.stats import spearmanr

from brainmvp import synthgen
from brainmvp.synthgen import ConfigError, GenConfig, gen_dataset, gen_study, split_sizes
from brainmvp.volcore import read_manifest


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(dims=(12, 16, 16)), dict(dims=(4, 4)), dict(num_modalities=0), dict(num_modalities=9),
        dict(curves=((0.1, 0.5, 0.3),) * 3), dict(curves=((0.0, 1.5),) * 3),
        dict(lesion_radius=(1.0, 5.0)), dict(noise_sigma=-1.0), dict(blob_radius=(1.0, 9.0)),
    ])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ConfigError):
            GenConfig(**kw)

    def test_decreasing_curve_ok(self):
        GenConfig(curves=((0.9, 0.5, 0.1),) * 3)

    def test_curves_monotone(self):
        for c, sign in zip(synthgen.transfer_curves(GenConfig()), GenConfig().contrast_signs):
            d = np.diff(c)
            assert np.all(d > 0) if sign > 0 else np.all(d < 0)


class TestStudy:
    def test_deterministic(self):
        a, b = gen_study(GenConfig(), 3), gen_study(GenConfig(), 3)
        assert all(a.modalities[m] == b.modalities[m] for m in a.modalities)
        assert a.seg_label == b.seg_label and a.cls_label == b.cls_label

    def test_identity_curves_no_noise_equal(self):
        cfg = GenConfig(noise_sigma=0.0, curves=((0.0, 1.0), (0.0, 1.0), (0.0, 0.5, 1.0)),
                        lesion_contrast=(0.3, 0.3, 0.3))
        st = gen_study(cfg, 0)
        assert st.modalities["T1"] == st.modalities["T1CE"]

    def test_shared_structure_rank_correlation(self):
        cfg = GenConfig(noise_sigma=0.0, lesion_enabled=False)
        st = gen_study(cfg, 1)
        a = synthgen.anatomy_field(cfg, np.random.default_rng(synthgen.study_seed(cfg.seed, 1)))
        order = np.argsort(a.ravel(), kind="stable")
        for m, sign in zip(cfg.modality_names, cfg.contrast_signs):
            v = st.modalities[m].data.ravel()
            # float32 storage can merge neighbours into ties but never reorders them
            d = np.diff(v[order].astype(np.float64)) * sign
            assert np.all(d >= 0)
            assert spearmanr(a.ravel(), v).statistic * sign > 0.999

    def test_label_fidelity(self):
        cfg = GenConfig(lesion_prob=1.0)
        for i in range(5):
            st = gen_study(cfg, i)
            les = st.meta["lesion"]
            grid = np.meshgrid(*[np.arange(d) for d in cfg.dims], indexing="ij")
            inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, les["center"], les["radii"])) <= 1
            pos = st.seg_label.data > 0
            assert pos.any() and np.all(inside[pos])
            assert st.cls_label == synthgen.lesion_class(les["radii"], True, cfg.cls_volume_threshold)

    def test_no_lesion_class_zero(self):
        st = gen_study(GenConfig(lesion_prob=0.0), 0)
        assert st.cls_label == 0 and not st.seg_label.data.any()

    def test_values_in_unit_range(self):
        st = gen_study(GenConfig(), 2)
        for v in st.modalities.values():
            assert v.data.min() >= 0 and v.data.max() <= 1 and v.data.dtype == np.float32


class TestDataset:
    @pytest.mark.parametrize("n,sizes", [(10, (6, 1, 3)), (64, (38, 6, 20)), (0, (0, 0, 0)), (1, (1, 0, 0))])
    def test_split_sizes(self, n, sizes):
        assert split_sizes(n) == sizes

    def test_write_and_rerun_idempotent(self, tmp_path):
        cfg = GenConfig()
        studies, splits = gen_dataset(cfg, 10, out_dir=tmp_path)
        first = (tmp_path / "manifest.json").read_bytes()
        gen_dataset(cfg, 10, out_dir=tmp_path)
        assert (tmp_path / "manifest.json").read_bytes() == first
        back, _, sp = read_manifest(tmp_path)
        assert [len(sp[k]) for k in ("train", "val", "test")] == [6, 1, 3]
        assert sorted(sum(sp.values(), [])) == sorted(s.study_id for s in studies)

    def test_empty(self, tmp_path):
        studies, splits = gen_dataset(GenConfig(), 0, out_dir=tmp_path)
        assert studies == [] and read_manifest(tmp_path)[0] == []

    def test_workers_same_result(self):
        a, _ = gen_dataset(GenConfig(), 6, workers=1)
        b, _ = gen_dataset(GenConfig(), 6, workers=3)
        assert all(x.modalities["T2"] == y.modalities["T2"] for x, y in zip(a, b))

    def test_gradient_magnitude_cross_modal_correlation(self):
        studies, _ = gen_dataset(GenConfig(), 64)
        rs = []
        for st in studies:
            g = [synthgen.gradient_magnitude(v.data).ravel() for v in st.modalities.values()]
            for i in range(len(g)):
                for j in range(i + 1, len(g)):
                    rs.append(np.corrcoef(g[i], g[j])[0, 1])
        assert np.mean(rs) >= 0.5
