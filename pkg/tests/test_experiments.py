import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdconv import zoo
from sdconv.analysis import count_cost, measure_sparsity
from sdconv.config import parse_config
from sdconv.errors import AnalysisError, ConfigError
from sdconv.experiments import (RunningStats, kernel_statistics, magnitude_mask, masking_strategy_compare,
                                noise_robustness, prune_pretrained, robustness_csv, sparsity_sweep, sweep_csv)
from sdconv.sdconv import MaskMode
from sdconv.tensor import Tensor
from sdconv.train import evaluate, train

from test_train import FAST


def toy(mode=MaskMode.DYNAMIC, seed=0):
    return zoo.build_model(zoo.toy_cnn(mode=mode, widths=(8, 16, 16), reduce_ratio=8),
                           np.random.default_rng(seed)).eval()


# -- pruning ----------------------------------------------------------------------------------

def test_magnitude_mask_sort_and_cut():
    np.testing.assert_array_equal(magnitude_mask(np.array([1.0, -2.0, 3.0, 4.0]), 0.5), [False, False, True, True])
    np.testing.assert_array_equal(magnitude_mask(np.array([4.0, 1.0, -3.0, 2.0]), 0.5), [True, False, True, False])


def test_magnitude_mask_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        magnitude_mask(np.ones(3), 1.0)


def test_prune_zero_fraction_is_identity(rng):
    model = toy()
    x = Tensor(rng.standard_normal((2, 1, 28, 28)).astype(np.float32))
    np.testing.assert_array_equal(prune_pretrained(model, 0.0)(x).data, model(x).data)


@pytest.mark.parametrize("fraction", [0.25, 0.5, 0.9])
def test_prune_density_is_exact_per_layer(fraction):
    pruned = prune_pretrained(toy(), fraction)
    for layer in measure_sparsity(pruned).layers:
        assert layer.density == pytest.approx(1 - fraction, abs=1 / layer.params)


def test_prune_leaves_original_untouched():
    model = toy()
    prune_pretrained(model, 0.5)
    assert all(layer.fixed_masks is None for _, layer in model.sd_layers())


def test_pruned_layers_report_reduced_sparse_macs():
    pruned = prune_pretrained(toy(), 0.5)
    rep = count_cost(pruned)
    assert rep.sparse_macs < rep.macs


# -- kernel statistics --------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=60), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_running_stats_order_independent(values, chunks, seed):
    values = np.array(values)
    a = RunningStats().update(values)
    order = np.random.default_rng(seed).permutation(len(values))
    b = RunningStats()
    for part in np.array_split(values[order], chunks):
        b.update(part)
    assert b.count == len(values)
    assert b.mean == pytest.approx(values.mean(), abs=1e-6)
    assert b.variance == pytest.approx(values.var(), abs=1e-6)
    assert a.variance == pytest.approx(b.variance, abs=1e-6)
    assert b.variance >= 0


def test_uniform_attention_stats_are_the_averaged_kernel(tiny_data):
    model = toy()
    for _, layer in model.sd_layers():
        for p in layer.attention.parameters():
            p.data[...] = 0
    stats = kernel_statistics(model, tiny_data[1])
    for name, layer in model.sd_layers():
        avg = layer.experts.data.astype(np.float64).mean(axis=0)
        s = stats.layers[name]
        assert s.mean == pytest.approx(avg.mean(), abs=1e-6)
        assert s.variance == pytest.approx(avg.var(), abs=1e-6)


def test_kernel_stats_deterministic(tiny_data):
    model = toy()
    a = kernel_statistics(model, tiny_data[1])
    b = kernel_statistics(model, tiny_data[1])
    assert a.to_csv() == b.to_csv()
    scaled = a.scaled()
    assert min(scaled["mean"].values()) == 0.0 and max(scaled["mean"].values()) == 1.0


def test_kernel_stats_need_dynamic_layers(tiny_data):
    with pytest.raises(AnalysisError):
        kernel_statistics(toy(MaskMode.STATIC), tiny_data[1])


# -- robustness ------------------------------------------------------------------------------------

def test_zero_noise_equals_clean_evaluation(tiny_data):
    model = toy()
    (sigma, acc), = noise_robustness(model, tiny_data[1], [0.0])
    assert acc == evaluate(model, tiny_data[1])


def test_noise_is_seeded(tiny_data):
    model = toy()
    a = noise_robustness(model, tiny_data[1], [0.5, 1.0], seed=3)
    assert a == noise_robustness(model, tiny_data[1], [0.5, 1.0], seed=3)
    assert robustness_csv(a).splitlines()[0] == "sigma,accuracy"


def test_noise_rejects_bad_sigmas(tiny_data):
    with pytest.raises(ConfigError):
        noise_robustness(toy(), tiny_data[1], [])
    with pytest.raises(ConfigError):
        noise_robustness(toy(), tiny_data[1], [-0.1])


# -- sweep and strategy comparison ----------------------------------------------------------------

def test_sweep_csv_and_zero_entry(tmp_path, tiny_data):
    cfg = parse_config(overrides=FAST)
    points = sparsity_sweep(cfg, [0.0, 0.5], tmp_path, *tiny_data)
    text = (tmp_path / "sweep.csv").read_text()
    assert text == sweep_csv(points)
    assert text.splitlines()[0] == "s,final_density,accuracy"
    solo = train(cfg.replace(sparsity=0.0), None, *tiny_data)
    assert points[0].final_density == 1.0
    assert (points[0].accuracy, points[0].final_density) == (solo.final_accuracy, solo.final_density)


def test_strategy_compare_properties(tmp_path, tiny_data):
    cfg = parse_config(overrides=FAST)
    diff, same = masking_strategy_compare(cfg, tmp_path, *tiny_data)
    assert (diff.mode, same.mode) == (MaskMode.DIFFERENT.value, MaskMode.SAME.value)
    for name in same.layer_sparsity:
        assert same.kernel_sparsity[name] == same.layer_sparsity[name]
        assert diff.kernel_sparsity[name] <= diff.layer_sparsity[name]
    records = (tmp_path / "compare.txt").read_text()
    assert "sparse-same-mask.accuracy=" in records and "sparse-different-masks.sparse_macs=" in records
