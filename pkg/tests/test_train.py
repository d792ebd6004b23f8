import numpy as np
import pytest

from sdconv import checkpoint as ckpt_io
from sdconv import nn
from sdconv import train as train_mod
from sdconv.analysis import sparse_forward
from sdconv.config import parse_config
from sdconv.data import Dataset
from sdconv.errors import ContractError, TrainingDiverged
from sdconv.tensor import Tensor
from sdconv.train import evaluate, load_model, stream, train

FAST = ["epochs=3", "batch_size=16", "warmup_epochs=0.5", "lambda_s=1.0", "widths=8,16,16", "reduce_ratio=8"]


def fast_cfg(*extra):
    return parse_config(overrides=FAST + list(extra))


class Lookup(nn.Module):
    """Returns one-hot logits for memorized inputs."""

    def __init__(self, dataset):
        self.table = {x.tobytes(): y for x, y in dataset}

    def forward(self, x):
        out = np.zeros((x.shape[0], 10), np.float32)
        for i, row in enumerate(x.data):
            out[i, self.table[row.tobytes()]] = 1.0
        return Tensor(out)


class RandomLogits(nn.Module):
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return Tensor(self.rng.standard_normal((x.shape[0], 10)))


# -- evaluate ------------------------------------------------------------------------------

def test_evaluate_memorizing_model_is_perfect(tiny_data):
    train_set, _ = tiny_data
    assert evaluate(Lookup(train_set), train_set) == 1.0


def test_evaluate_random_logits_is_chance():
    ds = Dataset(np.zeros((10000, 1, 1, 1), np.float32), np.random.default_rng(0).integers(0, 10, 10000))
    assert evaluate(RandomLogits(1), ds) == pytest.approx(0.1, abs=0.02)


def test_evaluate_empty_dataset_is_contract_error():
    with pytest.raises(ContractError):
        evaluate(RandomLogits(0), Dataset(np.zeros((0, 1, 1, 1), np.float32), np.zeros(0, np.int64)))


# -- training loop -------------------------------------------------------------------------

def test_named_streams_are_independent_of_each_other():
    a = stream(3, "shuffle").random(4)
    stream(3, "noise").random(100)
    np.testing.assert_array_equal(a, stream(3, "shuffle").random(4))
    assert not np.array_equal(a, stream(3, "init").random(4))


def test_training_learns_and_logs(tmp_path, tiny_data):
    result = train(fast_cfg(), tmp_path, *tiny_data)
    assert result.final_accuracy > 0.5
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,train_loss,task_loss,sparsity_loss,eval_acc,global_density,lr"
    assert len(lines) == 4
    layers = (tmp_path / "layers.csv").read_text().splitlines()
    assert layers[0].startswith("epoch,layer,") and len(layers) == 1 + 3 * 2
    assert (tmp_path / "config.txt").read_text() == result.config.to_text()


def test_equal_seeds_give_identical_logs(tmp_path, tiny_data):
    train(fast_cfg(), tmp_path / "a", *tiny_data)
    train(fast_cfg(), tmp_path / "b", *tiny_data)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.sdcv").read_bytes() == (tmp_path / "b" / "checkpoint.sdcv").read_bytes()


def test_different_seed_changes_run(tmp_path, tiny_data):
    a = train(fast_cfg(), None, *tiny_data)
    b = train(fast_cfg("seed=1"), None, *tiny_data)
    assert a.metrics != b.metrics


def test_zero_sparsity_stays_dense(tiny_data):
    result = train(fast_cfg("sparsity=0"), None, *tiny_data)
    assert all(row["global_density"] == 1.0 for row in result.metrics)
    assert all(row["sparsity_loss"] == 0.0 for row in result.metrics)


def test_nan_loss_aborts_with_layer_dump(tiny_data):
    train_set, test_set = tiny_data
    bad = Dataset(train_set.images.copy(), train_set.labels)
    bad.images[:] = np.nan
    with pytest.raises(TrainingDiverged, match="block1.conv.experts"):
        train(fast_cfg(), None, bad, test_set)


def test_resume_continues_exactly(tmp_path, tiny_data, monkeypatch):
    full = train(fast_cfg(), tmp_path / "full", *tiny_data)

    calls = {"n": 0}
    real_eval = train_mod.evaluate

    def crash_on_second_epoch(model, dataset, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise KeyboardInterrupt
        return real_eval(model, dataset, *a, **kw)

    monkeypatch.setattr(train_mod, "evaluate", crash_on_second_epoch)
    with pytest.raises(KeyboardInterrupt):
        train(fast_cfg(), tmp_path / "resumed", *tiny_data)
    monkeypatch.setattr(train_mod, "evaluate", real_eval)
    assert ckpt_io.load(tmp_path / "resumed" / "checkpoint.sdcv").meta["epoch"] == "1"
    resumed = train(fast_cfg(), tmp_path / "resumed", *tiny_data, resume=True)

    # rows from before the restart are read back from the (rounded) CSV
    assert resumed.metrics[1:] == full.metrics[1:]
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "resumed" / "metrics.csv").read_bytes()
    a = ckpt_io.load(tmp_path / "full" / "checkpoint.sdcv")
    b = ckpt_io.load(tmp_path / "resumed" / "checkpoint.sdcv")
    assert a.tensors.keys() == b.tensors.keys()
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes(), k
    assert a.schedule == b.schedule


def test_checkpoint_restores_model_bitwise(tmp_path, tiny_data):
    result = train(fast_cfg(), tmp_path, *tiny_data)
    model, cfg, ckpt = load_model(result.checkpoint)
    assert cfg == result.config
    assert any(k.startswith("optim.velocity.") for k in ckpt.tensors)
    assert any(k.endswith("running_var") for k in ckpt.tensors)
    x = Tensor(tiny_data[1].images[:16])
    model.eval()
    result.model.eval()
    np.testing.assert_array_equal(model(x).data, result.model(x).data)
    assert evaluate(model, tiny_data[1]) == result.final_accuracy


def test_sparse_executor_accuracy_matches_dense(tiny_data):
    result = train(fast_cfg(), None, *tiny_data)
    model = result.model.eval()
    test_set = tiny_data[1]
    run = sparse_forward(test_set.images, model)
    sparse_acc = float((run.output.data.argmax(1) == test_set.labels).mean())
    assert sparse_acc == evaluate(model, test_set)
    assert run.total_macs < sum(run.dense_macs.values())


def test_logged_density_tracks_the_schedule(tiny_data):
    cfg = fast_cfg("epochs=5", "pruning_iterations=4")
    result = train(cfg, None, *tiny_data)
    dens = [row["global_density"] for row in result.metrics]
    assert all(b <= a + 0.005 for a, b in zip(dens, dens[1:]))
    assert dens[-1] <= 0.5 + 0.02
