import json

import numpy as np
import pytest

import sublab.tensor as tz
from sublab.config import DataConfig, ExperimentConfig, TrainConfig
from sublab.model import ModelConfig, init_model
from sublab.training import (
    Adam,
    RunDirectory,
    TrainingDivergedError,
    finetune,
    inverse_sqrt_lr,
    smoothed_cross_entropy,
    train,
)

QUIET = lambda *args, **kwargs: None


def tiny_experiment(epochs=2, n_pairs=32, seed=1, lr_scale=1.0, warmup=50):
    return ExperimentConfig(
        data=DataConfig(task="copy", n_pairs=n_pairs, seed=seed,
                        valid_size=16, test_size=16),
        model=ModelConfig(enc_layers=1, dec_layers=1, d_model=16,
                          d_ff=32, n_heads=2),
        train=TrainConfig(epochs=epochs, batch_size=16, warmup=warmup,
                          lr_scale=lr_scale, seed=seed),
    )


def test_inverse_sqrt_schedule_shape():
    d, warmup = 32, 400
    peak = inverse_sqrt_lr(warmup, d, warmup)
    assert inverse_sqrt_lr(warmup - 1, d, warmup) < peak
    assert inverse_sqrt_lr(warmup + 1, d, warmup) < peak
    assert inverse_sqrt_lr(1, d, warmup) == pytest.approx(d ** -0.5 * warmup ** -1.5)
    assert inverse_sqrt_lr(4 * warmup, d, warmup) == pytest.approx(peak / 2.0)
    with pytest.raises(ValueError):
        inverse_sqrt_lr(0, d, warmup)


def test_smoothed_cross_entropy_hand_value():
    rng = np.random.default_rng(0)
    logits_np = rng.normal(size=(1, 2, 5))
    tgt = np.array([[3, 0]])  # second position is pad and must not count
    logits = tz.constant(logits_np.copy())
    loss = smoothed_cross_entropy(logits, tgt, smoothing=0.1)

    z = logits_np[0, 0]
    logp = z - np.log(np.exp(z - z.max()).sum()) - z.max()
    expected = 0.9 * (-logp[3]) + 0.1 * (-logp.sum() / 5)
    assert abs(loss.data - expected) < 1e-12


def test_smoothed_cross_entropy_zero_smoothing_is_nll():
    rng = np.random.default_rng(1)
    logits_np = rng.normal(size=(2, 3, 7))
    tgt = rng.integers(1, 7, size=(2, 3))
    loss = smoothed_cross_entropy(tz.constant(logits_np.copy()), tgt, smoothing=0.0)

    z = logits_np - logits_np.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    expected = -np.take_along_axis(logp, tgt[..., None], axis=-1).mean()
    assert abs(loss.data - expected) < 1e-12


def test_smoothed_cross_entropy_all_pad_rejected():
    logits = tz.constant(np.zeros((1, 2, 4)))
    with pytest.raises(ValueError):
        smoothed_cross_entropy(logits, np.zeros((1, 2), dtype=np.int64), 0.1)


def test_adam_zero_grad_is_exact_noop():
    params = init_model(ModelConfig(enc_layers=1, dec_layers=1, d_model=16,
                                    d_ff=32, n_heads=2), seed=3)
    before = {k: v.data.copy() for k, v in params.values.items()}
    adam = Adam(params.values.keys())
    for tensor in params.values.values():
        tensor.grad = np.zeros_like(tensor.data)
    adam.step(params, lr=0.5)
    for name, arr in before.items():
        assert np.array_equal(params.values[name].data, arr)
    assert params.step == 1


def test_adam_first_step_is_signed_lr():
    params = init_model(ModelConfig(enc_layers=1, dec_layers=1, d_model=16,
                                    d_ff=32, n_heads=2), seed=3)
    name = "out_proj.w"
    before = params.values[name].data.copy()
    adam = Adam(params.values.keys())
    for tensor in params.values.values():
        tensor.grad = np.zeros_like(tensor.data)
    grad = np.full_like(before, 2.0)
    params.values[name].grad = grad
    adam.step(params, lr=0.01)
    # bias-corrected m/sqrt(v) is sign(g) on the first step, up to epsilon
    moved = before - params.values[name].data
    assert np.allclose(moved, 0.01, atol=1e-9)


def test_train_writes_run_layout(tmp_path):
    exp = tiny_experiment()
    run = train(exp, tmp_path / "run", log=QUIET)
    assert run.config_path.exists()
    assert run.epochs() == [0, 1, 2]
    assert run.checkpoint_path("final").exists()
    metrics = run.read_metrics()
    assert [m["epoch"] for m in metrics] == [1, 2]
    for record in metrics:
        assert set(record) == {"step", "epoch", "train_loss", "valid_bleu"}
    assert run.experiment() == exp


def test_train_is_bit_deterministic(tmp_path):
    exp = tiny_experiment()
    run_a = train(exp, tmp_path / "a", log=QUIET)
    run_b = train(exp, tmp_path / "b", log=QUIET)
    for rel in ("config.ini", "metrics.jsonl", "checkpoints/final.cscp",
                "checkpoints/epoch_001.cscp"):
        assert (run_a.path / rel).read_bytes() == (run_b.path / rel).read_bytes()


def test_train_seed_changes_outcome(tmp_path):
    run_a = train(tiny_experiment(seed=1), tmp_path / "a", log=QUIET)
    run_b = train(tiny_experiment(seed=2), tmp_path / "b", log=QUIET)
    final_a = run_a.load_checkpoint("final")
    final_b = run_b.load_checkpoint("final")
    assert not np.array_equal(final_a.values["src_embed"].data,
                              final_b.values["src_embed"].data)


def test_init_snapshot_stable_across_epochs(tmp_path):
    exp = tiny_experiment()
    run = train(exp, tmp_path / "run", log=QUIET)
    first = run.load_checkpoint(0)
    last = run.load_checkpoint("final")
    assert set(first.init_values) == set(last.init_values)
    for name in first.init_values:
        assert np.array_equal(first.init_values[name], last.init_values[name])
        assert np.array_equal(first.values[name].data, first.init_values[name])
    assert not np.array_equal(last.values["src_embed"].data,
                              last.init_values["src_embed"])


def test_training_loss_decreases(tmp_path):
    exp = tiny_experiment(epochs=4, n_pairs=128)
    run = train(exp, tmp_path / "run", log=QUIET)
    metrics = run.read_metrics()
    assert metrics[-1]["train_loss"] < metrics[0]["train_loss"]


def test_divergence_names_the_step(tmp_path):
    exp = tiny_experiment(epochs=1, lr_scale=1e200, warmup=1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError, match="step 2"):
            train(exp, tmp_path / "run", log=QUIET)


def test_config_snapshot_preserves_given_text(tmp_path):
    exp = tiny_experiment()
    from sublab.config import render_config

    text = "# desk run\n" + render_config(exp)
    run = train(exp, tmp_path / "run", config_text=text, log=QUIET)
    assert run.config_path.read_text() == text


def test_finetune_continues_step_counter(tmp_path):
    base = train(tiny_experiment(), tmp_path / "base", log=QUIET)
    base_final = base.load_checkpoint("final")
    tuned = finetune(base, tmp_path / "tuned", extra_steps=3, log=QUIET)
    final = tuned.load_checkpoint("final")
    assert final.step == base_final.step + 3
    assert final.meta["finetune_of"] == str(base.path)
    assert final.meta["extra_steps"] == 3


def test_finetune_arms_share_batches(tmp_path):
    base = train(tiny_experiment(), tmp_path / "base", log=QUIET)
    tuned_a = finetune(base, tmp_path / "a", extra_steps=4, log=QUIET)
    tuned_b = finetune(base, tmp_path / "b", extra_steps=4, log=QUIET)
    bytes_a = tuned_a.checkpoint_path("final").read_bytes()
    bytes_b = tuned_b.checkpoint_path("final").read_bytes()
    assert bytes_a == bytes_b


def test_finetune_rejects_empty_budget(tmp_path):
    base = train(tiny_experiment(epochs=1), tmp_path / "base", log=QUIET)
    with pytest.raises(ValueError):
        finetune(base, tmp_path / "t", extra_steps=0, log=QUIET)


def test_run_directory_missing_checkpoint(tmp_path):
    run = RunDirectory.create(tmp_path / "r", "")
    with pytest.raises(FileNotFoundError):
        run.load_checkpoint("final")


def test_metrics_jsonl_is_line_oriented(tmp_path):
    run = train(tiny_experiment(epochs=2), tmp_path / "run", log=QUIET)
    lines = run.metrics_path.read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        json.loads(line)


@pytest.mark.slow
def test_copy_task_reaches_high_bleu(tmp_path):
    exp = ExperimentConfig(
        data=DataConfig(task="copy", n_pairs=512, seed=1,
                        valid_size=64, test_size=64),
        model=ModelConfig(enc_layers=1, dec_layers=1, d_model=32,
                          d_ff=64, n_heads=4),
        train=TrainConfig(epochs=30, batch_size=32, warmup=100, seed=1),
    )
    run = train(exp, tmp_path / "run", log=QUIET)
    assert run.read_metrics()[-1]["valid_bleu"] >= 90.0
