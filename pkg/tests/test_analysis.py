import json

import numpy as np
import pytest

import sublab.tensor as tz
from sublab.analysis import (
    block_jacobian,
    collect_activations,
    curves_from_json,
    curves_to_json,
    eval_bleu,
    eval_pairs_for,
    interpolation_curve,
    isometry_table,
    params_at,
    run_contribution,
    run_criticality,
    run_dynamics,
    run_isometry,
    run_pwcca,
)
from sublab.config import DataConfig, ExperimentConfig, TrainConfig
from sublab.data import batch_arrays
from sublab.model import (
    ComponentId,
    InterpolationSpec,
    ModelConfig,
    Side,
    components,
    forward,
    residual_block,
)
from sublab.training import train

QUIET = lambda *args, **kwargs: None


def small_experiment(epochs=12):
    return ExperimentConfig(
        data=DataConfig(task="copy", n_pairs=384, seed=1,
                        valid_size=32, test_size=32),
        model=ModelConfig(enc_layers=1, dec_layers=1, d_model=16,
                          d_ff=32, n_heads=2),
        train=TrainConfig(epochs=epochs, batch_size=32, warmup=60, seed=1),
    )


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("analysis") / "run"
    return train(small_experiment(), out, log=QUIET)


@pytest.fixture(scope="module")
def init_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("analysis_init") / "run"
    return train(small_experiment(epochs=0), out, log=QUIET)


def test_trained_fixture_is_usable(trained_run):
    final = json.loads(trained_run.metrics_path.read_text().splitlines()[-1])
    assert final["valid_bleu"] > 10.0


def test_contribution_grid_structure(trained_run):
    grid = run_contribution(trained_run, jobs=2)
    cfg = trained_run.load_checkpoint("final").config
    assert set(grid.scores) == set(components(cfg))
    for score in grid.scores.values():
        assert 0.0 <= score <= 1.0
    assert max(grid.scores.values()) == 1.0
    assert grid.flags == ()
    assert grid.info["eval_set"] == "test"
    assert set(grid.info["drops"]) == {c.key for c in components(cfg)}
    assert (trained_run.analysis_dir / "contribution.json").exists()


def test_contribution_is_deterministic(trained_run):
    a = run_contribution(trained_run, write=False)
    b = run_contribution(trained_run, write=False, jobs=3)
    assert a.to_json() == b.to_json()


def test_contribution_on_untrained_run_is_degenerate(init_run):
    grid = run_contribution(init_run)
    assert grid.flags == ("degenerate_baseline",)
    assert set(grid.scores.values()) == {0.0}


def test_criticality_grid_and_curves(trained_run):
    alphas = (0.0, 0.5, 1.0)
    grid, curves = run_criticality(trained_run, alphas=alphas, jobs=2)
    cfg = trained_run.load_checkpoint("final").config
    assert set(grid.scores) == set(components(cfg))
    for cid, score in grid.scores.items():
        assert score in alphas
        evaluated = [a for a, _ in curves[cid]]
        assert evaluated == sorted(evaluated)
        assert set(evaluated) <= set(alphas)
    assert grid.info["alpha_grid"] == [0.0, 0.5, 1.0]
    assert (trained_run.analysis_dir / "criticality_curves.json").exists()


def test_criticality_early_exit_stops_curve(trained_run):
    params = trained_run.load_checkpoint("final")
    pairs = eval_pairs_for(trained_run, "test")
    baseline = eval_bleu(params, pairs)
    cid = components(params.config)[0]
    eager = interpolation_curve(params, pairs, cid, baseline,
                                (0.0, 0.5, 1.0), epsilon=1e9)
    assert len(eager) == 1  # huge threshold recovers at the first point
    full = interpolation_curve(params, pairs, cid, baseline,
                               (0.0, 0.5, 1.0), epsilon=1e9, full_curve=True)
    assert len(full) == 3


def test_criticality_alpha_one_matches_baseline_bitwise(trained_run):
    params = trained_run.load_checkpoint("final")
    pairs = eval_pairs_for(trained_run, "test")
    baseline = eval_bleu(params, pairs)
    for cid in components(params.config)[:2]:
        blended = eval_bleu(params, pairs,
                            interp=InterpolationSpec({cid: 1.0}))
        assert blended == baseline


def test_criticality_alpha_grid_validation(trained_run):
    with pytest.raises(ValueError):
        run_criticality(trained_run, alphas=(0.0, 0.5), write=False)
    with pytest.raises(ValueError):
        run_criticality(trained_run, alphas=(0.0, 1.0, 0.5), write=False)


def test_curves_json_round_trip():
    curves = {
        ComponentId.parse("enc.0.sa"): [(0.0, 10.0), (0.5, 30.0)],
        ComponentId.parse("dec.0.ff"): [(0.0, 29.0)],
    }
    assert curves_from_json(curves_to_json(curves)) == curves


def test_pwcca_grid_structure(trained_run):
    grid = run_pwcca(trained_run, probes=32)
    cfg = trained_run.load_checkpoint("final").config
    assert set(grid.scores) == set(components(cfg))
    for score in grid.scores.values():
        assert 0.0 <= score <= 1.0 + 1e-9
    assert grid.info["probe_rows"] >= 5 * cfg.d_model
    assert (trained_run.analysis_dir / "pwcca.json").exists()


def test_pwcca_rejects_tiny_probe_set(trained_run):
    with pytest.raises(ValueError, match="probe set too small"):
        run_pwcca(trained_run, probes=1, write=False)


def test_collect_activations_rows_align(trained_run):
    params = trained_run.load_checkpoint("final")
    pairs = eval_pairs_for(trained_run, "test")
    acts, rows = collect_activations(params, pairs, 8)
    n_rows = int(rows.sum())
    for cid in components(params.config):
        assert acts[f"out/{cid.key}"][rows].shape == (n_rows, params.config.d_model)
    assert acts["dec_out"][rows].shape == (n_rows, params.config.d_model)


def test_block_jacobian_matches_finite_differences(trained_run):
    params = trained_run.load_checkpoint("final")
    pairs = eval_pairs_for(trained_run, "test")
    probe_pairs = sorted(pairs, key=lambda p: (len(p[0]), p[0]))[:4]
    src, tgt_in, _ = batch_arrays(probe_pairs)
    acts = {}
    forward(params, src, tgt_in, collect=acts)

    from sublab.model import causal_bias, pad_mask_bias

    position = (0, 1)
    h = 1e-5
    for key in ("enc.0.sa", "dec.0.ea", "dec.0.ff"):
        cid = ComponentId.parse(key)
        jac = block_jacobian(params, cid, acts, src, tgt_in, position)

        x_full = acts[f"in/{cid.key}"]
        if cid.side is Side.ENCODER:
            self_bias, cross_bias, memory = pad_mask_bias(src), None, None
        else:
            self_bias = causal_bias(tgt_in.shape[1]) + pad_mask_bias(tgt_in)
            cross_bias = pad_mask_bias(src)
            memory = tz.constant(acts["enc_out"])

        def block_out(x_arr):
            out = residual_block(params.values, params.config, cid,
                                 tz.constant(x_arr), memory,
                                 self_bias, cross_bias, mode="eval")
            return out.data[position[0], position[1]]

        d = params.config.d_model
        fd = np.empty((d, d))
        for j in range(d):
            plus = x_full.copy()
            plus[position[0], position[1], j] += h
            minus = x_full.copy()
            minus[position[0], position[1], j] -= h
            fd[:, j] = (block_out(plus) - block_out(minus)) / (2.0 * h)
        denom = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(jac - fd) / denom) <= 1e-4


def test_isometry_table_structure(trained_run):
    grid = run_isometry(trained_run, at="init")
    cfg = trained_run.load_checkpoint("final").config
    assert set(grid.scores) == set(components(cfg))
    for value in grid.scores.values():
        assert np.isfinite(value)
        assert value > 0.0
    assert (trained_run.analysis_dir / "isometry_init.json").exists()


def test_isometry_final_weights_mode(trained_run):
    init_grid = run_isometry(trained_run, at="init", write=False)
    final_grid = run_isometry(trained_run, at="final", write=False)
    assert init_grid.scores != final_grid.scores


def test_isometry_masked_block_near_identity(trained_run):
    # a zeroed function leaves residual + layer norm; on rows that are
    # already zero-mean unit-variance the block is close to the identity
    params = trained_run.load_checkpoint("final")
    cfg = params.config
    cid = components(cfg)[0]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, cfg.d_model))
    x = (x - x.mean(axis=-1, keepdims=True)) / x.std(axis=-1, keepdims=True)

    from sublab.linalg import svd
    from sublab.model import pad_mask_bias

    src = np.full((1, 6), 5)
    values = dict(params.values)
    values[f"{cid.key}.ln_g"] = tz.parameter(np.ones(cfg.d_model))
    values[f"{cid.key}.ln_b"] = tz.parameter(np.zeros(cfg.d_model))

    probe = tz.parameter(x[0, 1].copy())
    hot = np.zeros((1, 6, 1))
    hot[0, 1, 0] = 1.0
    base = x.copy()
    base[0, 1, :] = 0.0
    inject = tz.mul(tz.reshape(probe, (1, 1, cfg.d_model)), tz.constant(hot))
    xt = tz.add(tz.constant(base), inject)
    out = residual_block(values, cfg, cid, xt, None, pad_mask_bias(src), None,
                         masked=True, mode="eval")
    jac = np.empty((cfg.d_model, cfg.d_model))
    seed = np.zeros(out.shape)
    for k in range(cfg.d_model):
        seed[0, 1, k] = 1.0
        tz.backward(out, seed=seed)
        seed[0, 1, k] = 0.0
        jac[k] = probe.grad
    _, sing, _ = svd(jac)
    assert abs(float(sing.mean()) - 1.0) < 0.15


def test_params_at_init_restores_snapshot(trained_run):
    final = trained_run.load_checkpoint("final")
    at_init = params_at(final, "init")
    for name, arr in final.init_values.items():
        assert np.array_equal(at_init.values[name].data, arr)
    with pytest.raises(ValueError):
        params_at(final, "midway")


def test_dynamics_final_epoch_matches_direct_grid(trained_run):
    last = trained_run.epochs()[-1]
    grids = run_dynamics(trained_run, epochs=[0, last])
    direct = run_contribution(trained_run, write=False)
    assert grids[last].scores == direct.scores
    assert grids[0].flags == ("degenerate_baseline",)
    assert (trained_run.analysis_dir / "dynamics.json").exists()


def test_dynamics_missing_epoch_rejected(trained_run):
    with pytest.raises(FileNotFoundError):
        run_dynamics(trained_run, epochs=[999], write=False)


def test_eval_pairs_rejects_unknown_split(trained_run):
    with pytest.raises(ValueError):
        eval_pairs_for(trained_run, "dev")
