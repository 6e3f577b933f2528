"""Training, fine-tuning, and the on-disk run layout.

A run directory is self-describing:

    run/
      config.ini          exact snapshot of the input configuration
      metrics.jsonl       one {step, epoch, train_loss, valid_bleu} per epoch
      checkpoints/
        epoch_000.cscp    initialization (step 0)
        epoch_001.cscp    after each epoch
        ...
        final.cscp

The corpus is never stored: it regenerates bit-identically from the config.
Two runs of the same config produce byte-identical directories.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation, tensor as tz
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ExperimentConfig,
    SeedBundle,
    corpus_for,
    parse_config,
    render_config,
    validate_experiment,
)
from .data import batch_arrays
from .model import Parameters, TrainStreams, forward, init_model
from .tensor import NonFiniteError, Tensor, backward

# sub-stream ids under the per-purpose seeds
_STREAM_SHUFFLE = 10
_STREAM_DROPOUT = 11
_STREAM_LAYERDROP = 12

FINETUNE_LR = 1e-4
FINETUNE_FRACTION = 0.2  # default extra budget relative to the base run


class TrainingDivergedError(RuntimeError):
    """Loss or weights became non-finite; the message names the step."""


def _generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def make_streams(seeds: SeedBundle) -> TrainStreams:
    return TrainStreams(
        dropout=_generator(seeds.dropout, _STREAM_DROPOUT),
        layerdrop=_generator(seeds.layerdrop, _STREAM_LAYERDROP),
    )


def inverse_sqrt_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Warm up linearly for ``warmup`` steps, then decay as 1/sqrt(step)."""
    if step < 1:
        raise ValueError("schedule steps are 1-based")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam over a named parameter dict. A zero gradient from a fresh state
    is an exact no-op: no weight decay, no epsilon drift."""

    def __init__(self, names, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.names = sorted(names)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Parameters, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.names:
            tensor = params.values[name]
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - self.beta1) * grad if m is None else self.beta1 * m + (1.0 - self.beta1) * grad
            v = (1.0 - self.beta2) * grad * grad if v is None else self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[name] = m
            self.v[name] = v
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new_data = tensor.data - update
            if not np.isfinite(new_data).all():
                raise NonFiniteError("adam_update")
            tensor.data = new_data
        params.step += 1


def smoothed_cross_entropy(logits: Tensor, tgt_out: np.ndarray, smoothing: float) -> Tensor:
    """Label-smoothed token-mean cross-entropy over non-pad positions."""
    vocab = logits.shape[-1]
    logp = tz.log_softmax(logits)
    nll = tz.scale(tz.gather_last(logp, tgt_out), -1.0)
    uniform = tz.scale(tz.sum_last(logp), -1.0 / vocab)
    per_token = tz.add(tz.scale(nll, 1.0 - smoothing), tz.scale(uniform, smoothing))
    pad_mask = (tgt_out != 0).astype(np.float64)
    n_tokens = float(pad_mask.sum())
    if n_tokens == 0:
        raise ValueError("batch contains no non-pad target tokens")
    return tz.scale(tz.sum_all(tz.mul(per_token, tz.constant(pad_mask))), 1.0 / n_tokens)


class RunDirectory:
    """Handle on a training run's artifacts."""

    def __init__(self, path):
        self.path = Path(path)

    @property
    def config_path(self) -> Path:
        return self.path / "config.ini"

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.jsonl"

    @property
    def checkpoints_dir(self) -> Path:
        return self.path / "checkpoints"

    @property
    def analysis_dir(self) -> Path:
        return self.path / "analysis"

    @staticmethod
    def create(path, config_text: str) -> "RunDirectory":
        run = RunDirectory(path)
        run.path.mkdir(parents=True, exist_ok=True)
        run.checkpoints_dir.mkdir(exist_ok=True)
        run.analysis_dir.mkdir(exist_ok=True)
        run.config_path.write_text(config_text)
        if run.metrics_path.exists():
            run.metrics_path.unlink()
        return run

    def experiment(self) -> ExperimentConfig:
        return parse_config(self.config_path.read_text())

    def checkpoint_path(self, which) -> Path:
        if which == "final":
            return self.checkpoints_dir / "final.cscp"
        return self.checkpoints_dir / f"epoch_{int(which):03d}.cscp"

    def load_checkpoint(self, which="final") -> Parameters:
        path = self.checkpoint_path(which)
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint '{which}' in {self.path}")
        return load_checkpoint(path)

    def epochs(self) -> list[int]:
        out = []
        for p in self.checkpoints_dir.glob("epoch_*.cscp"):
            out.append(int(p.stem.split("_")[1]))
        return sorted(out)

    def append_metrics(self, record: dict) -> None:
        with self.metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read_metrics(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        return [json.loads(line) for line in self.metrics_path.read_text().splitlines() if line]


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _rng_state_meta(streams: TrainStreams, shuffle_rng: np.random.Generator) -> dict:
    return {
        "dropout": streams.dropout.bit_generator.state,
        "layerdrop": streams.layerdrop.bit_generator.state,
        "shuffle": shuffle_rng.bit_generator.state,
    }


def train(
    exp: ExperimentConfig,
    out_dir,
    config_text: Optional[str] = None,
    log=print,
) -> RunDirectory:
    """Train from scratch per the experiment config; returns the run handle."""
    validate_experiment(exp)
    text = config_text if config_text is not None else render_config(exp)
    run = RunDirectory.create(out_dir, text)

    splits = corpus_for(exp.data)
    train_pairs = splits["train"].pairs
    valid_pairs = splits["valid"].pairs

    seeds = exp.train.seeds
    params = init_model(exp.model, seeds.init)
    params.meta["seeds"] = seeds.as_dict()
    streams = make_streams(seeds)
    shuffle_rng = _generator(seeds.shuffle, _STREAM_SHUFFLE)
    params.meta["rng_streams"] = _rng_state_meta(streams, shuffle_rng)
    save_checkpoint(run.checkpoint_path(0), params)

    adam = Adam(params.values.keys(), beta1=exp.train.beta1,
                beta2=exp.train.beta2, eps=exp.train.adam_eps)
    step = 0
    for epoch in range(1, exp.train.epochs + 1):
        order = shuffle_rng.permutation(len(train_pairs))
        losses = []
        for batch_idx in _batches(len(train_pairs), exp.train.batch_size, order):
            batch = [train_pairs[i] for i in batch_idx]
            src, tgt_in, tgt_out = batch_arrays(batch)
            step += 1
            try:
                logits = forward(params, src, tgt_in, mode="train", streams=streams)
                loss = smoothed_cross_entropy(logits, tgt_out, exp.train.label_smoothing)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss")
                backward(loss)
                lr = inverse_sqrt_lr(step, exp.model.d_model, exp.train.warmup,
                                     exp.train.lr_scale)
                adam.step(params, lr)
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    f"training diverged at step {step} (epoch {epoch}): {err}"
                ) from err
            losses.append(float(loss.data))

        valid_bleu = evaluation.evaluate(params, valid_pairs).bleu
        record = {
            "step": step,
            "epoch": epoch,
            "train_loss": sum(losses) / len(losses),
            "valid_bleu": valid_bleu,
        }
        run.append_metrics(record)
        log(f"[epoch {epoch}] step {step} loss {record['train_loss']:.4f} "
            f"valid_bleu {valid_bleu:.2f}")
        params.meta["rng_streams"] = _rng_state_meta(streams, shuffle_rng)
        save_checkpoint(run.checkpoint_path(epoch), params)

    save_checkpoint(run.checkpoint_path("final"), params)
    return run


def finetune(
    base_run: RunDirectory,
    out_dir,
    extra_steps: int,
    override_params: Optional[Parameters] = None,
    lr: float = FINETUNE_LR,
    log=print,
) -> RunDirectory:
    """Continue training with a fresh Adam state and a small constant LR.

    Optimizer moments restart at zero; the base run's schedule is not
    resumed. ``override_params`` substitutes the starting weights (used by
    the rewind arm) while everything else stays identical, so competing
    arms consume exactly the same batches and step budget.
    """
    if extra_steps < 1:
        raise ValueError("extra_steps must be >= 1")
    exp = base_run.experiment()
    text = base_run.config_path.read_text()
    run = RunDirectory.create(out_dir, text)

    params = override_params if override_params is not None else base_run.load_checkpoint("final")
    params.meta["finetune_of"] = str(base_run.path)
    params.meta["extra_steps"] = extra_steps
    start_step = params.step

    splits = corpus_for(exp.data)
    train_pairs = splits["train"].pairs
    valid_pairs = splits["valid"].pairs

    seeds = exp.train.seeds
    streams = make_streams(seeds)
    shuffle_rng = _generator(seeds.shuffle, _STREAM_SHUFFLE)
    adam = Adam(params.values.keys(), beta1=exp.train.beta1,
                beta2=exp.train.beta2, eps=exp.train.adam_eps)
    save_checkpoint(run.checkpoint_path(0), params)

    done = 0
    epoch = 0
    while done < extra_steps:
        epoch += 1
        order = shuffle_rng.permutation(len(train_pairs))
        losses = []
        for batch_idx in _batches(len(train_pairs), exp.train.batch_size, order):
            if done >= extra_steps:
                break
            batch = [train_pairs[i] for i in batch_idx]
            src, tgt_in, tgt_out = batch_arrays(batch)
            done += 1
            try:
                logits = forward(params, src, tgt_in, mode="train", streams=streams)
                loss = smoothed_cross_entropy(logits, tgt_out, exp.train.label_smoothing)
                if not np.isfinite(loss.data):
                    raise NonFiniteError("loss")
                backward(loss)
                adam.step(params, lr)
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    f"fine-tuning diverged at step {start_step + done}: {err}"
                ) from err
            losses.append(float(loss.data))

        valid_bleu = evaluation.evaluate(params, valid_pairs).bleu
        record = {
            "step": params.step,
            "epoch": epoch,
            "train_loss": sum(losses) / len(losses),
            "valid_bleu": valid_bleu,
        }
        run.append_metrics(record)
        log(f"[finetune epoch {epoch}] step {params.step} loss "
            f"{record['train_loss']:.4f} valid_bleu {valid_bleu:.2f}")

    save_checkpoint(run.checkpoint_path("final"), params)
    return run
