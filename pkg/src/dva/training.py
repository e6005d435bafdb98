"""Composite training objective, per-stock training loop, and inference.

One model is trained per stock. Every batch draws one diffusion step n,
corrupts inputs and targets through the coupled schedules with independent
noise, runs the hierarchical generator on the corrupted inputs, and takes an
Adam step on

    L = L_MSE + zeta * L_KL + eta * L_DSM

where L_KL sums the latent-group KLs and the output KL against the diffused
target distribution, and L_DSM trains the energy head on the (blocked)
prediction. Validation after each epoch is deterministic: clean inputs,
posterior means, and (when enabled) the one-step denoising jump; the
checkpoint kept is the epoch with the lowest validation MSE.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor, add, as_tensor, backward, mean_, mul, square, sub
from .data import FEATURE_DIM, DatasetSplit, WindowPair, build_dataset, load_ohlcv
from .diffusion import (
    DiffusionSchedule,
    diffuse_input,
    diffuse_target,
    make_schedule,
    sample_step,
)
from .errors import ConfigError, ContractError, DvaError, TrainingAbort
from .evaluation import StockRunResult, aggregate, report_as_dict, write_predictions
from .model import (
    ModelConfig,
    ModelParams,
    denoise_jump,
    dsm_loss,
    encode,
    generate,
    output_kl,
    save_params,
)
from .optim import Adam, AdamConfig

__all__ = [
    "STEP_EMBED_CHANNELS",
    "TrainConfig",
    "TrainBatch",
    "LossComponents",
    "EpochStats",
    "RunHistory",
    "make_batch",
    "total_loss",
    "loss_from_components",
    "train_stock",
    "predict",
    "evaluate_mse",
    "refresh_norm_stats",
    "run_experiment",
]

# Sinusoidal channels appended to the input when step conditioning is on.
STEP_EMBED_CHANNELS = 4


@dataclass(frozen=True)
class TrainConfig:
    """Everything a single training run depends on."""

    t_in: int = 10
    t_out: int = 10
    # diffusion schedule
    n_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.1
    gamma_scale: float = 0.5
    target_alpha_source: str = "prime"
    # loss weights
    zeta: float = 0.5
    eta: float = 1.0
    s_out: float = 1.0
    # optimisation
    lr: float = 5e-4
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    # toggles
    latent_kl: bool = True
    output_kl: bool = True
    step_embedding: bool = False
    denoiser: bool = True
    diffuse_x: bool = True
    diffuse_y: bool = True
    mse_against_clean: bool = False
    dsm_block: bool = True
    # architecture
    channels: int = 16
    latent: int = 4
    kernel: int = 3
    se_reduction: int = 4
    energy_hidden: int = 32

    def validate(self) -> "TrainConfig":
        if self.zeta < 0 or self.eta < 0:
            raise ConfigError(
                f"loss weights must be >= 0, got zeta={self.zeta}, eta={self.eta}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.s_out <= 0:
            raise ConfigError(f"s_out must be > 0, got {self.s_out}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        self.model_config()
        try:
            self.schedule()
        except ContractError as err:
            raise ConfigError(str(err)) from None
        return self

    def in_channels(self) -> int:
        return FEATURE_DIM + (STEP_EMBED_CHANNELS if self.step_embedding else 0)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            t_in=self.t_in,
            t_out=self.t_out,
            in_channels=self.in_channels(),
            channels=self.channels,
            latent=self.latent,
            kernel=self.kernel,
            se_reduction=self.se_reduction,
            energy_hidden=self.energy_hidden,
        ).validate()

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(
            n_steps=self.n_steps,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            gamma_scale=self.gamma_scale,
            target_alpha_source=self.target_alpha_source,
        )

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainBatch:
    """One optimisation batch: model inputs plus both target views."""

    x_n: np.ndarray  # (batch, channels, t_in) inputs fed to the model
    y_n: np.ndarray  # (batch, t_out) regression target for the MSE term
    y: np.ndarray  # (batch, t_out) clean targets for the KL and DSM terms
    n: int  # diffusion step shared across the batch


def _step_channels(n: int, n_steps: int, batch: int, t_len: int) -> np.ndarray:
    frac = n / n_steps
    vals = np.array(
        [
            math.sin(2.0 * math.pi * frac),
            math.cos(2.0 * math.pi * frac),
            math.sin(4.0 * math.pi * frac),
            math.cos(4.0 * math.pi * frac),
        ]
    )
    return np.broadcast_to(
        vals[None, :, None], (batch, STEP_EMBED_CHANNELS, t_len)
    ).copy()


def _with_step_channels(x: np.ndarray, n: int, cfg: TrainConfig) -> np.ndarray:
    if not cfg.step_embedding:
        return x
    emb = _step_channels(n, cfg.n_steps, x.shape[0], x.shape[2])
    return np.concatenate([x, emb], axis=1)


def make_batch(
    x: np.ndarray,
    y: np.ndarray,
    schedule: DiffusionSchedule,
    n: int,
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> TrainBatch:
    """Corrupt one batch at step n; inputs and targets draw independent noise."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != FEATURE_DIM:
        raise ContractError(f"expected x (batch, {FEATURE_DIM}, t), got {x.shape}")
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise ContractError(f"expected y (batch, t_out) matching x, got {y.shape}")
    x_n = diffuse_input(x, schedule, n, rng.standard_normal(x.shape)) if cfg.diffuse_x else x
    y_n = diffuse_target(y, schedule, n, rng.standard_normal(y.shape)) if cfg.diffuse_y else y
    return TrainBatch(x_n=_with_step_channels(x_n, n, cfg), y_n=y_n, y=y, n=n)


# ---------------------------------------------------------------------------
# Composite loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossComponents:
    mse: float
    kl: float  # latent + output KL, as weighted into the loss
    dsm: float
    kl_latent: float
    kl_output: float
    total: float


def loss_from_components(mse: float, kl: float, dsm: float, zeta: float, eta: float) -> float:
    """The reported total; the float ops mirror the tensor graph bit for bit."""
    return (mse + zeta * kl) + eta * dsm


def total_loss(
    batch: TrainBatch,
    params: ModelParams,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    *,
    rng: np.random.Generator | None = None,
    eps: list[np.ndarray] | None = None,
    training: bool = True,
) -> tuple[Tensor, LossComponents]:
    """Composite objective on one batch.

    Returns the scalar loss tensor plus float components satisfying
    ``total == (mse + zeta*kl) + eta*dsm`` exactly at f64. Latents are drawn
    via reparameterization from ``rng`` (or the explicit ``eps`` list). A
    non-finite component raises TrainingAbort with epoch/batch set to -1;
    the training loop re-raises with the real location.
    """
    stack = encode(params, as_tensor(batch.x_n), training=training)
    out = generate(params, stack, sample=True, rng=rng, eps=eps, training=training)

    y_mse = batch.y if cfg.mse_against_clean else batch.y_n
    m_t = mean_(square(sub(out.y_hat, as_tensor(y_mse))))

    kl_t: Tensor | None = None
    kl_latent_val = 0.0
    kl_output_val = 0.0
    if cfg.latent_kl:
        kl_t = out.kl_latent
        kl_latent_val = kl_t.item()
    # the output KL is measured against the diffused-target distribution at
    # step n, so it only exists while targets are actually diffused
    if cfg.output_kl and cfg.diffuse_y:
        o_t = output_kl(out.y_hat, cfg.s_out, batch.y, schedule, batch.n)
        kl_output_val = o_t.item()
        kl_t = o_t if kl_t is None else add(kl_t, o_t)

    d_t: Tensor | None = None
    dsm_val = 0.0
    if cfg.denoiser:
        d_t = dsm_loss(
            params, out.y_hat, batch.y, schedule, batch.n, block_predictor=cfg.dsm_block
        )
        dsm_val = d_t.item()

    loss_t = m_t
    if kl_t is not None:
        loss_t = add(loss_t, mul(as_tensor(cfg.zeta), kl_t))
    if d_t is not None:
        loss_t = add(loss_t, mul(as_tensor(cfg.eta), d_t))

    comps = LossComponents(
        mse=m_t.item(),
        kl=kl_t.item() if kl_t is not None else 0.0,
        dsm=dsm_val,
        kl_latent=kl_latent_val,
        kl_output=kl_output_val,
        total=loss_from_components(
            m_t.item(), kl_t.item() if kl_t is not None else 0.0, dsm_val, cfg.zeta, cfg.eta
        ),
    )
    for name in ("mse", "kl", "dsm"):
        if not math.isfinite(getattr(comps, name)):
            raise TrainingAbort("non-finite loss", epoch=-1, batch=-1, component=name)
    return loss_t, comps


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    """Unweighted means of the per-batch components, plus validation MSE."""

    mse: float
    kl: float
    dsm: float
    val_mse: float


@dataclass(frozen=True)
class RunHistory:
    epochs: tuple[EpochStats, ...]
    best_epoch: int  # first argmin of validation MSE
    steps: int  # optimiser steps taken = ceil(|train|/batch) * epochs

    def best_val_mse(self) -> float:
        return self.epochs[self.best_epoch].val_mse


def _stack_windows(pairs: Sequence[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.x.T for p in pairs])  # features become channels
    y = np.stack([p.y for p in pairs])
    return x, y


def refresh_norm_stats(params: ModelParams, x_train: np.ndarray, cfg: TrainConfig) -> None:
    """Re-estimate batch-norm running statistics from clean training inputs.

    Training batches carry diffusion noise, so the running buffers otherwise
    describe activations far noisier than anything inference ever sees;
    normalising clean inputs by those inflated variances systematically
    shrinks the forecast.  A sweep of training-mode forward passes over the
    undiffused inputs (no parameter updates) leaves the buffers matched to
    the distribution that validation and prediction actually use.
    """
    for i in range(0, len(x_train), cfg.batch_size):
        xb = x_train[i : i + cfg.batch_size]
        if len(xb) < 2:
            continue  # single-row batch statistics are meaningless
        xb = _with_step_channels(xb, 0, cfg)
        generate(params, encode(params, as_tensor(xb), training=True), sample=False, training=True)


def train_stock(split: DatasetSplit, cfg: TrainConfig) -> tuple[ModelParams, RunHistory]:
    """Train one model on one stock's split; return the best-epoch checkpoint.

    Deterministic for a fixed (split, cfg): a single generator seeded from
    cfg.seed drives shuffling, the per-batch step draw, the diffusion noise,
    and the latent noise, in that order.
    """
    cfg.validate()
    if not split.train or not split.validation:
        raise ConfigError("training needs nonempty train and validation sets")
    schedule = cfg.schedule()
    params = ModelParams.init(cfg.model_config(), cfg.seed)
    x_train, y_train = _stack_windows(split.train)
    # start the output head at the per-step mean of the training targets:
    # gross returns sit near 1.0, further than Adam can move a zero bias
    # within the configured epoch budget
    params["out.proj.b"].data = y_train.mean(axis=0)

    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(params.parameters(), AdamConfig(lr=cfg.lr))
    n_batches = math.ceil(len(split.train) / cfg.batch_size)

    epochs: list[EpochStats] = []
    best_val = math.inf
    best_epoch = -1
    best_params: ModelParams | None = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(split.train))
        sums = np.zeros(3)
        for b_idx in range(n_batches):
            idx = order[b_idx * cfg.batch_size : (b_idx + 1) * cfg.batch_size]
            n = sample_step(rng, schedule)
            batch = make_batch(x_train[idx], y_train[idx], schedule, n, rng, cfg)
            with Tape() as tape:
                try:
                    loss_t, comps = total_loss(
                        batch, params, schedule, cfg, rng=rng, training=True
                    )
                except TrainingAbort as err:
                    raise TrainingAbort(
                        "non-finite loss", epoch=epoch, batch=b_idx, component=err.component
                    ) from None
            opt.step(backward(tape, loss_t, params.parameters()))
            sums += (comps.mse, comps.kl, comps.dsm)
        refresh_norm_stats(params, x_train, cfg)
        val = evaluate_mse(params, split.validation, cfg)
        if not math.isfinite(val):
            raise TrainingAbort(
                "non-finite validation MSE", epoch=epoch, batch=-1, component="val_mse"
            )
        means = sums / n_batches
        epochs.append(EpochStats(mse=means[0], kl=means[1], dsm=means[2], val_mse=val))
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = params.clone()
    history = RunHistory(epochs=tuple(epochs), best_epoch=best_epoch, steps=opt.step_count)
    return best_params, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict(params: ModelParams, x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Deterministic forecast: clean inputs, posterior means, and the one-step
    denoising jump when the denoiser toggle is on."""
    expected = cfg.model_config().hash()
    if params.config.hash() != expected:
        raise ContractError(
            f"checkpoint config hash {params.config.hash()} does not match"
            f" the run config's model hash {expected}"
        )
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != FEATURE_DIM:
        raise ContractError(f"expected x (batch, {FEATURE_DIM}, t), got {x.shape}")
    x = _with_step_channels(x, 0, cfg)
    stack = encode(params, as_tensor(x), training=False)
    out = generate(params, stack, sample=False, training=False)
    y_hat = denoise_jump(params, out.y_hat) if cfg.denoiser else out.y_hat
    return y_hat.data.copy()


def evaluate_mse(params: ModelParams, pairs: Sequence[WindowPair], cfg: TrainConfig) -> float:
    """Deterministic MSE of predict() against the clean targets."""
    if not pairs:
        raise ConfigError("cannot evaluate on an empty window set")
    x, y = _stack_windows(pairs)
    return float(np.mean((predict(params, x, cfg) - y) ** 2))


# ---------------------------------------------------------------------------
# Experiment driver: stocks x runs
# ---------------------------------------------------------------------------

METRICS_SCHEMA_VERSION = 1


def _experiment_job(args: tuple) -> dict:
    """One (stock, run) training; writes only to paths private to the pair."""
    ticker, run, data_dir, cfg, out_dir = args
    cfg_r = replace(cfg, seed=cfg.seed + run)
    base = {"stock": ticker, "run": run, "seed": cfg_r.seed}
    try:
        bars = load_ohlcv(data_dir, ticker)
        split = build_dataset(bars, cfg.t_in, cfg.t_out)
        params, history = train_stock(split, cfg_r)
        save_params(params, Path(out_dir) / "checkpoints" / f"{ticker}_run{run}.npz")
        x_test, y_test = _stack_windows(split.test)
        y_hat = predict(params, x_test, cfg_r)
        write_predictions(
            Path(out_dir) / "predictions" / f"{ticker}_run{run}.csv", split.test, y_hat
        )
        return base | {
            "ok": True,
            "test_mse": float(np.mean((y_hat - y_test) ** 2)),
            "val_mse": history.best_val_mse(),
            "best_epoch": history.best_epoch,
        }
    except DvaError as err:
        return base | {"ok": False, "error": str(err)}


def run_experiment(
    tickers: Sequence[str],
    data_dir,
    cfg: TrainConfig,
    out_dir,
    runs: int = 5,
    jobs: int = 1,
) -> dict:
    """Train stocks x runs, write prediction/checkpoint/metrics artifacts.

    Run r uses seed cfg.seed + r. Per-(stock, run) failures are recorded and
    the experiment continues; the metrics carry a ``partial`` flag. Returns
    the metrics dict that was written to ``<out_dir>/metrics.json``.
    """
    cfg.validate()
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    if not tickers:
        raise ConfigError("ticker list is empty")
    if len(set(tickers)) != len(tickers):
        raise ConfigError(f"duplicate tickers in {list(tickers)}")
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "predictions").mkdir(parents=True, exist_ok=True)

    grid = [(t, r, str(data_dir), cfg, str(out)) for t in tickers for r in range(runs)]
    if jobs <= 1:
        outcomes = [_experiment_job(job) for job in grid]
    else:
        # spawned workers avoid forking a process with live BLAS thread pools
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            outcomes = list(pool.map(_experiment_job, grid))

    results = [
        StockRunResult(o["stock"], o["run"], o["test_mse"]) for o in outcomes if o["ok"]
    ]
    failures = [
        {k: o[k] for k in ("stock", "run", "seed", "error")}
        for o in outcomes
        if not o["ok"]
    ]
    warnings = []
    if runs == 1:
        warnings.append("single run per stock: across-run SDs are 0 by convention")
    if failures:
        warnings.append(f"{len(failures)} of {len(grid)} jobs failed; results are partial")

    report = report_as_dict(aggregate(results)) if results else None
    per_stock = report["per_stock"] if report else {}
    for o in outcomes:
        if o["ok"]:
            detail = per_stock[o["stock"]].setdefault("run_details", [])
            detail.append(
                {k: o[k] for k in ("run", "seed", "test_mse", "val_mse", "best_epoch")}
            )
    metrics = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "kind": "train_metrics",
        "config": asdict(cfg),
        "config_hash": cfg.hash(),
        "tickers": list(tickers),
        "runs": runs,
        "per_stock": per_stock,
        "aggregate": report["aggregate"] if report else None,
        "failures": failures,
        "partial": bool(failures),
        "warnings": warnings,
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics
