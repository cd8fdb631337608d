"""Conditional Wasserstein GAN with gradient penalty for tabular minority synthesis.

Both networks see the class label as a one-hot pair appended to their
input. The generator maps (z, label) into [0,1]^d through a sigmoid
output layer; the critic maps (x, label) to an unbounded score. Training
uses the WGAN-GP objectives:

    critic:    mean D(fake) - mean D(real) + lambda * mean (||grad D(x_hat)|| - 1)^2
    generator: -mean D(G(z, y), y)

For reference only, the original minimax value that the Wasserstein form
replaces is ``mean log D(x) + mean log(1 - D(G(z)))`` (see
``minimax_value``); it is never used for training.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nnet
from .data import Dataset, DataError, MinMaxScaler, fit_minmax

BATCH_SIZES = (16, 32, 64, 128)
LEARNING_RATES = (0.0005, 0.001, 0.005, 0.01, 0.05, 0.1)
EPOCH_RANGE = (5, 20)
SCHEMA_VERSION = 1


class GanTrainingError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class GanHyperParams:
    batch_size: int = 64
    lr_generator: float = 0.001
    lr_discriminator: float = 0.001
    optimizer_generator: str = "adam"
    optimizer_discriminator: str = "adam"
    activation_generator: str = "relu"
    activation_discriminator: str = "relu"
    epochs: int = 10
    layer_norm_generator: bool = False
    layer_norm_discriminator: bool = False

    def __post_init__(self) -> None:
        for name in ("optimizer_generator", "optimizer_discriminator"):
            if getattr(self, name) not in nnet.OPTIMIZERS:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {nnet.OPTIMIZERS}")
        for name in ("activation_generator", "activation_discriminator"):
            if getattr(self, name) not in nnet.ACTIVATIONS:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {nnet.ACTIVATIONS}")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        for name in ("lr_generator", "lr_discriminator"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "batch_size", int(self.batch_size))
        object.__setattr__(self, "epochs", int(self.epochs))
        object.__setattr__(self, "layer_norm_generator", bool(self.layer_norm_generator))
        object.__setattr__(self, "layer_norm_discriminator", bool(self.layer_norm_discriminator))

    def outside_search_space(self) -> list[str]:
        """Names of fields outside the tuning ranges (empty when in range)."""
        bad = []
        if self.batch_size not in BATCH_SIZES:
            bad.append("batch_size")
        for name in ("lr_generator", "lr_discriminator"):
            if getattr(self, name) not in LEARNING_RATES:
                bad.append(name)
        if not EPOCH_RANGE[0] <= self.epochs <= EPOCH_RANGE[1]:
            bad.append("epochs")
        return bad

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanHyperParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class ModelDefaults:
    hidden_widths: tuple[int, ...] = (128, 64, 32)
    lambda_gp: float = 10.0
    n_critic: int = 5
    latent_dim: int | None = None  # None -> max(8, n_features)


@dataclass
class GanModel:
    generator_spec: nnet.MlpSpec
    generator: nnet.MlpState
    critic_spec: nnet.MlpSpec | None
    critic: nnet.MlpState | None
    latent_dim: int
    n_features: int
    lambda_gp: float = 10.0
    n_critic: int = 5

    def __post_init__(self) -> None:
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.generator_spec.layer_widths[-1] != self.n_features:
            raise ValueError("generator output width must equal the feature count")
        if self.critic_spec is not None and self.critic_spec.layer_widths[-1] != 1:
            raise ValueError("critic output width must be 1")


@dataclass
class GanTrainReport:
    critic_loss: list[float] = field(default_factory=list)
    generator_loss: list[float] = field(default_factory=list)
    gradient_norm: list[float] = field(default_factory=list)
    critic_gap: list[float] = field(default_factory=list)  # one entry per epoch
    wall_time: float = 0.0

    def series(self) -> dict[str, list[float]]:
        return {
            "critic_loss": self.critic_loss,
            "generator_loss": self.generator_loss,
            "gradient_norm": self.gradient_norm,
            "critic_gap": self.critic_gap,
        }


def build_model(
    n_features: int,
    hp: GanHyperParams,
    defaults: ModelDefaults | None = None,
    seed: int = 0,
) -> GanModel:
    """Fresh generator/critic pair with four trainable layers each."""
    defaults = defaults or ModelDefaults()
    if len(defaults.hidden_widths) != 3:
        raise ValueError("the GAN networks use exactly 3 hidden layers (4 trainable layers)")
    latent = defaults.latent_dim or max(8, n_features)
    g_seed, c_seed = np.random.default_rng(seed).integers(0, 2**63, size=2)
    g_spec = nnet.MlpSpec(
        (latent + 2, *defaults.hidden_widths, n_features),
        hp.activation_generator,
        "sigmoid",
        hp.layer_norm_generator,
        int(g_seed),
    )
    c_spec = nnet.MlpSpec(
        (n_features + 2, *defaults.hidden_widths, 1),
        hp.activation_discriminator,
        "linear",
        hp.layer_norm_discriminator,
        int(c_seed),
    )
    return GanModel(
        g_spec, nnet.init_mlp(g_spec), c_spec, nnet.init_mlp(c_spec),
        latent, n_features, defaults.lambda_gp, defaults.n_critic,
    )


def one_hot(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, 2))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _critic_input(x: np.ndarray, labels) -> np.ndarray:
    return np.hstack([x, one_hot(labels)])


def _check_pair(model: GanModel, real: np.ndarray, fake: np.ndarray, labels) -> tuple:
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    labels = np.asarray(labels).reshape(-1)
    if real.shape != fake.shape:
        raise ValueError(f"real {real.shape} and fake {fake.shape} batches differ in shape")
    if real.ndim != 2 or real.shape[1] != model.n_features:
        raise ValueError(f"batches must have {model.n_features} columns")
    if labels.size != real.shape[0]:
        raise ValueError("one label per row required")
    return real, fake, labels


def critic_scores(model: GanModel, x: np.ndarray, labels) -> np.ndarray:
    out, _ = nnet.forward(model.critic, model.critic_spec, _critic_input(x, labels))
    return out[:, 0]


def generate(model: GanModel, latent: np.ndarray, labels) -> np.ndarray:
    latent = np.asarray(latent, dtype=float)
    if latent.ndim != 2 or latent.shape[1] != model.latent_dim:
        raise ValueError(f"latent batch must have width {model.latent_dim}")
    out, _ = nnet.forward(model.generator, model.generator_spec, _critic_input(latent, labels))
    return out


def _interpolates(real, fake, rng) -> np.ndarray:
    eps = rng.uniform(size=(real.shape[0], 1))
    return eps * real + (1.0 - eps) * fake


def _penalty(model: GanModel, x_hat: np.ndarray, codes: np.ndarray, with_grad: bool, buffer=None):
    """Penalty value, mean gradient norm and (optionally) critic gradients.

    ``codes`` is the one-hot label block appended to the critic input.
    """
    inp = np.concatenate((x_hat, codes), axis=1)
    d = model.n_features
    out, cache = nnet.forward(model.critic, model.critic_spec, inp, check=False)
    g = nnet.backward(model.critic, model.critic_spec, cache, np.ones_like(out), params=False)[1][:, :d]
    n = x_hat.shape[0]
    norms = np.sqrt(np.add.reduce(g * g, axis=1))
    dev = norms - 1.0
    value = model.lambda_gp * float(np.add.reduce(dev * dev)) / n
    mean_norm = float(np.add.reduce(norms)) / n
    if not with_grad:
        return value, mean_norm, None
    safe = np.where(norms > 0, norms, 1.0)
    coef = np.where(norms > 0, 2.0 * model.lambda_gp * dev / (n * safe), 0.0)
    direction = np.zeros_like(inp)
    direction[:, :d] = coef[:, None] * g
    # d/dtheta of sum_i v_i . grad_x D(x_i), v held fixed, is the penalty gradient
    _, grads = nnet.jvp_param_gradient(
        model.critic, model.critic_spec, inp, direction, cache=cache, check=False, out=buffer
    )
    return value, mean_norm, grads


def gradient_penalty(model: GanModel, real_batch, fake_batch, labels, seed: int) -> float:
    real, fake, labels = _check_pair(model, real_batch, fake_batch, labels)
    x_hat = _interpolates(real, fake, np.random.default_rng(seed))
    return _penalty(model, x_hat, one_hot(labels), with_grad=False)[0]


def critic_loss(model: GanModel, real_batch, fake_batch, labels, seed: int) -> float:
    real, fake, labels = _check_pair(model, real_batch, fake_batch, labels)
    gap = critic_scores(model, fake, labels).mean() - critic_scores(model, real, labels).mean()
    return float(gap) + gradient_penalty(model, real, fake, labels, seed)


def generator_loss(model: GanModel, latent_batch, labels) -> float:
    fake = generate(model, latent_batch, labels)
    return -float(critic_scores(model, fake, labels).mean())


def minimax_value(real_probability, fake_probability) -> float:
    """Original GAN value function, kept as a reference formula only."""
    p = np.asarray(real_probability, dtype=float)
    q = np.asarray(fake_probability, dtype=float)
    return float(np.mean(np.log(p)) + np.mean(np.log1p(-q)))


@dataclass
class _Minibatch:
    """Per-minibatch constants shared by the critic updates."""

    real: np.ndarray
    codes: np.ndarray
    codes2: np.ndarray  # codes stacked twice, for the [real; fake] pass
    grad_out: np.ndarray  # d(mean fake - mean real)/d scores on that pass

    @classmethod
    def of(cls, real: np.ndarray, labels) -> "_Minibatch":
        codes = one_hot(labels)
        b = real.shape[0]
        grad_out = np.full((2 * b, 1), 1.0 / b)
        grad_out[:b] = -1.0 / b
        return cls(real, codes, np.concatenate((codes, codes)), grad_out)


def _critic_grads(model, mb: _Minibatch, fake, x_hat, buffers=None) -> tuple[float, float, nnet.MlpState]:
    """Loss, mean penalty-gradient norm and critic gradients; ``buffers``
    optionally supplies two reusable gradient states."""
    b = mb.real.shape[0]
    loss_buf, gp_buf = buffers if buffers is not None else (None, None)
    both = np.concatenate((np.concatenate((mb.real, fake)), mb.codes2), axis=1)
    out, cache = nnet.forward(model.critic, model.critic_spec, both, check=False)
    grads, _ = nnet.backward(model.critic, model.critic_spec, cache, mb.grad_out, out=loss_buf, inputs=False)
    gp, norm, gp_grads = _penalty(model, x_hat, mb.codes, with_grad=True, buffer=gp_buf)
    grads.add_(gp_grads)
    gap = float(np.add.reduce(out[b:, 0]) - np.add.reduce(out[:b, 0])) / b
    return gap + gp, norm, grads


def critic_loss_and_grad(model: GanModel, real_batch, fake_batch, labels, seed: int):
    """``critic_loss`` together with its exact gradient over the critic parameters."""
    real, fake, labels = _check_pair(model, real_batch, fake_batch, labels)
    x_hat = _interpolates(real, fake, np.random.default_rng(seed))
    loss, _, grads = _critic_grads(model, _Minibatch.of(real, labels), fake, x_hat)
    return loss, grads


def gradient_penalty_and_grad(model: GanModel, real_batch, fake_batch, labels, seed: int):
    """``gradient_penalty`` together with its exact gradient over the critic parameters."""
    real, fake, labels = _check_pair(model, real_batch, fake_batch, labels)
    x_hat = _interpolates(real, fake, np.random.default_rng(seed))
    value, _, grads = _penalty(model, x_hat, one_hot(labels), with_grad=True)
    return value, grads


def _critic_step(model, opt, mb: _Minibatch, rng, buffers=None) -> tuple[float, float]:
    real = mb.real
    z = rng.standard_normal((real.shape[0], model.latent_dim))
    g_inp = np.concatenate((z, mb.codes), axis=1)
    fake, _ = nnet.forward(model.generator, model.generator_spec, g_inp, check=False)
    loss, norm, grads = _critic_grads(model, mb, fake, _interpolates(real, fake, rng), buffers)
    nnet.optimizer_step(opt, model.critic, grads)
    return loss, norm


def _generator_step(model, opt, label_pool, b, rng, buffer=None) -> float:
    codes = one_hot(rng.choice(label_pool, size=b))
    z = rng.standard_normal((b, model.latent_dim))
    g_inp = np.concatenate((z, codes), axis=1)
    fake, g_cache = nnet.forward(model.generator, model.generator_spec, g_inp, check=False)
    c_inp = np.concatenate((fake, codes), axis=1)
    out, c_cache = nnet.forward(model.critic, model.critic_spec, c_inp, check=False)
    _, c_in = nnet.backward(model.critic, model.critic_spec, c_cache, np.full((b, 1), -1.0 / b), params=False)
    grads, _ = nnet.backward(model.generator, model.generator_spec, g_cache, c_in[:, : model.n_features],
                             out=buffer, inputs=False)
    nnet.optimizer_step(opt, model.generator, grads)
    return -float(out.mean())


def critic_gap(model: GanModel, train: Dataset, seed: int) -> float:
    """mean D(real) - mean D(fake) over the whole set, fakes sharing the labels."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((train.n_rows, model.latent_dim))
    fake = generate(model, z, train.labels)
    return float(
        critic_scores(model, train.features, train.labels).mean()
        - critic_scores(model, fake, train.labels).mean()
    )


def train_cwgan_gp(
    train: Dataset,
    hp: GanHyperParams,
    model_defaults: ModelDefaults | None = None,
    seed: int = 0,
) -> tuple[GanModel, GanTrainReport]:
    """Train on features already scaled to [0,1].

    Raises ``GanTrainingError`` naming the epoch, batch and hyperparameters
    when a loss or parameter turns non-finite.
    """
    train.require_both_classes()
    if hp.batch_size > train.n_rows:
        raise ValueError(f"batch_size {hp.batch_size} exceeds the {train.n_rows} training rows")
    nnet.keep_heap_allocations()
    start = time.perf_counter()
    model = build_model(train.n_features, hp, model_defaults, seed)
    report = GanTrainReport()
    if hp.epochs == 0:
        return model, report
    loop_seed, gap_seed = np.random.default_rng([seed, 1]).integers(0, 2**63, size=2)
    rng = np.random.default_rng(loop_seed)
    c_opt = nnet.make_optimizer(hp.optimizer_discriminator, hp.lr_discriminator, model.critic)
    g_opt = nnet.make_optimizer(hp.optimizer_generator, hp.lr_generator, model.generator)
    # divergence is detected explicitly and raised as GanTrainingError
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        _train_epochs(model, hp, train, rng, c_opt, g_opt, report, int(gap_seed))
    report.wall_time = time.perf_counter() - start
    return model, report


def _train_epochs(model, hp, train, rng, c_opt, g_opt, report, gap_seed) -> None:
    c_bufs = (model.critic.zeros_like(), model.critic.zeros_like())
    g_buf = model.generator.zeros_like()
    x, y = train.features, train.labels
    for epoch in range(hp.epochs):
        order = rng.permutation(train.n_rows)
        for batch, lo in enumerate(range(0, train.n_rows, hp.batch_size)):
            idx = order[lo : lo + hp.batch_size]
            mb = _Minibatch.of(x[idx], y[idx])
            c_losses, norms = [], []
            for _ in range(model.n_critic):
                loss, norm = _critic_step(model, c_opt, mb, rng, c_bufs)
                c_losses.append(loss)
                norms.append(norm)
            g_loss = _generator_step(model, g_opt, y, idx.size, rng, g_buf)
            c_loss = float(np.mean(c_losses))
            if not (np.isfinite(c_loss) and np.isfinite(g_loss) and model.critic.is_finite()
                    and model.generator.is_finite()):
                raise GanTrainingError(
                    f"non-finite loss at epoch {epoch}, batch {batch} with {hp.to_dict()}"
                )
            report.critic_loss.append(c_loss)
            report.generator_loss.append(g_loss)
            report.gradient_norm.append(float(np.mean(norms)))
        try:
            report.critic_gap.append(critic_gap(model, train, gap_seed))
        except ValueError as exc:  # non-finite generator output
            raise GanTrainingError(f"non-finite output after epoch {epoch} with {hp.to_dict()}") from exc


def generate_minority(model: GanModel, count: int, scaler: MinMaxScaler, seed: int) -> np.ndarray:
    """``count`` minority rows in feature units (generator output clipped to [0,1])."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return np.empty((0, model.n_features))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, model.latent_dim))
    out = np.clip(generate(model, z, np.ones(count, dtype=np.int64)), 0.0, 1.0)
    return scaler.inverse_transform(out)


@dataclass
class GanOversampleResult:
    data: Dataset
    model: GanModel | None
    report: GanTrainReport
    scaler: MinMaxScaler


def fit_and_oversample(
    train: Dataset,
    hp: GanHyperParams,
    seed: int = 0,
    model_defaults: ModelDefaults | None = None,
) -> GanOversampleResult:
    train.require_both_classes()
    scaler = fit_minmax(train)
    needed = train.n_majority - train.n_minority
    if needed <= 0:
        return GanOversampleResult(train, None, GanTrainReport(), scaler)
    scaled = Dataset(scaler.transform(train.features), train.labels, train.feature_names)
    train_seed, sample_seed = np.random.default_rng([seed, 2]).integers(0, 2**63, size=2)
    if hp.batch_size > train.n_rows:  # small data: one full batch per epoch
        hp = replace(hp, batch_size=train.n_rows)
    model, report = train_cwgan_gp(scaled, hp, model_defaults, int(train_seed))
    rows = generate_minority(model, needed, scaler, int(sample_seed))
    if not np.all(np.isfinite(rows)):
        raise GanTrainingError(f"non-finite synthetic rows with {hp.to_dict()}")
    return GanOversampleResult(train.append(rows, 1), model, report, scaler)


def oversample_with_gan(
    train: Dataset,
    hp: GanHyperParams,
    seed: int = 0,
    model_defaults: ModelDefaults | None = None,
) -> Dataset:
    """Append GAN-made minority rows until the classes balance."""
    return fit_and_oversample(train, hp, seed, model_defaults).data


def save_generator(model: GanModel, path: str | Path, scaler: MinMaxScaler | None = None) -> None:
    spec = model.generator_spec
    blob = {
        "schema_version": SCHEMA_VERSION,
        "kind": "cwgan_gp_generator",
        "spec": {
            "layer_widths": list(spec.layer_widths),
            "activation": spec.activation,
            "output_activation": spec.output_activation,
            "layer_norm": spec.layer_norm,
            "seed": spec.seed,
        },
        "state": nnet.state_to_dict(model.generator),
        "latent_dim": model.latent_dim,
        "n_features": model.n_features,
        "scaler": None if scaler is None else {
            "minimum": scaler.minimum.tolist(), "maximum": scaler.maximum.tolist()
        },
    }
    Path(path).write_text(json.dumps(blob))


def load_generator(path: str | Path) -> tuple[GanModel, MinMaxScaler | None]:
    blob = json.loads(Path(path).read_text())
    if blob.get("kind") != "cwgan_gp_generator":
        raise DataError(f"{path}: not a generator artifact")
    if blob.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema_version {blob.get('schema_version')!r}")
    s = blob["spec"]
    spec = nnet.MlpSpec(tuple(s["layer_widths"]), s["activation"], s["output_activation"],
                        s["layer_norm"], s["seed"])
    model = GanModel(spec, nnet.state_from_dict(blob["state"]), None, None,
                     blob["latent_dim"], blob["n_features"])
    sc = blob.get("scaler")
    scaler = None if sc is None else MinMaxScaler(np.array(sc["minimum"]), np.array(sc["maximum"]))
    return model, scaler


__all__ = [
    "BATCH_SIZES", "EPOCH_RANGE", "LEARNING_RATES", "GanHyperParams", "GanModel",
    "GanTrainReport", "GanTrainingError", "ModelDefaults", "build_model", "critic_gap",
    "critic_loss", "critic_loss_and_grad", "critic_scores", "generate", "gradient_penalty_and_grad",
    "fit_and_oversample", "generate_minority", "generator_loss", "gradient_penalty",
    "load_generator", "oversample_with_gan", "save_generator", "train_cwgan_gp",
]
