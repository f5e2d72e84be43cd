"""Training, evaluation, ablation, and routing-report assembly.

All randomness flows through named substreams of the experiment seed so
repeated runs produce byte-identical artifacts:

  [seed, 0] model init, [seed, 1] batch sampling, [seed, 2] flow time and
  noise draws, [seed, 3] training data, [seed, 4] evaluation data,
  [seed, 5] evaluation/restoration noise.
"""

import configparser
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .backbone import MiMDiT, latent_sequence, unpatchify
from .degradations import KINDS, build_dataset
from .errors import ConfigurationError, ContractError, NumericalFailureError, ParameterError, PersistenceError
from .flow import SamplerConfig, euler_sample, interpolate
from .routing import GROUP_ORDER, MiMConfig, RoutingTrace

PSNR_CAP = 180.0
_PSNR_MSE_FLOOR = 1e-18

# substream tags under the experiment seed
_INIT_STREAM = 0
_BATCH_STREAM = 1
_NOISE_STREAM = 2
_TRAIN_DATA_STREAM = 3
_EVAL_DATA_STREAM = 4
_EVAL_NOISE_STREAM = 5


def derived_seed(seed, stream):
    """Stable 63-bit seed for a named substream of the experiment seed."""
    return int(np.random.default_rng([int(seed), int(stream)]).integers(2**63))


# ---------------------------------------------------------------------------
# Optimizer


class Adam(object):
    """Adam with bias correction; a missing gradient counts as zero."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0.0:
            raise ParameterError(f"learning rate must be positive, got {learning_rate}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ParameterError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if epsilon <= 0.0:
            raise ParameterError(f"epsilon must be positive, got {epsilon}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.data -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


# ---------------------------------------------------------------------------
# Experiment configuration (INI sections: model, sampler, optimizer, data, experiment)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    balance_coeff: float = 0.0

    def validate(self):
        if self.learning_rate <= 0.0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.balance_coeff < 0.0:
            raise ConfigurationError(f"balance coefficient must be >= 0, got {self.balance_coeff}")
        return self


@dataclass(frozen=True)
class DataConfig:
    count: int = 32
    eval_count: int = 8
    kinds: tuple = ("blur", "noise", "haze")
    severity_lo: float = 0.3
    severity_hi: float = 1.0
    height: int = 16
    width: int = 16
    channels: int = 1

    def validate(self):
        if self.count < 1 or self.eval_count < 1:
            raise ConfigurationError(
                f"dataset counts must be >= 1, got {self.count} and {self.eval_count}"
            )
        if not self.kinds:
            raise ConfigurationError("kinds must be nonempty")
        for kind in self.kinds:
            if kind not in KINDS:
                raise ConfigurationError(f"unknown degradation kind {kind!r}")
        if not 0.0 <= self.severity_lo <= self.severity_hi <= 1.0:
            raise ConfigurationError(
                f"severity range [{self.severity_lo}, {self.severity_hi}] must be ordered within [0, 1]"
            )
        if self.height < 4 or self.width < 4 or self.channels < 1:
            raise ConfigurationError(
                f"image extents must be >= 4 with >= 1 channel, got {self.channels}x{self.height}x{self.width}"
            )
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    model: MiMConfig = field(default_factory=MiMConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train_steps: int = 200
    batch_size: int = 4
    seed: int = 0
    log_every: int = 100

    def validate(self):
        self.model.validate()
        self.optimizer.validate()
        self.data.validate()
        if self.train_steps < 0:
            raise ConfigurationError(f"train steps must be >= 0, got {self.train_steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ConfigurationError(f"log interval must be >= 1, got {self.log_every}")
        if (self.model.image_height, self.model.image_width, self.model.channels) != (
            self.data.height,
            self.data.width,
            self.data.channels,
        ):
            raise ConfigurationError(
                "model image extents must match the data section; set height/width/channels under [data]"
            )
        return self

    def with_variant(self, variant):
        return replace(self, model=self.model.with_variant(variant))


# image extents live under [data] and are copied onto the model config
_MODEL_EXCLUDED = ("image_height", "image_width", "channels")
_EXPERIMENT_FIELDS = ("train_steps", "batch_size", "seed", "log_every")


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(kind, raw, key):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigurationError(f"{key} expects true/false, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{key} expects an integer, got {raw!r}")
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{key} expects a number, got {raw!r}")
    if kind is tuple:
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return raw


def _field_types(cls):
    return {f.name: (f.type if isinstance(f.type, type) else eval(f.type)) for f in fields(cls)}


def to_ini_text(config):
    lines = ["[model]"]
    for f in fields(MiMConfig):
        if f.name in _MODEL_EXCLUDED:
            continue
        lines.append(f"{f.name} = {_format_value(getattr(config.model, f.name))}")
    lines.append("")
    lines.append("[sampler]")
    lines.append(f"steps = {config.sampler.steps}")
    lines.append("")
    lines.append("[optimizer]")
    for f in fields(OptimizerConfig):
        lines.append(f"{f.name} = {_format_value(getattr(config.optimizer, f.name))}")
    lines.append("")
    lines.append("[data]")
    for f in fields(DataConfig):
        lines.append(f"{f.name} = {_format_value(getattr(config.data, f.name))}")
    lines.append("")
    lines.append("[experiment]")
    for name in _EXPERIMENT_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def write_ini(path, config):
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(to_ini_text(config))
    except OSError as e:
        raise PersistenceError(f"cannot write config {path}: {e}")


def from_ini_text(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}")
    known = {"model", "sampler", "optimizer", "data", "experiment"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigurationError(f"unknown config sections: {sorted(extra)}")

    def section_kwargs(section, cls, excluded=()):
        types = _field_types(cls)
        kwargs = {}
        if not parser.has_section(section):
            return kwargs
        for key, raw in parser.items(section):
            if key in excluded:
                raise ConfigurationError(f"set {key} under [data], not [{section}]")
            if key not in types:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _parse_value(types[key], raw, key)
        return kwargs

    data = DataConfig(**section_kwargs("data", DataConfig))
    model_kwargs = section_kwargs("model", MiMConfig, excluded=_MODEL_EXCLUDED)
    model = MiMConfig(
        image_height=data.height, image_width=data.width, channels=data.channels, **model_kwargs
    )
    sampler_kwargs = section_kwargs("sampler", SamplerConfig)
    sampler = SamplerConfig(**sampler_kwargs)
    optimizer = OptimizerConfig(**section_kwargs("optimizer", OptimizerConfig))

    exp_kwargs = {}
    if parser.has_section("experiment"):
        exp_types = {"train_steps": int, "batch_size": int, "seed": int, "log_every": int}
        for key, raw in parser.items("experiment"):
            if key not in exp_types:
                raise ConfigurationError(f"unknown key {key!r} in [experiment]")
            exp_kwargs[key] = _parse_value(exp_types[key], raw, key)
    return ExperimentConfig(
        model=model, sampler=sampler, optimizer=optimizer, data=data, **exp_kwargs
    ).validate()


def load_ini(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    return from_ini_text(text)


# ---------------------------------------------------------------------------
# Losses and training loop


def balance_penalty(entries):
    """Load-balance term over collected routing distributions.

    Each entry is (block, slot, probs); probabilities are averaged per
    routing site across the batch and penalized by n * sum(p_bar^2), which
    is minimized exactly at the uniform distribution.
    """
    if not entries:
        raise ParameterError("balance penalty needs at least one routing distribution")
    sites = {}
    for block, slot, probs in entries:
        sites.setdefault((block, slot), []).append(probs)
    terms = []
    for key in sorted(sites):
        probs_list = sites[key]
        avg = probs_list[0]
        for p in probs_list[1:]:
            avg = avg + p
        avg = avg * (1.0 / len(probs_list))
        terms.append(T.tensor_sum(avg * avg) * float(avg.size))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def training_data(config):
    """Training set drawn from the experiment seed's data substream."""
    d = config.data
    return build_dataset(
        None,
        d.count,
        d.kinds,
        (d.severity_lo, d.severity_hi),
        derived_seed(config.seed, _TRAIN_DATA_STREAM),
        height=d.height,
        width=d.width,
        channels=d.channels,
    )


def evaluation_data(config):
    """Held-out set from an independent substream of the experiment seed."""
    d = config.data
    return build_dataset(
        None,
        d.eval_count,
        d.kinds,
        (d.severity_lo, d.severity_hi),
        derived_seed(config.seed, _EVAL_DATA_STREAM),
        height=d.height,
        width=d.width,
        channels=d.channels,
    )


def train_model(config, samples=None, *, log_fn=None):
    """Train a model on paired samples; returns (model, loss history)."""
    config.validate()
    model = MiMDiT(config.model, np.random.default_rng([config.seed, _INIT_STREAM]))
    optimizer = Adam(
        model.parameters(),
        learning_rate=config.optimizer.learning_rate,
        beta1=config.optimizer.beta1,
        beta2=config.optimizer.beta2,
        epsilon=config.optimizer.epsilon,
    )
    if samples is None:
        samples = training_data(config)
    if not samples:
        raise ParameterError("training needs at least one sample")
    rng_batch = np.random.default_rng([config.seed, _BATCH_STREAM])
    rng_noise = np.random.default_rng([config.seed, _NOISE_STREAM])
    balance = config.optimizer.balance_coeff
    history = []
    for step in range(config.train_steps):
        indices = rng_batch.integers(0, len(samples), size=config.batch_size)
        model.zero_grad()
        aux = [] if balance > 0.0 else None
        total = None
        for i in indices:
            sample = samples[int(i)]
            x = latent_sequence(sample.clean, config.model)
            z_lq = latent_sequence(sample.degraded, config.model)
            t = float(rng_noise.uniform())
            noise = rng_noise.standard_normal(x.tokens.shape)
            z = x.with_tokens(T.Tensor(noise))
            state = interpolate(x, z, t)
            predicted = model.velocity(z_lq, state.x_t.tokens, t, aux_sink=aux)
            diff = predicted - (x.tokens - z.tokens)
            loss_i = T.tensor_mean(diff * diff)
            total = loss_i if total is None else total + loss_i
        loss = total * (1.0 / config.batch_size)
        if aux:
            loss = loss + balance_penalty(aux) * balance
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalFailureError(f"non-finite training loss at step {step}", step=step)
        T.backward(loss)
        optimizer.step()
        history.append(value)
        if log_fn is not None and step % config.log_every == 0:
            log_fn(f"step {step:6d} loss {value:.8f}")
    return model, history


# ---------------------------------------------------------------------------
# Restoration and metrics


def psnr_from_mse(mse):
    """Peak signal-to-noise ratio on a unit range, capped for exact matches."""
    if mse < 0.0:
        raise ParameterError(f"MSE must be >= 0, got {mse}")
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class MetricsRecord:
    final_loss: float
    mse: float
    psnr: float

    def validate(self):
        expected = psnr_from_mse(self.mse)
        if abs(expected - self.psnr) > 1e-9:
            raise ContractError(
                f"PSNR {self.psnr} inconsistent with MSE {self.mse} (expected {expected})"
            )
        return self


def restoration_noise(config, seed, index):
    """Starting latent noise for one sample's sampling run."""
    rng = np.random.default_rng([int(seed), int(index)])
    return rng.standard_normal((config.token_count, config.latent_dim))


def restore_image(model, degraded, sampler_config, noise):
    """Sample the flow from the given noise, conditioned on the degraded image."""
    config = model.config
    z_lq = latent_sequence(degraded, config)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z_lq.tokens.shape:
        raise ParameterError(
            f"noise shape {noise.shape} does not match latent shape {z_lq.tokens.shape}"
        )
    z0 = z_lq.with_tokens(T.Tensor(noise))
    out = euler_sample(lambda zl, xt, t: model.velocity(zl, xt, t), z_lq, z0, sampler_config)
    return unpatchify(
        out.tokens.data, config.patch, config.channels, config.image_height, config.image_width
    )


def evaluate_model(model, samples, sampler_config, seed):
    """Restore each sample and return (pixel MSE, PSNR) against the clean images."""
    if not samples:
        raise ParameterError("evaluation needs at least one sample")
    total_sq = 0.0
    total_count = 0
    for i, sample in enumerate(samples):
        noise = restoration_noise(model.config, seed, i)
        restored = restore_image(model, sample.degraded, sampler_config, noise)
        diff = restored - sample.clean
        total_sq += float((diff * diff).sum())
        total_count += diff.size
    mse = total_sq / total_count
    return mse, psnr_from_mse(mse)


# ---------------------------------------------------------------------------
# Ablation grid


@dataclass(frozen=True)
class AblationRow:
    variant: str
    parameter_count: int
    metrics: MetricsRecord


def run_ablation(config, variants, *, log_fn=None):
    """Train and evaluate every variant on identical data and seeds."""
    config.validate()
    # reject any bad variant name before the first one trains
    variant_configs = [config.with_variant(variant).validate() for variant in variants]
    train_samples = training_data(config)
    eval_samples = evaluation_data(config)
    eval_seed = derived_seed(config.seed, _EVAL_NOISE_STREAM)
    rows = []
    for variant, variant_config in zip(variants, variant_configs):
        if log_fn is not None:
            log_fn(f"variant {variant}")
        model, history = train_model(variant_config, samples=train_samples, log_fn=log_fn)
        final_loss = history[-1] if history else float("nan")
        mse, psnr = evaluate_model(model, eval_samples, config.sampler, eval_seed)
        metrics = MetricsRecord(final_loss=final_loss, mse=mse, psnr=psnr).validate()
        rows.append(
            AblationRow(
                variant=variant, parameter_count=model.parameter_count(), metrics=metrics
            )
        )
    return rows


def render_ablation_table(rows):
    """Fixed-width text table plus a parameter-count audit line."""
    width = max([len(r.variant) for r in rows] + [len("variant")])
    header = f"{'variant':<{width}}  {'params':>8}  {'final_loss':>14}  {'mse':>14}  {'psnr':>14}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.variant:<{width}}  {r.parameter_count:>8d}  "
            f"{r.metrics.final_loss:>14.8f}  {r.metrics.mse:>14.8f}  {r.metrics.psnr:>14.8f}"
        )
    by_variant = {r.variant: r.parameter_count for r in rows}
    if "full" in by_variant and "no_intra" in by_variant:
        ok = by_variant["no_intra"] < by_variant["full"]
        lines.append(
            f"param audit: no_intra ({by_variant['no_intra']}) < full ({by_variant['full']}): "
            + ("ok" if ok else "VIOLATED")
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Routing reports


@dataclass(frozen=True)
class RoutingReport:
    """Mean inter-routing weights per degradation kind, with selection counts."""

    labels: tuple
    matrix: np.ndarray  # [len(labels), group_count] mean dense gates
    counts: np.ndarray  # [len(labels), group_count] times each group was evaluated

    def validate(self):
        if self.matrix.shape != (len(self.labels), len(GROUP_ORDER)):
            raise ContractError(
                f"report matrix shape {self.matrix.shape} does not match "
                f"{len(self.labels)} labels x {len(GROUP_ORDER)} groups"
            )
        for label, row in zip(self.labels, self.matrix):
            if abs(row.sum() - 1.0) > 1e-6:
                raise ContractError(f"routing row for {label!r} sums to {row.sum()!r}, not 1")
        return self


def collect_routing_traces(model, samples, seed, *, t=0.5):
    """Run the backbone at mid-flow over labeled samples, recording router decisions."""
    traces = []
    for i, sample in enumerate(samples):
        label = sample.spec.kind if sample.spec is not None else None
        noise = restoration_noise(model.config, seed, i)
        x = latent_sequence(sample.clean, model.config)
        z_lq = latent_sequence(sample.degraded, model.config)
        state = interpolate(x, x.with_tokens(T.Tensor(noise)), t)
        model.velocity(z_lq, state.x_t.tokens, t, trace_sink=traces, label=label)
    return traces


def aggregate_traces(traces, *, all_blocks=False):
    """Average dense gates per label; block 0 only unless all_blocks is set."""
    chosen = [tr for tr in traces if all_blocks or tr.block_index == 0]
    if not chosen:
        raise ContractError("no routing traces to aggregate")
    gate_rows = {}
    count_rows = {}
    for tr in chosen:
        if tr.label is None:
            raise ContractError("routing trace is missing a degradation label")
        gates = np.asarray(tr.dense_gates, dtype=np.float64)
        if gates.shape != (len(GROUP_ORDER),):
            raise ContractError(f"trace gate vector has shape {gates.shape}")
        gate_rows.setdefault(tr.label, []).append(gates)
        row = count_rows.setdefault(tr.label, np.zeros(len(GROUP_ORDER), dtype=np.int64))
        for group_index, subs in enumerate(tr.selections):
            row[group_index] += len(subs)
    labels = tuple(sorted(gate_rows))
    matrix = np.stack([np.mean(gate_rows[label], axis=0) for label in labels])
    counts = np.stack([count_rows[label] for label in labels])
    return RoutingReport(labels=labels, matrix=matrix, counts=counts).validate()


def render_routing_report(report):
    width = max([len(label) for label in report.labels] + [len("label")])
    head = "  ".join(f"{name:>12}" for name in GROUP_ORDER)
    lines = ["mean routing weight by degradation kind", f"{'label':<{width}}  {head}"]
    for label, row in zip(report.labels, report.matrix):
        cells = "  ".join(f"{v:>12.8f}" for v in row)
        lines.append(f"{label:<{width}}  {cells}")
    lines.append("")
    lines.append("expert-group evaluation counts")
    lines.append(f"{'label':<{width}}  {head}")
    for label, row in zip(report.labels, report.counts):
        cells = "  ".join(f"{int(v):>12d}" for v in row)
        lines.append(f"{label:<{width}}  {cells}")
    return "\n".join(lines) + "\n"


def write_trace_file(path, traces):
    try:
        with open(path, "w", encoding="utf-8") as f:
            for tr in traces:
                f.write(tr.to_line() + "\n")
    except OSError as e:
        raise PersistenceError(f"cannot write trace file {path}: {e}")


def load_trace_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise PersistenceError(f"cannot read trace file {path}: {e}")
    return [RoutingTrace.from_line(line) for line in lines if line.strip()]
