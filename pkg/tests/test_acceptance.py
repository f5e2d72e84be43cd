"""Acceptance gate: ten behavioral criteria, one printed verdict line each.

Criteria 6-8 train real models on pinned toy protocols through the
session-scoped fixtures in conftest.py; everything else runs in seconds.
Each test records its verdict through the `verdict` fixture, so the summary
block at the end of a pytest run lists every criterion with its measurement.
"""

import time
from dataclasses import replace

import numpy as np

import oracles
from conftest import PINNED_SEEDS, SINGLE_STRUCTURE_VARIANTS, routing_protocol
from mimdit import tensor as T
from mimdit.attention import TokenSequence, window_partition, window_reverse
from mimdit.backbone import MiMDiT, load_checkpoint, save_checkpoint
from mimdit.cli import main as cli_main
from mimdit.degradations import build_dataset, load_dataset, write_dataset
from mimdit.flow import SamplerConfig, euler_sample, interpolate
from mimdit.gradcheck import (
    FD_TOLERANCE,
    backbone_gradient_check,
    default_check_config,
    max_relative_error,
)
from mimdit.routing import (
    DenseRouter,
    MiM,
    MiMConfig,
    ExpertGroup,
    SparseRouter,
    dense_route,
    sparse_route,
)
from mimdit.training import (
    aggregate_traces,
    collect_routing_traces,
    evaluation_data,
    train_model,
)


def _rand_seq(rng, dim=8, grid=(4, 4)):
    tokens = rng.standard_normal((grid[0] * grid[1], dim))
    return TokenSequence(T.Tensor(tokens), grid[0], grid[1])


# --- criterion 1 -----------------------------------------------------------

def _leaf(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def _primitive_errors(seed):
    """Worst FD-vs-analytic relative error for each differentiable primitive."""
    rng = np.random.default_rng([seed, 11])
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 4)
    m1, m2 = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    pos = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    den = T.Tensor(rng.uniform(0.5, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)),
                   requires_grad=True)
    # Gapped values so finite differences never straddle a top-k reselection.
    vec = T.Tensor(rng.permutation(np.linspace(-1.0, 1.0, 6)), requires_grad=True)
    gain, bias = _leaf(rng, 4), _leaf(rng, 4)
    tail = _leaf(rng, 2, 4)
    image, kernel = _leaf(rng, 2, 4, 4), _leaf(rng, 3, 3)
    w34 = T.Tensor(rng.standard_normal((3, 4)))
    w32 = T.Tensor(rng.standard_normal((3, 2)))
    w54 = T.Tensor(rng.standard_normal((5, 4)))
    w24 = T.Tensor(rng.standard_normal((2, 4)))
    w4 = T.Tensor(rng.standard_normal(4))

    def weighted(out, w):
        return T.tensor_sum(out * w)

    cases = {
        "add": ([a, b], lambda: weighted(a + b, w34)),
        "sub": ([a, b], lambda: weighted(a - b, w34)),
        "mul": ([a, b], lambda: weighted(a * b, w34)),
        "div": ([a, den], lambda: weighted(a / den, w34)),
        "neg": ([a], lambda: weighted(-a, w34)),
        "matmul": ([m1, m2], lambda: weighted(T.matmul(m1, m2), w32)),
        "softmax": ([a], lambda: weighted(T.softmax(a, axis=1), w34)),
        "topk_gather": ([vec], lambda: weighted(T.gather(vec, T.topk(vec, 3)[0]),
                                                T.Tensor(np.array([1.0, -2.0, 0.5])))),
        "layernorm": ([a, gain, bias], lambda: weighted(T.layernorm(a, gain, bias), w34)),
        "gelu": ([a], lambda: weighted(T.gelu(a), w34)),
        "sigmoid": ([a], lambda: weighted(T.sigmoid(a), w34)),
        "sqrt": ([pos], lambda: weighted(T.sqrt(pos), w34)),
        "sum": ([a], lambda: T.tensor_sum(a * a)),
        "mean": ([a], lambda: T.tensor_sum(T.tensor_mean(a, axis=0) * w4) + T.tensor_mean(a * a)),
        "reshape": ([a], lambda: weighted(T.reshape(T.reshape(a, (2, 6)), (3, 4)), w34)),
        "transpose": ([a], lambda: weighted(T.transpose(a), T.transpose(w34))),
        "concat": ([a, tail], lambda: weighted(T.concat([a, tail], axis=0), w54)),
        "split": ([a], lambda: weighted(T.split(a, [1, 2], axis=0)[1] * 2.0, w24)),
        "roll": ([a], lambda: weighted(T.roll(a, 1, axis=1), w34)),
        "conv2d": ([image, kernel], lambda: T.tensor_mean(T.conv2d(image, kernel)
                                                          * T.conv2d(image, kernel))),
    }
    return {name: max_relative_error(fn, leaves) for name, (leaves, fn) in cases.items()}


def test_criterion_01_gradient_integrity(verdict):
    start = time.monotonic()
    worst_primitive = 0.0
    for seed in range(20):
        for name, err in _primitive_errors(seed).items():
            assert err < FD_TOLERANCE, f"primitive {name} seed {seed}: {err:.3e}"
            worst_primitive = max(worst_primitive, err)
    worst_model = max(backbone_gradient_check(seed) for seed in range(20))
    elapsed = time.monotonic() - start
    verdict(
        1,
        "gradient integrity",
        worst_primitive < FD_TOLERANCE and worst_model < FD_TOLERANCE and elapsed < 120.0,
        f"primitives {worst_primitive:.2e}, 2-block width-8 model {worst_model:.2e}, "
        f"tolerance {FD_TOLERANCE}, {elapsed:.0f}s",
    )


# --- criterion 2 -----------------------------------------------------------

def test_criterion_02_zero_init_conditioning(verdict):
    config = default_check_config()
    model = MiMDiT(config, np.random.default_rng([42, 0]))
    rng = np.random.default_rng([42, 1])
    shape = (config.token_count, config.latent_dim)
    worst = 0.0
    for _ in range(100):
        x_t = T.Tensor(rng.standard_normal(shape))
        z_lq = TokenSequence(
            T.Tensor(rng.standard_normal(shape)), config.grid_height, config.grid_width
        )
        t = float(rng.uniform(0.0, 1.0))
        conditioned = model.velocity(z_lq, x_t, t)
        free = model.velocity(z_lq, x_t, t, use_conditioning=False)
        worst = max(worst, float(np.abs(conditioned.data - free.data).max()))
    verdict(
        2,
        "zero-init conditioning",
        worst < 1e-9,
        f"max deviation {worst:.2e} over 100 inputs, bound 1e-9",
    )


# --- criterion 3 -----------------------------------------------------------

def test_criterion_03_routing_contracts(verdict):
    rng = np.random.default_rng(303)

    dense = DenseRouter(8, rng=rng, zero_init=False)
    worst_simplex = 0.0
    for _ in range(1000):
        gates = dense_route(_rand_seq(rng), dense)
        assert gates.data.min() >= 0.0
        worst_simplex = max(worst_simplex, abs(float(gates.data.sum()) - 1.0))
    assert worst_simplex <= 1e-12

    group = ExpertGroup("spatial", 8, 4, 2, rng, router_init="random")
    evaluated = []
    original = group.evaluate_expert
    group.evaluate_expert = lambda index, seq: (evaluated.append(index), original(index, seq))[1]
    out, selections, _ = group.forward(_rand_seq(rng))
    assert sorted(evaluated) == sorted(j for j, _ in selections)
    assert len(evaluated) == len(set(evaluated)) == 2
    gate_sum = sum(g for _, g in selections)
    assert abs(gate_sum - 1.0) <= 1e-12

    loss = T.tensor_mean(out * out)
    loss.backward()
    selected = {j for j, _ in selections}
    unselected_clean = True
    for j in range(group.n_experts):
        if j in selected:
            continue
        for p in group.experts[j].parameters():
            unselected_clean &= p.grad is None or not np.any(p.grad)
    assert unselected_clean

    sparse = SparseRouter(8, 5, rng=rng, zero_init=False)
    worst_kn = 0.0
    for _ in range(50):
        seq = _rand_seq(rng)
        indices, gates = sparse_route(seq, sparse, 5)
        probs = T.softmax(
            T.reshape(sparse.proj(T.tensor_mean(seq.tokens, axis=0, keepdims=True)), (5,)),
            axis=0,
        )
        for pos, j in enumerate(indices):
            worst_kn = max(worst_kn, abs(float(gates.data[pos]) - float(probs.data[j])))
    assert worst_kn <= 1e-12

    verdict(
        3,
        "routing contracts",
        True,
        f"simplex dev {worst_simplex:.1e}/1000 inputs, exactly k evaluated, "
        f"unselected grads zero, k=N vs dense dev {worst_kn:.1e}",
    )


# --- criterion 4 -----------------------------------------------------------

def test_criterion_04_mim_oracle_equivalence(verdict):
    config = MiMConfig(
        model_dim=8,
        block_count=4,
        sub_expert_count=3,
        top_k=2,
        window=2,
        patch=2,
        image_height=8,
        image_width=8,
        channels=1,
        text_tokens=2,
    )
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng([seed, 7])
        layers = [MiM(config, rng, block_index=i, router_init="random") for i in range(4)]
        x = rng.standard_normal((16, 8))
        seq = TokenSequence(T.Tensor(x.copy()), 4, 4)
        want = x.copy()
        for layer in layers:
            seq = layer.forward(seq)
            want = oracles.mim_forward(layer, want, 4, 4)
        worst = max(worst, float(np.abs(seq.tokens.data - want).max()))
    verdict(
        4,
        "mim oracle equivalence",
        worst < 1e-10,
        f"width-8 L=4 N=3 k=2 vs unrolled sum: max dev {worst:.2e} over 50 seeds, bound 1e-10",
    )


# --- criterion 5 -----------------------------------------------------------

def test_criterion_05_flow_correctness(verdict):
    rng = np.random.default_rng(505)
    x = _rand_seq(rng)
    z = _rand_seq(rng)
    assert np.array_equal(interpolate(x, z, 0.0).x_t.tokens.data, z.tokens.data)
    assert np.array_equal(interpolate(x, z, 1.0).x_t.tokens.data, x.tokens.data)

    const = T.Tensor(rng.standard_normal((16, 8)))
    worst_const = 0.0
    for steps in (1, 5, 40):
        sampled = euler_sample(lambda zl, xt, t: const, z, z, SamplerConfig(steps=steps))
        target = z.tokens.data + const.data
        worst_const = max(worst_const, float(np.abs(sampled.tokens.data - target).max()))
    assert worst_const < 1e-12

    ratios = []
    for rate in (-0.7, 0.5):
        exact = z.tokens.data * np.exp(rate)

        def err(steps):
            out = euler_sample(
                lambda zl, xt, t: xt * rate, z, z, SamplerConfig(steps=steps)
            )
            return float(np.abs(out.tokens.data - exact).max())

        ratios.append(err(16) / err(32))
    ratio_ok = all(1.6 <= r <= 2.4 for r in ratios)
    assert ratio_ok

    verdict(
        5,
        "flow correctness",
        worst_const < 1e-12 and ratio_ok,
        f"endpoints exact, constant-field dev {worst_const:.1e} for T in (1,5,40), "
        f"halving ratios {', '.join(f'{r:.2f}' for r in ratios)} within [1.6, 2.4]",
    )


# --- criteria 6-8: trained toy models --------------------------------------

def test_criterion_06_intra_moe_benefit(verdict, ablation_grid):
    rows = ablation_grid["rows"]
    minutes = ablation_grid["core_seconds"] / 60.0
    pairs = {
        seed: (rows[("full", seed)].metrics.mse, rows[("no_intra", seed)].metrics.mse)
        for seed in PINNED_SEEDS
    }
    wins = sum(full <= base for full, base in pairs.values())
    detail = ", ".join(
        f"seed {seed}: {full:.4f} vs {base:.4f}" for seed, (full, base) in pairs.items()
    )
    verdict(
        6,
        "intra-moe benefit",
        wins >= 2 and minutes < 30.0,
        f"full <= no_intra mse in {wins}/3 seeds ({detail}), {minutes:.1f} min < 30",
    )


def test_criterion_07_heterogeneity_benefit(verdict, ablation_grid):
    rows = ablation_grid["rows"]
    wins = 0
    details = []
    for seed in PINNED_SEEDS:
        full = rows[("full", seed)].metrics.mse
        best_single = min(rows[(v, seed)].metrics.mse for v in SINGLE_STRUCTURE_VARIANTS)
        wins += full <= best_single
        details.append(f"seed {seed}: {full:.4f} vs {best_single:.4f}")
    verdict(
        7,
        "heterogeneity benefit",
        wins >= 2,
        f"full <= best single-structure mse in {wins}/3 seeds ({', '.join(details)})",
    )


def test_criterion_08_degradation_aware_routing(verdict, routing_reports):
    config = routing_protocol(PINNED_SEEDS[0])
    untrained, _ = train_model(replace(config, train_steps=0))
    init_report = aggregate_traces(
        collect_routing_traces(untrained, evaluation_data(config), seed=1)
    )
    init_uniform = all(
        np.array_equal(row, [0.25, 0.25, 0.25, 0.25]) for row in init_report.matrix
    )
    assert init_uniform

    distances = {}
    for seed, report in routing_reports.items():
        for row in report.matrix:
            assert row.min() >= 0.0 and abs(float(row.sum()) - 1.0) <= 1e-6
        worst = 0.0
        for i in range(len(report.matrix)):
            for j in range(i + 1, len(report.matrix)):
                worst = max(worst, float(np.abs(report.matrix[i] - report.matrix[j]).sum()))
        distances[seed] = worst
    wins = sum(d >= 0.1 for d in distances.values())
    detail = ", ".join(f"seed {s}: L1 {d:.3f}" for s, d in distances.items())
    verdict(
        8,
        "degradation-aware routing",
        wins >= 2,
        f"init rows exactly uniform; trained max pairwise row L1 >= 0.1 in {wins}/3 seeds ({detail})",
    )


# --- criterion 9 -----------------------------------------------------------

_DETERMINISM_INI = """\
[model]
model_dim = 8
block_count = 1
sub_expert_count = 2
top_k = 1
window = 2
patch = 4
text_tokens = 2

[sampler]
steps = 3

[data]
count = 6
eval_count = 2
kinds = blur,haze
severity_lo = 0.5
severity_hi = 1.0

[experiment]
train_steps = 4
batch_size = 2
seed = 0
"""


def test_criterion_09_artifact_determinism(verdict, tmp_path):
    ini = tmp_path / "exp.ini"
    ini.write_text(_DETERMINISM_INI)

    def artifacts(tag):
        base = tmp_path / tag
        base.mkdir()
        data = base / "data.txt"
        ckpt = base / "model.ckpt"
        restored = base / "restored.tensor"
        report = base / "report.txt"
        for argv in (
            ["gen-data", "--config", str(ini), "--out", str(data)],
            ["train", "--config", str(ini), "--data", str(data), "--out", str(ckpt)],
            ["restore", "--config", str(ini), "--checkpoint", str(ckpt),
             "--data", str(data), "--out", str(restored)],
            ["route-report", "--config", str(ini), "--checkpoint", str(ckpt),
             "--data", str(data), "--out", str(report)],
        ):
            assert cli_main(argv) == 0
        return [data, ckpt, restored, report]

    first = artifacts("a")
    second = artifacts("b")
    same = [x.read_bytes() == y.read_bytes() for x, y in zip(first, second)]
    verdict(
        9,
        "determinism",
        all(same),
        "gen-data, train, restore, route-report each byte-identical across reruns",
    )


# --- criterion 10 ----------------------------------------------------------

def test_criterion_10_format_round_trips(verdict, tmp_path):
    config = default_check_config()
    model = MiMDiT(config, np.random.default_rng([10, 0]), router_init="random")
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(first, model)
    save_checkpoint(second, load_checkpoint(first))
    ckpt_ok = first.read_bytes() == second.read_bytes()

    data_a, data_b = tmp_path / "a.txt", tmp_path / "b.txt"
    build_dataset(data_a, 5, ("blur", "rain"), (0.2, 0.9), 77)
    write_dataset(data_b, load_dataset(data_a))
    data_ok = data_a.read_bytes() == data_b.read_bytes()

    rng = np.random.default_rng(1010)
    tokens = T.Tensor(rng.standard_normal((16, 8)))
    windows = window_partition(tokens, 4, 4, 2)
    window_ok = np.array_equal(window_reverse(windows, 4, 4, 2).data, tokens.data)

    parts = T.split(tokens, [5, 3, 8], axis=0)
    concat_ok = np.array_equal(T.concat(parts, axis=0).data, tokens.data)

    verdict(
        10,
        "format round-trips",
        ckpt_ok and data_ok and window_ok and concat_ok,
        f"checkpoint {ckpt_ok}, dataset {data_ok}, window partition/reverse {window_ok}, "
        f"concat/split {concat_ok}, all byte- or bit-exact",
    )
