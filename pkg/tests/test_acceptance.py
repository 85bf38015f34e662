"""End-to-end acceptance checks; one summary line per criterion is printed at the end of the run.

The desk-scale training run (64 bundled 32x32 pairs, 2000 iterations, tiny widths)
is shared across criteria 5 to 8 through a session fixture.
"""

import time

import numpy as np
import pytest

from conftest import DESK_DATA
from corenet import cli
from corenet import tensor as T
from corenet.checkpoint import decode_checkpoint, encode_checkpoint, save_checkpoint
from corenet.data import DegradeParams, build_dataset, load_sample, make_clean_image, synth_degrade
from corenet.layers import OpConvParams, OpConvSpec, allocated_size, count_params, init_params, opconv_forward
from corenet.losses import Hyperparams, ar_loss, ffl, mr_loss, normalize, psnr_value
from corenet.networks import DESK_AR, DESK_MR, ARConfig, MRConfig, ar_forward, build_ar, build_mr, mr_forward
from corenet.tensor import Tensor
from corenet.training import TrainState, evaluate, identity_baseline, train, two_pass_restore

from oracles import naive_conv2d, naive_ffl, spearman

SEED = 0  # default training seed (init, split, sample order); the corpus itself comes from seed 7
SPLIT = 0.9
ITERATIONS = 2000
DESK_HYPER = dict(lr=1e-3, seed=SEED, max_iterations=ITERATIONS)
HELD_OUT = 50


def record(log, n, ok, detail):
    log[n] = (bool(ok), detail)
    assert ok, detail


def desk_state() -> TrainState:
    return TrainState.initial(ARConfig(**DESK_AR), MRConfig(**DESK_MR), Hyperparams(**DESK_HYPER), split_ratio=SPLIT)


def ckpt_bytes(state) -> bytes:
    return encode_checkpoint(state.to_checkpoint())


@pytest.fixture(scope="session")
def desk_split():
    train_pairs, test_pairs = build_dataset(DESK_DATA, SPLIT, SEED)
    return [load_sample(p) for p in train_pairs], [load_sample(p) for p in test_pairs]


@pytest.fixture(scope="session")
def desk_run(desk_split):
    samples, _ = desk_split
    state = desk_state()
    t0 = time.perf_counter()
    log = train(samples, state)
    return {"state": state, "log": log, "seconds": time.perf_counter() - t0, "bytes": ckpt_bytes(state)}


# -- 1 ---------------------------------------------------------------------------


def test_c01_gradcheck(acceptance_log, capsys):
    t0 = time.perf_counter()
    code = cli.main(["gradcheck", "--tol", "1e-4"])
    seconds = time.perf_counter() - t0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()[1:-1]]
    worst = max(float(r[1]) / float(r[2]) for r in rows)
    record(acceptance_log, 1, code == 0 and seconds < 120,
           f"{len(rows)} checks, worst error/tol {worst:.2e}, {seconds:.0f} s (limit 120 s)")


# -- 2 ---------------------------------------------------------------------------


def test_c02_q1_equivalence(acceptance_log):
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c_in, c_out, h, w = (int(v) for v in rng.integers(1, 9, size=4))
        k = int(rng.integers(1, min(h, w) + 1))
        stride = int(rng.integers(1, 3))
        x = Tensor(rng.uniform(-1, 1, size=(c_in, h, w)))
        p1: OpConvParams = init_params(OpConvSpec(c_in, c_out, k, 1, stride, 0), rng, T.HIGH)
        p1.bias.data[:] = rng.normal(scale=0.1, size=c_out)
        y1 = opconv_forward(x, p1)
        cnn = T.tanh_apply(T.add_channel_bias(T.conv2d(x, p1.kernels[0], stride, 0), p1.bias))
        zeros = [Tensor(np.zeros_like(p1.kernels[0].data)) for _ in range(2)]
        y3 = opconv_forward(x, OpConvParams(p1.kernels + zeros, p1.bias, stride, 0))
        mismatches += y1.data.tobytes() != cnn.data.tobytes() or y3.data.tobytes() != y1.data.tobytes()
    record(acceptance_log, 2, mismatches == 0, f"{100 - mismatches}/100 configurations bit-identical")


# -- 3 ---------------------------------------------------------------------------


def test_c03_oracles(acceptance_log):
    worst_conv = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        pad = int(rng.integers(0, 3))
        k = int(rng.integers(1, min(h, w) + 2 * pad + 1))
        stride = int(rng.integers(1, 4))
        x = rng.normal(size=(c_in, h, w))
        kern = rng.normal(size=(c_out, c_in, k, k))
        got = T.conv2d(Tensor(x), Tensor(kern), stride, pad).data
        worst_conv = max(worst_conv, float(np.abs(got - naive_conv2d(x, kern, stride, pad)).max()))
    rng = np.random.default_rng(3)
    b, gt = rng.uniform(-1, 1, size=(2, 3, 8, 8))
    ffl_err = abs(float(ffl(Tensor(b), gt).data) - naive_ffl(b, gt))
    record(acceptance_log, 3, worst_conv <= 1e-12 and ffl_err <= 1e-9,
           f"conv max abs diff {worst_conv:.1e} over 100 cases (<= 1e-12), ffl 8x8 diff {ffl_err:.1e} (<= 1e-9)")


# -- 4 ---------------------------------------------------------------------------


def test_c04_loss_values(acceptance_log):
    l_mr = mr_loss(0.7, 1.0, alpha_db=20, target_db=40)
    l_ar = ar_loss(1.0, 40.0, 0.0, Hyperparams(epsilon=3, beta=0.05, phi=100))
    ok = abs(l_mr - 0.2) <= 1e-9 and abs(l_ar + 2.0) <= 1e-9
    record(acceptance_log, 4, ok, f"L_MR {l_mr:.12f} (0.2), L_AR {l_ar:.12f} (-2.0), tol 1e-9")


# -- 5 ---------------------------------------------------------------------------


def test_c05_desk_learning(acceptance_log, desk_split, desk_run):
    _, test = desk_split
    base = identity_baseline(test)
    restored = evaluate(desk_run["state"].ar, test).mean
    finite = all(np.isfinite(r.l_mr) and np.isfinite(r.l_ar) for r in desk_run["log"].records)
    gain = restored - base
    ok = gain >= 3.0 and desk_run["seconds"] < 600 and finite and len(desk_run["log"]) == ITERATIONS
    record(acceptance_log, 5, ok,
           f"test PSNR {restored:.2f} dB vs baseline {base:.2f} dB, gain {gain:+.2f} dB (>= 3), "
           f"{desk_run['seconds']:.0f} s (limit 600 s), losses finite: {finite}")


# -- 6 ---------------------------------------------------------------------------


def held_out_images(ar, n=HELD_OUT):
    """Fresh scenes (not in the corpus) spanning restored-to-clean quality.

    Image i is (1-t)*AR(A_i) + t*GT_i with t uniform in [0, 1], so its PSNR
    against GT_i is known exactly.
    """
    images, truths = [], []
    for i in range(n):
        clean = make_clean_image(32, np.random.default_rng(10_000 + i))
        corrupted = np.rint(synth_degrade(clean, DegradeParams(), np.random.default_rng([0, 10_000 + i])))
        a, _, _ = normalize(corrupted)
        gt, _, _ = normalize(clean)
        out = ar_forward(ar, a.astype(np.float32)).data.astype(np.float64)
        t = np.random.default_rng([1, i]).uniform()
        images.append((1 - t) * out + t * gt)
        truths.append(gt)
    return images, truths


def test_c06_mr_ranking(acceptance_log, desk_run):
    state = desk_run["state"]
    images, truths = held_out_images(state.ar)
    true_psnr = [psnr_value(x, g) for x, g in zip(images, truths)]
    scores = [float(mr_forward(state.mr, x.astype(np.float32)).data) for x in images]
    rho = spearman(scores, true_psnr)
    record(acceptance_log, 6, rho >= 0.7,
           f"Spearman {rho:.3f} (>= 0.7) over {HELD_OUT} held-out images, "
           f"PSNR range {min(true_psnr):.1f}-{max(true_psnr):.1f} dB")


# -- 7 ---------------------------------------------------------------------------


def test_c07_determinism(acceptance_log, desk_split, desk_run, tmp_path):
    samples, _ = desk_split
    again = desk_state()
    train(samples, again)
    same_seed = ckpt_bytes(again) == desk_run["bytes"]

    first_half = desk_state()
    train(samples, first_half, iterations=ITERATIONS // 2)
    save_checkpoint(first_half.to_checkpoint(), tmp_path / "half.ckpt")
    resumed = TrainState.from_checkpoint(decode_checkpoint((tmp_path / "half.ckpt").read_bytes()))
    train(samples, resumed)
    resume_exact = ckpt_bytes(resumed) == desk_run["bytes"]
    record(acceptance_log, 7, same_seed and resume_exact,
           f"equal-seed runs identical: {same_seed}; resume at {ITERATIONS // 2} identical: {resume_exact}")


# -- 8 ---------------------------------------------------------------------------


def test_c08_two_pass(acceptance_log, desk_split, desk_run, tmp_path, capsys):
    _, test = desk_split
    ar = desk_run["state"].ar
    exact = True
    for s in test:
        first, second = two_pass_restore(ar, s.corrupted)
        manual = ar_forward(ar, ar_forward(ar, s.corrupted).data).data
        exact &= second.tobytes() == manual.tobytes()
    ckpt = tmp_path / "desk.ckpt"
    save_checkpoint(desk_run["state"].to_checkpoint(), ckpt)
    capsys.readouterr()
    code = cli.main(["eval", "--ckpt", str(ckpt), "--data", str(DESK_DATA), "--passes", "2"])
    out = capsys.readouterr().out.splitlines()
    mean = out[-1].split("\t")
    both = code == 0 and out[0].split("\t")[1:] == ["pass1_psnr_db", "pass2_psnr_db"] and len(mean) == 3
    record(acceptance_log, 8, exact and both,
           f"composition bit-exact on {len(test)} images: {exact}; eval means pass1 {mean[1]} dB, pass2 {mean[2]} dB")


# -- 9 ---------------------------------------------------------------------------


def test_c09_parameter_accounting(acceptance_log):
    rng = np.random.default_rng(0)
    ar_cfg, mr_cfg = ARConfig(), MRConfig()
    n_ar = count_params(ar_cfg.layer_specs())
    n_mr = count_params(mr_cfg.layer_specs())
    ok_ar = n_ar == allocated_size(build_ar(ar_cfg, rng).parameters())
    ok_mr = n_mr == allocated_size(build_mr(mr_cfg, rng).parameters())
    hand = count_params(OpConvSpec(3, 8, 5, 3))
    record(acceptance_log, 9, ok_ar and ok_mr and hand == 1808,
           f"AR {n_ar} (matches allocation: {ok_ar}), MR {n_mr} (matches: {ok_mr}), single layer {hand} (1808)")


# -- 10 --------------------------------------------------------------------------


def test_c10_freeze_audit(acceptance_log, desk_split):
    samples, _ = desk_split
    state = desk_state()
    leaks = []
    train(samples, state, iterations=10, audit=True,
          on_record=lambda rec, m: leaks.append((m.mr_grad_in_ar_step, m.ar_grad_in_mr_step)))
    clean = len(leaks) == 10 and all(a == 0.0 and b == 0.0 for a, b in leaks)
    worst = max(max(a, b) for a, b in leaks)
    record(acceptance_log, 10, clean, f"{len(leaks)} audited iterations, largest cross-network gradient {worst:.1e}")
