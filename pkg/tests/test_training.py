import numpy as np
import pytest

from corenet import tensor as T
from corenet.checkpoint import decode_checkpoint, encode_checkpoint
from corenet.data import DatasetError, FormatError, TrainSample, build_dataset, load_sample, make_dataset
from corenet.losses import Hyperparams, psnr_value
from corenet.networks import DESK_AR, DESK_MR, ARConfig, MRConfig, ar_forward, mr_forward
from corenet.tensor import Tensor
from corenet.training import (
    AdamState,
    LogRecord,
    TrainLog,
    TrainState,
    adam_step,
    corenet_iteration,
    evaluate,
    identity_baseline,
    sample_order,
    train,
    two_pass_restore,
)

TINY_AR = ARConfig(widths=[2, 2, 2, 2, 2])
TINY_MR = MRConfig(widths=[2, 2, 2, 2, 2], strides=[2] * 5, dense_hidden=4)


@pytest.fixture(scope="module")
def samples(tmp_path_factory):
    root = tmp_path_factory.mktemp("four")
    pairs = make_dataset(root, 4, 32, seed=11)
    return [load_sample(p) for p in pairs]


def tiny_state(**hyper):
    return TrainState.initial(TINY_AR, TINY_MR, Hyperparams(**{"lr": 1e-3, **hyper}))


def bytes_of(state):
    return encode_checkpoint(state.to_checkpoint())


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # with bias correction the first update is lr * g/|g| (up to eps)
        p = Tensor(np.array([1.0, -2.0, 3.0]))
        st = AdamState.fresh([p])
        adam_step([p], [np.array([0.5, -4.0, 0.0])], st, lr=0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)

    def test_matches_hand_recurrence(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=4))
        x = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        st = AdamState.fresh([p])
        for t in range(1, 6):
            g = rng.normal(size=4)
            adam_step([p], [g], st, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)
        assert st.t == 5

    def test_rejects_nan(self):
        p = Tensor(np.zeros(2))
        with pytest.raises(FloatingPointError):
            adam_step([p], [np.array([np.nan, 0.0])], AdamState.fresh([p]), lr=0.1)


class TestIteration:
    def test_freeze_audit(self, samples):
        st = tiny_state()
        for i in range(3):
            m = corenet_iteration(st.ar, st.mr, samples[i], st.hyper, st.ar_opt, st.mr_opt, iteration=i, audit=True)
            assert m.mr_grad_in_ar_step == 0.0 and m.ar_grad_in_mr_step == 0.0
        assert all(p.requires_grad for p in st.ar.parameters() + st.mr.parameters())

    def test_alpha_is_pre_update_psnr(self, samples):
        st = tiny_state()
        s = samples[0]
        expected = psnr_value(ar_forward(st.ar, s.corrupted).data, s.truth)
        m = corenet_iteration(st.ar, st.mr, s, st.hyper, st.ar_opt, st.mr_opt)
        assert m.alpha_db == pytest.approx(expected, abs=1e-9)

    def test_mr_updated_before_ar(self, samples):
        # the logged AR loss must use the already-updated MR
        st = tiny_state()
        s = samples[1]
        ar_before = [p.data.copy() for p in st.ar.parameters()]
        m = corenet_iteration(st.ar, st.mr, s, st.hyper, st.ar_opt, st.mr_opt)
        for p, old in zip(st.ar.parameters(), ar_before):
            p.data = old
        from corenet.training import ar_objective

        l_ar = float(ar_objective(st.ar, st.mr, Tensor(s.corrupted), Tensor(s.truth), st.hyper).data)
        assert m.l_ar == pytest.approx(l_ar, rel=1e-5)

    def test_step_ratio(self, samples):
        st = tiny_state(mr_steps=3, ar_steps=2)
        corenet_iteration(st.ar, st.mr, samples[0], st.hyper, st.ar_opt, st.mr_opt)
        assert (st.mr_opt.t, st.ar_opt.t) == (3, 2)


class TestTrain:
    def test_log_length_and_lines(self, samples):
        st = tiny_state()
        log = train(samples, st, iterations=5)
        assert len(log) == 5 and st.iteration == 5
        fields = log.text().splitlines()[0].split("\t")
        assert len(fields) == 5 and int(fields[0]) == 0

    def test_sample_order_is_permutation(self):
        order = sample_order(10, 3, 2)
        assert sorted(order) == list(range(10))
        assert np.array_equal(order, sample_order(10, 3, 2))
        assert not np.array_equal(order, sample_order(10, 3, 1))

    def test_deterministic(self, samples):
        a, b = tiny_state(seed=5), tiny_state(seed=5)
        train(samples, a, iterations=6)
        train(samples, b, iterations=6)
        assert bytes_of(a) == bytes_of(b)

    def test_resume_is_bit_exact(self, samples):
        full = tiny_state(seed=2)
        train(samples, full, iterations=7)
        half = tiny_state(seed=2)
        train(samples, half, iterations=3)
        resumed = TrainState.from_checkpoint(decode_checkpoint(bytes_of(half)))
        train(samples, resumed, iterations=7)
        assert bytes_of(resumed) == bytes_of(full)

    def test_checkpoint_callbacks(self, samples):
        st = tiny_state(checkpoint_every=2)
        kinds = []
        train(samples, st, iterations=4, on_checkpoint=lambda s, k: kinds.append((s.iteration, k)))
        assert kinds[0] == (2, "periodic") and kinds[-1] == (4, "final")
        assert (2, "best") in kinds

    def test_empty_split(self):
        with pytest.raises(DatasetError):
            train([], tiny_state(), iterations=1)

    def test_overfit_four_samples(self, samples):
        st = TrainState.initial(ARConfig(**DESK_AR), MRConfig(**DESK_MR), Hyperparams(lr=1e-3))
        before = evaluate(st.ar, samples).mean
        log = train(samples, st, iterations=200)
        assert all(np.isfinite(r.l_mr) and np.isfinite(r.l_ar) for r in log.records)
        assert evaluate(st.ar, samples).mean > before


class TestCheckpointState:
    def test_round_trip(self):
        st = tiny_state()
        back = TrainState.from_checkpoint(decode_checkpoint(bytes_of(st)))
        assert bytes_of(back) == bytes_of(st)
        assert back.ar.config == st.ar.config and back.hyper == st.hyper

    def test_shape_mismatch_rejected(self):
        ck = tiny_state().to_checkpoint()
        ck.meta["ar_config"]["widths"] = [3, 2, 2, 2, 2]
        with pytest.raises(FormatError):
            TrainState.from_checkpoint(ck)

    def test_missing_entry_rejected(self):
        ck = tiny_state().to_checkpoint()
        del ck.tensors["mr.layer0.bias"]
        with pytest.raises(FormatError):
            TrainState.from_checkpoint(ck)

    def test_float64_state(self):
        st = TrainState.initial(TINY_AR, TINY_MR, Hyperparams(), T.HIGH)
        back = TrainState.from_checkpoint(decode_checkpoint(bytes_of(st)))
        assert back.ar.dtype == np.float64


class TestEvaluate:
    def test_single_pair_mean(self, samples):
        st = tiny_state()
        rep = evaluate(st.ar, samples[:1])
        assert rep.mean == rep.psnr[0][0]
        expected = psnr_value(ar_forward(st.ar, samples[0].corrupted).data, samples[0].truth)
        assert rep.mean == pytest.approx(expected)

    def test_identity_baseline(self, samples):
        rep = evaluate(lambda x: x, samples)
        direct = np.mean([psnr_value(s.corrupted, s.truth) for s in samples])
        assert rep.mean == pytest.approx(direct) == pytest.approx(identity_baseline(samples))

    def test_two_pass_report(self, samples):
        st = tiny_state()
        rep = evaluate(st.ar, samples, passes=2)
        assert len(rep.means) == 2
        assert rep.text().splitlines()[-1].count("\t") == 2

    def test_two_pass_composition(self, samples):
        st = tiny_state()
        first, second = two_pass_restore(st.ar, samples[0].corrupted)
        manual = ar_forward(st.ar, ar_forward(st.ar, samples[0].corrupted).data).data
        assert second.tobytes() == manual.tobytes()
        assert first.tobytes() == ar_forward(st.ar, samples[0].corrupted).data.tobytes()

    def test_empty(self):
        with pytest.raises(DatasetError):
            evaluate(lambda x: x, [])


def test_log_rejects_non_increasing():
    log = TrainLog()
    log.append(LogRecord(0, 1.0, 1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        log.append(LogRecord(0, 1.0, 1.0, 1.0, 1.0))
