import itertools

import numpy as np
import pytest

from stlmimic import stl
from stlmimic.dataio import Dataset, LabeledTrajectory
from stlmimic.envs import DrivingEnv, UnicycleEnv
from stlmimic.inference import (
    InferenceParams,
    NetworkShape,
    SignalNorm,
    batch_smooth_robustness,
    init_inference,
)
from stlmimic.policy import PolicyParams, PolicyShape, init_policy
from stlmimic.train import (
    Adam,
    EmptyDataset,
    GanConfig,
    InferenceTrainConfig,
    NoNegativeData,
    PolicyTrainConfig,
    gan_loop,
    inference_loss_np,
    mcr,
    policy_objective,
    train_inference,
    train_policy,
)

import helpers


def const_traj(value, label, id_, T=3, names=("x0",)):
    arr = np.full((T + 1, 1), float(value))
    return LabeledTrajectory(id_, label, arr, np.zeros((T + 1, 0)), names, (), {})


def toy_dataset(rng=None, n=8, T=3):
    """Positives sit at x0 >= 1, negatives at x0 <= -1."""
    rng = rng or np.random.default_rng(0)
    trajs = []
    for i in range(n):
        pos = i % 2 == 0
        base = rng.uniform(1.0, 2.0) if pos else rng.uniform(-2.0, -1.0)
        trajs.append(const_traj(base, 1 if pos else -1, f"t{i}", T))
    return Dataset(trajs)


class TestMcr:
    def test_formula_examples(self):
        f = stl.parse("x0 >= 0", ("x0",))
        ds = Dataset(
            [
                const_traj(1.0, 1, "a"),
                const_traj(2.0, 1, "b"),
                const_traj(-1.0, -1, "c"),
                const_traj(-2.0, -1, "d"),
            ]
        )
        assert mcr(f, ds) == 0.0
        ds_one_wrong = Dataset(ds.trajectories[:3] + [const_traj(0.5, -1, "e")])
        assert mcr(f, ds_one_wrong) == 0.25

    def test_true_satisfies_everything(self):
        ds = Dataset(
            [const_traj(v, l, f"x{i}") for i, (v, l) in enumerate([(1, 1), (2, 1), (3, 1), (-1, -1)])]
        )
        assert mcr(stl.TrueFormula(), ds) == 0.25

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            mcr(stl.TrueFormula(), Dataset([]))

    def test_matches_exhaustive_enumeration(self):
        # Tiny datasets, every (satisfies, label) combination enumerated by hand.
        rng = np.random.default_rng(3)
        f = stl.parse("F[0,2](x0 >= 0.5)", ("x0",))
        for _ in range(20):
            n = int(rng.integers(1, 9))
            trajs = []
            for i in range(n):
                vals = rng.uniform(-2, 2, size=(4, 1))
                label = 1 if rng.random() < 0.5 else -1
                trajs.append(
                    LabeledTrajectory(f"r{i}", label, vals, np.zeros((4, 0)), ("x0",), (), {})
                )
            ds = Dataset(trajs)
            expected = (
                sum(
                    1
                    for t in trajs
                    if (t.agent[0:3].max() >= 0.5) != (t.label == 1)
                )
                / n
            )
            assert mcr(f, ds) == pytest.approx(expected, abs=1e-12)

    def test_smooth_agrees_with_hand_gates(self):
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=3, dim=1, tau=0.01)
        norm = SignalNorm.identity(1)
        params = helpers.encode_dnf([[("G", 0, 3, (1.0,), 0.0)]], shape, norm)
        ds = toy_dataset()
        assert mcr(params, ds, shape=shape, norm=norm, tau=0.01) == 0.0


class TestInferenceLoss:
    def _loss_for(self, value, label, margin, beta1=0.0, beta2=0.1):
        # Single degenerate network whose output is ~value on this signal.
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=3, dim=1, tau=0.01)
        norm = SignalNorm.identity(1)
        params = helpers.encode_dnf([[("G", 0, 3, (1.0,), 0.0)]], shape, norm)
        cfg = InferenceTrainConfig(beta1=beta1, beta2=beta2)
        X = np.full((1, 4, 1), float(value))
        return inference_loss_np(X, np.array([float(label)]), params, shape, margin, cfg)

    def test_positive_sample_inside_margin(self):
        # value 0.5, label +1, margin 0.1 -> hinge 0; -beta2 * margin = -0.01
        out = self._loss_for(0.5, +1, margin=0.1)
        assert out == pytest.approx(-0.01, abs=2e-3)

    def test_negative_sample_violating(self):
        # value 0.5, label -1 -> hinge = 0.1 + 0.5 = 0.6 (minus margin bonus)
        out = self._loss_for(0.5, -1, margin=0.1, beta2=0.0)
        assert out == pytest.approx(0.6, abs=2e-3)

    def test_two_samples_average(self):
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=3, dim=1, tau=0.01)
        norm = SignalNorm.identity(1)
        params = helpers.encode_dnf([[("G", 0, 3, (1.0,), 0.0)]], shape, norm)
        cfg = InferenceTrainConfig(beta1=0.0, beta2=0.0)
        X = np.stack([np.full((4, 1), 0.5), np.full((4, 1), 0.5)])
        both = inference_loss_np(X, np.array([1.0, -1.0]), params, shape, 0.1, cfg)
        only_neg = inference_loss_np(X[1:], np.array([-1.0]), params, shape, 0.1, cfg)
        assert both == pytest.approx(only_neg / 2, abs=2e-3)


class TestTrainInference:
    CFG = InferenceTrainConfig(
        max_proposals=240, epoch_len=40, refine_steps=10, refine_lr=0.1, refine_batch=8
    )

    def test_separable_toy_reaches_zero_mcr(self):
        ds = toy_dataset()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=3, dim=1, tau=0.1)
        norm = SignalNorm.from_arrays([t.full() for t in ds])
        params, margin, info = train_inference(
            ds, shape, self.CFG, np.random.default_rng(7), norm=norm
        )
        assert mcr(params, ds, shape=shape, norm=norm, tau=0.01) == 0.0
        assert self.CFG.margin_lo <= margin <= self.CFG.margin_hi

    def test_same_seed_identical(self):
        ds = toy_dataset()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=3, dim=1, tau=0.1)
        norm = SignalNorm.from_arrays([t.full() for t in ds])
        outs = []
        for _ in range(2):
            p, m, info = train_inference(ds, shape, self.CFG, np.random.default_rng(11), norm=norm)
            outs.append(np.concatenate([p.to_pv().flatten(), [m]]))
        assert np.array_equal(outs[0], outs[1])

    def test_loss_not_worse_than_start(self):
        ds = toy_dataset()
        shape = NetworkShape(n_pred=2, n_conj=1, horizon=3, dim=1, tau=0.1)
        norm = SignalNorm.from_arrays([t.full() for t in ds])
        rng = np.random.default_rng(13)
        start = np.concatenate([init_inference(shape, rng).to_pv().flatten(), [0.1]])
        cfg = self.CFG
        p, m, info = train_inference(
            ds, shape, cfg, np.random.default_rng(13), norm=norm, warm_start=start
        )
        X = np.stack([norm.apply(t.full()) for t in ds])
        start_loss = inference_loss_np(
            X, ds.labels().astype(float), InferenceParams.from_pv(
                init_inference(shape, np.random.default_rng(13)).to_pv().with_flat(start[:-1])
            ), shape, 0.1, cfg
        )
        assert info["loss"] <= start_loss + 1e-12

    def test_single_label_rejected(self):
        ds = Dataset([const_traj(1.0, 1, "a"), const_traj(2.0, 1, "b")])
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=3, dim=1, tau=0.1)
        norm = SignalNorm.from_arrays([t.full() for t in ds])
        with pytest.raises(NoNegativeData):
            train_inference(ds, shape, self.CFG, np.random.default_rng(0), norm=norm)


class TestPolicyObjective:
    def _setup(self):
        env = DrivingEnv()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=57, dim=4, tau=0.1)
        norm = SignalNorm(
            mid=(100.0, 5.0, 100.0, 5.0), halfrange=(100.0, 6.0, 100.0, 6.0)
        )
        # reward ego velocity above 2 over the back half of the horizon
        params = helpers.encode_dnf(
            [[("G", 30, 57, (0.0, 1.0, 0.0, 0.0), 2.0)]], shape, norm
        )
        return env, shape, norm, params

    def test_single_sample_equals_rollout_value(self):
        env, shape, norm, inf = self._setup()
        rng = np.random.default_rng(17)
        policy = init_policy(PolicyShape(4, 4, 1), seed=1)
        env_traj = env.gen_env_profile(rng, False, 9.0)
        samples = [(np.array([1.0, 0.0]), env_traj)]
        v1 = policy_objective(policy, inf, env, samples, shape, norm)
        v2 = policy_objective(policy, inf, env, samples * 2, shape, norm)
        assert v2 == pytest.approx(v1, abs=1e-12)  # duplicating leaves the mean alone

    def test_gradient_matches_fd(self):
        from stlmimic.policy import PolicyParams as PP
        from stlmimic.tape import finite_diff_check
        from stlmimic.train import policy_objective_graph

        env, shape, norm, inf = self._setup()
        rng = np.random.default_rng(19)
        policy = init_policy(PolicyShape(4, 3, 1), seed=2)
        env_traj = env.gen_env_profile(rng, True, 8.0)
        samples = [(np.array([0.5, 0.0]), env_traj), (np.array([2.0, 0.0]), env_traj)]
        pv = policy.to_pv()

        def f(leaves):
            return policy_objective_graph(
                PP.from_leaves(leaves), inf, env, samples, shape, norm
            )

        assert finite_diff_check(f, pv, h=1e-5) < 1e-3


class TestTrainPolicy:
    def test_objective_improves_on_toy_task(self):
        env = DrivingEnv()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=57, dim=4, tau=0.1)
        norm = SignalNorm(mid=(100.0, 5.0, 100.0, 5.0), halfrange=(100.0, 6.0, 100.0, 6.0))
        inf = helpers.encode_dnf([[("G", 30, 57, (0.0, 1.0, 0.0, 0.0), 2.0)]], shape, norm)
        rng = np.random.default_rng(23)
        pool = [env.gen_env_profile(rng, False, 9.0) for _ in range(4)]
        policy0 = init_policy(PolicyShape(4, 6, 1), seed=3)
        cfg = PolicyTrainConfig(batch_m=4, lr=0.05, steps=40, hidden=6)
        trained = train_policy(
            policy0, inf, env, pool, cfg, np.random.default_rng(29), shape=shape, norm=norm
        )
        val_rng = np.random.default_rng(31)
        samples = [(env.sample_initial(val_rng), pool[i % len(pool)]) for i in range(6)]
        before = policy_objective(policy0, inf, env, samples, shape, norm)
        after = policy_objective(trained, inf, env, samples, shape, norm)
        assert after > before

    def test_zero_steps_identity(self):
        env = DrivingEnv()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=57, dim=4, tau=0.1)
        norm = SignalNorm.identity(4)
        inf = helpers.encode_dnf([[("G", 0, 57, (0.0, 1.0, 0.0, 0.0), 0.0)]], shape, norm)
        policy0 = init_policy(PolicyShape(4, 4, 1), seed=5)
        cfg = PolicyTrainConfig(batch_m=2, lr=0.05, steps=0, hidden=4)
        out = train_policy(
            policy0, inf, env, [], cfg, np.random.default_rng(0), shape=shape, norm=norm
        )
        assert np.array_equal(out.to_pv().flatten(), policy0.to_pv().flatten())

    def test_same_seed_identical_and_inference_frozen(self):
        env = DrivingEnv()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=57, dim=4, tau=0.1)
        norm = SignalNorm(mid=(100.0, 5.0, 100.0, 5.0), halfrange=(100.0, 6.0, 100.0, 6.0))
        inf = helpers.encode_dnf([[("G", 30, 57, (0.0, 1.0, 0.0, 0.0), 2.0)]], shape, norm)
        frozen = inf.to_pv().flatten().copy()
        rng = np.random.default_rng(37)
        pool = [env.gen_env_profile(rng, False, 9.0)]
        policy0 = init_policy(PolicyShape(4, 4, 1), seed=7)
        cfg = PolicyTrainConfig(batch_m=2, lr=0.05, steps=10, hidden=4)
        outs = []
        for _ in range(2):
            out = train_policy(
                policy0, inf, env, pool, cfg, np.random.default_rng(41), shape=shape, norm=norm
            )
            outs.append(out.to_pv().flatten())
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(inf.to_pv().flatten(), frozen)


TINY_INF = InferenceTrainConfig(
    max_proposals=150, epoch_len=50, refine_steps=8, refine_lr=0.1, refine_batch=10
)
TINY_POL = PolicyTrainConfig(batch_m=4, lr=0.05, steps=25, hidden=6)
TINY_GAN = GanConfig(n_generate=6, max_iterations=2, stop_mcr=1.0)


class TestGanLoop:
    def test_bootstrap_and_growth(self):
        env = UnicycleEnv()
        ds0 = env.gen_expert(10, np.random.default_rng(43))
        shape = NetworkShape(n_pred=2, n_conj=1, horizon=20, dim=4, tau=0.1)
        result = gan_loop(
            ds0, env, shape, TINY_INF, TINY_POL, TINY_GAN, np.random.default_rng(47)
        )
        # bootstrap adds n_generate negatives before the first round
        assert result.metrics[0]["dataset_size"] == 10 + 6
        # each non-final round appends another n_generate
        assert result.metrics[1]["dataset_size"] == 10 + 2 * 6
        assert len(result.full_dataset) == 10 + 2 * 6
        assert result.full_dataset.count(-1) == 12
        assert len(result.metrics) == 2
        assert stl.is_formula(result.formula)

    def test_metrics_reproducible(self):
        env = UnicycleEnv()
        ds0 = env.gen_expert(8, np.random.default_rng(53))
        shape = NetworkShape(n_pred=2, n_conj=1, horizon=20, dim=4, tau=0.1)
        runs = []
        for _ in range(2):
            r = gan_loop(
                ds0, env, shape, TINY_INF, TINY_POL, TINY_GAN, np.random.default_rng(59)
            )
            runs.append(r)
        a, b = runs
        for ra, rb in zip(a.metrics, b.metrics):
            for key in ("mcr_smooth", "mcr_exact", "mean_policy_robustness", "loss"):
                assert ra[key] == rb[key]
        assert stl.print_formula(a.formula) == stl.print_formula(b.formula)
        assert np.array_equal(a.policy.to_pv().flatten(), b.policy.to_pv().flatten())

    def test_resume_matches_uninterrupted(self):
        env = UnicycleEnv()
        ds0 = env.gen_expert(8, np.random.default_rng(61))
        shape = NetworkShape(n_pred=2, n_conj=1, horizon=20, dim=4, tau=0.1)
        states = []
        full = gan_loop(
            ds0,
            env,
            shape,
            TINY_INF,
            TINY_POL,
            TINY_GAN,
            np.random.default_rng(67),
            checkpoint_cb=states.append,
        )
        # resume from the iteration-2 boundary
        snap = next(s for s in states if s["iteration"] == 2)
        resumed = gan_loop(
            ds0,
            env,
            shape,
            TINY_INF,
            TINY_POL,
            TINY_GAN,
            np.random.default_rng(1234),  # state is overwritten by the snapshot
            resume=snap,
        )
        assert np.array_equal(
            resumed.inference.to_pv().flatten(), full.inference.to_pv().flatten()
        )
        assert np.array_equal(resumed.policy.to_pv().flatten(), full.policy.to_pv().flatten())
        assert stl.print_formula(resumed.formula) == stl.print_formula(full.formula)
        for ra, rb in zip(resumed.metrics, full.metrics):
            assert ra["mcr_smooth"] == rb["mcr_smooth"]
            assert ra["loss"] == rb["loss"]

    def test_empty_dataset_rejected(self):
        env = UnicycleEnv()
        shape = NetworkShape(n_pred=1, n_conj=1, horizon=20, dim=4, tau=0.1)
        with pytest.raises(EmptyDataset):
            gan_loop(
                Dataset([]), env, shape, TINY_INF, TINY_POL, TINY_GAN, np.random.default_rng(0)
            )


class TestAdam:
    def test_descends_quadratic(self):
        opt = Adam(2, lr=0.1)
        x = np.array([3.0, -2.0])
        for _ in range(300):
            x = opt.step(x, 2 * x)
        assert np.all(np.abs(x) < 1e-2)

    def test_ascends_when_maximizing(self):
        opt = Adam(1, lr=0.1)
        x = np.array([0.0])
        for _ in range(50):
            x = opt.step(x, np.array([1.0]), maximize=True)
        assert x[0] > 1.0
