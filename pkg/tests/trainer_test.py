"""Test alternating training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partialbnn.bayes_layer import (
    PriorSpec,
    VariationalParams,
    kl_closed_form,
    log_prior,
    log_prior_grad_w,
    log_q,
    log_q_grad_w,
    log_q_partials,
    sample_weights,
)
from partialbnn.data import Dataset, Split, batches, make_synthetic
from partialbnn.evaluate import evaluate
from partialbnn.exceptions import (
    EmptySplit,
    InvalidConfig,
    NonFiniteLoss,
    ShapeMismatch,
    StaleSample,
)
from partialbnn.gradcheck import mini_model
from partialbnn.model import ArchSpec, ForwardMode, PartialBayesNet, PlacementConfig
from partialbnn.nn_ops import softmax
from partialbnn.objective import cross_entropy, softmax_cross_entropy_grad
from partialbnn.report import RecordKind
from partialbnn.trainer import (
    GradPair,
    Trainer,
    TrainConfig,
    initial_model,
    sgd_step,
    train,
    train_step,
    uncertain_backward,
)

from .helpers import numeric_grad

BLOCK_NOISE = 0.05

SMALL_ARCH = ArchSpec(
    input_size=(16, 16, 1),
    group_channels=(4, 4, 8, 8, 8),
    blocks_per_group=1,
)


def snapshot(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Copy every tensor."""
    return {name: value.copy() for name, value in tensors.items()}


def same(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    """Bitwise equality of two tensor dictionaries."""
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def single(mu: float, rho: float) -> VariationalParams:
    """One float64 weight."""
    return VariationalParams(mu=np.array([mu]), rho=np.array([rho]))


class TestTrainConfig:
    """Test hyper-parameter validation."""

    @pytest.mark.parametrize(
        ("field", "value"),
        [
            ("learning_rate", 0.0),
            ("epochs", -3),
            ("batch_size", 1),
            ("mc_samples", 0),
            ("kl_weight", "half"),
            ("kl_weight", 0.0),
            ("seed", -1),
            ("seed", 2**64),
            ("eval_every", 0),
            ("momentum", 1.0),
            ("prior_sigma", 0.0),
        ],
    )
    def test_invalid(self, field: str, value: object) -> None:
        """Test the error names the field."""
        with pytest.raises(InvalidConfig) as info:
            TrainConfig(**{field: value})
        assert info.value.field == field

    def test_kl_weight(self) -> None:
        """Test auto and explicit KL weights."""
        assert TrainConfig().resolve_kl_weight(100) == pytest.approx(0.01)
        assert TrainConfig(kl_weight=0.5).resolve_kl_weight(100) == 0.5

    def test_to_dict(self) -> None:
        """Test plain form."""
        values = TrainConfig(epochs=3).to_dict()
        assert values["epochs"] == 3
        assert values["kl_weight"] == "auto"


class TestUncertainBackward:
    """Test the mu / rho gradient rule."""

    @pytest.mark.parametrize("seed", range(5))
    def test_entropy_cancellation(self, seed: int) -> None:
        """Test constant prior and likelihood give zero mu gradient."""
        p = single(0.0, 0.0)
        w = sample_weights(p, np.random.default_rng(seed))
        d_mu, d_rho = log_q_partials(p, w)
        pair = uncertain_backward(log_q_grad_w(p, w), d_mu, d_rho, p)
        assert abs(pair.delta_mu[0]) <= 1e-12
        assert pair.delta_rho[0] == pytest.approx(-0.5 / math.log(2))
        assert pair.delta_rho[0] == pytest.approx(-0.721348, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(
        mu=st.floats(-1.0, 1.0),
        rho=st.floats(-3.0, 1.0),
        epsilon=st.floats(-2.0, 2.0),
        curvature=st.floats(0.1, 3.0),
        target=st.floats(-1.0, 1.0),
        kl_weight=st.floats(0.01, 1.0),
    )
    def test_quadratic_likelihood(
        self,
        mu: float,
        rho: float,
        epsilon: float,
        curvature: float,
        target: float,
        kl_weight: float,
    ) -> None:
        """Test the rule against central differences at frozen epsilon."""
        p = single(mu, rho)
        prior = PriorSpec()
        eps = np.array([epsilon])
        w = sample_weights(p, None, epsilon=eps)

        def loss() -> float:
            weight = p.compose(eps)
            likelihood = 0.5 * curvature * float((weight[0] - target) ** 2)
            return likelihood + kl_weight * (
                log_q(p, weight) - log_prior(prior, weight)
            )

        d_w = curvature * (w - target) + kl_weight * (
            log_q_grad_w(p, w) - log_prior_grad_w(prior, w)
        )
        d_mu, d_rho = log_q_partials(p, w)
        pair = uncertain_backward(d_w, kl_weight * d_mu, kl_weight * d_rho, p)
        np.testing.assert_allclose(
            pair.delta_mu,
            numeric_grad(loss, p.mu, h=1e-6),
            rtol=1e-3,
            atol=1e-6,
        )
        np.testing.assert_allclose(
            pair.delta_rho,
            numeric_grad(loss, p.rho, h=1e-6),
            rtol=1e-3,
            atol=1e-6,
        )

    def test_stale(self) -> None:
        """Test moved theta is rejected."""
        p = single(0.0, 0.0)
        zeros = np.zeros(1)
        with pytest.raises(StaleSample):
            uncertain_backward(zeros, zeros, zeros, p)
        sample_weights(p, np.random.default_rng(0))
        p.mu += 1.0
        with pytest.raises(StaleSample):
            uncertain_backward(zeros, zeros, zeros, p)

    def test_shape(self) -> None:
        """Test gradient shapes must match."""
        p = single(0.0, 0.0)
        sample_weights(p, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            uncertain_backward(np.zeros(2), np.zeros(1), np.zeros(1), p)

    def test_zeros_like(self) -> None:
        """Test zero accumulator."""
        pair = GradPair.zeros_like(single(1.0, 1.0))
        assert not pair.delta_mu.any()
        assert pair.delta_rho.shape == (1,)


class TestSgdStep:
    """Test the update rule."""

    def test_zero_grad(self) -> None:
        """Test zero gradient."""
        param = np.array([1.0, 2.0])
        np.testing.assert_array_equal(sgd_step(param, np.zeros(2), 0.1), param)

    def test_value(self) -> None:
        """Test arithmetic."""
        assert sgd_step(np.array([1.0]), np.array([0.5]), 0.1)[0] == pytest.approx(
            0.95,
        )

    def test_linearity(self) -> None:
        """Test two steps with g equal one step with 2g."""
        param, grad = np.array([0.3, -1.2]), np.array([0.25, 0.5])
        twice = sgd_step(sgd_step(param, grad, 0.1), grad, 0.1)
        np.testing.assert_allclose(twice, sgd_step(param, 2 * grad, 0.1))

    def test_dtype(self) -> None:
        """Test float32 stays float32."""
        param = np.ones(2, dtype=np.float32)
        assert sgd_step(param, np.ones(2, dtype=np.float32), 0.1).dtype == np.float32

    def test_invalid(self) -> None:
        """Test shape and learning rate checks."""
        with pytest.raises(ShapeMismatch):
            sgd_step(np.ones(2), np.ones(3), 0.1)
        with pytest.raises(InvalidConfig):
            sgd_step(np.ones(2), np.ones(2), 0.0)


class TestTrainer:
    """Test the alternating phases on a mini network."""

    @pytest.fixture(autouse=True)
    def _setup_trainer(self) -> None:
        """Mini model and a fixed batch."""
        rng = np.random.default_rng(11)
        self.model = mini_model(PlacementConfig.of(4, 5), rho_init=-3.0)
        self.images = rng.normal(size=(6, 1, 8, 8))
        self.labels = rng.integers(0, 3, size=6)
        self.trainer = Trainer(self.model, TrainConfig(learning_rate=0.05, seed=3))

    def _certain(self) -> dict[str, np.ndarray]:
        return snapshot({p.name: p.value for p in self.model.partition().certain})

    def _uncertain(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        for name, params in self.model.partition().uncertain:
            tensors[f"{name}.mu"] = params.mu
            tensors[f"{name}.rho"] = params.rho
        return snapshot(tensors)

    def _running(self) -> dict[str, np.ndarray]:
        return snapshot(
            {
                name: value
                for name, value in self.model.named_tensors().items()
                if "running" in name
            },
        )

    def test_uncertain_phase_isolation(self) -> None:
        """Test phase (a) moves only mu and rho."""
        certain, uncertain, running = (
            self._certain(),
            self._uncertain(),
            self._running(),
        )
        kl, nll = self.trainer.uncertain_phase(self.images, self.labels)
        assert kl > 0
        assert nll > 0
        assert same(certain, self._certain())
        assert same(running, self._running())
        assert not same(uncertain, self._uncertain())

    def test_certain_phase_isolation(self) -> None:
        """Test phase (c) moves only w1."""
        certain, uncertain = self._certain(), self._uncertain()
        self.trainer.certain_phase(self.images, self.labels)
        assert same(uncertain, self._uncertain())
        assert not same(certain, self._certain())
        assert 0.0 <= self.trainer.last_accuracy <= 1.0

    def test_train_step(self) -> None:
        """Test the loss breakdown."""
        loss = self.trainer.train_step(self.images, self.labels)
        assert loss.total == loss.l_cen + loss.l_unc
        assert loss.l_unc == pytest.approx(
            self.trainer.kl_weight * loss.kl_term + loss.nll_term,
        )
        assert self.trainer.step_index == 1

    def test_mc_samples(self) -> None:
        """Test several draws per step."""
        trainer = Trainer(self.model, TrainConfig(mc_samples=3, seed=3))
        loss = trainer.train_step(self.images, self.labels)
        assert np.isfinite(loss.total)

    def test_momentum(self) -> None:
        """Test momentum keeps a velocity per tensor."""
        trainer = Trainer(self.model, TrainConfig(momentum=0.9, seed=3))
        trainer.train_step(self.images, self.labels)
        assert "fc.weight" in trainer._velocity
        assert "g5.b1.conv1.mu" in trainer._velocity

    def test_empty_batch(self) -> None:
        """Test an empty minibatch."""
        with pytest.raises(EmptySplit):
            self.trainer.train_step(self.images[:0], self.labels[:0])

    def test_non_finite(self) -> None:
        """Test NaN input aborts with a diagnostic."""
        images = self.images.copy()
        images[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLoss) as info:
            self.trainer.train_step(images, self.labels)
        assert info.value.step == 0

    def test_module_train_step(self) -> None:
        """Test the functional wrapper."""
        loss = train_step(
            self.model,
            (self.images, self.labels),
            TrainConfig(seed=3),
            np.random.default_rng(0),
        )
        assert loss.l_unc > 0

    def test_kl_estimator_consistency(self) -> None:
        """Test the averaged KL estimate approaches the closed form."""
        prior = self.trainer.prior
        exact = sum(
            kl_closed_form(params, prior)
            for _, params in self.model.partition().uncertain
        )
        draws = [
            self.trainer.uncertain_gradients(self.images, self.labels)[0]
            for _ in range(256)
        ]
        assert float(np.mean(draws)) == pytest.approx(exact, rel=0.01)

    def test_kl_term_converges_with_mc_samples(self) -> None:
        """Test the phase KL term approaches the closed form as draws grow."""
        prior = self.trainer.prior
        exact = sum(
            kl_closed_form(params, prior)
            for _, params in self.model.partition().uncertain
        )
        errors = []
        for n in (1, 16, 256):
            deviations = []
            for rep in range(20):
                trainer = Trainer(
                    self.model.copy(),
                    TrainConfig(mc_samples=n, seed=3),
                    rng=np.random.default_rng(rep),
                )
                kl_term, _ = trainer.uncertain_phase(self.images, self.labels)
                deviations.append(abs(kl_term - exact))
            errors.append(float(np.mean(deviations)))
        assert errors[2] < errors[1] < errors[0]
        assert errors[2] <= 0.01 * exact


class TestDeterministicLimits:
    """Test degenerate placements."""

    def test_no_placement_matches_plain_sgd(self, rng: np.random.Generator) -> None:
        """Test empty placement reproduces a plain cross-entropy SGD trainer."""
        model = mini_model(PlacementConfig()).astype(np.float32)
        reference = model.copy()
        trainer = Trainer(model, TrainConfig(learning_rate=0.1, seed=5))
        for _ in range(4):
            images = rng.normal(size=(5, 1, 8, 8)).astype(np.float32)
            labels = rng.integers(0, 3, size=5)
            loss = trainer.train_step(images, labels)
            assert loss.l_unc == 0
            assert loss.kl_term == 0

            logits = reference.forward(images, mode=ForwardMode.MEAN, training=True)
            probs = softmax(logits)
            assert cross_entropy(probs, labels) == loss.l_cen
            reference.backward(softmax_cross_entropy_grad(probs, labels))
            for param in reference.partition().certain:
                assert param.grad is not None
                param.value[...] = param.value - 0.1 * param.grad
        assert same(model.named_tensors(), reference.named_tensors())

    def test_vanishing_sigma_phases_agree(self, rng: np.random.Generator) -> None:
        """Test phase (a) and phase (c) logits agree when sigma is tiny."""
        model = mini_model(PlacementConfig.of(1, 2, 3, 4, 5), rho_init=-30.0)
        images = rng.normal(size=(4, 1, 8, 8))
        sampled = model.forward(
            images,
            mode=ForwardMode.SAMPLED,
            training=True,
            rng=rng,
            update_running=False,
        )
        mean = model.forward(
            images,
            mode=ForwardMode.MEAN,
            training=True,
            update_running=False,
        )
        assert np.max(np.abs(sampled - mean)) <= 1e-5


class TestTrainLoop:
    """Test the epoch loop on a small synthetic dataset."""

    @pytest.fixture(autouse=True)
    def _setup_loop(self, tiny_synthetic: Dataset) -> None:
        """Small architecture and config."""
        self.dataset = tiny_synthetic
        self.config = TrainConfig(epochs=2, batch_size=16, seed=7)
        self.placement = PlacementConfig.of(5)

    def _model(self, config: TrainConfig | None = None) -> PartialBayesNet:
        return initial_model(SMALL_ARCH, self.placement, config or self.config)

    def test_zero_epochs(self) -> None:
        """Test no epochs leaves the model alone."""
        model = self._model()
        before = snapshot(model.named_tensors())
        assert train(model, self.dataset, TrainConfig(epochs=0)) == []
        assert same(before, model.named_tensors())

    def test_records(self) -> None:
        """Test one epoch and one eval record per epoch."""
        model = self._model()
        trainer = Trainer(model, self.config)
        records = trainer.train(self.dataset)
        kinds = [r.kind for r in records]
        assert kinds == [RecordKind.EPOCH, RecordKind.EVAL] * 2
        num_batches = self.dataset.count(Split.TRAINING) // 16
        assert trainer.kl_weight == pytest.approx(1 / num_batches)
        assert records[-1].step == 2 * num_batches
        epoch = records[0]
        assert epoch.total == pytest.approx(epoch.l_cen + epoch.l_unc)
        assert epoch.sigma_min is not None
        assert epoch.sigma_min <= epoch.sigma_mean <= epoch.sigma_max
        final = evaluate(model, self.dataset, Split.PUBLIC_TEST)
        assert records[-1].verification_accuracy == final.accuracy

    def test_eval_every(self) -> None:
        """Test evaluation cadence."""
        config = TrainConfig(epochs=3, batch_size=16, seed=7, eval_every=2)
        records = train(self._model(config), self.dataset, config)
        evals = [r.epoch for r in records if r.kind is RecordKind.EVAL]
        assert evals == [2]

    def test_determinism(self) -> None:
        """Test the same seed gives the same trajectory."""
        first = train(self._model(), self.dataset, self.config)
        second = train(self._model(), self.dataset, self.config)
        assert first == second

    def test_prefetch_same_trajectory(self) -> None:
        """Test background batching does not change the result."""
        config = TrainConfig(epochs=1, batch_size=16, seed=7, prefetch=True)
        plain = TrainConfig(epochs=1, batch_size=16, seed=7)
        assert train(self._model(config), self.dataset, config) == train(
            self._model(plain),
            self.dataset,
            plain,
        )

    def test_batch_too_large(self) -> None:
        """Test a batch larger than the training split."""
        config = TrainConfig(epochs=1, batch_size=10_000)
        with pytest.raises(InvalidConfig):
            train(self._model(config), self.dataset, config)

    def test_initial_model_seeded(self) -> None:
        """Test initial models depend only on the seed."""
        a = self._model().named_tensors()
        b = self._model().named_tensors()
        c = self._model(TrainConfig(seed=8)).named_tensors()
        assert same(a, b)
        assert not same(a, c)


@pytest.mark.slow
class TestDeskScale:
    """Desk-scale training runs."""

    def test_loss_decreases(self) -> None:
        """Test 200 steps drive the 10-step average of L_cen steadily down."""
        dataset = make_synthetic(140, 0.05, seed=1)
        model = initial_model(ArchSpec.desk(), PlacementConfig.of(5), TrainConfig())
        trainer = Trainer(model, TrainConfig())
        losses: list[float] = []
        epoch = 0
        while len(losses) < 200:
            epoch += 1
            for images, labels in batches(
                dataset,
                Split.TRAINING,
                32,
                shuffle_seed=(1, epoch),
            ):
                losses.append(trainer.train_step(images, labels).l_cen)
        blocks = np.reshape(losses[:200], (20, 10)).mean(axis=1)
        # minibatch noise allows small upticks between neighbouring blocks
        assert (np.diff(blocks) <= BLOCK_NOISE).all()
        assert (np.diff(blocks.reshape(4, 5).mean(axis=1)) < 0).all()
        assert blocks[-1] < 0.5 * blocks[0]

    def test_synthetic_accuracy(self) -> None:
        """Test the desk network learns the synthetic task."""
        dataset = make_synthetic(140, 0.05, seed=1)
        config = TrainConfig(epochs=30)
        model = initial_model(ArchSpec.desk(), PlacementConfig.of(5), config)
        records = train(model, dataset, config)
        final = [r for r in records if r.kind is RecordKind.EPOCH][-1]
        assert final.train_accuracy is not None
        assert final.train_accuracy >= 0.95
        assert evaluate(model, dataset, Split.PUBLIC_TEST).accuracy >= 0.9
