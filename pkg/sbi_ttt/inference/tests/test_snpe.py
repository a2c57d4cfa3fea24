import numpy as np
import pytest

from sbi_ttt.errors import ConfigError, RoundError, ShapeError, SimulationError, TrainingError
from sbi_ttt.inference.snpe import (
    Dataset,
    FullParameters,
    LossContext,
    Proposal,
    ProposalKind,
    RoundSchedule,
    TrainConfig,
    atomic_nll,
    atomic_terms,
    build_loss_context,
    choose_atoms,
    run_snpe,
    snpe_loss,
    snpe_loss_terms,
    train_round,
)
from sbi_ttt.inference.tests.toy import box, gaussian_simulator, observation, small_flow
from sbi_ttt.models.autodiff import Tape
from sbi_ttt.models.flow import embed_observation, flow_log_prob, flow_sample
from sbi_ttt.simulation.batch import derive_seeds, simulate_batch
from sbi_ttt.simulation.priors import BoxUniformPrior, prior_sample
from sbi_ttt.simulation.types import ModelTag


def _dataset(n, dim=1, seed=0, prior=None):
    prior = prior or box(dim)
    thetas = prior.sample(n, seed)
    seeds = derive_seeds(seed + 1, n)
    dataset = Dataset.empty(ModelTag.BH, dim)
    dataset.extend(thetas, simulate_batch(gaussian_simulator, thetas, seeds), seeds, 0)
    return dataset


def _random_flow(dim, seed, scale=0.1):
    flow = small_flow(theta_dim=dim, hidden=6, embed=3)
    flow.store.unflatten(np.random.default_rng(seed).normal(0.0, scale, flow.store.size))
    return flow


def _atomic_context(dataset, seed, atoms=4):
    weights = np.random.default_rng(seed).normal(size=len(dataset))
    return LossContext(atomic=True, atoms=atoms, log_weights=weights)


def test_round_zero_loss_is_the_conditional_nll():
    dataset = _dataset(40, dim=2)
    flow = _random_flow(2, seed=1)
    batch = np.arange(40)
    terms = snpe_loss_terms(
        flow, Tape(), dataset, batch, LossContext.plain(), np.random.default_rng(0)
    )
    emb = flow.embed_var(Tape(), dataset.features()).value
    expected = -flow_log_prob(flow, dataset.thetas, emb)
    np.testing.assert_allclose(terms.value, expected, rtol=0, atol=1e-12)


def test_atomic_loss_on_hand_set_logits():
    tape = Tape()
    logits = tape.constant(np.log([[2.0, 1.0], [1.0, 1.0]]))
    expected = -np.log(2.0 / 3.0) - np.log(0.5)
    assert atomic_nll(logits).value == pytest.approx(expected, abs=1e-12)


def test_atomic_terms_ignore_the_order_of_other_atoms():
    values = np.random.default_rng(0).normal(size=(5, 4))
    shuffled = values.copy()
    shuffled[:, 1:] = values[:, [3, 1, 2]]
    a = atomic_terms(Tape().constant(values)).value
    b = atomic_terms(Tape().constant(shuffled)).value
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_choose_atoms_starts_with_own_index_and_clamps_to_batch():
    positions = choose_atoms(3, 10, np.random.default_rng(0))
    assert positions.shape == (3, 3)
    assert positions[:, 0].tolist() == [0, 1, 2]
    for row in positions:
        assert sorted(row.tolist()) == [0, 1, 2]

    positions = choose_atoms(20, 5, np.random.default_rng(1))
    assert positions.shape == (20, 5)
    assert all(len(set(row.tolist())) == 5 for row in positions)


def test_atomic_loss_needs_two_atoms_and_a_supported_atom():
    dataset = _dataset(6)
    flow = _random_flow(1, seed=0)
    one = LossContext(atomic=True, atoms=1, log_weights=np.zeros(6))
    with pytest.raises(TrainingError):
        snpe_loss(flow, Tape(), dataset, np.arange(6), one, np.random.default_rng(0))
    single, context = np.array([2]), _atomic_context(dataset, 0)
    with pytest.raises(TrainingError):
        snpe_loss(flow, Tape(), dataset, single, context, np.random.default_rng(0))

    weights = np.zeros(6)
    weights[:3] = -np.inf
    unsupported = LossContext(atomic=True, atoms=3, log_weights=weights)
    with pytest.raises(TrainingError):
        snpe_loss(flow, Tape(), dataset, np.arange(3), unsupported, np.random.default_rng(0))


def test_atomic_loss_gradient_matches_finite_differences():
    dataset = _dataset(12, dim=2, seed=3)
    flow = _random_flow(2, seed=5, scale=0.2)
    context = _atomic_context(dataset, seed=7)
    batch = np.arange(12)

    def loss_at(values):
        flow.store.unflatten(values)
        return float(
            snpe_loss(flow, Tape(), dataset, batch, context, np.random.default_rng(0)).value
        )

    phi = flow.store.flatten()
    tape = Tape()
    loss = snpe_loss(flow, tape, dataset, batch, context, np.random.default_rng(0))
    grad = tape.backward(loss, flow.store)

    eps = 1e-6
    fd = np.empty_like(phi)
    for i in range(phi.shape[0]):
        step = np.zeros_like(phi)
        step[i] = eps
        fd[i] = (loss_at(phi + step) - loss_at(phi - step)) / (2 * eps)
    flow.store.unflatten(phi)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6)


def test_loss_context_weights():
    prior = box(1)
    dataset = _dataset(5, prior=prior)
    dataset.extend(np.array([[4.0]]), [gaussian_simulator([4.0], 1)], np.array([1]), 0)
    flow = small_flow()
    flow.fit_standardizer(dataset.features())
    proposal = Proposal.at_observation(flow, observation([0.3]), prior)
    config = TrainConfig()

    assert not build_loss_context(dataset, Proposal.from_prior(prior), prior, config).atomic

    by_proposal = build_loss_context(dataset, proposal, prior, config)
    expected = proposal.log_prob(dataset.thetas[:5]) - prior.log_prob(dataset.thetas[:5])
    np.testing.assert_allclose(by_proposal.log_weights[:5], expected)
    assert by_proposal.log_weights[5] == -np.inf

    by_prior = build_loss_context(
        dataset, proposal, prior, TrainConfig(atom_weighting="prior")
    )
    np.testing.assert_allclose(by_prior.log_weights[:5], np.log(6.0))
    assert by_prior.log_weights[5] == -np.inf

    with pytest.raises(ConfigError):
        TrainConfig(atom_weighting="uniform")


def test_dataset_rounds_are_contiguous():
    dataset = _dataset(4)
    assert dataset.n_rounds == 1
    series = [gaussian_simulator([0.0], s) for s in (1, 2)]
    new = dataset.extend(np.zeros((2, 1)), series, np.array([1, 2]), 1)
    assert new.tolist() == [4, 5]
    assert dataset.rounds.tolist() == [0, 0, 0, 0, 1, 1]
    assert dataset.features().shape == (6, 1)
    with pytest.raises(ShapeError):
        dataset.extend(np.zeros((1, 1)), [gaussian_simulator([0.0], 3)], np.array([3]), 3)
    with pytest.raises(ShapeError):
        dataset.extend(np.zeros((1, 2)), [gaussian_simulator([0.0, 0.0], 3)], np.array([3]), 2)


def test_proposal_is_frozen_against_later_training():
    prior = box(2)
    flow = _random_flow(2, seed=2)
    proposal = Proposal.at_observation(flow, observation([0.1, -0.2]), prior)
    assert proposal.kind is ProposalKind.FLOW_AT_OBSERVATION
    before, rate = proposal.sample(64, seed=4)
    flow.store.flat[:] += 0.5
    after, _ = proposal.sample(64, seed=4)
    np.testing.assert_array_equal(before, after)
    assert 0.0 < rate <= 1.0
    assert np.all(prior.contains(before))
    assert proposal.log_prob(np.array([[10.0, 0.0]]))[0] == -np.inf


def test_training_descends_and_is_deterministic():
    dataset = _dataset(300, seed=2)
    config = TrainConfig(lr=5e-3, batch_size=50, max_epochs=15, patience=50)

    def fit():
        flow = small_flow(seed=1)
        flow.fit_standardizer(dataset.features())
        result = train_round(FullParameters(flow), dataset, LossContext.plain(), config, seed=9)
        return flow, result

    flow_a, result_a = fit()
    flow_b, result_b = fit()
    assert result_a.best_val_loss < result_a.initial_loss
    assert result_a.train_losses[-1] < result_a.initial_loss
    assert result_a.train_losses == result_b.train_losses
    np.testing.assert_array_equal(flow_a.store.flat, flow_b.store.flat)


def test_zero_epochs_leaves_weights_untouched():
    dataset = _dataset(50)
    flow = _random_flow(1, seed=3)
    before = flow.store.flatten()
    result = train_round(
        FullParameters(flow), dataset, LossContext.plain(), TrainConfig(max_epochs=0), seed=0
    )
    np.testing.assert_array_equal(flow.store.flat, before)
    assert result.epochs == 0 and result.best_epoch == 0


def test_best_validation_weights_are_restored():
    dataset = _dataset(200, seed=4)
    flow = small_flow(seed=2)
    flow.fit_standardizer(dataset.features())
    config = TrainConfig(lr=2e-2, batch_size=20, max_epochs=12, patience=3, val_fraction=0.0)
    result = train_round(FullParameters(flow), dataset, LossContext.plain(), config, seed=1)
    assert result.best_val_loss == min([result.initial_loss, *result.val_losses])
    terms = snpe_loss_terms(
        flow, Tape(), dataset, np.arange(200), LossContext.plain(), np.random.default_rng(0)
    )
    assert float(terms.value.mean()) == pytest.approx(result.best_val_loss, rel=1e-10)


def test_non_finite_loss_names_the_pair():
    dataset = _dataset(20)
    flow = small_flow()
    flow.store.flat[:] = np.nan
    with pytest.raises(TrainingError, match="pair"):
        train_round(FullParameters(flow), dataset, LossContext.plain(), TrainConfig(), seed=0)


def test_conjugate_gaussian_posterior_is_recovered():
    prior = BoxUniformPrior(lower=(-5.0,), upper=(5.0,))
    flow = small_flow(seed=0)
    schedule = RoundSchedule(
        sims_per_round=(2000,),
        train=TrainConfig(lr=5e-3, batch_size=100, max_epochs=200, patience=20),
    )
    y = observation([1.0])
    result = run_snpe(prior, gaussian_simulator, y, flow, schedule, seed=0)
    draws = flow_sample(result.flow, embed_observation(result.flow, y), 5000, seed=1)
    assert abs(draws.mean() - 1.0) < 0.1
    assert abs(draws.std() - 0.5) < 0.1


@pytest.mark.parametrize(
    "weighting, sims, seed",
    [("prior", (1000, 1000), 2), ("proposal", (1000, 1000, 1000), 5)],
)
def test_atomic_rounds_recover_the_posterior_under_either_weighting(weighting, sims, seed):
    prior = BoxUniformPrior(lower=(-5.0,), upper=(5.0,))
    flow = small_flow(seed=0)
    train = TrainConfig(lr=5e-3, max_epochs=100, patience=15, atom_weighting=weighting)
    schedule = RoundSchedule(sims_per_round=sims, train=train)
    y = observation([1.0])
    result = run_snpe(prior, gaussian_simulator, y, flow, schedule, seed=seed)
    draws = flow_sample(result.flow, embed_observation(result.flow, y), 5000, seed=1)
    assert abs(draws.mean() - 1.0) < 0.15
    assert abs(draws.std() - 0.5) < 0.15


def test_rounds_accumulate_pairs_and_proposals():
    prior = box(2)
    schedule = RoundSchedule(
        sims_per_round=(120, 80, 60), train=TrainConfig(lr=5e-3, batch_size=40, max_epochs=3)
    )
    result = run_snpe(
        prior, gaussian_simulator, observation([0.5, -0.5]), small_flow(2), schedule, seed=3
    )
    assert len(result.dataset) == 260
    assert result.dataset.rounds.tolist() == [0] * 120 + [1] * 80 + [2] * 60
    assert [p.kind for p in result.proposals] == [
        ProposalKind.PRIOR,
        ProposalKind.FLOW_AT_OBSERVATION,
        ProposalKind.FLOW_AT_OBSERVATION,
    ]
    assert [r.n_sims for r in result.rounds] == [120, 80, 60]
    assert result.rounds[0].acceptance == 1.0
    assert all(0.0 < r.acceptance <= 1.0 for r in result.rounds)
    assert np.all(prior.contains(result.dataset.thetas))
    np.testing.assert_array_equal(result.flow.store.flat, result.trainable.flow.store.flat)
    assert result.flow.store is not result.trainable.flow.store


def test_rounds_are_reproducible_from_the_seed():
    prior = box(1)
    schedule = RoundSchedule(sims_per_round=(60, 40), train=TrainConfig(max_epochs=2))
    y = observation([0.2])
    a = run_snpe(prior, gaussian_simulator, y, small_flow(), schedule, seed=11)
    b = run_snpe(prior, gaussian_simulator, y, small_flow(), schedule, seed=11)
    np.testing.assert_array_equal(a.dataset.thetas, b.dataset.thetas)
    np.testing.assert_array_equal(a.flow.store.flat, b.flow.store.flat)


def test_single_round_is_plain_npe():
    prior = box(1)
    config = TrainConfig(lr=5e-3, batch_size=30, max_epochs=4)
    y = observation([0.0])
    result = run_snpe(
        prior, gaussian_simulator, y, small_flow(), RoundSchedule((90,), config), seed=5
    )

    round_seed = int(derive_seeds(5, 1)[0])
    draw_seed, sim_seed, train_seed, _ = (int(s) for s in derive_seeds(round_seed, 4))
    thetas = prior_sample(prior, 90, draw_seed)
    sim_seeds = derive_seeds(sim_seed, 90)
    dataset = Dataset.empty(ModelTag.BH, 1)
    dataset.extend(thetas, simulate_batch(gaussian_simulator, thetas, sim_seeds), sim_seeds, 0)
    flow = small_flow()
    flow.fit_standardizer(dataset.features())
    train_round(FullParameters(flow), dataset, LossContext.plain(), config, train_seed)
    np.testing.assert_array_equal(result.flow.store.flat, flow.store.flat)


class _FailingSimulator:
    def __init__(self, budget):
        self.budget = budget

    def __call__(self, theta, seed):
        self.budget -= 1
        if self.budget < 0:
            raise SimulationError("budget exhausted")
        return gaussian_simulator(theta, seed)


def test_round_failures_carry_the_round_index():
    schedule = RoundSchedule(sims_per_round=(20, 20), train=TrainConfig(max_epochs=1))
    with pytest.raises(RoundError) as info:
        run_snpe(box(1), _FailingSimulator(25), observation([0.0]), small_flow(), schedule, 0)
    assert info.value.round_index == 1
    assert isinstance(info.value.cause, SimulationError)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        RoundSchedule(sims_per_round=())
    with pytest.raises(ConfigError):
        RoundSchedule(sims_per_round=(10, 0))
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)
    assert RoundSchedule().n_rounds == 4
    assert RoundSchedule().atoms == 10
