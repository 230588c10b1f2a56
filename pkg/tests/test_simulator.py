"""
Tests for the synthetic log generator.
"""
import numpy as np
import pytest

from behavior_graph import compose_hm3
from config import GeneratorSettings, RateTargets
from errors import CalibrationError, DomainError
from ingest import write_log
from simulator import (
    RECORD_BLOCK,
    GroundTruthScorer,
    build_generative_model,
    calibrate_biases,
    expected_rates,
    generate_impressions,
    ground_truth_targets,
    load_generative_model,
    mean_ground_truth,
    sample_impression,
    save_generative_model,
)


def forced(world, bias):
    """Zero the head weights of world in place and set its logit biases."""
    world.head_weights = np.zeros_like(world.head_weights)
    world.head_bias = np.asarray(bias, dtype=float)
    return world


class TestGenerativeModel:
    """Tests for the hidden latent-factor model."""

    def test_shapes(self, tiny_world, tiny_settings):
        """Latents and head weights have the configured shapes."""
        d = tiny_settings.latent_dim
        assert tiny_world.user_latent.shape == (tiny_settings.n_users, d)
        assert tiny_world.item_latent.shape == (tiny_settings.n_items, d)
        assert tiny_world.head_weights.shape == (6, 3 * d)
        assert tiny_world.item_category.max() < tiny_settings.n_categories

    def test_same_seed_same_model(self, tiny_settings):
        """The generator is a pure function of its settings."""
        a, b = build_generative_model(tiny_settings), build_generative_model(tiny_settings)
        assert np.array_equal(a.head_weights, b.head_weights)
        assert np.array_equal(a.item_latent, b.item_latent)

    def test_secondary_heads_follow_partners(self, tiny_world):
        """O-Mi and O-Ma weights equal their D-set partners', so only the bias shift separates them."""
        assert np.array_equal(tiny_world.head_weights[4], tiny_world.head_weights[2])
        assert np.array_equal(tiny_world.head_weights[5], tiny_world.head_weights[3])
        assert not np.array_equal(tiny_world.head_weights[2], tiny_world.head_weights[1])

    def test_head_scales(self, tiny_settings):
        """A zero scale silences a head; scales multiply each head's weight row."""
        flat = tiny_settings.model_copy(update={"head_scales": [0.0, 1.0, 1.0, 1.0, 1.0, 1.0]})
        doubled = tiny_settings.model_copy(update={"head_scales": [2.0, 1.0, 1.0, 1.0, 1.0, 1.0]})
        unit = tiny_settings.model_copy(update={"head_scales": [1.0] * 6})
        assert not build_generative_model(flat).head_weights[0].any()
        np.testing.assert_allclose(build_generative_model(doubled).head_weights[0],
                                   2.0 * build_generative_model(unit).head_weights[0])

    def test_macro_action_drives_conversion(self, tiny_world):
        """Across pairs, P(purchase | click) tracks P(D-Ma | click) more closely than P(D-Mi | click)."""
        world = calibrate_biases(tiny_world, RateTargets(), n_pairs=20_000)
        users = np.arange(world.n_users).repeat(world.n_items)
        items = np.tile(np.arange(world.n_items), world.n_users)
        t = ground_truth_targets(world, users, items)
        with_dma = np.corrcoef(t.p_cvr, t.p_dma / t.p_ctr)[0, 1]
        with_dmi = np.corrcoef(t.p_cvr, t.p_dmi / t.p_ctr)[0, 1]
        assert with_dma > 0.8
        assert with_dma > with_dmi

    def test_heads_in_open_interval(self, tiny_world):
        """Ground-truth heads lie strictly inside (0, 1)."""
        users = np.arange(tiny_world.n_users).repeat(tiny_world.n_items)
        items = np.tile(np.arange(tiny_world.n_items), tiny_world.n_users)
        y = tiny_world.heads(users, items)
        for slot in ("y1", "y2", "y3", "y4", "y5", "y6"):
            values = y.get(slot)
            assert np.all(values > 0.0) and np.all(values < 1.0)

    def test_zero_weights_give_half(self, tiny_world):
        """With zero weights every pair has p_ctr = 0.5 before calibration."""
        world = forced(tiny_world, np.zeros(6))
        assert ground_truth_targets(world, 3, 4).p_ctr == 0.5

    def test_ground_truth_is_hm3_of_heads(self, tiny_world):
        """ground_truth_targets composes the heads with the HM3 calculus."""
        users, items = np.array([0, 5, 9]), np.array([1, 2, 3])
        expected = compose_hm3(tiny_world.heads(users, items))
        actual = ground_truth_targets(tiny_world, users, items)
        assert np.array_equal(actual.p_ctcvr, expected.p_ctcvr)

    def test_out_of_range_ids(self, tiny_world):
        """Unknown users or items raise DomainError."""
        with pytest.raises(DomainError):
            ground_truth_targets(tiny_world, tiny_world.n_users, 0)
        with pytest.raises(DomainError):
            ground_truth_targets(tiny_world, 0, -1)

    def test_save_load(self, tiny_world, tmp_path):
        """A saved generator reloads with identical parameters."""
        path = tmp_path / "generator.npz"
        save_generative_model(tiny_world, path)
        back = load_generative_model(path)
        assert back.seed == tiny_world.seed
        assert np.array_equal(back.head_weights, tiny_world.head_weights)
        assert np.array_equal(back.item_category, tiny_world.item_category)


class TestCalibration:
    """Tests for bias calibration."""

    def test_half_target_with_zero_weights(self, tiny_world):
        """Target 0.5 with zero weights lands on bias 0."""
        world = forced(tiny_world, np.zeros(6))
        targets = RateTargets(click=0.5, dmi=0.5, dma=0.5, purchase=0.5)
        calibrated = calibrate_biases(world, targets, n_pairs=1000, tolerance=0.005)
        assert calibrated.head_bias[0] == 0.0
        assert calibrated.head_bias[1] == 0.0

    def test_hits_sparse_targets(self, tiny_world):
        """Rates over the full grid land near sparse targets calibrated on sampled pairs."""
        targets = RateTargets()
        calibrated = calibrate_biases(tiny_world, targets, n_pairs=20_000, tolerance=0.005)
        rates = mean_ground_truth(calibrated)
        assert rates["click"] == pytest.approx(targets.click, rel=0.05)
        assert rates["dmi"] == pytest.approx(targets.dmi, rel=0.05)
        assert rates["dma"] == pytest.approx(targets.dma, rel=0.05)
        assert rates["purchase"] == pytest.approx(targets.purchase, rel=0.05)

    def test_tied_biases(self, tiny_world):
        """O-Mi and O-Ma biases sit at fixed offsets from their D-set partners."""
        calibrated = calibrate_biases(tiny_world, RateTargets(), n_pairs=5000)
        b = calibrated.head_bias
        assert b[4] == pytest.approx(b[2] + tiny_world.omi_shift)
        assert b[5] == pytest.approx(b[3] + tiny_world.oma_shift)

    def test_deterministic(self, tiny_world):
        """Calibration is a pure function of the model and targets."""
        a = calibrate_biases(tiny_world, RateTargets(), n_pairs=5000)
        b = calibrate_biases(tiny_world, RateTargets(), n_pairs=5000)
        assert np.array_equal(a.head_bias, b.head_bias)

    def test_unreachable_target(self, tiny_world):
        """A click rate the bias range cannot reach names the head."""
        world = forced(tiny_world, np.zeros(6))
        world.head_weights[0, 0] = 1000.0  # logit dominated by one latent coordinate
        with pytest.raises(CalibrationError) as info:
            calibrate_biases(world, RateTargets(click=0.999999), n_pairs=2000, tolerance=1e-6)
        assert info.value.head == "y1"


class TestSampling:
    """Tests for walking the behavior graph."""

    def test_never_click(self, tiny_world):
        """y1 = 0 everywhere gives all-zero labels."""
        world = forced(tiny_world, [-1e3, 0, 0, 0, 0, 0])
        log = generate_impressions(world, 0, 500)
        assert log.click.sum() == 0 and log.dmi.sum() == 0 and log.purchase.sum() == 0

    def test_always_everything(self, tiny_world):
        """All heads at 1 gives all-one labels."""
        world = forced(tiny_world, [1e3] * 6)
        log = generate_impressions(world, 0, 500)
        for labels in (log.click, log.dmi, log.dma, log.purchase):
            assert labels.min() == 1

    def test_reachability_holds(self, tiny_world):
        """Every generated record satisfies the label implications."""
        log = generate_impressions(tiny_world, 0, 5000)
        log.check_reachability()
        assert np.all(log.dmi <= log.click)
        assert np.all(log.dma <= log.click)
        assert np.all(log.purchase <= log.click)

    def test_purchase_without_dma_occurs(self, tiny_world):
        """Purchases via the O-Ma path exist."""
        log = generate_impressions(tiny_world, 0, 5000)
        assert np.any((log.purchase == 1) & (log.dma == 0))

    def test_single_impression(self, tiny_world, rng):
        """sample_impression yields a valid record with the item's category."""
        record = sample_impression(tiny_world, rng, impression_id=42)
        assert record.impression_id == 42
        assert record.category_id == int(tiny_world.item_category[record.item_id])
        assert record.violations() == []

    def test_ids_are_contiguous(self, tiny_world):
        """Ids run from start_id with no gaps, across block borders."""
        log = generate_impressions(tiny_world, RECORD_BLOCK - 10, 30)
        assert np.array_equal(log.impression_id, np.arange(RECORD_BLOCK - 10, RECORD_BLOCK + 20))

    def test_order_independent(self, tiny_world):
        """A record depends only on its id, not on the range it was drawn in."""
        whole = generate_impressions(tiny_world, 0, 3 * RECORD_BLOCK)
        part = generate_impressions(tiny_world, RECORD_BLOCK + 100, 50)
        assert list(part) == list(whole.take(slice(RECORD_BLOCK + 100, RECORD_BLOCK + 150)))

    def test_workers_do_not_change_output(self, tiny_world, tmp_path):
        """Thread-pooled generation writes byte-identical logs."""
        a = generate_impressions(tiny_world, 0, 3 * RECORD_BLOCK + 7, workers=1)
        b = generate_impressions(tiny_world, 0, 3 * RECORD_BLOCK + 7, workers=3)
        write_log(a, tmp_path / "a.csv")
        write_log(b, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_empty_range(self, tiny_world):
        """Zero impressions is an empty log."""
        assert len(generate_impressions(tiny_world, 0, 0)) == 0

    def test_purchase_rate_matches_expectation(self, tiny_world):
        """Empirical P(purchase | click) sits within 4 standard errors of the exact expectation."""
        log = generate_impressions(tiny_world, 0, 40_000)
        expected = ground_truth_targets(tiny_world, log.user_id, log.item_id)
        clicks = log.click.sum()
        # expected purchases among clicks = sum p_ctcvr / sum p_ctr
        p = expected.p_ctcvr.sum() / expected.p_ctr.sum()
        observed = log.purchase.sum() / clicks
        stderr = np.sqrt(p * (1 - p) / clicks)
        assert abs(observed - p) < 4 * stderr

    def test_sparsity_ordering(self):
        """With desk-S ratios micro labels outnumber macro labels, which outnumber purchases."""
        settings = GeneratorSettings(n_users=300, n_items=300, n_categories=10, calibration_pairs=20_000, seed=3)
        world = calibrate_biases(build_generative_model(settings), settings.rates, 20_000)
        log = generate_impressions(world, 0, 200_000)
        assert log.dmi.sum() > log.dma.sum() > log.purchase.sum()


class TestScorer:
    """Tests for the ground-truth scorer."""

    def test_predict_matches_targets(self, tiny_world, tiny_log):
        """Scoring a feature matrix equals ground_truth_targets per row."""
        scores = GroundTruthScorer(tiny_world).predict(tiny_log.features())
        direct = ground_truth_targets(tiny_world, tiny_log.user_id, tiny_log.item_id)
        assert np.array_equal(scores.p_cvr, direct.p_cvr)

    def test_expected_rates_definition(self, tiny_world):
        """expected_rates divides entire-space means by the click mean."""
        targets = ground_truth_targets(tiny_world, np.arange(10), np.arange(10))
        rates = expected_rates(targets)
        assert rates["purchase"] == pytest.approx(np.mean(targets.p_ctcvr) / np.mean(targets.p_ctr))
