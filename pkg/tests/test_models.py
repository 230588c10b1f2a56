"""
Tests for the five model variants.
"""
import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import logit as log_odds

from behavior_graph import GraphVariant
from config import ExperimentConfig, LossWeights
from conftest import TINY_CATEGORIES, TINY_ITEMS, TINY_USERS
from errors import DomainError, ShapeMismatchError
from ml.embeddings import SparseGrad
from models import (
    Batch,
    IndependentModel,
    ModelSpec,
    MultiTaskModel,
    TaskTargets,
    build,
    load_model,
    save_model,
)
from verification import run_gradcheck

ENTIRE_SPACE = (GraphVariant.HM3, GraphVariant.HM3R, GraphVariant.ESM2, GraphVariant.ESMM)


def tiny_spec(variant, **overrides):
    fields = dict(
        variant=variant,
        vocab_sizes=[TINY_USERS, TINY_ITEMS, TINY_CATEGORIES],
        embedding_dims=[4, 4, 4],
        head_widths=[8, 4],
        seed=3,
        dtype="float64",
    )
    fields.update(overrides)
    return ModelSpec(**fields)


def zeroed(model):
    for param in model.parameters().values():
        param[...] = 0.0
    return model


def grad_is_zero(grad):
    values = grad.values if isinstance(grad, SparseGrad) else grad
    return bool(np.all(values == 0.0))


class TestConstruction:
    """Tests for model shapes and parameter layout."""

    def test_hm3_parameter_count(self):
        """Six 48-128-64-32-1 heads over a shared 3 x 16 embedding."""
        spec = ModelSpec(variant=GraphVariant.HM3, vocab_sizes=[100, 200, 10])
        per_head = 49 * 128 + 129 * 64 + 65 * 32 + 33
        assert build(spec).parameter_count() == 6 * per_head + (100 + 200 + 10) * 16

    def test_esmm_has_two_heads(self):
        """ESMM shares one embedding between the CTR and CVR heads."""
        spec = ModelSpec(variant=GraphVariant.ESMM, vocab_sizes=[100, 200, 10])
        model = build(spec)
        assert model.parameter_count() == 2 * 16641 + 310 * 16
        names = set(model.parameters())
        assert {"fem.user", "y1.w0", "y4.w3"} <= names
        assert "y2.w0" not in names

    def test_base_shares_nothing(self):
        """BASE has two embeddings and every parameter belongs to exactly one network."""
        model = build(ModelSpec(variant=GraphVariant.BASE, vocab_sizes=[100, 200, 10]))
        assert isinstance(model, IndependentModel)
        assert model.parameter_count() == 2 * (16641 + 310 * 16)
        assert all(name.startswith(("ctr.", "cvr.")) for name in model.parameters())
        assert model.ctr.fem.tables["user"].weight is not model.cvr.fem.tables["user"].weight

    def test_same_seed_same_weights(self):
        """Initialization is a pure function of the spec."""
        a, b = build(tiny_spec(GraphVariant.HM3)), build(tiny_spec(GraphVariant.HM3))
        for name, value in a.parameters().items():
            assert np.array_equal(value, b.parameters()[name])

    def test_base_not_multitask(self):
        """BASE cannot be built as a shared-embedding model."""
        with pytest.raises(DomainError):
            MultiTaskModel(tiny_spec(GraphVariant.BASE))

    def test_spec_needs_three_fields(self):
        """vocab_sizes lists user, item and category."""
        with pytest.raises(ValidationError):
            ModelSpec(variant=GraphVariant.HM3, vocab_sizes=[10, 10])

    def test_spec_from_config(self):
        """Vocabulary and architecture come from the experiment config."""
        spec = ModelSpec.from_config(ExperimentConfig(), GraphVariant.ESM2, seed=4)
        assert spec.vocab_sizes == [10_000, 10_000, 100]
        assert spec.embedding_dims == [16, 16, 16]
        assert spec.seed == 4
        assert set(spec.task_weights()) == {"ctr", "dma", "ctcvr"}


class TestPrediction:
    """Tests for forward passes."""

    def test_zero_weights(self, tiny_log):
        """All-zero parameters put every head at 0.5."""
        targets = zeroed(build(tiny_spec(GraphVariant.HM3))).predict(tiny_log.features())
        assert np.all(targets.p_ctr == 0.5)
        assert np.all(targets.p_cvr == 0.5)
        assert np.all(targets.p_ctcvr == 0.25)
        assert np.all(targets.p_dmi == 0.25) and np.all(targets.p_dma == 0.25)

    def test_absent_targets_stay_absent(self, tiny_log):
        """ESMM predicts no D-Mi or D-Ma targets."""
        targets = build(tiny_spec(GraphVariant.ESMM)).predict(tiny_log.features())
        assert targets.p_dmi is None and targets.p_dma is None

    def test_factorization(self, tiny_log):
        """Every variant predicts p_ctcvr = p_ctr * p_cvr."""
        for variant in GraphVariant:
            t = build(tiny_spec(variant)).predict(tiny_log.features())
            assert np.array_equal(t.p_ctcvr, t.p_ctr * t.p_cvr)

    def test_unknown_id(self):
        """An id outside the vocabulary is a domain error."""
        model = build(tiny_spec(GraphVariant.HM3))
        with pytest.raises(DomainError):
            model.predict(np.array([[TINY_USERS, 0, 0]]))


class TestLoss:
    """Tests for the multi-task loss."""

    def test_hand_computed_esmm_loss(self):
        """Zero parameters give p_ctr = 0.5 and p_ctcvr = 0.25; the loss follows by hand."""
        model = zeroed(build(tiny_spec(GraphVariant.ESMM)))
        batch = Batch(
            features=np.array([[0, 0, 0], [1, 1, 1]]),
            targets=TaskTargets(*(np.array(v) for v in ([1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0]))),
        )
        loss = model.loss(batch)
        assert loss.tasks["ctr"] == pytest.approx(np.log(2.0))
        assert loss.tasks["ctcvr"] == pytest.approx((-np.log(0.25) - np.log(0.75)) / 2)
        assert loss.total == pytest.approx(loss.tasks["ctr"] + loss.tasks["ctcvr"])

    def test_hand_computed_hm3_loss(self):
        """Zero parameters put every head at 0.5, so p_dmi = p_dma = p_ctcvr = 0.25; four terms sum by hand."""
        model = zeroed(build(tiny_spec(GraphVariant.HM3)))
        batch = Batch(
            features=np.array([[0, 0, 0], [1, 1, 1]]),
            targets=TaskTargets(*(np.array(v) for v in ([1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [1.0, 0.0]))),
        )
        t = model.predict(batch.features)
        np.testing.assert_allclose(t.p_dmi, 0.25)
        np.testing.assert_allclose(t.p_dma, 0.25)
        loss = model.loss(batch)
        assert loss.tasks["ctr"] == pytest.approx(np.log(2.0))
        assert loss.tasks["dmi"] == pytest.approx((np.log(4.0) + np.log(4.0 / 3.0)) / 2)
        assert loss.tasks["dma"] == pytest.approx(np.log(4.0 / 3.0))
        assert loss.tasks["ctcvr"] == pytest.approx((np.log(4.0) + np.log(4.0 / 3.0)) / 2)
        assert loss.total == pytest.approx(np.log(2.0) + np.log(4.0) + 2 * np.log(4.0 / 3.0))

    def test_weighted_sum(self, tiny_log):
        """The total is the weighted sum of the per-task losses."""
        weights = LossWeights(ctr=2.0, dmi=0.5, dma=0.0, ctcvr=3.0)
        model = build(tiny_spec(GraphVariant.HM3, loss_weights=weights))
        loss = model.loss(Batch.from_log(tiny_log))
        expected = 2.0 * loss.tasks["ctr"] + 0.5 * loss.tasks["dmi"] + 3.0 * loss.tasks["ctcvr"]
        assert loss.total == pytest.approx(expected)
        assert set(loss.tasks) == {"ctr", "dmi", "dma", "ctcvr"}

    def test_batch_order_does_not_matter(self, tiny_log, rng):
        """Shuffling a batch leaves the loss unchanged."""
        model = build(tiny_spec(GraphVariant.HM3R))
        batch = Batch.from_log(tiny_log)
        shuffled = batch.take(rng.permutation(len(batch)))
        assert model.loss(shuffled).total == pytest.approx(model.loss(batch).total, rel=1e-12)

    def test_empty_batch(self, tiny_log):
        """An empty batch has no defined loss."""
        model = build(tiny_spec(GraphVariant.ESMM))
        with pytest.raises(ShapeMismatchError):
            model.loss(Batch.from_log(tiny_log).take(slice(0, 0)))

    def test_base_counts_clicked_rows(self, tiny_log):
        """BASE trains its CVR network on clicked impressions only."""
        loss = build(tiny_spec(GraphVariant.BASE)).loss(Batch.from_log(tiny_log))
        assert loss.counts["ctr"] == len(tiny_log)
        assert loss.counts["cvr"] == int(tiny_log.click.sum())


class TestGradients:
    """Tests for gradient flow."""

    def unclicked(self, log):
        batch = Batch.from_log(log)
        return batch.take(np.flatnonzero(batch.targets.click == 0))

    @pytest.mark.parametrize("variant", ENTIRE_SPACE)
    def test_unclicked_impressions_train_the_purchase_head(self, tiny_log, variant):
        """Entire-space variants learn purchase heads from impressions nobody clicked."""
        batch = self.unclicked(tiny_log)
        assert len(batch) > 0
        _, grads = build(tiny_spec(variant)).loss_and_grads(batch)
        assert not grad_is_zero(grads["y4.w2"])

    def test_base_cvr_sees_no_unclicked_impressions(self, tiny_log):
        """Without clicks the BASE CVR network gets exactly zero gradient."""
        loss, grads = build(tiny_spec(GraphVariant.BASE)).loss_and_grads(self.unclicked(tiny_log))
        assert loss.tasks["cvr"] == 0.0 and loss.counts["cvr"] == 0
        cvr = {name: g for name, g in grads.items() if name.startswith("cvr.")}
        assert cvr and all(grad_is_zero(g) for g in cvr.values())
        assert not grad_is_zero(grads["ctr.y1.w2"])

    def test_base_networks_are_isolated(self, tiny_log):
        """With the CVR weight at zero the CVR network gets no gradient from the CTR loss."""
        model = build(tiny_spec(GraphVariant.BASE, loss_weights=LossWeights(cvr=0.0)))
        _, grads = model.loss_and_grads(Batch.from_log(tiny_log))
        assert all(grad_is_zero(g) for name, g in grads.items() if name.startswith("cvr."))
        assert not grad_is_zero(grads["ctr.fem.user"])

    @pytest.mark.parametrize("perturbed, unchanged", [("ctr.", "p_cvr"), ("cvr.", "p_ctr")])
    def test_base_predictions_are_isolated(self, tiny_log, rng, perturbed, unchanged):
        """Noise on every parameter of one BASE network leaves the other network's output bit-identical."""
        model = build(tiny_spec(GraphVariant.BASE))
        features = tiny_log.features()
        before = model.predict(features)
        touched = 0
        for name, param in model.parameters().items():
            if name.startswith(perturbed):
                param += rng.normal(scale=0.5, size=param.shape)
                touched += 1
        after = model.predict(features)
        assert touched > 0
        assert np.array_equal(getattr(after, unchanged), getattr(before, unchanged))
        other = "p_ctr" if unchanged == "p_cvr" else "p_cvr"
        assert not np.array_equal(getattr(after, other), getattr(before, other))

    def test_every_parameter_has_a_gradient(self, tiny_log):
        """loss_and_grads returns one gradient per parameter with a matching shape."""
        model = build(tiny_spec(GraphVariant.HM3))
        _, grads = model.loss_and_grads(Batch.from_log(tiny_log))
        params = model.parameters()
        assert set(grads) == set(params)
        for name, grad in grads.items():
            dense = grad.dense(params[name].shape) if isinstance(grad, SparseGrad) else grad
            assert dense.shape == params[name].shape

    @pytest.mark.parametrize("variant", list(GraphVariant))
    def test_finite_difference_check(self, variant):
        """Analytic gradients match central differences to 1e-4 for every variant."""
        report = run_gradcheck(variant, n_examples=32)
        assert report.passed, report.summary()


class TestPersistence:
    """Tests for checkpoints and output-bias initialization."""

    @pytest.mark.parametrize("variant", [GraphVariant.HM3, GraphVariant.BASE])
    def test_save_load(self, tiny_log, tmp_path, variant):
        """A float32 model reloads with identical weights and predictions."""
        model = build(tiny_spec(variant, dtype="float32"))
        path = tmp_path / "checkpoint.bin"
        save_model(model, path, step=12)
        back, header = load_model(path)
        assert header["step"] == 12 and header["variant"] == variant.value
        assert back.spec == model.spec
        features = tiny_log.features()
        assert np.array_equal(back.predict(features).p_cvr, model.predict(features).p_cvr)

    def test_wrong_tensors_rejected(self):
        """Loading HM3 weights into ESMM fails on the extra tensors."""
        hm3 = build(tiny_spec(GraphVariant.HM3))
        esmm = build(tiny_spec(GraphVariant.ESMM))
        with pytest.raises(ShapeMismatchError):
            esmm.load_parameters(hm3.parameters())

    def test_prior_bias(self):
        """Output biases start at the log-odds of the training-set rates."""
        rates = {"click": 0.1, "dmi": 0.3, "dma": 0.2, "purchase": 0.05}
        model = build(tiny_spec(GraphVariant.HM3))
        model.initialize_output_bias(rates)
        assert model.tower.heads["y1"].biases[-1][0] == pytest.approx(log_odds(0.1))
        assert model.tower.heads["y5"].biases[-1][0] == pytest.approx(log_odds(0.2))
        base = build(tiny_spec(GraphVariant.BASE))
        base.initialize_output_bias(rates)
        assert base.cvr.heads["y4"].biases[-1][0] == pytest.approx(log_odds(0.05))
