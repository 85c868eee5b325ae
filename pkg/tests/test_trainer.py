import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohortgraph import config as C
from cohortgraph.metrics import average_precision
from cohortgraph.popgraph import fit_feature_weights, severity_encode
from cohortgraph.synth import SynthConfig, generate
from cohortgraph.trainer import (
    OutcomeModel,
    RunSplit,
    Trainer,
    augment,
    center_crop,
    ensemble_average,
    ensemble_predictions,
    equidistant_subsample,
    make_fold_plan,
    stack_layout,
    train_run,
)

SYNTH = {"n_patients": 30, "shape": [16, 16, 16], "seed": 5}
TINY_MODEL = {"base_filters": 4, "depth": 2, "input_size": [16, 16], "fused_width": 8, "hidden": 8, "heads": 2}


@pytest.fixture(scope="module")
def cohort():
    return generate(SynthConfig(**{**SYNTH, "shape": (16, 16, 16)}))


def cfg(**sections):
    doc = {"cohort": {"synth": SYNTH}, "model": dict(TINY_MODEL), "graph": {"mi_reps": 3}}
    for key, value in sections.items():
        doc[key] = {**doc.get(key, {}), **value}
    return C.from_dict(doc)


def split_of(cohort, seed=0):
    return make_fold_plan(cohort.labels[:, 0], seed).split(0, 0)


def test_stack_layout_examples():
    assert stack_layout(96, 10) == (9, 3, 3)
    assert stack_layout(10, 10) == (1, 0, 0)
    assert stack_layout(7, 3) == (2, 0, 1)
    with pytest.raises(ValueError):
        stack_layout(2, 3)
    assert [s.tolist() for s in equidistant_subsample(7, 3)] == [[0, 2, 4], [1, 3, 5]]
    assert [s.tolist() for s in equidistant_subsample(7, 3, "consecutive")] == [[0, 1, 2], [3, 4, 5]]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 40))
def test_stacks_partition_the_kept_slices(s, extra):
    z = s + extra
    n, left, right = stack_layout(z, s)
    for mode in ("strided", "consecutive"):
        stacks = equidistant_subsample(z, s, mode)
        assert len(stacks) == n and all(len(st_) == s for st_ in stacks)
        assert sorted(np.concatenate(stacks).tolist()) == list(range(left, z - right))


def test_augment_determinism_identity_and_shape():
    rng = np.random.default_rng(0)
    vol = rng.random((12, 12, 12)).astype(np.float32)
    mask = rng.integers(0, 4, (12, 12, 12)).astype(np.uint8)
    a = augment(vol, np.random.default_rng(3), mask=mask)
    b = augment(vol, np.random.default_rng(3), mask=mask)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].shape == vol.shape and a[0].dtype == vol.dtype
    assert set(np.unique(a[1])) <= {0, 1, 2, 3}
    ident = C.AugmentConfig(intensity=0.0, rotation_deg=0.0, zoom=(1.0, 1.0))
    np.testing.assert_array_equal(augment(vol, rng, ident), vol)
    zoomed = augment(vol, rng, C.AugmentConfig(intensity=0.0, rotation_deg=0.0, zoom=(1.2, 1.2)))
    assert zoomed.shape == vol.shape
    assert center_crop(np.ones((4, 6, 2)), (4, 4, 4)).shape == (4, 4, 4)


def test_fold_plan_shape():
    y = np.zeros(132, bool)
    y[:53] = True
    plan = make_fold_plan(np.random.default_rng(0).permutation(y), seed=1)
    sizes = sorted(len(f) for f in plan.folds)
    assert sizes == [26, 26, 26, 27, 27]
    icu = np.random.default_rng(0).permutation(y)
    assert all(10 <= icu[f].sum() <= 11 for f in plan.folds)
    assert sorted(np.concatenate(plan.folds).tolist()) == list(range(132))
    runs = list(plan.runs())
    assert len(runs) == 20
    for r in runs:
        assert not set(r.train) & set(r.val) and not set(r.train) & set(r.test) and not set(r.val) & set(r.test)
        assert len(r.train) + len(r.val) + len(r.test) == 132
    again = make_fold_plan(icu, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))
    assert len({r.seed for r in runs}) == 20


def test_ensemble_examples():
    assert ensemble_average([np.array([p]) for p in (0.2, 0.4, 0.6, 0.8)]).tolist() == [0.5]
    with pytest.warns(RuntimeWarning):
        ensemble_average([np.array([0.1])])
    m = {"ids": ["a", "b", "c", "d"], "labels": np.array([0, 1, 0, 1]), "probabilities": np.array([0.2, 0.7, 0.4, 0.9]), "threshold": 0.5}
    res = ensemble_predictions([m] * 4)
    np.testing.assert_array_equal(res.probabilities, m["probabilities"])
    assert res.metrics == res.member_metrics[0]
    with pytest.raises(ValueError):
        ensemble_predictions([m, {**m, "ids": ["a", "b", "c", "e"]}])


def test_ensemble_ap_not_below_weakest_member():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, 30)
        y[:2] = (0, 1)
        members = [
            {"ids": list(range(30)), "labels": y, "threshold": 0.5,
             "probabilities": 1 / (1 + np.exp(-(2 * y - 1 + rng.normal(0, 1.5, 30))))}
            for _ in range(4)
        ]
        res = ensemble_predictions(members)
        assert res.metrics.ap >= min(m.ap for m in res.member_metrics)


def test_overfits_four_patients(cohort):
    y = cohort.labels[:, 0].astype(bool)
    train = np.sort(np.r_[np.flatnonzero(y)[:2], np.flatnonzero(~y)[:2]])
    rest = np.setdiff1d(np.arange(len(cohort)), train)
    split = RunSplit(0, 0, train, rest[:13], rest[13:], seed=0)
    c = cfg(model={"arch": "mlp-metadata", "dropout": 0.0, "dtype": "float64"}, train={"lr": 1e-2, "weight_decay": 0.0})
    t = Trainer(cohort, split, c)
    losses = [t._train_step([0, 1, 2, 3], None, True) for _ in range(300)]
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))
    assert losses[-1] < 0.1


def test_early_stopping_respects_min_epochs(cohort):
    c = cfg(
        model={"arch": "mlp-metadata"},
        train={"min_epochs": 6, "patience": 1, "max_epochs": 15, "epoch_size": 16},
    )
    for seed in range(3):
        res = Trainer(cohort, split_of(cohort, seed), c).fit()
        assert len(res.history) >= 6


def test_float64_runs_are_bit_reproducible(cohort):
    c = cfg(model={"arch": "mlp-metadata", "dtype": "float64"}, train={"min_epochs": 3, "patience": 1, "max_epochs": 4, "epoch_size": 16})
    a = train_run(cohort, split_of(cohort), c)
    b = train_run(cohort, split_of(cohort), c)
    assert a.report.to_dict() == b.report.to_dict()
    np.testing.assert_array_equal(a.test_scores, b.test_scores)


def test_multilabel_uses_three_outputs_and_severity_weights(cohort):
    c = cfg(model={"arch": "u-gat"}, train={"task": "multilabel"})
    split = split_of(cohort)
    t = Trainer(cohort, split, c)
    assert t.targets.shape == (len(cohort), 3)
    assert t.model.head.gat2.n_out == 3
    sev = severity_encode(*cohort.labels[split.train].T.astype(bool))
    feats = t._graph_features(split.train, cohort.radiomics[split.train])
    ref = fit_feature_weights(feats, sev, "mutual-information", k_mi=3, reps=3, seed=split.seed)
    np.testing.assert_array_equal(t.weights.weights, ref.weights)


def test_fitted_statistics_ignore_held_out_patients(cohort):
    split = split_of(cohort)
    c = cfg(model={"arch": "u-gat"})
    base = Trainer(cohort, split, c)
    poisoned = dataclasses.replace(cohort, radiomics=cohort.radiomics.copy(), records=[dataclasses.replace(r, metadata=r.metadata.copy()) for r in cohort.records])
    for i in np.r_[split.val, split.test]:
        poisoned.records[i].metadata[:] = 1e6
        poisoned.radiomics[i] = 1e6
    other = Trainer(poisoned, split, c)
    np.testing.assert_array_equal(base.weights.weights, other.weights.weights)
    np.testing.assert_array_equal(base.pipeline.imputer.means, other.pipeline.imputer.means)
    np.testing.assert_array_equal(base.pipeline.scaler.std, other.pipeline.scaler.std)
    np.testing.assert_array_equal(base.rad_scaler.mean, other.rad_scaler.mean)
    assert base.graph.mu == other.graph.mu
    np.testing.assert_array_equal(base.graph.neighbors, other.graph.neighbors)


def test_seg_only_has_no_classifier(cohort):
    t = Trainer(cohort, split_of(cohort), cfg(train={"task": "seg-only"}))
    assert t.model.head is None and t.model.fusion is None
    assert t._phase(0) == ("lung", False) and t._phase(10) == ("full", False)


def test_pretrained_variant_freezes_backbone(cohort):
    state = OutcomeModel(
        __import__("cohortgraph.trainer", fromlist=["SEG_ONLY"]).SEG_ONLY,
        cfg().model, 0, np.random.default_rng(0),
    ).state_dict()
    c = cfg(model={"arch": "u-gat-pretrained"})
    t = Trainer(cohort, split_of(cohort), c, pretrained_state=state)
    assert t._min_epochs() == 5
    frozen = {id(p) for n, p in t.model.named_parameters() if n.startswith("backbone.")}
    assert frozen and not frozen & {id(p) for p in t.model.trainable_parameters()}
    with pytest.raises(ValueError, match="pretrained"):
        Trainer(cohort, split_of(cohort), c)


def test_replicates_keep_folds_and_change_seeds():
    y = np.r_[np.ones(20, bool), np.zeros(30, bool)]
    a, b = make_fold_plan(y, 3), make_fold_plan(y, 3, replicate=2)
    assert all(np.array_equal(x, z) for x, z in zip(a.folds, b.folds))
    assert a.run_seed(1, 2) != b.run_seed(1, 2)
    assert a.run_seed(1, 2) == make_fold_plan(y, 3, replicate=0).run_seed(1, 2)
