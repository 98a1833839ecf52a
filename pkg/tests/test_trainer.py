import numpy as np
import pytest

from milpath.aggregators import build_model
from milpath.bagstore import (Bag, ConfigError, TaskSpec, generate_synthetic, make_folds,
                              synthetic_manifest)
from milpath.numkernel import Rng
from milpath.trainer import (CompatibilityError, EarlyStopping, FoldError, TrainConfig, feature_dropout,
                             mean_loss, run_cv, split_bags, train_one, transfer_finetune, write_cv_outputs)

TINY = dict(hidden=8, attn=4)


def quick(agg="abmil", **kw):
    base = dict(agg=agg, task=TaskSpec("subtype"), min_epochs=3, max_epochs=6, patience=2, seed=3,
                hyper=TINY if agg == "abmil" else {})
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def syn():
    return generate_synthetic(n_bags=40, d=8, seed=5)


def run_stopper(losses, min_epochs=50, max_epochs=200, patience=25):
    stop = EarlyStopping(min_epochs, max_epochs, patience)
    for epoch, loss in enumerate(losses, start=1):
        stop.update(epoch, loss)
        if stop.should_stop(epoch):
            return epoch, stop.best_epoch
    raise AssertionError("never stopped")


def test_early_stopping_examples():
    assert run_stopper([1.0] * 300) == (50, 1)
    assert run_stopper([1.0 / e for e in range(1, 300)]) == (200, 200)
    # a plateau after epoch 40 stops 25 epochs later, since that is already past the floor
    assert run_stopper([1.0 / e for e in range(1, 41)] + [1.0] * 200) == (65, 40)


def test_config_invariants():
    with pytest.raises(ConfigError):
        quick(min_epochs=0, max_epochs=0)
    with pytest.raises(ConfigError):
        quick(max_epochs=2)
    with pytest.raises(ConfigError):
        quick(feature_dropout=1.0)
    with pytest.raises(ConfigError):
        quick(agg="transmil")
    cfg = TrainConfig("dtfd", TaskSpec("subtype"))
    assert (cfg.lr, cfg.weight_decay) == (1e-4, 1e-4)
    assert (cfg.min_epochs, cfg.max_epochs, cfg.patience) == (50, 200, 25)


def test_feature_dropout_scales_kept_entries():
    X = np.ones((50, 40))
    out = feature_dropout(X, 0.25, Rng(1))
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.03
    assert feature_dropout(X, 0.0, Rng(1)) is X


def test_training_is_deterministic(syn):
    bags = syn.bags
    m1, r1 = train_one(quick(), bags[:30], bags[30:])
    m2, r2 = train_one(quick(), bags[:30], bags[30:])
    assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss
    assert m1.params.flat.tobytes() == m2.params.flat.tobytes()
    _, r3 = train_one(quick(seed=4), bags[:30], bags[30:])
    assert r3.train_loss != r1.train_loss


def test_best_epoch_weights_are_restored(syn):
    bags = syn.bags
    seen = []
    model, rec = train_one(quick(), bags[:30], bags[30:],
                           on_epoch=lambda e, tr, va: seen.append(va))
    assert rec.val_loss == seen and len(seen) == rec.stopped_epoch
    assert rec.best_epoch == int(np.argmin(seen)) + 1
    assert mean_loss(model, bags[30:]) == min(seen)


def test_unlabelled_bags_leave_splits_alone(syn):
    manifest = synthetic_manifest(syn.bags)
    plan = make_folds(manifest, 10, 2)
    bags = {b.slide_id: b for b in syn.bags}
    order = [r.slide_id for r in manifest.rows]
    full = split_bags(bags, plan.folds[0], order)
    dropped = full[0][0].slide_id
    partial = split_bags({k: v for k, v in bags.items() if k != dropped}, plan.folds[0], order)
    assert [b.slide_id for b in partial[1]] == [b.slide_id for b in full[1]]
    assert [b.slide_id for b in partial[2]] == [b.slide_id for b in full[2]]
    assert len(partial[0]) == len(full[0]) - 1


def test_freeze_backbone_touches_only_heads(syn):
    model = build_model("abmil", 8, 3, seed=1, **TINY)
    before = model.params.flat.copy()
    trained, _ = train_one(quick(freeze_backbone=True), syn.bags[:30], syn.bags[30:], model=model)
    for name in trained.params.names():
        sl = trained.params.slice_of(name)
        changed = not np.array_equal(trained.params.flat[sl], before[sl])
        assert changed == (name in trained.head_blocks())


def test_transfer_contract(syn):
    model = build_model("clam-sb", 8, 3, seed=1, hidden=8, attn=4, k_sample=2)
    idh = [Bag(b.slide_id, b.patient_id, b.features, label=int(b.label != 0)) for b in syn.bags]
    cfg = quick("clam-sb", task=TaskSpec("idh"), hyper={}, freeze_backbone=True)
    tuned, _ = transfer_finetune(model, TaskSpec("idh"), cfg, idh[:30], idh[30:])
    assert tuned.params["head.W"].shape == (2, 8)
    assert tuned.params["inst.W"].tobytes() != model.params["inst.W"].tobytes()
    for name in model.params.names():
        if name not in model.head_blocks():
            assert tuned.params[name].tobytes() == model.params[name].tobytes()
    with pytest.raises(CompatibilityError):
        transfer_finetune(model, TaskSpec("idh"), quick("abmil", task=TaskSpec("idh")), idh[:30], idh[30:])
    wide = [Bag(b.slide_id, b.patient_id, np.zeros((3, 9)), label=0) for b in syn.bags[:4]]
    with pytest.raises(CompatibilityError):
        transfer_finetune(model, TaskSpec("idh"), cfg, wide, wide)
    with pytest.raises(ConfigError):
        transfer_finetune(model, TaskSpec("subtype"), quick("clam-sb", hyper={}), idh[:30], idh[30:])


def test_run_cv_outputs(tmp_path):
    syn = generate_synthetic(n_bags=100, d=8, seed=5)
    manifest = synthetic_manifest(syn.bags)
    bags = {b.slide_id: b for b in syn.bags}
    results, table = run_cv(quick(), manifest, k=10, folds=[0, 1], bags=bags)
    assert [r.fold for r in results] == [0, 1]
    assert "±" in table
    write_cv_outputs(results, table, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["aggregate.txt", "fold00_history.csv", "fold00_metrics.csv",
                     "fold01_history.csv", "fold01_metrics.csv", "folds.csv"]


def test_fold_errors_carry_the_index(syn):
    manifest = synthetic_manifest(syn.bags)
    plan = make_folds(manifest, 10, 3)
    # an all-unlabelled validation split is the simplest per-fold failure
    val = set(plan.folds[4].val)
    bags = {b.slide_id: Bag(b.slide_id, b.patient_id, b.features,
                            label=None if b.patient_id in val else b.label) for b in syn.bags}
    with pytest.raises(FoldError) as err:
        run_cv(quick(), manifest, k=10, folds=[4], bags=bags)
    assert err.value.fold == 4 and isinstance(err.value.cause, ConfigError)
