from dataclasses import replace

import numpy as np
import pytest

from stprompt.backbone import BackboneConfig, BackboneModel
from stprompt.diffengine import FrozenParameterError, ParamStore
from stprompt.errors import ContractViolation
from stprompt.pipeline.optim import make_optimizer, sgd_step
from stprompt.pipeline.phases import (TrainConfig, evaluate_split, finetune_all, freeze, predict, pretrain,
                                      prompt_tune, scratch_train, trainable_copy)
from stprompt.prompt import PromptConfig, PromptNet, edit_magnitude

from conftest import TINY, make_task

TUNE = TrainConfig(lr=1e-2, epochs=6, patience=3, optimizer="adam", curriculum=False)


@pytest.fixture(scope="module")
def frozen(trained):
    model = trainable_copy(trained.model)
    model, digest = freeze(model)
    return model, digest


def test_sgd_step_arithmetic():
    out = sgd_step({"t": np.array(1.0)}, {"t": np.array(2.0)}, 0.1)
    assert out["t"] == pytest.approx(0.8)
    assert sgd_step({"t": np.array(1.5)}, {"t": np.array(0.0)}, 0.1)["t"] == 1.5
    theta = np.array([1.0, 2.0])
    kept = sgd_step({"t": theta}, {"t": np.array([9.0, 9.0])}, 0.1, frozen={"t"})["t"]
    assert kept is theta


def test_weight_decay_term():
    out = sgd_step({"t": np.array(2.0)}, {"t": np.array(0.0)}, 0.5, weight_decay=0.1)
    assert out["t"] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)


@pytest.mark.parametrize("kind", ["sgd", "momentum", "adam"])
def test_optimizers_skip_frozen_entries(kind):
    store = ParamStore()
    store.add("a", np.ones(3))
    store.add("b", np.ones(3), frozen=True)
    store["a"].grad = np.ones(3)
    store["b"].grad = np.ones(3)
    before = store["b"].data.copy()
    make_optimizer(kind, store, 0.1).step()
    assert np.array_equal(store["b"].data, before)
    assert not np.array_equal(store["a"].data, np.ones(3))


def test_zero_epochs_is_a_no_op():
    task = make_task()
    model = BackboneModel(BackboneConfig(**TINY), seed=0)
    digest = model.params.digest()
    res = pretrain(model, task, replace(TUNE, epochs=0))
    assert res.steps == 0 and model.params.digest() == digest


def test_pretraining_beats_last_value(trained):
    x, y = trained.task.windows("val")
    last = np.repeat(x[:, :, -1:], y.shape[2], axis=2)
    baseline = np.abs(trained.task.denormalize(y) - trained.task.denormalize(last)).mean()
    assert evaluate_split(trained.model, None, trained.task, "val").mae < baseline
    curve = trained.result.val_curve
    assert min(curve) < curve[0]


def test_pretraining_is_deterministic():
    task = make_task(n_steps=500, tun_tail=100)
    cfg = replace(TUNE, epochs=2)
    digests = []
    for _ in range(2):
        model = BackboneModel(BackboneConfig(**TINY), seed=5)
        pretrain(model, task, cfg)
        digests.append(model.params.digest())
    assert digests[0] == digests[1]


def test_freeze_blocks_updates(frozen):
    model, digest = frozen
    for _, t in model.params.items():
        t.grad = np.ones_like(t.data)
    make_optimizer("sgd", model.params, 1.0).step()
    assert model.params.digest() == digest
    with pytest.raises(FrozenParameterError):
        model.params.unfreeze()


def test_prompt_tuning_needs_frozen_backbone(trained):
    with pytest.raises(ContractViolation):
        prompt_tune(PromptNet(PromptConfig()), trainable_copy(trained.model), trained.task, TUNE)


def test_prompt_tuning_rejects_wrong_digest(trained, frozen):
    model, _ = frozen
    with pytest.raises(ContractViolation):
        prompt_tune(PromptNet(PromptConfig()), model, trained.task, TUNE, digest="0" * 64)


def test_untrained_prompt_reproduces_baseline(trained, frozen):
    model, digest = frozen
    prompt = PromptNet(PromptConfig(), seed=0)
    res = prompt_tune(prompt, model, trained.task, replace(TUNE, epochs=0), digest)
    assert res.steps == 0
    x, _ = trained.task.windows("tst")
    assert np.array_equal(predict(model, prompt, x), predict(model, None, x))


def test_unshifted_tuning_keeps_edit_small(trained, frozen):
    model, digest = frozen
    prompt = PromptNet(PromptConfig(), seed=0)
    res = prompt_tune(prompt, model, trained.task, TUNE, digest)
    assert model.params.digest() == digest
    x, _ = trained.task.windows("tun")
    assert edit_magnitude(prompt, x) < 0.05
    base = evaluate_split(model, None, trained.task, "val").mae
    tuned = evaluate_split(model, prompt, trained.task, "val").mae
    assert tuned <= 1.05 * base
    assert res.trainable_params == 207


def test_finetune_with_zero_rate(trained):
    model = trainable_copy(trained.model)
    before = model.params.digest()
    finetune_all(model, trained.task, replace(TUNE, lr=0.0, epochs=1))
    assert model.params.digest() == before
    a = evaluate_split(model, None, trained.task, "val").mae
    b = evaluate_split(trained.model, None, trained.task, "val").mae
    assert a == b


def test_arms_see_the_same_batches(trained, frozen):
    model, digest = frozen
    cfg = replace(TUNE, epochs=1)
    a = prompt_tune(PromptNet(PromptConfig()), model, trained.task, cfg, digest)
    b = finetune_all(trainable_copy(trained.model), trained.task, cfg)
    c = scratch_train(BackboneModel(BackboneConfig(**TINY), seed=9), trained.task, cfg)
    assert a.batch_digest == b.batch_digest == c.batch_digest
    assert a.trainable_params < b.trainable_params == c.trainable_params


def test_predict_denormalises(trained):
    x, _ = trained.task.windows("tst")
    raw = predict(trained.model, None, x[0])
    scaled = predict(trained.model, None, x[0], trained.task.mean, trained.task.std)
    np.testing.assert_allclose(scaled, raw * trained.task.std + trained.task.mean, rtol=1e-6)
    assert raw.shape == (4, 12, 1)
