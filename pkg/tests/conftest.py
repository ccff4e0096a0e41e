"""Shared fixtures.

The expensive fixtures (trained models on the MovieLens data) are
session-scoped and lazy: running only the unit-test files never triggers
them. Set INPUTCF_ML100K to point at a u.data file if the default
data/ml-100k location is not populated.
"""

import os
import time
import types

import pytest

from inputcf.data import ingest, split_leave_one_out, split_random
from inputcf.metrics import evaluate_implicit, evaluate_rating
from inputcf.model import ModelConfig, build_model, export_hypothesis
from inputcf.rng import STREAM_INIT, stream
from inputcf.training import TrainPlan, train_joint, train_post_input

ML100K_ENV = "INPUTCF_ML100K"
_DEFAULT = os.path.join(os.path.dirname(__file__), "..", "data", "ml-100k", "u.data")


def ml100k_location():
    return os.environ.get(ML100K_ENV, os.path.abspath(_DEFAULT))


@pytest.fixture(scope="session")
def ml100k():
    path = ml100k_location()
    if not os.path.exists(path):
        pytest.skip(
            f"MovieLens 100k not found at {path}; "
            f"set {ML100K_ENV} or place u.data under data/ml-100k/"
        )
    return ingest(path, "movielens-tab")


@pytest.fixture(scope="session")
def rating_split(ml100k):
    return split_random(ml100k, seed=0)


@pytest.fixture(scope="session")
def loo_split(ml100k):
    return split_leave_one_out(ml100k)


def _train_shallow(split, variant, input_init):
    config = ModelConfig(
        variant=variant,
        user_layers=(100,),
        item_layers=(100,),
        fusion_layers=(500, 1),
        input_init=input_init,
    )
    model = build_model(config, split.train, stream(0, STREAM_INIT))
    plan = TrainPlan(
        epochs=30,
        batch_size=64,
        optimizer="rmsprop",
        lr=1e-3,
        loss="mse",
        seed=0,
        patience=5,
        restore_best=True,
    )
    start = time.time()
    result = train_joint(model, split, plan)
    joint_scores = evaluate_rating(export_hypothesis(model), split, p_pct=25.0).scores
    post = None
    scores = joint_scores
    if variant.startswith("inp-"):
        # Rating-task protocol for input-parameter variants: joint training,
        # then input-only fine-tuning with the network frozen.
        post_plan = TrainPlan(
            epochs=7,
            batch_size=64,
            optimizer="sgd",
            lr=0.1,
            loss="mse",
            seed=0,
            patience=0,
            restore_best=False,
        )
        post = train_post_input(model, split, post_plan,
                                epoch_offset=len(result.history))
        scores = evaluate_rating(export_hypothesis(model), split, p_pct=25.0).scores
    return types.SimpleNamespace(
        model=model,
        result=result,
        post=post,
        joint_scores=joint_scores,
        scores=scores,
        plan=plan,
        wall_s=time.time() - start,
    )


@pytest.fixture(scope="session")
def ncf_r_run(rating_split):
    return _train_shallow(rating_split, "ncf", "ratings")


@pytest.fixture(scope="session")
def inp_ncf_r_run(rating_split):
    return _train_shallow(rating_split, "inp-ncf", "ratings")


@pytest.fixture(scope="session")
def ncf_i_run(rating_split):
    return _train_shallow(rating_split, "ncf", "implicit")


@pytest.fixture(scope="session")
def inp_ncf_i_run(rating_split):
    return _train_shallow(rating_split, "inp-ncf", "implicit")


def _train_implicit(split, variant):
    config = ModelConfig(
        variant=variant,
        user_layers=(64,),
        item_layers=(64,),
        fusion_layers=(1,),
        activation="selu",
        output_activation="sigmoid",
        input_init="implicit",
        cfnet_embed_dim=64,
        cfnet_h_layers=(64,),
    )
    model = build_model(config, split.train, stream(0, STREAM_INIT))
    # The input parameter group moves on its own, slower schedule for the
    # ranking task; a no-op for the frozen-input baseline.
    plan = TrainPlan(
        epochs=8,
        batch_size=256,
        optimizer="rmsprop",
        lr=1e-3,
        loss="bce",
        seed=0,
        patience=5,
        restore_best=True,
        negatives_per_positive=4,
        input_lr=1e-4,
    )
    start = time.time()
    result = train_joint(model, split, plan)
    report = evaluate_implicit(
        export_hypothesis(model), split, k=10, num_negatives=99, seed=0
    )
    return types.SimpleNamespace(
        model=model,
        result=result,
        scores=report.scores,
        plan=plan,
        wall_s=time.time() - start,
    )


@pytest.fixture(scope="session")
def cfnet_loo_run(loo_split):
    return _train_implicit(loo_split, "cfnet")


@pytest.fixture(scope="session")
def inp_cfnet_loo_run(loo_split):
    return _train_implicit(loo_split, "inp-cfnet")
