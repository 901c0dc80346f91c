"""Derivative-estimator checks: training loop behavior, estimation
standardization identities, segmentation, chaining, and error contracts.
Accuracy of fully trained estimators is covered by the acceptance tests."""

import numpy as np
import pytest

from ndoflow import autodiff as ad
from ndoflow.funclib import LibraryConfig, make_dataset
from ndoflow.ndo import (NdoConfig, NdoError, NdoModel, NdoTrainConfig,
                         estimate, estimate_chain, segment_estimate,
                         train_ndo)

TINY = NdoConfig(lstm_units=(12, 12), head=(12, 8), seed=0)
TINY2 = NdoConfig(order=2, lstm_units=(12, 12), head=(12, 8), seed=0)


def small_model(cfg=TINY) -> NdoModel:
    return NdoModel(cfg, rng=np.random.default_rng(7))


# training loop ---------------------------------------------------------

def test_constant_library_trains_to_zero_derivative():
    lib = LibraryConfig(P=0, Q=0, C=10.0, n_functions=128, n_points=16, seed=3)
    data = make_dataset(lib, order=1)
    model, curve = train_ndo(data, TINY,
                             NdoTrainConfig(iterations=400, batch_size=32,
                                            val_fraction=0.1, eval_every=50))
    assert curve[-1][2] < 1e-3


def test_validation_mse_decreases_between_halves():
    lib = LibraryConfig(P=1, Q=1, C=1.0, n_functions=128, n_points=16, seed=5)
    data = make_dataset(lib, order=1)
    _, curve = train_ndo(data, TINY,
                         NdoTrainConfig(iterations=600, batch_size=32,
                                        val_fraction=0.1, eval_every=50))
    vals = [row[2] for row in curve]
    half = len(vals) // 2
    assert np.median(vals[half:]) < np.median(vals[:half])


def test_zero_iterations_returns_initialization():
    lib = LibraryConfig(P=1, Q=1, n_functions=8, n_points=8, seed=0)
    data = make_dataset(lib, order=1)
    model, curve = train_ndo(data, TINY, NdoTrainConfig(iterations=0))
    fresh = NdoModel(TINY)
    assert curve == []
    for a, b in zip(model.params(), fresh.params()):
        assert np.array_equal(a.data, b.data)


def test_nan_labels_abort_and_restore_snapshot():
    lib = LibraryConfig(P=1, Q=1, n_functions=32, n_points=8, seed=0)
    data = [(inp, lab * np.nan) for inp, lab in make_dataset(lib, order=1)]
    model, curve = train_ndo(data, TINY,
                             NdoTrainConfig(iterations=100, batch_size=8,
                                            val_fraction=0.1, eval_every=10))
    assert np.isnan(curve[-1][1])
    fresh = NdoModel(TINY)
    for a, b in zip(model.params(), fresh.params()):
        assert np.array_equal(a.data, b.data)


def test_dataset_order_mismatch_rejected():
    lib = LibraryConfig(P=1, Q=1, n_functions=8, n_points=8, seed=0)
    data = make_dataset(lib, order=2)
    with pytest.raises(NdoError):
        train_ndo(data, TINY, NdoTrainConfig(iterations=1))


def test_early_stop_on_val_threshold():
    lib = LibraryConfig(P=0, Q=0, n_functions=64, n_points=8, seed=1)
    data = make_dataset(lib, order=1)
    _, curve = train_ndo(data, TINY,
                         NdoTrainConfig(iterations=2000, batch_size=32,
                                        val_fraction=0.1, eval_every=25,
                                        val_stop=0.05))
    assert curve[-1][0] < 2000  # stopped before the schedule ran out


# estimation ------------------------------------------------------------

def test_output_length_matches_input_length():
    model = small_model()
    for n in (2, 3, 17, 1000):
        T = np.linspace(0.0, 1.0, n)
        D = estimate(model, np.sin(T), T)
        assert D.shape == (n,)


def test_estimate_is_pure():
    model = small_model()
    T = np.linspace(0.0, 2.0, 33)
    X = np.cos(T)
    a = estimate(model, X, T)
    b = estimate(model, X, T)
    assert np.array_equal(a, b)


def test_time_standardization_identity():
    # estimating on [0, 5] must be exactly the unit-interval model call
    # with times divided by 5 and outputs divided by 5
    model = small_model()
    T = np.linspace(0.0, 5.0, 40)
    X = np.sin(T)
    direct = estimate(model, X, T)
    tau = T / 5.0
    dtau = np.concatenate([[0.0], np.diff(tau)])
    inp = np.stack([X, tau, dtau], axis=1)[None].astype(np.float32)
    manual = model(inp)[0, :, 0].astype(np.float64) / 5.0
    np.testing.assert_array_equal(direct, manual)


def test_time_shift_invariance_of_standardization():
    model = small_model()
    T = np.linspace(0.0, 1.0, 25)
    X = np.sin(3 * T)
    np.testing.assert_array_equal(estimate(model, X, T),
                                  estimate(model, X, T + 10.0))


def test_rescale_flag_is_exact_linear_identity():
    model = small_model()
    T = np.linspace(0.0, 1.0, 30)
    X = 0.05 * np.sin(3 * T)  # amplitude far below the library scale
    k = 10.0 / np.max(np.abs(X))
    manual = estimate(model, k * X, T) / k
    np.testing.assert_allclose(estimate(model, X, T, rescale=True), manual,
                               rtol=0, atol=1e-12)


def test_multichannel_and_per_dimension_batching():
    T = np.linspace(0.0, 1.0, 20)
    X = np.stack([np.sin(T), np.cos(T)], axis=1)
    one = small_model()
    per_dim = estimate(one, X, T)
    assert per_dim.shape == (20, 2)
    # single-channel model applied per dimension == column-wise calls
    np.testing.assert_array_equal(per_dim[:, 0], estimate(one, X[:, 0], T))
    two = small_model(NdoConfig(channels=2, lstm_units=(12, 12),
                                head=(12, 8), seed=0))
    assert estimate(two, X, T).shape == (20, 2)


def test_estimate_error_contracts():
    model = small_model()
    T = np.linspace(0.0, 1.0, 10)
    X = np.sin(T)
    with pytest.raises(NdoError):
        estimate(model, X[:1], T[:1])
    with pytest.raises(NdoError):
        estimate(model, X, T[::-1])
    with pytest.raises(NdoError):
        estimate(model, X, T, d1=X)  # order-1 model takes no d1 channel
    with pytest.raises(NdoError):
        estimate(small_model(TINY2), X, T)  # order-2 model needs d1
    with pytest.raises(NdoError):
        estimate(small_model(NdoConfig(channels=3, lstm_units=(12, 12),
                                       head=(12, 8), seed=0)),
                 np.stack([X, X], axis=1), T)


def test_chain_validates_orders_and_runs():
    m1, m2 = small_model(), small_model(TINY2)
    T = np.linspace(0.0, 1.0, 15)
    X = np.sin(T)
    D1, D2 = estimate_chain(m1, m2, X, T)
    assert D1.shape == D2.shape == (15,)
    np.testing.assert_array_equal(D1, estimate(m1, X, T))
    np.testing.assert_array_equal(D2, estimate(m2, X, T, d1=D1))
    with pytest.raises(NdoError):
        estimate_chain(m2, m1, X, T)
    with pytest.raises(NdoError):
        estimate_chain(m1, m1, X, T)


# segmentation ----------------------------------------------------------

def test_segment_equals_whole_when_lengths_match():
    model = small_model()
    T = np.linspace(0.0, 1.0, 25)
    X = np.sin(T)
    np.testing.assert_array_equal(segment_estimate(model, X, T, 25),
                                  estimate(model, X, T))


def test_segmentation_concatenates_per_segment_estimates():
    model = small_model()
    T = np.linspace(0.0, 10.0, 1000)
    X = np.sin(T)
    D = segment_estimate(model, X, T, 100)
    assert D.shape == (1000,)
    first = estimate(model, X[:100], T[:100])
    np.testing.assert_array_equal(D[:100], first)
    last = estimate(model, X[900:], T[900:])
    np.testing.assert_array_equal(D[900:], last)


def test_segment_errors():
    model = small_model()
    T = np.linspace(0.0, 1.0, 11)
    X = np.sin(T)
    with pytest.raises(NdoError):
        segment_estimate(model, X, T, 1)
    with pytest.raises(NdoError):
        segment_estimate(model, X, T, 5)  # trailing segment of length 1


# persistence -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    lib = LibraryConfig(P=1, Q=1, n_functions=8, n_points=8, seed=0)
    model = NdoModel(TINY, library=lib)
    path = str(tmp_path / "ndo.ckpt")
    model.save(path)
    back = NdoModel.load(path)
    assert back.cfg == TINY
    T = np.linspace(0.0, 1.0, 12)
    X = np.sin(T)
    np.testing.assert_array_equal(estimate(back, X, T), estimate(model, X, T))
