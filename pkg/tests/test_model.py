import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sim4seg.exceptions import InvalidInputError
from sim4seg.model import Sim4SegSegmenter, estimate_eccentricity, make_strategy, solve_seg_state
from sim4seg.embeddings import ProjectionHead
from sim4seg.rvls2m import AbsoluteThreshold, TopFraction, TopK
from sim4seg.synthdata import SceneSpec, generate


@pytest.fixture(scope="module")
def data():
    train = generate(SceneSpec(seed=21), 12)
    test = generate(SceneSpec(seed=22), 6)
    return train, test


@pytest.fixture(scope="module")
def fitted(data):
    train, _ = data
    return Sim4SegSegmenter().fit([s.image for s in train], [s.mask for s in train],
                                  labels=[s.label for s in train])


def test_params_round_trip():
    model = Sim4SegSegmenter(grid_size=8, tau="fraction", tau_value=0.2)
    params = model.get_params()
    assert params["grid_size"] == 8 and params["tau_value"] == 0.2
    assert clone(model).get_params() == params
    assert model.tau_strategy == TopFraction(0.2)


def test_unfitted_model_raises(data):
    with pytest.raises(NotFittedError):
        Sim4SegSegmenter().predict([data[1][0].image])


def test_fit_sets_learned_state(fitted):
    assert fitted.concept_residual_ < 1e-6
    np.testing.assert_allclose(fitted.head_(fitted.seg_state_), fitted.seg_embedding_.values)
    assert 0.0 <= fitted.cutoff_ <= 1.0


def test_fit_is_deterministic(data, fitted):
    train, _ = data
    again = Sim4SegSegmenter().fit([s.image for s in train], [s.mask for s in train],
                                   labels=[s.label for s in train])
    assert again.seg_state_.tobytes() == fitted.seg_state_.tobytes()


def test_outputs_have_expected_shapes(data, fitted):
    images = [s.image for s in data[1]]
    regions = fitted.transform(images)
    assert regions.shape == (6, 16, 16) and np.all(regions.sum(axis=(1, 2)) == 36)
    assert fitted.predict(images).shape == (6, 64, 64)
    assert set(fitted.predict_diagnosis(images)) <= {"benign", "malignant"}


def test_segmentation_beats_chance(data, fitted):
    _, test = data
    assert fitted.score([s.image for s in test], [s.mask for s in test]) > 0.4


def test_fit_validation(data):
    train, _ = data
    with pytest.raises(InvalidInputError):
        Sim4SegSegmenter().fit([train[0].image], [])
    with pytest.raises(InvalidInputError):
        Sim4SegSegmenter(grid_size=4, tau_value=36).fit([train[0].image], [train[0].mask])


def test_make_strategy():
    assert make_strategy("topk", 12.0) == TopK(12)
    assert make_strategy("threshold", 0.1) == AbsoluteThreshold(0.1)
    with pytest.raises(InvalidInputError):
        make_strategy("median", 1)


def test_solver_hits_reachable_target():
    head = ProjectionHead(in_dim=8, mid_dim=16, out_dim=4, seed=3)
    target = head(np.random.default_rng(0).normal(size=8))
    x, err = solve_seg_state(head, target)
    assert err < 1e-8 and np.allclose(head(x), target, atol=1e-8)


def test_eccentricity_estimate_tracks_shape():
    round_ = generate(SceneSpec(irregularity_range=(0.0, 0.0), texture_noise=0.05, seed=1), 3)
    long_ = generate(SceneSpec(irregularity_range=(0.9, 0.9), texture_noise=0.05, seed=1), 3)
    assert max(estimate_eccentricity(s.image) for s in round_) < 0.4
    assert min(estimate_eccentricity(s.image) for s in long_) > 0.75
