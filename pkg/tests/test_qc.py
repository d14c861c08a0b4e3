"""Transform clustering: PCA against an independent oracle, the mixture
fit, decision application, and model persistence."""

import numpy as np
import pytest

from oracles import gmm_bic, jacobi_eigh

from ctprep.errors import TooFewSamples, UndecidedCluster
from ctprep import qc
from ctprep.qc import (TransformFeature, apply_decisions, feature_from_transform,
                       fit_cluster_model, fit_gmm, fit_pca, load_model,
                       parse_decisions, responsibilities, save_model,
                       write_decisions_template)
from ctprep.registration import AffineTransform, make_affine


def _features(vectors, prefix="s"):
    return [TransformFeature(f"{prefix}{i:03d}", np.asarray(v, dtype=float))
            for i, v in enumerate(vectors)]


def _good_transforms(rng, n):
    """Near-identity registration outcomes with small jitter."""
    out = []
    for _ in range(n):
        m = make_affine(
            rotations_deg=rng.normal(0, 2.0, 3),
            scales=1.0 + rng.normal(0, 0.02, 3),
            translation=rng.normal(0, 3.0, 3),
        )
        out.append(m)
    return out


def _flipped_transforms(rng, n):
    out = []
    for _ in range(n):
        m = make_affine(
            rotations_deg=(180.0 + rng.normal(0, 2.0),
                           rng.normal(0, 2.0), rng.normal(0, 2.0)),
            scales=1.0 + rng.normal(0, 0.02, 3),
            translation=rng.normal(0, 3.0, 3),
        )
        out.append(m)
    return out


def test_feature_from_transform_flattens_linear():
    m = make_affine(rotations_deg=(0, 0, 30), translation=(5, 6, 7))
    f = feature_from_transform("x", AffineTransform(m))
    assert f.vector9.shape == (9,)
    assert np.allclose(f.vector9.reshape(3, 3), m[:3, :3])


def test_pca_matches_jacobi_oracle(rng):
    x = rng.normal(size=(20, 9))
    pca = fit_pca(_features(x))

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    evals, evecs = jacobi_eigh(cov)
    oracle_components = evecs[:, :3].T.copy()
    for row in oracle_components:  # same sign convention as the library
        k = int(np.argmax(np.abs(row)))
        if row[k] < 0:
            row *= -1.0
    assert np.allclose(pca.components, oracle_components, atol=1e-6)
    assert np.allclose(pca.projections, centered @ oracle_components.T, atol=1e-6)
    assert np.allclose(
        pca.explained_variance_ratio, evals[:3] / evals.sum(), atol=1e-6
    )


def test_pca_rank_one_data(rng):
    direction = rng.normal(size=9)
    direction /= np.linalg.norm(direction)
    coeffs = rng.normal(size=12)
    x = np.outer(coeffs, direction)
    pca = fit_pca(_features(x))
    assert pca.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-9)
    assert abs(abs(float(pca.components[0] @ direction)) - 1.0) < 1e-9


def test_pca_zero_variance():
    x = np.tile(np.arange(9.0), (5, 1))
    pca = fit_pca(_features(x))
    assert pca.zero_variance
    assert np.all(pca.explained_variance_ratio == 0.0)
    assert np.allclose(pca.projections, 0.0)


def test_pca_too_few_samples():
    with pytest.raises(TooFewSamples):
        fit_pca(_features(np.zeros((3, 9))))


def test_pca_projection_follows_input_order(rng):
    x = rng.normal(size=(8, 9))
    a = fit_pca(_features(x))
    perm = rng.permutation(8)
    b = fit_pca([_features(x)[i] for i in perm])
    # Same scan gets the same projection regardless of input order.
    for i, j in enumerate(perm):
        assert np.allclose(b.projections[i], a.projections[j], atol=1e-12)


def test_gmm_separates_two_blobs(rng):
    # Centroid distance (|10,10,10| = 17.3) over 10x the within-blob spread.
    a = rng.normal(loc=(0, 0, 0), scale=0.8, size=(50, 3))
    b = rng.normal(loc=(10, 10, 10), scale=0.8, size=(50, 3))
    pts = np.vstack([a, b])
    gmm = fit_gmm(pts, k_range=(1, 4), seed=1)
    assert gmm.k == 2
    resp = responsibilities(gmm, pts)
    labels = resp.argmax(axis=1)
    assert len(set(labels[:50])) == 1
    assert len(set(labels[50:])) == 1
    assert labels[0] != labels[50]


def test_gmm_single_gaussian_prefers_k1(rng):
    pts = rng.normal(size=(100, 3))
    gmm = fit_gmm(pts, k_range=(1, 2), seed=6)
    assert gmm.k == 1
    # Oracle check on the decision itself: BIC at the fitted K=1 solution
    # must beat the K=2 candidate the fit rejected.
    assert gmm.bic_by_k[1] < gmm.bic_by_k[2]
    oracle = gmm_bic(pts, gmm.weights, gmm.means, gmm.covariances)
    assert gmm.bic == pytest.approx(oracle, rel=1e-9)


def test_gmm_k1_bic_matches_oracle(rng):
    pts = rng.normal(size=(30, 3))
    gmm = fit_gmm(pts, k_range=(1, 1), seed=0)
    oracle = gmm_bic(pts, gmm.weights, gmm.means, gmm.covariances)
    assert gmm.bic == pytest.approx(oracle, rel=1e-9)
    # With one component the M step is closed-form: mean and biased
    # covariance (plus ridge).
    assert np.allclose(gmm.means[0], pts.mean(axis=0), atol=1e-9)


def test_gmm_log_likelihood_traces_monotone(rng):
    for trial in range(3):
        pts = rng.normal(size=(40, 3)) + rng.integers(0, 3) * 4
        gmm = fit_gmm(pts, k_range=(1, 3), seed=trial)
        assert gmm.ll_traces, "chosen component count kept no traces"
        for trace in gmm.ll_traces:
            diffs = np.diff(trace)
            assert np.all(diffs >= 0.0), f"LL decreased: {trace}"


def test_gmm_reported_ll_matches_reported_params(rng):
    pts = rng.normal(size=(25, 3))
    gmm = fit_gmm(pts, k_range=(1, 2), seed=3)
    resp_log, ll = None, None
    from ctprep.qc import _log_resp
    _, ll = _log_resp(pts, gmm.weights, gmm.means, gmm.covariances)
    assert gmm.log_likelihood == pytest.approx(ll, rel=1e-12)


def test_gmm_determinism(rng):
    pts = rng.normal(size=(30, 3))
    a = fit_gmm(pts, k_range=(1, 3), seed=9)
    b = fit_gmm(pts, k_range=(1, 3), seed=9)
    assert a.k == b.k
    assert np.array_equal(a.means, b.means)
    assert a.bic == b.bic


def test_gmm_too_few_points():
    with pytest.raises(TooFewSamples):
        fit_gmm(np.zeros((5, 3)), k_range=(1, 3))


def test_responsibilities_rows_sum_to_one(rng):
    pts = rng.normal(size=(24, 3))
    gmm = fit_gmm(pts, k_range=(1, 2), seed=2)
    resp = responsibilities(gmm, pts)
    assert resp.shape == (24, gmm.k)
    assert np.allclose(resp.sum(axis=1), 1.0, atol=1e-12)


def test_cluster_model_isolates_flipped_transforms():
    rng = np.random.default_rng(77)
    good = _good_transforms(rng, 90)
    flipped = _flipped_transforms(rng, 10)
    features = [feature_from_transform(f"good{i:03d}", AffineTransform(m))
                for i, m in enumerate(good)]
    features += [feature_from_transform(f"flip{i:03d}", AffineTransform(m))
                 for i, m in enumerate(flipped)]
    model = fit_cluster_model(features, k_range=(1, 6), seed=0)

    flip_clusters = {model.assignments[f"flip{i:03d}"] for i in range(10)}
    good_clusters = {model.assignments[f"good{i:03d}"] for i in range(90)}
    assert flip_clusters.isdisjoint(good_clusters)

    decisions = {c: (qc.LABEL_INVALID if c in flip_clusters else qc.LABEL_VALID)
                 for c in model.clusters}
    verdicts = apply_decisions(model, decisions)
    rejected = {s for s, v in verdicts.items() if v == qc.SCAN_REJECTED}
    assert rejected == {f"flip{i:03d}" for i in range(10)}


def test_apply_decisions_requires_every_cluster():
    rng = np.random.default_rng(3)
    features = _features(rng.normal(size=(12, 9)))
    model = fit_cluster_model(features, k_range=(2, 2), seed=1)
    with pytest.raises(UndecidedCluster):
        apply_decisions(model)
    partial = {model.clusters[0]: qc.LABEL_VALID}
    if len(model.clusters) > 1:
        with pytest.raises(UndecidedCluster):
            apply_decisions(model, partial)
    with pytest.raises(ValueError):
        apply_decisions(model, {99: qc.LABEL_VALID})


def test_model_save_load_round_trip(tmp_path, rng):
    features = _features(rng.normal(size=(14, 9)))
    model = fit_cluster_model(features, k_range=(1, 3), seed=4)
    model.cluster_labels[0] = qc.LABEL_VALID
    p = tmp_path / "model.txt"
    save_model(model, p)
    back = load_model(p)
    assert np.allclose(back.pca.mean, model.pca.mean, atol=0)
    assert np.allclose(back.pca.components, model.pca.components, atol=0)
    assert np.allclose(back.pca.projections, model.pca.projections, atol=0)
    assert back.pca.scan_ids == model.pca.scan_ids
    assert back.gmm.k == model.gmm.k
    assert np.allclose(back.gmm.means, model.gmm.means, atol=0)
    assert np.allclose(back.gmm.covariances, model.gmm.covariances, atol=0)
    assert back.gmm.log_likelihood == model.gmm.log_likelihood
    assert back.gmm.bic == model.gmm.bic
    assert back.assignments == model.assignments
    assert back.cluster_labels == model.cluster_labels


def test_decisions_template_and_parse(tmp_path, rng):
    features = _features(rng.normal(size=(10, 9)))
    model = fit_cluster_model(features, k_range=(2, 2), seed=5)
    p = tmp_path / "decisions.txt"
    write_decisions_template(model, p)
    parsed = parse_decisions(p)
    assert set(parsed) == set(model.clusters)
    assert all(v == qc.LABEL_UNDECIDED for v in parsed.values())

    p.write_text("0 valid\n1 invalid  # obviously wrong poses\n")
    parsed = parse_decisions(p)
    assert parsed == {0: qc.LABEL_VALID, 1: qc.LABEL_INVALID}


def test_parse_decisions_malformed(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("0 maybe\n")
    with pytest.raises(ValueError):
        parse_decisions(p)
    p.write_text("zero valid\n")
    with pytest.raises(ValueError):
        parse_decisions(p)
    p.write_text("0\n")
    with pytest.raises(ValueError):
        parse_decisions(p)


def test_transform_feature_validation():
    with pytest.raises(ValueError):
        TransformFeature("x", np.zeros(8))
    with pytest.raises(ValueError):
        TransformFeature("x", np.array([np.nan] + [0.0] * 8))
