"""Registration quality control by clustering the fitted linear maps.

Failed registrations land far from the good ones in the space of 3x3
linear parts: the classic failure is a pose off by 180 degrees, whose
matrix differs in sign on two axes. The 9-vectors are projected to 3-D by
PCA and clustered with a full-covariance Gaussian mixture; a human then
labels whole clusters valid or invalid, and every scan inherits its
cluster's label. Translation is left out of the features because head
position varies harmlessly from scan to scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmNonConvergence, TooFewSamples, UndecidedCluster
from .registration import AffineTransform

LABEL_VALID = "valid"
LABEL_INVALID = "invalid"
LABEL_UNDECIDED = "undecided"

SCAN_ACCEPTED = "Accepted"
SCAN_REJECTED = "RegistrationRejected"

N_PCA_COMPONENTS = 3
COVARIANCE_RIDGE = 1e-6
EM_TOL = 1e-8
EM_MAX_ITER = 500
N_RESTARTS = 10
DEFAULT_K_RANGE = (1, 6)


@dataclass
class TransformFeature:
    scan_id: str
    vector9: np.ndarray  # row-major flattened linear part

    def __post_init__(self) -> None:
        v = np.asarray(self.vector9, dtype=np.float64).reshape(-1)
        if v.shape != (9,):
            raise ValueError("feature vector must have 9 entries")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite feature for scan {self.scan_id!r}")
        self.vector9 = v


def feature_from_transform(scan_id: str, transform: AffineTransform) -> TransformFeature:
    return TransformFeature(scan_id, transform.linear.ravel())


# --- PCA --------------------------------------------------------------------

@dataclass
class PcaProjection:
    mean: np.ndarray                       # (9,)
    components: np.ndarray                 # (3, 9), orthonormal rows
    explained_variance_ratio: np.ndarray   # (3,)
    projections: np.ndarray                # (n, 3)
    scan_ids: list[str]
    zero_variance: bool = False


def fit_pca(features: Sequence[TransformFeature],
            n_components: int = N_PCA_COMPONENTS) -> PcaProjection:
    """Project mean-centered 9-vectors onto the top principal components.

    Components are eigenvectors of the sample covariance, ordered by
    descending eigenvalue, with a deterministic sign convention (largest-
    magnitude entry positive). Entries share units, so no per-dimension
    scaling is applied. All-identical inputs are flagged zero_variance with
    ratios reported as zeros.
    """
    if len(features) < 4:
        raise TooFewSamples(f"PCA needs at least 4 transforms, got {len(features)}")
    x = np.stack([f.vector9 for f in features])
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(features) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    components = evecs[:, order[:n_components]].T.copy()
    for row in components:
        k = int(np.argmax(np.abs(row)))
        if row[k] < 0:
            row *= -1.0
    total = float(evals.sum())
    if total <= 0.0:
        ratio = np.zeros(n_components)
        zero_variance = True
    else:
        ratio = evals[:n_components] / total
        zero_variance = False
    return PcaProjection(
        mean=mean,
        components=components,
        explained_variance_ratio=ratio,
        projections=centered @ components.T,
        scan_ids=[f.scan_id for f in features],
        zero_variance=zero_variance,
    )


# --- Gaussian mixture -------------------------------------------------------

@dataclass
class GaussianMixture:
    weights: np.ndarray        # (k,)
    means: np.ndarray          # (k, d)
    covariances: np.ndarray    # (k, d, d)
    log_likelihood: float
    bic: float
    n_iter: int
    # per-iteration log-likelihood of every restart that ran for the chosen
    # component count, so monotonicity is checkable from outside
    ll_traces: list[np.ndarray] = field(default_factory=list)
    bic_by_k: dict[int, float] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.weights)


def _log_gaussian(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = points.shape[1]
    chol = np.linalg.cholesky(cov)
    solved = np.linalg.solve(chol, (points - mean).T)
    maha = np.sum(solved * solved, axis=0)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * math.log(2.0 * math.pi) + logdet + maha)


def _log_resp(points, weights, means, covs) -> tuple[np.ndarray, float]:
    """Log responsibilities and total log-likelihood in one pass."""
    k = len(weights)
    log_joint = np.empty((points.shape[0], k))
    for j in range(k):
        log_joint[:, j] = math.log(weights[j]) + _log_gaussian(points, means[j], covs[j])
    peak = log_joint.max(axis=1, keepdims=True)
    norm = peak[:, 0] + np.log(np.sum(np.exp(log_joint - peak), axis=1))
    return log_joint - norm[:, None], float(norm.sum())


def _m_step(points, resp) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, d = points.shape
    nk = resp.sum(axis=0)
    nk = np.maximum(nk, 1e-12)
    weights = nk / n
    means = (resp.T @ points) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = points - means[j]
        covs[j] = (resp[:, j][:, None] * diff).T @ diff / nk[j]
        covs[j] += COVARIANCE_RIDGE * np.eye(d)
    return weights, means, covs


def _kmeanspp_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0.0:
            centers.append(points[int(rng.integers(n))])
        else:
            centers.append(points[int(rng.choice(n, p=d2 / total))])
    return np.stack(centers)


def _run_em(points: np.ndarray, k: int, rng: np.random.Generator):
    """One restart: seed centers, hard-assign, iterate EM to tolerance.

    Returns (weights, means, covs, ll, trace, n_iter, converged)."""
    n, d = points.shape
    centers = _kmeanspp_centers(points, k, rng)
    dist = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), dist.argmin(axis=1)] = 1.0
    weights, means, covs = _m_step(points, resp)

    trace = []
    prev = None  # (weights, means, covs, ll) of the last recorded iterate
    converged = False
    for _ in range(EM_MAX_ITER):
        log_r, ll = _log_resp(points, weights, means, covs)
        if prev is not None and ll < prev[3]:
            # Exact EM cannot decrease the likelihood; a sub-epsilon dip is
            # rounding at the fixed point. Stop on the previous iterate so
            # the trace stays monotone and the returned parameters are the
            # ones the returned likelihood was computed from.
            weights, means, covs, ll = prev
            converged = True
            break
        trace.append(ll)
        if prev is not None and ll - prev[3] <= EM_TOL:
            converged = True
            break
        prev = (weights, means, covs, ll)
        weights, means, covs = _m_step(points, np.exp(log_r))
    return weights, means, covs, trace[-1], np.array(trace), len(trace), converged


def _n_free_params(k: int, d: int) -> int:
    return (k - 1) + k * d + k * d * (d + 1) // 2


def fit_gmm(
    points: np.ndarray,
    k_range: Tuple[int, int] = DEFAULT_K_RANGE,
    seed: int = 0,
    n_restarts: int = N_RESTARTS,
) -> GaussianMixture:
    """Fit mixtures over the component-count range and keep the best BIC.

    Per component count: 10 restarts seeded k-means++ style from a fixed
    seed, best final log-likelihood wins. A restart that fails to converge
    within the iteration cap is dropped; if every restart of a count fails,
    that is EmNonConvergence.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n, d = pts.shape
    k_min, k_max = int(k_range[0]), int(k_range[1])
    if k_min < 1 or k_max < k_min:
        raise ValueError(f"bad component range {k_range}")
    if n < 2 * k_max:
        raise TooFewSamples(
            f"{n} points cannot support up to {k_max} components (need {2 * k_max})"
        )

    best: Optional[GaussianMixture] = None
    bic_by_k: dict[int, float] = {}
    for k in range(k_min, k_max + 1):
        rng = np.random.default_rng((seed, k))
        k_best = None
        traces = []
        any_converged = False
        for _ in range(n_restarts):
            try:
                w, m, c, ll, trace, n_iter, ok = _run_em(pts, k, rng)
            except np.linalg.LinAlgError:
                continue  # collapsed component; treat like a failed restart
            traces.append(trace)
            if not ok:
                continue
            any_converged = True
            if k_best is None or ll > k_best[3]:
                k_best = (w, m, c, ll, n_iter)
        if not any_converged:
            raise EmNonConvergence(
                f"no restart converged within {EM_MAX_ITER} iterations for "
                f"{k} components"
            )
        w, m, c, ll, n_iter = k_best
        bic = -2.0 * ll + _n_free_params(k, d) * math.log(n)
        bic_by_k[k] = bic
        if best is None or bic < best.bic:
            best = GaussianMixture(
                weights=w, means=m, covariances=c, log_likelihood=ll,
                bic=bic, n_iter=n_iter, ll_traces=traces,
            )
    best.bic_by_k = bic_by_k
    return best


def responsibilities(gmm: GaussianMixture, points: np.ndarray) -> np.ndarray:
    log_r, _ = _log_resp(
        np.asarray(points, dtype=np.float64),
        gmm.weights, gmm.means, gmm.covariances,
    )
    return np.exp(log_r)


# --- combined model ---------------------------------------------------------

@dataclass
class ClusterModel:
    pca: PcaProjection
    gmm: GaussianMixture
    assignments: Dict[str, int]          # scan_id -> cluster index
    cluster_labels: Dict[int, str]       # cluster index -> valid/invalid/undecided

    @property
    def clusters(self) -> list[int]:
        return sorted(self.cluster_labels)

    def members(self, cluster: int) -> list[str]:
        return sorted(s for s, c in self.assignments.items() if c == cluster)


def fit_cluster_model(
    features: Sequence[TransformFeature],
    k_range: Tuple[int, int] = DEFAULT_K_RANGE,
    seed: int = 0,
) -> ClusterModel:
    """PCA to 3-D, then mixture clustering; every cluster starts undecided."""
    pca = fit_pca(features)
    gmm = fit_gmm(pca.projections, k_range=k_range, seed=seed)
    resp = responsibilities(gmm, pca.projections)
    idx = resp.argmax(axis=1)
    assignments = {sid: int(c) for sid, c in zip(pca.scan_ids, idx)}
    labels = {c: LABEL_UNDECIDED for c in range(gmm.k)}
    return ClusterModel(pca=pca, gmm=gmm, assignments=assignments,
                        cluster_labels=labels)


def apply_decisions(
    model: ClusterModel,
    decisions: Optional[Dict[int, str]] = None,
) -> Dict[str, str]:
    """Map cluster-level valid/invalid calls onto per-scan verdicts.

    Every cluster must be decided; anything still undecided (or missing
    from the decisions map) raises UndecidedCluster.
    """
    labels = dict(model.cluster_labels)
    if decisions:
        for cluster, label in decisions.items():
            if cluster not in labels:
                raise ValueError(f"decision for unknown cluster {cluster}")
            labels[cluster] = label
    undecided = sorted(c for c, lab in labels.items() if lab == LABEL_UNDECIDED)
    if undecided:
        raise UndecidedCluster(f"clusters {undecided} have no decision")
    bad = {c: lab for c, lab in labels.items()
           if lab not in (LABEL_VALID, LABEL_INVALID)}
    if bad:
        raise ValueError(f"unrecognized cluster labels: {bad}")
    return {
        sid: SCAN_ACCEPTED if labels[c] == LABEL_VALID else SCAN_REJECTED
        for sid, c in model.assignments.items()
    }


# --- persistence ------------------------------------------------------------

def save_model(model: ClusterModel, path) -> None:
    """Plain-text dump of the whole model for audit and reload."""
    def fmt(values) -> str:
        return " ".join(f"{float(v):.17g}" for v in np.asarray(values).ravel())

    lines = [
        "# registration QC cluster model",
        f"pca_mean {fmt(model.pca.mean)}",
    ]
    for i, row in enumerate(model.pca.components):
        lines.append(f"pca_component {i} {fmt(row)}")
    lines.append(f"explained_variance_ratio {fmt(model.pca.explained_variance_ratio)}")
    lines.append(f"zero_variance {int(model.pca.zero_variance)}")
    lines.append(f"k {model.gmm.k}")
    lines.append(f"log_likelihood {model.gmm.log_likelihood:.17g}")
    lines.append(f"bic {model.gmm.bic:.17g}")
    for j in range(model.gmm.k):
        lines.append(f"weight {j} {model.gmm.weights[j]:.17g}")
        lines.append(f"mean {j} {fmt(model.gmm.means[j])}")
        lines.append(f"covariance {j} {fmt(model.gmm.covariances[j])}")
    for c in model.clusters:
        lines.append(f"label {c} {model.cluster_labels[c]}")
    for sid in model.pca.scan_ids:
        lines.append(f"assignment {sid} {model.assignments[sid]}")
    for sid, proj in zip(model.pca.scan_ids, model.pca.projections):
        lines.append(f"projection {sid} {fmt(proj)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> ClusterModel:
    mean = None
    comp_rows: dict[int, np.ndarray] = {}
    ratio = None
    zero_variance = False
    k = None
    ll = bic = 0.0
    weights: dict[int, float] = {}
    means: dict[int, np.ndarray] = {}
    covs: dict[int, np.ndarray] = {}
    labels: dict[int, str] = {}
    assignments: dict[str, int] = {}
    projections: dict[str, np.ndarray] = {}
    order: list[str] = []

    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        key = parts[0]
        if key == "pca_mean":
            mean = np.array([float(v) for v in parts[1:]])
        elif key == "pca_component":
            comp_rows[int(parts[1])] = np.array([float(v) for v in parts[2:]])
        elif key == "explained_variance_ratio":
            ratio = np.array([float(v) for v in parts[1:]])
        elif key == "zero_variance":
            zero_variance = parts[1] == "1"
        elif key == "k":
            k = int(parts[1])
        elif key == "log_likelihood":
            ll = float(parts[1])
        elif key == "bic":
            bic = float(parts[1])
        elif key == "weight":
            weights[int(parts[1])] = float(parts[2])
        elif key == "mean":
            means[int(parts[1])] = np.array([float(v) for v in parts[2:]])
        elif key == "covariance":
            covs[int(parts[1])] = np.array(
                [float(v) for v in parts[2:]]
            ).reshape(3, 3)
        elif key == "label":
            labels[int(parts[1])] = parts[2]
        elif key == "assignment":
            assignments[parts[1]] = int(parts[2])
            order.append(parts[1])
        elif key == "projection":
            projections[parts[1]] = np.array([float(v) for v in parts[2:]])
        else:
            raise ValueError(f"{path}: unknown model line {key!r}")

    if mean is None or k is None or ratio is None:
        raise ValueError(f"{path}: incomplete model file")
    components = np.stack([comp_rows[i] for i in sorted(comp_rows)])
    pca = PcaProjection(
        mean=mean,
        components=components,
        explained_variance_ratio=ratio,
        projections=np.stack([projections[s] for s in order]),
        scan_ids=order,
        zero_variance=zero_variance,
    )
    gmm = GaussianMixture(
        weights=np.array([weights[j] for j in range(k)]),
        means=np.stack([means[j] for j in range(k)]),
        covariances=np.stack([covs[j] for j in range(k)]),
        log_likelihood=ll,
        bic=bic,
        n_iter=0,
    )
    return ClusterModel(pca=pca, gmm=gmm, assignments=assignments,
                        cluster_labels=labels)


def write_decisions_template(model: ClusterModel, path) -> None:
    """Editable stub listing every cluster with its size, all undecided."""
    lines = [
        "# one line per cluster: <cluster_index> valid|invalid",
        "# member counts are informational",
    ]
    for c in model.clusters:
        n = len(model.members(c))
        lines.append(f"{c} {model.cluster_labels[c]}  # {n} scans")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_decisions(path) -> Dict[int, str]:
    """Read 'cluster_index valid|invalid' lines; undecided is tolerated so
    a half-edited template parses (and later fails apply_decisions)."""
    decisions: dict[int, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'cluster label'")
        label = parts[1].lower()
        if label not in (LABEL_VALID, LABEL_INVALID, LABEL_UNDECIDED):
            raise ValueError(f"{path}:{lineno}: unknown label {parts[1]!r}")
        decisions[int(parts[0])] = label
    return decisions
