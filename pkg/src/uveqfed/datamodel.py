"""Models with analytic gradients, synthetic data, MNIST ingestion, partitioners."""

import logging
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (DivergedRunError, IdxFormatError, InvalidInputError,
                     UnsupportedModelError)
from .streams import DOMAIN_DATA, derived_rng

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n,)
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise InvalidInputError("features must be a 2-D matrix")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features must be finite")
        if len(self.labels) != len(self.features):
            raise InvalidInputError("feature/label counts differ")

    @property
    def n(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices, name=""):
        return Dataset(self.features[indices], self.labels[indices],
                       name=name or self.name)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LinearRegression:
    """l2-regularized least squares, 0.5*mean((x'w - y)^2) + 0.5*lam*||w||^2."""

    kind = "l2-linear-regression"
    convex = True

    def __init__(self, dim, lam=0.0):
        self.dim = int(dim)
        self.lam = float(lam)

    @property
    def param_count(self):
        return self.dim

    def loss_and_gradient(self, w, X, y):
        r = X @ w - y
        loss = 0.5 * float(np.mean(r * r)) + 0.5 * self.lam * float(w @ w)
        grad = X.T @ r / len(y) + self.lam * w
        return loss, grad


class LogisticRegression:
    """l2-regularized binary logistic loss with labels in {-1, +1}."""

    kind = "l2-logistic-regression"
    convex = True

    def __init__(self, dim, lam=0.0):
        self.dim = int(dim)
        self.lam = float(lam)

    @property
    def param_count(self):
        return self.dim

    def loss_and_gradient(self, w, X, y):
        margins = y * (X @ w)
        loss = float(np.mean(np.logaddexp(0.0, -margins))) \
            + 0.5 * self.lam * float(w @ w)
        coef = -y * _sigmoid(-margins)
        grad = X.T @ coef / len(y) + self.lam * w
        return loss, grad

    def predict(self, w, X):
        return np.where(X @ w >= 0, 1, -1)


class MlpClassifier:
    """One sigmoid hidden layer, softmax cross-entropy output."""

    kind = "mlp-1-hidden"
    convex = False

    def __init__(self, in_dim, hidden, classes):
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        self.classes = int(classes)

    @property
    def param_count(self):
        return (self.in_dim * self.hidden + self.hidden
                + self.hidden * self.classes + self.classes)

    def unpack(self, w):
        i, h, c = self.in_dim, self.hidden, self.classes
        pos = 0
        w1 = w[pos:pos + i * h].reshape(i, h); pos += i * h
        b1 = w[pos:pos + h]; pos += h
        w2 = w[pos:pos + h * c].reshape(h, c); pos += h * c
        b2 = w[pos:pos + c]
        return w1, b1, w2, b2

    def _forward(self, w, X):
        w1, b1, w2, b2 = self.unpack(w)
        a1 = _sigmoid(X @ w1 + b1)
        return a1, a1 @ w2 + b2

    def loss_and_gradient(self, w, X, y):
        n = len(y)
        w1, b1, w2, b2 = self.unpack(w)
        a1 = _sigmoid(X @ w1 + b1)
        logits = a1 @ w2 + b2
        logits -= logits.max(axis=1, keepdims=True)
        expz = np.exp(logits)
        probs = expz / expz.sum(axis=1, keepdims=True)
        loss = -float(np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
        dlogits = probs
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dw2 = a1.T @ dlogits
        db2 = dlogits.sum(axis=0)
        da1 = dlogits @ w2.T
        dz1 = da1 * a1 * (1.0 - a1)
        dw1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        grad = np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])
        return loss, grad

    def predict(self, w, X):
        _, logits = self._forward(w, X)
        return np.argmax(logits, axis=1)

    def accuracy(self, w, ds):
        return float(np.mean(self.predict(w, ds.features) == ds.labels))


def loss_and_gradient(model, weights, ds, sample_indices=None):
    """Mini-batch empirical loss and its exact analytic gradient."""
    w = np.asarray(weights, dtype=float)
    if sample_indices is None:
        X, y = ds.features, ds.labels
    else:
        X, y = ds.features[sample_indices], ds.labels[sample_indices]
    loss, grad = model.loss_and_gradient(w, X, y)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergedRunError(f"non-finite loss/gradient at ||w||={np.linalg.norm(w):.3g}")
    return loss, grad


def init_weights(model, master_seed, std):
    rng = derived_rng(master_seed, DOMAIN_DATA, 0xC0FFEE)
    m = model.param_count
    return np.zeros(m) if std == 0 else std * rng.normal(size=m)


# ---------------------------------------------------------------------------
# Synthetic generators.

def gen_gaussian_matrix(rows, cols, seed):
    """Matrix with i.i.d. standard normal entries from a counter-mode stream."""
    return derived_rng(seed, DOMAIN_DATA, rows, cols).normal(size=(rows, cols))


@lru_cache(maxsize=8)
def correlation_matrix(n):
    """Exponentially decaying correlation, entry (i, j) = exp(-0.2 |i - j|)."""
    idx = np.arange(int(n))
    return np.exp(-0.2 * np.abs(idx[:, None] - idx[None, :]))


def gen_correlated(h_matrix):
    """Two-sided correlation shaping: Sigma @ H @ Sigma^T."""
    h_matrix = np.asarray(h_matrix, dtype=float)
    if h_matrix.ndim != 2 or h_matrix.shape[0] != h_matrix.shape[1]:
        raise InvalidInputError("correlated construction needs a square matrix")
    sigma = correlation_matrix(h_matrix.shape[0])
    return sigma @ h_matrix @ sigma.T


def make_linreg_users(num_users, dim, samples_per_user, seed, *, noise=0.1,
                      heterogeneity=0.0, lam=0.1):
    """Per-user least-squares tasks around a shared weight vector.

    ``heterogeneity`` scales a per-user offset of the true weights, which
    makes the local optima distinct and the heterogeneity gap positive.
    """
    rng = derived_rng(seed, DOMAIN_DATA, num_users, dim)
    w_shared = rng.normal(size=dim)
    datasets = []
    for k in range(num_users):
        w_k = w_shared + heterogeneity * rng.normal(size=dim)
        x = rng.normal(size=(samples_per_user, dim)) / np.sqrt(dim)
        y = x @ w_k + noise * rng.normal(size=samples_per_user)
        datasets.append(Dataset(x, y, name=f"linreg-user-{k}"))
    return LinearRegression(dim, lam=lam), datasets


# ---------------------------------------------------------------------------
# MNIST IDX ingestion.

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, count, path, offset):
    buf = f.read(count)
    if len(buf) != count:
        raise IdxFormatError(
            f"{path}: truncated at offset {offset + len(buf)} "
            f"(wanted {count} bytes)")
    return buf


def load_mnist_idx(images_path, labels_path):
    """Load an IDX image/label pair into a flat [0, 1]-scaled Dataset."""
    with open(images_path, "rb") as f:
        head = _read_exact(f, 16, images_path, 0)
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{_IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, images_path, 16)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        head = _read_exact(f, 8, labels_path, 0)
        magic, label_count = struct.unpack(">II", head)
        if magic != _IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{_IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(f, label_count, labels_path, 8)
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if label_count != count:
        raise IdxFormatError(
            f"{labels_path}: {label_count} labels for {count} images")
    logger.info("loaded %d images (%dx%d), first-image crc32=0x%08x",
                count, rows, cols, zlib.crc32(images[0].tobytes()))
    return Dataset(images / 255.0, labels, name="mnist")


# ---------------------------------------------------------------------------
# Partitioners.

def _parse_mode(mode):
    if mode in ("iid", "sequential"):
        return mode, None
    if mode.startswith("label-skew:"):
        frac = float(mode.split(":", 1)[1])
        if not 0.0 < frac <= 1.0:
            raise InvalidInputError(f"label-skew fraction must be in (0, 1], got {frac}")
        return "label-skew", frac
    raise InvalidInputError(f"unknown partition mode {mode!r}")


def partition(ds, num_users, mode, seed):
    """Split a dataset into per-user datasets forming an exact cover.

    Modes: ``iid`` (shuffled, per-label balanced), ``sequential``
    (contiguous blocks in file order), ``label-skew:F`` (fraction F of
    each user's quota drawn from one designated label, rest shuffled).
    """
    kind, frac = _parse_mode(mode)
    if num_users < 1 or num_users > ds.n:
        raise InvalidInputError(f"cannot split {ds.n} samples across {num_users} users")
    rng = derived_rng(seed, DOMAIN_DATA, 0x9A27, num_users)
    if kind == "sequential":
        parts = np.array_split(np.arange(ds.n), num_users)
        return [ds.subset(p, name=f"{ds.name}-seq-{k}") for k, p in enumerate(parts)]
    if kind == "iid":
        per_user = [[] for _ in range(num_users)]
        rotate = 0
        for label in np.unique(ds.labels):
            idx = np.flatnonzero(ds.labels == label)
            idx = idx[rng.permutation(len(idx))]
            chunks = np.array_split(idx, num_users)
            for j, chunk in enumerate(chunks):
                per_user[(j + rotate) % num_users].append(chunk)
            rotate += 1  # spreads the odd remainders across users
        return [ds.subset(np.sort(np.concatenate(p)), name=f"{ds.name}-iid-{k}")
                for k, p in enumerate(per_user)]
    # label-skew
    labels = np.unique(ds.labels)
    quota = np.full(num_users, ds.n // num_users)
    quota[:ds.n % num_users] += 1
    pools = {lab: list(rng.permutation(np.flatnonzero(ds.labels == lab)))
             for lab in labels}
    assigned = []
    for k in range(num_users):
        lab = labels[k % len(labels)]
        want = int(np.ceil(frac * quota[k]))
        pool = pools[lab]
        if len(pool) < want:
            raise InvalidInputError(
                f"label-skew infeasible: user {k} needs {want} samples of "
                f"label {lab}, only {len(pool)} remain")
        take, pools[lab] = pool[:want], pool[want:]
        assigned.append(list(take))
    leftovers = np.concatenate([np.array(p, dtype=np.int64) for p in pools.values()]
                               ) if pools else np.zeros(0, dtype=np.int64)
    leftovers = leftovers[rng.permutation(len(leftovers))]
    pos = 0
    out = []
    for k in range(num_users):
        need = quota[k] - len(assigned[k])
        extra = leftovers[pos:pos + need]
        pos += need
        out.append(ds.subset(np.sort(np.array(assigned[k] + list(extra),
                                              dtype=np.int64)),
                             name=f"{ds.name}-skew-{k}"))
    if pos != len(leftovers):
        raise InvalidInputError("label-skew quotas do not cover the dataset")
    return out


# ---------------------------------------------------------------------------
# Convex optima, heterogeneity gap, and curvature constants.

def _linreg_solution(model, datasets, alphas):
    dim = model.dim
    a = np.zeros((dim, dim))
    b = np.zeros(dim)
    for alpha, ds in zip(alphas, datasets):
        a += alpha * (ds.features.T @ ds.features / ds.n
                      + model.lam * np.eye(dim))
        b += alpha * (ds.features.T @ ds.labels / ds.n)
    return np.linalg.solve(a, b)


def _newton_minimum(model, datasets, alphas, tol=1e-10, max_iter=100):
    w = np.zeros(model.dim)
    for _ in range(max_iter):
        grad = np.zeros_like(w)
        hess = model.lam * np.eye(model.dim)
        for alpha, ds in zip(alphas, datasets):
            margins = ds.labels * (ds.features @ w)
            s = _sigmoid(-margins)
            grad += alpha * (ds.features.T @ (-ds.labels * s) / ds.n)
            d = s * (1.0 - s)
            hess += alpha * (ds.features.T @ (ds.features * d[:, None]) / ds.n)
        grad += model.lam * w
        if np.linalg.norm(grad) < tol:
            break
        w = w - np.linalg.solve(hess, grad)
    return w


def global_optimum(model, datasets, alphas):
    """Minimizer and value of the alpha-weighted objective (convex kinds)."""
    alphas = np.asarray(alphas, dtype=float)
    if isinstance(model, LinearRegression):
        w = _linreg_solution(model, datasets, alphas)
    elif isinstance(model, LogisticRegression):
        if model.lam <= 0:
            raise UnsupportedModelError("logistic optimum needs lam > 0")
        w = _newton_minimum(model, datasets, alphas)
    else:
        raise UnsupportedModelError(f"{model.kind} is not convex")
    value = 0.0
    grad = np.zeros_like(w)
    for alpha, ds in zip(alphas, datasets):
        l, g = model.loss_and_gradient(w, ds.features, ds.labels)
        value += alpha * l
        grad += alpha * g
    if np.linalg.norm(grad) > 1e-8:
        raise DivergedRunError(f"optimum solve left gradient norm {np.linalg.norm(grad):.2e}")
    return w, value


def heterogeneity_gap(model, datasets, alphas):
    """Global optimum value minus the alpha-weighted per-user optima."""
    alphas = np.asarray(alphas, dtype=float)
    _, f_star = global_optimum(model, datasets, alphas)
    local = 0.0
    for alpha, ds in zip(alphas, datasets):
        _, f_k = global_optimum(model, [ds], np.array([1.0]))
        local += alpha * f_k
    return f_star - local


def smooth_strong_convex_constants(model, datasets):
    """(rho_s, rho_c): worst-case smoothness and strong convexity over users."""
    if isinstance(model, LinearRegression):
        his, los = [], []
        for ds in datasets:
            eigs = np.linalg.eigvalsh(ds.features.T @ ds.features / ds.n)
            his.append(eigs[-1] + model.lam)
            los.append(eigs[0] + model.lam)
        return float(max(his)), float(min(los))
    if isinstance(model, LogisticRegression):
        his = []
        for ds in datasets:
            eigs = np.linalg.eigvalsh(ds.features.T @ ds.features / ds.n)
            his.append(0.25 * eigs[-1] + model.lam)
        return float(max(his)), float(model.lam)
    raise UnsupportedModelError(f"{model.kind} has no convexity constants")


def gradient_norm_bound(model, ds, radius):
    """Closed-form bound on per-sample gradient norms over ||w|| <= radius."""
    norms = np.linalg.norm(ds.features, axis=1)
    if isinstance(model, LinearRegression):
        per_sample = norms * (norms * radius + np.abs(ds.labels)) + model.lam * radius
    elif isinstance(model, LogisticRegression):
        per_sample = norms + model.lam * radius
    else:
        raise UnsupportedModelError(f"{model.kind} has no closed-form gradient bound")
    return float(np.max(per_sample) ** 2)
