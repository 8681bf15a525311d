"""Covariance-correlation weight generation and PCA reference machinery.

The central operator turns an observation matrix X (m samples of n
features) into a per-feature weight vector: covariance, normalization to
a correlation matrix, then a small learned map applied to each row. Three
alternative weight generators (pooling, self-attention relevance, PCA
coordinates) share the same calling convention so they can be swapped
into the same slots for comparison runs.

All ops accept an optional leading batch axis; the documented contracts
are the unbatched shapes.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateSampleError, DimensionError, NumericError
from .tensor import Tensor, softmax


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def compute_covariance(X):
    """Sample covariance of the columns of X, with Bessel correction.

    X: (m, n) observation matrix, m >= 2. Returns the symmetrized
    (n, n) covariance (X-mean)^T (X-mean) / (m-1).
    """
    X = _as_tensor(X)
    if X.ndim < 2:
        raise DimensionError(f"observation matrix must be 2-D, got shape {X.shape}")
    m = X.shape[-2]
    if m < 2:
        raise DegenerateSampleError(f"covariance needs at least 2 samples, got m={m}")
    centered = X - X.mean(axis=-2, keepdims=True)
    perm = tuple(range(X.ndim - 2)) + (X.ndim - 1, X.ndim - 2)
    cov = centered.transpose(perm) @ centered * (1.0 / (m - 1))
    # exact symmetry, not just up-to-roundoff
    return (cov + cov.transpose(perm)) * 0.5


def normalize_covariance(C, eps=1e-8):
    """Rescale a covariance to a correlation matrix.

    C_ij / (sqrt(C_ii + eps) * sqrt(C_jj + eps)): unit diagonal for
    variances well above eps, entries bounded by [-1, 1], zero-variance
    features degrade gracefully to zero rows instead of dividing by zero.
    """
    C = _as_tensor(C)
    if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise DimensionError(f"covariance must be square, got shape {C.shape}")
    n = C.shape[-1]
    batch = C.shape[:-2]
    s = (C.diagonal() + eps).sqrt()
    denom = s.reshape(batch + (n, 1)) * s.reshape(batch + (1, n))
    return C / denom


class CacwModule:
    """Learned map from correlation rows to feature weights.

    One shared two-layer perceptron (n -> d -> 1, leaky_relu hidden) is
    applied to every row of the correlation matrix, which makes the
    output equivariant to feature permutations. `output_activation` is
    "sigmoid" for bounded gates or "identity" when a softmax is applied
    downstream.
    """

    method = "cacw"

    def __init__(self, n, d=None, d_fraction=0.8, output_activation="sigmoid", seed=0):
        if d is None:
            d = math.ceil(d_fraction * n)
        if n < 1 or d < 1:
            raise ConfigurationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if output_activation not in ("sigmoid", "identity"):
            raise ConfigurationError(f"unknown output activation {output_activation!r}")
        self.n = n
        self.d = d
        self.output_activation = output_activation
        rng = np.random.default_rng(seed)
        self.W1 = Tensor(rng.standard_normal((d, n)) / np.sqrt(n), requires_grad=True)
        self.b1 = Tensor(np.zeros(d), requires_grad=True)
        # zero head: weights start neutral (0.5 gates / uniform softmax)
        self.W2 = Tensor(np.zeros((1, d)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def param_count(self):
        return self.d * self.n + 2 * self.d + 1

    def _mlp_rows(self, rows):
        """Shared MLP over the last axis of (..., r, features)."""
        h = (rows @ self.W1.T + self.b1).leaky_relu()
        out = h @ self.W2.T + self.b2
        out = out.reshape(out.shape[:-1])
        if self.output_activation == "sigmoid":
            out = out.sigmoid()
        return out

    def forward(self, X):
        return cacw_forward(self, X)


def generate_weights(module, corr):
    """Apply the module's shared row MLP to a correlation matrix.

    corr: (n, n) with n matching module.n. Returns weights of length n.
    """
    corr = _as_tensor(corr)
    if corr.shape[-1] != module.n or corr.shape[-2] != module.n:
        raise DimensionError(
            f"correlation shape {corr.shape} does not match module n={module.n}"
        )
    return module._mlp_rows(corr)


def cacw_forward(module, X):
    """Full weight generation: covariance -> correlation -> learned map."""
    return generate_weights(module, normalize_covariance(compute_covariance(X)))


# ----------------------------------------------------------------------
# PCA reference machinery

@dataclass
class PcaResult:
    eigenvalues: np.ndarray   # sorted descending
    eigenvectors: np.ndarray  # orthonormal columns, eigenvectors[:, i] <-> eigenvalues[i]

    def basis(self, k):
        if k > self.eigenvectors.shape[1]:
            raise DimensionError(
                f"requested basis size {k} exceeds dimension {self.eigenvectors.shape[1]}"
            )
        return self.eigenvectors[:, :k]


def pca_eigendecompose(C, max_sweeps=100):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Sweeps rotate away each off-diagonal element in turn until the
    off-diagonal Frobenius mass is negligible. The absolute 1e-12 target
    is scaled by max(1, ||C||_F) so that large-magnitude covariances do
    not chase an unreachable absolute floor at double precision.
    """
    C = C.data if isinstance(C, Tensor) else np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"eigendecomposition needs a square matrix, got {C.shape}")
    n = C.shape[0]
    A = (C + C.T) / 2.0
    V = np.eye(n)
    if n == 1:
        return PcaResult(A.diagonal().copy(), V)

    norm = max(1.0, float(np.linalg.norm(A)))
    tol = 1e-12 * norm

    def off_mass(M):
        off = M - np.diag(M.diagonal())
        return float(np.sqrt((off * off).sum()))

    converged = False
    for _ in range(max_sweeps):
        if off_mass(A) < tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < tol / (n * n):
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                A[[p, q], :] = rot.T @ A[[p, q], :]
                A[:, [p, q]] = A[:, [p, q]] @ rot
                V[:, [p, q]] = V[:, [p, q]] @ rot
    else:
        converged = off_mass(A) < tol
    if not converged:
        raise NumericError(
            f"Jacobi eigendecomposition did not converge in {max_sweeps} sweeps"
        )

    lam = A.diagonal().copy()
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    V = V[:, order]
    # deterministic sign: largest-magnitude component of each vector positive
    for i in range(n):
        j = int(np.argmax(np.abs(V[:, i])))
        if V[j, i] < 0:
            V[:, i] = -V[:, i]
    return PcaResult(lam, V)


def pca_project(X, P):
    """Project centered observations onto a basis: Y = P^T (X - mean)^T.

    X: (m, n); P: (n, k) with orthonormal columns, k <= n. Returns (k, m).
    """
    X = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] != X.shape[1]:
        raise DimensionError(f"basis rows {P.shape[0]} do not match features {X.shape[1]}")
    if P.shape[1] > P.shape[0]:
        raise DimensionError(f"basis size {P.shape[1]} exceeds dimension {P.shape[0]}")
    centered = X - X.mean(axis=0, keepdims=True)
    return P.T @ centered.T


# ----------------------------------------------------------------------
# comparison weight generators

class PoolWeights:
    """Global-average-pooling generator: column means -> MLP n -> d -> n."""

    method = "pool"

    def __init__(self, n, d=None, d_fraction=0.8, output_activation="sigmoid", seed=0):
        if d is None:
            d = math.ceil(d_fraction * n)
        if n < 1 or d < 1:
            raise ConfigurationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        self.n = n
        self.d = d
        self.output_activation = output_activation
        rng = np.random.default_rng(seed)
        self.W1 = Tensor(rng.standard_normal((d, n)) / np.sqrt(n), requires_grad=True)
        self.b1 = Tensor(np.zeros(d), requires_grad=True)
        self.W2 = Tensor(np.zeros((n, d)), requires_grad=True)
        self.b2 = Tensor(np.zeros(n), requires_grad=True)

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def param_count(self):
        return 2 * self.d * self.n + self.d + self.n

    def forward(self, X):
        X = _as_tensor(X)
        means = X.mean(axis=-2)
        squeeze = means.ndim == 1
        if squeeze:
            means = means.reshape(1, -1)
        h = (means @ self.W1.T + self.b1).leaky_relu()
        out = h @ self.W2.T + self.b2
        if self.output_activation == "sigmoid":
            out = out.sigmoid()
        return out.reshape(out.shape[-1:]) if squeeze else out


class AttentionWeights:
    """Self-attention relevance generator.

    R = row-softmax(Z Z^T / sqrt(m)) with Z the centered features
    (n x m); rows of R go through the same shared MLP shape as the
    covariance generator.
    """

    method = "attention"

    def __init__(self, n, d=None, d_fraction=0.8, output_activation="sigmoid", seed=0):
        self._inner = CacwModule(n, d, d_fraction, output_activation, seed)
        self.n = self._inner.n
        self.d = self._inner.d
        self.output_activation = output_activation

    def params(self):
        return self._inner.params()

    def param_count(self):
        return self._inner.param_count()

    def forward(self, X):
        X = _as_tensor(X)
        m = X.shape[-2]
        centered = X - X.mean(axis=-2, keepdims=True)
        perm = tuple(range(X.ndim - 2)) + (X.ndim - 1, X.ndim - 2)
        Z = centered.transpose(perm)
        scores = (Z @ centered) * (1.0 / np.sqrt(m))
        R = softmax(scores, axis=-1)
        return self._inner._mlp_rows(R)


class PcaWeights:
    """Eigenbasis-coordinate generator.

    Takes the top ceil(n/2) eigenvectors of the covariance; feature i's
    coordinate row goes through a shared MLP to a scalar weight. The
    eigenbasis is computed outside the tape: gradients reach the MLP
    only, the decomposition itself is treated as a constant per input.
    """

    method = "pca"

    def __init__(self, n, d=None, d_fraction=0.8, output_activation="sigmoid", seed=0):
        if d is None:
            d = math.ceil(d_fraction * n)
        if n < 1 or d < 1:
            raise ConfigurationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        self.n = n
        self.d = d
        self.k = math.ceil(n / 2)
        self.output_activation = output_activation
        rng = np.random.default_rng(seed)
        self.W1 = Tensor(rng.standard_normal((d, self.k)) / np.sqrt(self.k), requires_grad=True)
        self.b1 = Tensor(np.zeros(d), requires_grad=True)
        self.W2 = Tensor(np.zeros((1, d)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def param_count(self):
        return self.d * self.k + 2 * self.d + 1

    def forward(self, X):
        X = _as_tensor(X)
        cov = compute_covariance(X).data
        if cov.ndim == 2:
            basis = pca_eigendecompose(cov).basis(self.k)
        else:
            flat = cov.reshape((-1,) + cov.shape[-2:])
            basis = np.stack([pca_eigendecompose(c).basis(self.k) for c in flat])
            basis = basis.reshape(cov.shape[:-2] + basis.shape[-2:])
        rows = Tensor(basis)
        h = (rows @ self.W1.T + self.b1).leaky_relu()
        out = h @ self.W2.T + self.b2
        out = out.reshape(out.shape[:-1])
        if self.output_activation == "sigmoid":
            out = out.sigmoid()
        return out


WEIGHT_GENERATORS = {
    "cacw": CacwModule,
    "pool": PoolWeights,
    "attention": AttentionWeights,
    "pca": PcaWeights,
}
