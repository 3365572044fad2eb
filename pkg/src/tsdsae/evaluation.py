"""Disentanglement evaluation: LDA swap probe, Frechet distance, pitch accuracy.

Models are accessed through a small adapter (``encode_mean``, ``encode_sample``,
``decode``) so hand-built diagnostic models can be evaluated the same way as a
trained DSAE.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor
from .model import ModelConfig, decode, encode, encode_global, encode_local, to_batch
from .rng import Rng

REPORT_HEADER = ("metric", "factor", "value")


class NumericalError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# LDA and macro F1

@dataclass
class LdaModel:
    classes: np.ndarray
    means: np.ndarray  # [K, L]
    cov_inv: np.ndarray  # [L, L]
    priors: np.ndarray  # [K]

    def decision(self, x: np.ndarray) -> np.ndarray:
        w = self.means @ self.cov_inv  # [K, L]
        bias = -0.5 * np.einsum("kl,kl->k", w, self.means) + np.log(self.priors)
        return np.asarray(x, dtype=np.float64) @ w.T + bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision(x), axis=1)]


def lda_fit(features: np.ndarray, labels: np.ndarray) -> LdaModel:
    """Gaussian LDA with a shared pooled covariance plus ridge 1e-6 * trace / L."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ContractError("lda_fit needs >= 2 classes with >= 2 samples each")
    N, L = X.shape
    means = np.stack([X[y == c].mean(axis=0) for c in classes])
    centred = X - means[np.searchsorted(classes, y)]
    cov = centred.T @ centred / (N - len(classes))
    ridge = 1e-6 * np.trace(cov) / L
    cov = cov + ridge * np.eye(L)
    if not ridge > 0:
        raise NumericalError("pooled covariance is singular even after ridge regularisation")
    try:
        cov_inv = np.linalg.inv(cov)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"pooled covariance inversion failed: {e}") from None
    cov_inv = 0.5 * (cov_inv + cov_inv.T)
    return LdaModel(classes, means, cov_inv, counts / N)


def macro_f1(pred, truth) -> float:
    """Unweighted mean of per-class F1 over the classes present in pred or truth.

    A class with 2TP + FP + FN == 0 cannot occur under this definition; a
    class that is predicted but never true (or vice versa) scores 0.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ContractError("macro_f1 needs two equal-length label vectors")
    if pred.size == 0:
        raise ContractError("macro_f1 of empty input")
    scores = []
    for c in np.union1d(pred, truth):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# matrix square root and Frechet distance

def jacobi_eigh(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm falls below
    ``tol`` times the matrix norm.
    """
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def sym_matrix_sqrt(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"sym_matrix_sqrt needs a square matrix, got {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-9 * max(1.0, np.max(np.abs(m), initial=0.0)):
        raise ContractError("sym_matrix_sqrt: matrix is not symmetric")
    lam, vec = jacobi_eigh(0.5 * (m + m.T))
    if lam.min(initial=0.0) < -1e-8 * max(1.0, np.abs(lam).max(initial=0.0)):
        raise ContractError(f"sym_matrix_sqrt: eigenvalue {lam.min()} is negative")
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, samples: np.ndarray) -> "GaussianStats":
        s = np.asarray(samples, dtype=np.float64)
        cov = np.cov(s, rowvar=False)
        return cls(s.mean(axis=0), 0.5 * (cov + cov.T))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ContractError(f"frechet_distance: dimensions {a.mean.shape} and {b.mean.shape} differ")
    ra = sym_matrix_sqrt(a.cov)
    inner = ra @ b.cov @ ra
    cross = sym_matrix_sqrt(0.5 * (inner + inner.T))
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


# ---------------------------------------------------------------------------
# pitch

def extract_pitch_contour(x: np.ndarray) -> np.ndarray:
    """Per-frame argmax bin of a [D, T] spectrogram (ties go to the lower bin)."""
    return np.argmax(np.asarray(x), axis=0)


def raw_pitch_accuracy(pred, truth, tol: int = 1) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"raw_pitch_accuracy: lengths {pred.shape} and {truth.shape} differ")
    return float(np.mean(np.abs(pred - truth) <= tol))


# ---------------------------------------------------------------------------
# model access

class DSAEAdapter:
    """Evaluation view of trained parameters; sequences are [N, D, T] arrays."""

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig, chunk: int = 128, noise: bool = True):
        self.params = {k: Tensor(p.data if isinstance(p, Tensor) else p) for k, p in params.items()}
        self.cfg = cfg
        self.chunk = chunk
        self.noise = noise  # False: latents are posterior means

    def _chunks(self, x):
        for s in range(0, len(x), self.chunk):
            yield to_batch(x[s : s + self.chunk], self.cfg.input_scale)

    def encode_mean(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([encode_global(self.params, xb, self.cfg).mean.data for xb in self._chunks(x)])

    def encode_sample(self, x: np.ndarray, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        vs, zs = [], []
        for xb in self._chunks(x):
            if self.noise:
                _, v, _, z = encode(self.params, xb, self.cfg, rng)
            else:
                v = encode_global(self.params, xb, self.cfg).mean
                z = encode_local(self.params, xb, self.cfg, v).mean
            vs.append(v.data)
            zs.append(z.data)
        return np.concatenate(vs), np.concatenate(zs)

    def decode(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Decoder means as [N, D, T]."""
        out = []
        for s in range(0, len(z), self.chunk):
            m = decode(self.params, Tensor(z[s : s + self.chunk]), Tensor(v[s : s + self.chunk]), self.cfg).mean
            out.append(np.swapaxes(m.data, 1, 2) / self.cfg.input_scale)
        return np.concatenate(out)


@dataclass
class SwapReport:
    factor: str
    f1_pre: float
    f1_post_global: float
    f1_post_local: float


def cross_label_pairing(labels: np.ndarray, rng: Rng) -> np.ndarray:
    """For each i, a uniformly chosen j whose label differs from labels[i]."""
    labels = np.asarray(labels)
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        cand = np.flatnonzero(labels != lab)
        if cand.size == 0:
            raise ContractError(f"label {lab} has no partner with a different label")
        out[i] = cand[rng.below(cand.size)]
    return out


@dataclass
class SwapOutputs:
    recon: np.ndarray
    global_swap: np.ndarray  # z^i with v^j
    local_swap: np.ndarray  # z^j with v^i


def swap_decode(model, x: np.ndarray, pairing: np.ndarray, rng: Rng) -> SwapOutputs:
    v, z = model.encode_sample(x, rng)
    return SwapOutputs(model.decode(z, v), model.decode(z, v[pairing]), model.decode(z[pairing], v))


def swap_classification_protocol(model, train_x, train_labels, val_x, val_labels, rng: Rng,
                                 factor: str = "instrument", lda: LdaModel | None = None,
                                 pairing=None, outputs: SwapOutputs | None = None) -> SwapReport:
    """Pre-swap, post-global-swap and post-local-swap macro F1 of an LDA probe on v means."""
    lda = lda or lda_fit(model.encode_mean(train_x), train_labels)
    val_labels = np.asarray(val_labels)
    if pairing is None:
        pairing = cross_label_pairing(val_labels, rng)
    if outputs is None:
        outputs = swap_decode(model, val_x, pairing, rng)
    pre = lda.predict(model.encode_mean(val_x))
    post_g = lda.predict(model.encode_mean(outputs.global_swap))
    post_l = lda.predict(model.encode_mean(outputs.local_swap))
    return SwapReport(
        factor,
        macro_f1(pre, val_labels),
        macro_f1(post_g, val_labels[pairing]),
        macro_f1(post_l, val_labels),
    )


def _contours(x: np.ndarray) -> np.ndarray:
    return np.argmax(x, axis=1)  # [N, T]


def run_evaluation_suite(model, train, val, eval_seed: int = 0, octave_offset: int = 8,
                         rpa_tol: int = 1) -> dict:
    """All metrics on the validation split; returns {"rows": [...], plus named values}.

    Swap pairings are drawn per global factor (partner differs in that factor).
    Ground-truth contours come from the inputs; after a swap the expected
    contour is the melody of the sequence supplying z, at the octave of the
    sequence supplying v.
    """
    rng = Rng(eval_seed)
    tx, vx = train.stacked(), val.stacked()
    truth = _contours(vx)
    octv = val.labels("octave")
    rows: list[tuple[str, str, float]] = []
    out: dict = {"swap": {}, "rpa": {}}

    pre = swap_decode(model, vx, np.arange(len(vx)), rng).recon
    mse = float(np.mean((pre - vx) ** 2))
    frames = lambda a: np.swapaxes(a, 1, 2).reshape(-1, a.shape[1])  # noqa: E731
    fd = frechet_distance(GaussianStats.fit(frames(pre)), GaussianStats.fit(frames(vx)))
    rpa_pre = raw_pitch_accuracy(_contours(pre), truth, rpa_tol)
    out.update(mse_recon=mse, frechet_recon=fd, rpa_pre=rpa_pre)

    for factor in val.factor_names:
        labels = val.labels(factor)
        pairing = cross_label_pairing(labels, rng)
        outputs = swap_decode(model, vx, pairing, rng)
        rep = swap_classification_protocol(model, tx, train.labels(factor), vx, labels, rng, factor,
                                           pairing=pairing, outputs=outputs)
        shift_g = ((octv[pairing] - octv) * octave_offset)[:, None]
        shift_l = ((octv - octv[pairing]) * octave_offset)[:, None]
        rpa_g = raw_pitch_accuracy(_contours(outputs.global_swap), truth + shift_g, rpa_tol)
        rpa_l = raw_pitch_accuracy(_contours(outputs.local_swap), truth[pairing] + shift_l, rpa_tol)
        out["swap"][factor] = rep
        out["rpa"][factor] = (rpa_g, rpa_l)
        rows += [
            ("f1_pre", factor, rep.f1_pre),
            ("f1_post_global", factor, rep.f1_post_global),
            ("f1_post_local", factor, rep.f1_post_local),
        ]
    rows.append(("frechet_recon", "all", fd))
    rows.append(("mse_recon", "all", mse))
    rows.append(("rpa_pre", "all", rpa_pre))
    for factor, (g, l) in out["rpa"].items():
        rows.append(("rpa_post_global", factor, g))
        rows.append(("rpa_post_local", factor, l))
    out["rows"] = rows
    return out


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for metric, factor, value in rows:
        w.writerow([metric, factor, repr(float(value))])
    return buf.getvalue()
