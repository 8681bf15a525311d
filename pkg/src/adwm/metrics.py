"""Fusion quality metrics: reference (PSNR, SAM, ERGAS, Q, Q2n) and
no-reference (spectral / spatial distortion and their product).

Array layout is channel-last throughout: multiband images are (H, W, c),
single-band images (H, W). All functions are pure and deterministic.

The no-reference spectral distortion uses plain Q-index differences
between band pairs rather than an MTF-matched filter bank; the report
writer records this choice in its header comments.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError

_EPS = 1e-12


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------
# reference metrics

def psnr(gt, pred, peak=1.0, cap=100.0):
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_same_shape(gt, pred, "psnr")
    mse = float(np.mean((gt - pred) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(peak * peak / mse)))


def sam(gt, pred):
    """Mean spectral angle in degrees; pixels with a zero-norm spectrum
    in either image are skipped.

    The angle is evaluated as 2*atan2(|u-v|, |u+v|) on unit vectors,
    which equals arccos of the normalized inner product but stays exact
    at 0 and 180 degrees where arccos loses half the significand.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_same_shape(gt, pred, "sam")
    if gt.ndim != 3 or gt.shape[2] < 2:
        raise DimensionError(f"sam needs (H, W, c) with c >= 2, got {gt.shape}")
    g = gt.reshape(-1, gt.shape[2])
    p = pred.reshape(-1, gt.shape[2])
    gn = np.linalg.norm(g, axis=1)
    pn = np.linalg.norm(p, axis=1)
    keep = (gn > 0) & (pn > 0)
    if not np.any(keep):
        return 0.0
    u = g[keep] / gn[keep, None]
    v = p[keep] / pn[keep, None]
    ang = 2.0 * np.arctan2(
        np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1)
    )
    return float(np.degrees(ang).mean())


def ergas(gt, pred, scale=4):
    """Relative global dimensionless error; zero band means are guarded."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_same_shape(gt, pred, "ergas")
    if gt.ndim != 3:
        raise DimensionError(f"ergas needs (H, W, c), got {gt.shape}")
    mu = gt.mean(axis=(0, 1))
    rmse2 = np.mean((gt - pred) ** 2, axis=(0, 1))
    denom = np.maximum(mu * mu, _EPS)
    return float(100.0 / scale * np.sqrt(np.mean(rmse2 / denom)))


# ----------------------------------------------------------------------
# Q-index family

def _tile_windows(img, window):
    """Non-overlapping window views, trailing partial tiles dropped."""
    H, W = img.shape[0], img.shape[1]
    if H < window or W < window:
        raise DimensionError(
            f"image {H}x{W} is smaller than the {window}-pixel window"
        )
    out = []
    for i in range(0, H - window + 1, window):
        for j in range(0, W - window + 1, window):
            out.append(img[i:i + window, j:j + window])
    return out


def q_index(a, b, window=32, with_flags=False):
    """Single-band universal quality index, mean over non-overlapping
    windows.

    Each window contributes corr * luminance, where either factor falls
    back to 1 when its denominator vanishes (identical constants differ
    in nothing). The ideal value 1 and the anticorrelated value -1 are
    reached exactly, not just within an epsilon.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b, "q_index")
    if a.ndim != 2:
        raise DimensionError(f"q_index works on single bands, got {a.shape}")
    vals = []
    degenerate = 0
    for wa, wb in zip(_tile_windows(a, window), _tile_windows(b, window)):
        ma, mb = wa.mean(), wb.mean()
        da, db = wa - ma, wb - mb
        va, vb = np.mean(da * da), np.mean(db * db)
        cov = np.mean(da * db)
        d1 = va + vb
        d2 = ma * ma + mb * mb
        if d1 <= _EPS or d2 <= _EPS:
            degenerate += 1
        corr = 1.0 if d1 <= _EPS else 2.0 * cov / d1
        lum = 1.0 if d2 <= _EPS else 2.0 * ma * mb / d2
        vals.append(corr * lum)
    q = float(np.mean(vals))
    if with_flags:
        return q, {"degenerate_windows": degenerate}
    return q


def _cd_conj(z):
    out = -z
    out[..., 0] = z[..., 0]
    return out


def _cd_mul(x, y):
    """Cayley-Dickson product over the trailing axis (length a power of 2).

    (a, b)(c, d) = (ac - conj(d) b, d a + b conj(c)); reals at the base.
    """
    n = x.shape[-1]
    if n == 1:
        return x * y
    h = n // 2
    a, b = x[..., :h], x[..., h:]
    c, d = y[..., :h], y[..., h:]
    return np.concatenate(
        [_cd_mul(a, c) - _cd_mul(_cd_conj(d), b),
         _cd_mul(d, a) + _cd_mul(b, _cd_conj(c))],
        axis=-1,
    )


def _next_pow2(c):
    p = 1
    while p < c:
        p *= 2
    return p


def q2n(gt, pred, window=32, with_flags=False):
    """Hypercomplex quality index: bands become components of one
    2^n-ary number per pixel, correlated per window in magnitude form.

    Band counts that are not a power of two are zero-padded up (flagged);
    a single band has no hypercomplex structure, use q_index for that.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_same_shape(gt, pred, "q2n")
    if gt.ndim != 3:
        raise DimensionError(f"q2n needs (H, W, c), got {gt.shape}")
    c = gt.shape[2]
    if c == 1:
        raise UsageError("q2n is undefined for a single band; use q_index")
    cp = _next_pow2(c)
    padded = cp != c
    if padded:
        pad = [(0, 0), (0, 0), (0, cp - c)]
        gt = np.pad(gt, pad)
        pred = np.pad(pred, pad)

    vals = []
    degenerate = 0
    for wg, wp in zip(_tile_windows(gt, window), _tile_windows(pred, window)):
        z1 = wg.reshape(-1, cp)
        z2 = wp.reshape(-1, cp)
        mu1 = z1.mean(axis=0)
        mu2 = z2.mean(axis=0)
        cov12 = _cd_mul(z1, _cd_conj(z2)).mean(axis=0) - _cd_mul(mu1, _cd_conj(mu2))
        var1 = _cd_mul(z1, _cd_conj(z1)).mean(axis=0)[0] - _cd_mul(mu1, _cd_conj(mu1))[0]
        var2 = _cd_mul(z2, _cd_conj(z2)).mean(axis=0)[0] - _cd_mul(mu2, _cd_conj(mu2))[0]
        m1 = np.linalg.norm(mu1)
        m2 = np.linalg.norm(mu2)
        d1 = var1 + var2
        d2 = m1 * m1 + m2 * m2
        if d1 <= _EPS or d2 <= _EPS:
            degenerate += 1
        corr = 1.0 if d1 <= _EPS else 2.0 * np.linalg.norm(cov12) / d1
        lum = 1.0 if d2 <= _EPS else 2.0 * m1 * m2 / d2
        vals.append(corr * lum)
    q = float(np.mean(vals))
    if with_flags:
        return q, {"padded": padded, "degenerate_windows": degenerate}
    return q


# ----------------------------------------------------------------------
# no-reference metrics

def _clamped_window(img, window):
    return min(window, img.shape[0], img.shape[1])


def d_lambda(fused, lrms, p=1, window=32):
    """Spectral distortion: how much the inter-band Q structure of the
    fused image deviates from the low-resolution original."""
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    if fused.ndim != 3 or lrms.ndim != 3:
        raise DimensionError("d_lambda needs (H, W, c) inputs")
    c = fused.shape[2]
    if c != lrms.shape[2]:
        raise DimensionError(
            f"band mismatch: fused has {c}, low-res has {lrms.shape[2]}"
        )
    if c < 2:
        raise DimensionError("d_lambda needs at least 2 bands")
    wf = _clamped_window(fused, window)
    wl = _clamped_window(lrms, window)
    diffs = []
    for i in range(c):
        for j in range(i + 1, c):
            qf = q_index(fused[:, :, i], fused[:, :, j], window=wf)
            ql = q_index(lrms[:, :, i], lrms[:, :, j], window=wl)
            diffs.append(abs(qf - ql) ** p)
    return float(np.mean(diffs) ** (1.0 / p))


def d_s(fused, lrms, pan, pan_degraded, q=1, window=32):
    """Spatial distortion: per-band Q against the panchromatic image at
    both resolutions (pan_degraded must live on the low-res grid)."""
    fused = np.asarray(fused, dtype=np.float64)
    lrms = np.asarray(lrms, dtype=np.float64)
    pan = np.asarray(pan, dtype=np.float64)
    pan_degraded = np.asarray(pan_degraded, dtype=np.float64)
    if fused.ndim != 3 or lrms.ndim != 3:
        raise DimensionError("d_s needs (H, W, c) image stacks")
    if pan.shape != fused.shape[:2]:
        raise DimensionError(
            f"pan {pan.shape} does not match fused grid {fused.shape[:2]}"
        )
    if pan_degraded.shape != lrms.shape[:2]:
        raise DimensionError(
            f"degraded pan {pan_degraded.shape} does not match low-res "
            f"grid {lrms.shape[:2]}"
        )
    if fused.shape[2] != lrms.shape[2]:
        raise DimensionError("fused and low-res band counts differ")
    wf = _clamped_window(fused, window)
    wl = _clamped_window(lrms, window)
    diffs = []
    for i in range(fused.shape[2]):
        qf = q_index(fused[:, :, i], pan, window=wf)
        ql = q_index(lrms[:, :, i], pan_degraded, window=wl)
        diffs.append(abs(qf - ql) ** q)
    return float(np.mean(diffs) ** (1.0 / q))


def hqnr(dl, ds):
    """Product form: 1 at no distortion, 0 once either term saturates."""
    return float(max(0.0, 1.0 - dl) * max(0.0, 1.0 - ds))


# ----------------------------------------------------------------------
# batch evaluation and reporting

def evaluate_reference(gt, pred, scale=4, window=32):
    return {
        "psnr": psnr(gt, pred),
        "sam": sam(gt, pred),
        "ergas": ergas(gt, pred, scale=scale),
        "q2n": q2n(gt, pred, window=_clamped_window(np.asarray(gt), window)),
    }


def evaluate_noreference(fused, lrms, pan, pan_degraded, window=32):
    dl = d_lambda(fused, lrms, window=window)
    ds = d_s(fused, lrms, pan, pan_degraded, window=window)
    return {"d_lambda": dl, "d_s": ds, "hqnr": hqnr(dl, ds)}


METRIC_ORDER = ("psnr", "sam", "ergas", "q2n", "d_lambda", "d_s", "hqnr")


@dataclass
class MetricsReport:
    """Per-sample metric rows plus run metadata (dataset, model, variant)."""

    rows: list
    metadata: dict

    def means(self):
        cols = [m for m in METRIC_ORDER if m in self.rows[0]] if self.rows else []
        return {m: float(np.mean([r[m] for r in self.rows])) for m in cols}

    def write_csv(self, path):
        return write_report_csv(path, self.rows, metadata=self.metadata)


def write_report_csv(path, rows, metadata=None):
    """CSV report: '#' metadata comments, header, one row per sample,
    and a final mean row.

    Every row must carry an "id" plus the same metric keys.
    """
    if not rows:
        raise ConfigurationError("cannot write an empty report")
    cols = [m for m in METRIC_ORDER if m in rows[0]]
    for r in rows:
        missing = [m for m in cols if m not in r]
        if missing:
            raise ConfigurationError(f"row {r.get('id')!r} lacks {missing}")
    lines = []
    meta = dict(metadata or {})
    meta.setdefault("spectral_distortion", "plain q-index band-pair differences")
    for k in sorted(meta):
        lines.append(f"# {k}={meta[k]}")
    lines.append("id," + ",".join(cols))
    for r in rows:
        lines.append(r["id"] + "," + ",".join(f"{float(r[m]):.10g}" for m in cols))
    lines.append(
        "mean," + ",".join(
            f"{float(np.mean([r[m] for r in rows])):.10g}" for m in cols
        )
    )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path
