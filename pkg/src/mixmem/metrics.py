"""Evaluation metrics and retrieval protocols over synthetic embeddings.

All metrics are pure numpy and computed in float64.  The N-way top-K and
subset-retrieval protocols take an explicit rng so every reported number is
reproducible from a seed.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ProtocolError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


@dataclass
class MetricReport:
    name: str
    value: float
    std: float = 0.0
    n_trials: int = 1
    config: dict = field(default_factory=dict)

    def validate(self):
        if self.n_trials < 1:
            raise ProtocolError(f"{self.name}: n_trials must be >= 1")
        if self.std < 0.0:
            raise ProtocolError(f"{self.name}: std must be >= 0")
        return self


def _fmt_value(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def format_report(report: MetricReport):
    """One metric per line: name, value, std, n_trials, then sorted config keys."""
    report.validate()
    parts = [f"name={report.name}", f"value={_fmt_value(float(report.value))}",
             f"std={_fmt_value(float(report.std))}", f"n_trials={report.n_trials}"]
    for key in sorted(report.config):
        if "=" in key or " " in key:
            raise ProtocolError(f"config key {key!r} not serializable")
        parts.append(f"{key}={_fmt_value(report.config[key])}")
    return " ".join(parts)


def _parse_value(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            continue
    return text


def parse_report(line):
    fields = {}
    order = []
    for chunk in line.split():
        if "=" not in chunk:
            raise ProtocolError(f"malformed report field {chunk!r}")
        key, _, raw = chunk.partition("=")
        fields[key] = raw
        order.append(key)
    if order[:4] != ["name", "value", "std", "n_trials"]:
        raise ProtocolError(f"report fields out of order: {order[:4]}")
    config = {k: _parse_value(fields[k]) for k in order[4:]}
    return MetricReport(name=fields["name"], value=float(fields["value"]),
                        std=float(fields["std"]), n_trials=int(fields["n_trials"]),
                        config=config).validate()


def format_reports(reports):
    return "".join(format_report(r) + "\n" for r in reports)


def parse_reports(text):
    return [parse_report(line) for line in text.splitlines() if line.strip()]


def nway_topk(probe_scores, gt_class, n_way, top_k, rng, trials=1):
    """Fraction of trials where the true class ranks in the top K of N.

    Each trial draws N-1 distractor classes uniformly without replacement;
    the true class succeeds when fewer than K distractors score strictly
    higher (ties resolve in its favor).
    """
    scores = np.asarray(probe_scores, dtype=np.float64)
    if scores.ndim != 1:
        raise DimensionError(f"probe scores must be a vector, got {scores.shape}")
    n_classes = scores.shape[0]
    if not 2 <= n_way <= n_classes:
        raise ProtocolError(f"n_way={n_way} outside [2, {n_classes}]")
    if not 1 <= top_k < n_way:
        raise ProtocolError(f"top_k={top_k} outside [1, {n_way - 1}]")
    if not 0 <= gt_class < n_classes:
        raise ProtocolError(f"gt_class={gt_class} outside [0, {n_classes})")
    others = np.delete(np.arange(n_classes), gt_class)
    keys = rng.uniform((trials, others.shape[0]))
    picks = np.argsort(keys, axis=1)[:, :n_way - 1]
    n_better = (scores[others][picks] > scores[gt_class]).sum(axis=1)
    return float((n_better < top_k).mean())


def _gaussian_kernel():
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(img, kernel):
    views = np.lib.stride_tricks.sliding_window_view(
        img, (_SSIM_WINDOW, _SSIM_WINDOW))
    return np.tensordot(views, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b):
    """Mean local SSIM over 11x11 Gaussian windows, dynamic range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"ssim needs matching [H, W] images, got {a.shape} / {b.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise DimensionError(f"images must be at least {_SSIM_WINDOW} pixels per side")
    k = _gaussian_kernel()
    mu_a, mu_b = _windowed_mean(a, k), _windowed_mean(b, k)
    var_a = _windowed_mean(a * a, k) - mu_a * mu_a
    var_b = _windowed_mean(b * b, k) - mu_b * mu_b
    cov = _windowed_mean(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE), in decibels; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def temporal_consistency(frame_embeddings):
    """Mean Pearson correlation between consecutive frame embeddings.

    Pairs where either embedding has zero variance are skipped with a
    warning; if every pair is skipped the result is 0.0.
    """
    x = np.asarray(frame_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ProtocolError(f"need at least two [F, d] frames, got {x.shape}")
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    vals = []
    for i in range(x.shape[0] - 1):
        if norms[i] == 0.0 or norms[i + 1] == 0.0:
            warnings.warn(f"zero-variance embedding at frame pair ({i}, {i + 1}), skipped")
            continue
        vals.append(float(centered[i] @ centered[i + 1] / (norms[i] * norms[i + 1])))
    if not vals:
        warnings.warn("all frame pairs skipped, temporal consistency undefined")
        return 0.0
    return float(np.mean(vals))


def epe(flow_a, flow_b):
    """Mean end-point error: Euclidean norm of the flow difference per pixel."""
    a = np.asarray(flow_a, dtype=np.float64)
    b = np.asarray(flow_b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 2:
        raise DimensionError(f"epe needs matching [..., 2] flows, got {a.shape} / {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


def retrieval_protocol(fmri_embeds, target_embeds, rng, subset_size=300):
    """Top-1 retrieval accuracy over disjoint shuffled candidate subsets.

    Returns (forward, backward): probe-to-target and target-to-probe top-1
    rates, each averaged over the floor(M / subset_size) subsets.  Rows left
    over after the partition are dropped.
    """
    f = np.asarray(fmri_embeds, dtype=np.float64)
    t = np.asarray(target_embeds, dtype=np.float64)
    if f.shape != t.shape or f.ndim != 2:
        raise DimensionError(f"embedding shapes differ: {f.shape} vs {t.shape}")
    m = f.shape[0]
    if m < subset_size:
        raise ProtocolError(f"need at least {subset_size} pairs, got {m}")
    order = rng.permutation(m)
    n_subsets = m // subset_size
    fwd, bwd = [], []
    for s in range(n_subsets):
        idx = order[s * subset_size:(s + 1) * subset_size]
        sim = _unit_rows(f[idx]) @ _unit_rows(t[idx]).T
        diag = np.arange(subset_size)
        fwd.append(float((sim.argmax(axis=1) == diag).mean()))
        bwd.append(float((sim.argmax(axis=0) == diag).mean()))
    return float(np.mean(fwd)), float(np.mean(bwd))
