"""Linear-Gaussian synthetic data with a shared latent across every modality.

Each sample draws one latent vector; the voxel signal, text / image / action
embeddings, superclass labels, rendered clip, and ground-truth optical flow
are all deterministic functions of it (plus controlled noise).  Because the
mixing matrices are known, alignment and retrieval ceilings are computable
exactly, which is what makes the end-to-end pipeline testable.
"""

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Rng

MODALITIES = ("text", "image", "action")

# stanine-style threshold: P(g.z > 0.6745) = 0.25 for unit-norm rows g
_LABEL_THRESHOLD = 0.6745

CLASS_NAMES = ("accessory", "animal", "appliance", "electronic", "food",
               "furniture", "indoor", "kitchen", "man", "others", "outdoor",
               "crowd", "sports", "vehicle", "woman")


class SuperclassMap:
    """Fixed 15-class inventory plus a keyword lookup table."""

    def __init__(self, table):
        self.classes = CLASS_NAMES
        for keyword, cls in table.items():
            if cls not in CLASS_NAMES:
                raise ConfigError(f"keyword {keyword!r} maps to unknown class {cls!r}")
        self.table = dict(table)

    @classmethod
    def from_text(cls, text):
        table = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ConfigError(f"line {lineno}: expected 'keyword: class', got {line!r}")
            key, _, value = line.partition(":")
            table[key.strip().lower()] = value.strip().lower()
        return cls(table)

    @classmethod
    def load(cls, path=None):
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        text = resources.files("mixmem").joinpath(
            "data/superclass_keywords.txt").read_text(encoding="utf-8")
        return cls.from_text(text)

    def class_index(self, name):
        return self.classes.index(name)

    def map_keywords(self, words):
        """Union multi-hot over the classes of the given keywords.

        Unrecognized keywords count as "others"; an empty list maps to the
        all-zero vector.
        """
        hot = np.zeros(len(self.classes), dtype=np.float32)
        for word in words:
            cls = self.table.get(str(word).strip().lower(), "others")
            hot[self.class_index(cls)] = 1.0
        return hot


def map_keywords(words, smap: SuperclassMap):
    return smap.map_keywords(words)


@dataclass
class GeneratorConfig:
    latent_dim: int = 16
    n_voxels: int = 256
    d_clip: int = 64
    d_act: int = 48
    n_classes: int = 15
    signal_noise_sigma: float = 0.1
    embed_noise_sigma: float = 0.05
    n_train: int = 512
    n_test: int = 300
    seed: int = 0
    frames: int = 8
    channels: int = 3
    height: int = 16
    width: int = 16
    blob_sigma: float = 2.8
    pos_coupling: float = 0.3
    uninformative_modalities: tuple = ()

    def validate(self):
        for name in ("latent_dim", "n_voxels", "d_clip", "d_act", "n_classes",
                     "frames", "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"GeneratorConfig.{name} must be positive")
        for name in ("signal_noise_sigma", "embed_noise_sigma", "blob_sigma",
                     "pos_coupling"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"GeneratorConfig.{name} must be >= 0")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be >= 0")
        if self.d_clip < 3:
            raise ConfigError("d_clip must leave room for the position readout")
        bad = set(self.uninformative_modalities) - set(MODALITIES)
        if bad:
            raise ConfigError(f"unknown modalities {sorted(bad)}; pick from {MODALITIES}")
        return self


@dataclass
class SignalSample:
    signal: np.ndarray      # [n_voxels]
    e_txt: np.ndarray       # [d_clip]
    e_img: np.ndarray       # [frames, d_clip], one embedding per frame
    e_act: np.ndarray       # [d_act]
    labels: np.ndarray      # multi-hot [n_classes], at least one positive
    clip: np.ndarray        # [frames, channels, height, width] in [-1, 1]
    flow_gt: np.ndarray     # [frames-1, height, width, 2], (dx, dy) per pixel
    latent: np.ndarray      # [latent_dim]; oracle-only, never fed to training

    keywords: list = field(default_factory=list)


@dataclass
class MixingMatrices:
    """Fixed random maps from the latent to every observable, drawn once."""

    signal: np.ndarray      # [n_voxels, latent_dim]
    text: np.ndarray        # [d_clip, latent_dim]
    image: np.ndarray       # [d_clip, latent_dim]
    action: np.ndarray      # [d_act, latent_dim]
    pos_readout: np.ndarray  # [d_clip, 2], orthogonal to range(image)
    labels: np.ndarray      # [n_classes, latent_dim], unit-norm rows
    pos0: np.ndarray        # [2, latent_dim]
    vel: np.ndarray         # [2, latent_dim]


def make_mixing(cfg: GeneratorConfig, rng: Rng) -> MixingMatrices:
    d = cfg.latent_dim
    scale = 1.0 / np.sqrt(d)
    m_img = rng.split("image").normal((cfg.d_clip, d)) * scale
    raw = rng.split("pos").normal((cfg.d_clip, 2))
    # project the position readout out of range(image) so pseudo-inverse
    # latent recovery from frame embeddings ignores the blob position term
    q, _ = np.linalg.qr(m_img)
    raw -= q @ (q.T @ raw)
    raw /= np.linalg.norm(raw, axis=0, keepdims=True)
    g = rng.split("labels").normal((cfg.n_classes, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return MixingMatrices(
        signal=rng.split("signal").normal((cfg.n_voxels, d)) * scale,
        text=rng.split("text").normal((cfg.d_clip, d)) * scale,
        image=m_img,
        action=rng.split("action").normal((cfg.d_act, d)) * scale,
        pos_readout=raw,
        labels=g,
        pos0=rng.split("pos0").normal((2, d)) * scale,
        vel=rng.split("vel").normal((2, d)) * scale)


def _normalize(v):
    return v / max(np.linalg.norm(v), 1e-12)


def _labels_from_latent(z, mix, n_classes):
    proj = mix.labels @ z
    hot = (proj > _LABEL_THRESHOLD).astype(np.float32)
    if not hot.any():
        hot[int(np.argmax(proj))] = 1.0
    return hot


_CHANNEL_GAINS = (1.0, 0.8, 0.6)


def _render_clip(cfg, positions):
    """Gaussian blob translating along `positions` [frames, 2] in (x, y)."""
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width]
    frames = np.empty((cfg.frames, cfg.channels, cfg.height, cfg.width),
                      dtype=np.float32)
    for f in range(cfg.frames):
        px, py = positions[f]
        blob = np.exp(-((xs - px) ** 2 + (ys - py) ** 2)
                      / (2.0 * cfg.blob_sigma ** 2))
        for c in range(cfg.channels):
            gain = _CHANNEL_GAINS[c % len(_CHANNEL_GAINS)]
            frames[f, c] = 2.0 * gain * blob - 1.0
    return frames


def _make_sample(cfg, mix, smap, rng) -> SignalSample:
    z = rng.split("latent").normal((cfg.latent_dim,))
    noisy = {m: m in cfg.uninformative_modalities for m in MODALITIES}

    signal = mix.signal @ z + cfg.signal_noise_sigma * rng.split("sn").normal(
        (cfg.n_voxels,))

    def embed(matrix, label, dim):
        core = 0.0 if noisy[label] else matrix @ z
        return _normalize(core + _embed_sigma(cfg, label)
                          * rng.split(f"en_{label}").normal((dim,)))

    e_txt = embed(mix.text, "text", cfg.d_clip)
    e_act = embed(mix.action, "action", cfg.d_act)

    center = np.array([(cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0])
    span = min(cfg.width, cfg.height)
    p0 = center + np.clip(mix.pos0 @ z * (span / 6.0), -span / 4.0, span / 4.0)
    v = np.clip(mix.vel @ z * 0.6, -1.25, 1.25)
    positions = p0[None, :] + np.arange(cfg.frames)[:, None] * v[None, :]

    img_noise = rng.split("en_image").normal((cfg.frames, cfg.d_clip))
    e_img = np.empty((cfg.frames, cfg.d_clip), dtype=np.float64)
    for f in range(cfg.frames):
        if noisy["image"]:
            e_img[f] = _normalize(img_noise[f])
            continue
        pos_norm = (positions[f] - center) / (span / 4.0)
        e_img[f] = _normalize(mix.image @ z
                              + cfg.pos_coupling * (mix.pos_readout @ pos_norm)
                              + cfg.embed_noise_sigma * img_noise[f])

    labels = _labels_from_latent(z, mix, cfg.n_classes)
    keywords = [smap.classes[i] for i in np.flatnonzero(labels)] if smap else []

    flow = np.broadcast_to(v.astype(np.float32),
                           (cfg.frames - 1, cfg.height, cfg.width, 2)).copy()
    return SignalSample(
        signal=signal.astype(np.float32),
        e_txt=e_txt.astype(np.float32),
        e_img=e_img.astype(np.float32),
        e_act=e_act.astype(np.float32),
        labels=labels,
        clip=_render_clip(cfg, positions),
        flow_gt=flow,
        latent=z.astype(np.float32),
        keywords=keywords)


def _embed_sigma(cfg, label):
    # a modality marked uninformative becomes a pure random direction
    return 1.0 if label in cfg.uninformative_modalities else cfg.embed_noise_sigma


def generate(cfg: GeneratorConfig, smap: SuperclassMap = None):
    """Build (train, test) sample lists deterministically from cfg.seed."""
    cfg.validate()
    if cfg.n_classes == len(CLASS_NAMES) and smap is None:
        smap = SuperclassMap.load()
    root = Rng(cfg.seed)
    mix = make_mixing(cfg, root.split("mixing"))
    train = [_make_sample(cfg, mix, smap, root.split(f"train{i}"))
             for i in range(cfg.n_train)]
    test = [_make_sample(cfg, mix, smap, root.split(f"test{i}"))
            for i in range(cfg.n_test)]
    return train, test


def recover_latent(vec, matrix):
    """Least-squares latent estimate from one observable; oracle use only."""
    sol, *_ = np.linalg.lstsq(matrix, np.asarray(vec, dtype=np.float64),
                              rcond=None)
    return sol


def stack_field(samples, name):
    arrs = [getattr(s, name) for s in samples]
    if not arrs:
        raise DimensionError("no samples to stack")
    return np.stack(arrs)
