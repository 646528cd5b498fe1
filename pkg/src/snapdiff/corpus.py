"""Procedural concept corpus: factorized shape/color/texture identities rendered
onto grayscale backgrounds with position jitter, plus captions and the
disjoint train/test split."""

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image

SHAPES = ["circle", "square", "triangle", "star", "cross", "ring", "diamond", "hexagon"]

# Saturated palette; hues spread around the wheel so the dominant-hue oracle
# can tell them apart.
PALETTE = {
    "red": (1.00, 0.00, 0.00),
    "orange": (1.00, 0.50, 0.00),
    "yellow": (1.00, 0.95, 0.05),
    "lime": (0.60, 1.00, 0.05),
    "green": (0.05, 0.85, 0.10),
    "teal": (0.00, 0.85, 0.65),
    "cyan": (0.05, 0.90, 1.00),
    "azure": (0.05, 0.45, 1.00),
    "blue": (0.10, 0.10, 1.00),
    "purple": (0.55, 0.10, 0.95),
    "magenta": (0.95, 0.05, 0.90),
    "pink": (1.00, 0.35, 0.60),
}
COLORS = list(PALETTE)

TEXTURES = ["solid", "stripes", "dots", "checker"]
# adjective used in captions for each texture
TEXTURE_WORDS = {"solid": "solid", "stripes": "striped", "dots": "dotted", "checker": "checkered"}

PLACEHOLDER = "{}"

# Neutral contextual caption templates; every template carries exactly one slot.
TEMPLATES = [
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a photo of my {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a photo of one {}",
    "a close-up photo of the {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a good photo of a {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "a photo of the large {}",
    "a photo of a cool {}",
    "a photo of a small {}",
]

N_BACKGROUNDS = 8
# background 0 is pure black; the rest are dark tints of palette colors so
# captions can mention them ("... on a blue background")
BACKGROUND_NAMES = ["black", "red", "green", "blue", "yellow", "purple", "cyan", "orange"]
BACKGROUND_TINT = 0.22


def background_rgb(background_id):
    name = BACKGROUND_NAMES[background_id % N_BACKGROUNDS]
    if name == "black":
        return np.zeros(3)
    return BACKGROUND_TINT * np.array(PALETTE[name])


def caption_with_background(name, template, background_id):
    base = caption(name, template)
    bg = BACKGROUND_NAMES[background_id % N_BACKGROUNDS]
    if bg == "black":
        return base
    return f"{base} on a {bg} background"


@dataclass(frozen=True)
class ConceptSpec:
    identity_id: int
    shape: str
    color: str
    texture: str
    scale: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"invalid attribute shape: {self.shape!r}")
        if self.color not in PALETTE:
            raise ValueError(f"invalid attribute color: {self.color!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"invalid attribute texture: {self.texture!r}")
        if not 0.3 <= self.scale <= 0.7:
            raise ValueError(f"invalid attribute scale: {self.scale}")

    @property
    def rgb(self):
        return np.array(PALETTE[self.color], dtype=np.float64)

    @property
    def name(self):
        """Caption words for the concept, e.g. 'red striped square'."""
        return f"{self.color} {TEXTURE_WORDS[self.texture]} {self.shape}"


@dataclass
class RenderedSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    concept: ConceptSpec
    background_id: int
    nuisance_seed: int


def shape_mask(shape, size, scale, cx, cy):
    """Boolean foreground mask for a shape centered at (cx, cy) in pixel units."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = xx - cx
    y = yy - cy
    r = scale * size / 2.0
    if shape == "circle":
        return x**2 + y**2 <= r**2
    if shape == "ring":
        d2 = x**2 + y**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        return (np.abs(x) <= r * 0.9) & (np.abs(y) <= r * 0.9)
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= r * 1.15
    if shape == "cross":
        w = 0.38 * r
        return ((np.abs(x) <= w) & (np.abs(y) <= r)) | ((np.abs(y) <= w) & (np.abs(x) <= r))
    if shape == "triangle":
        # upward triangle inscribed in radius r
        h = 1.5 * r
        top = -r
        return (y >= top) & (y <= top + h) & (np.abs(x) <= (y - top) / h * r)
    if shape == "hexagon":
        q = 0.92 * r
        return (np.abs(x) <= q * np.sqrt(3) / 2) & (np.abs(y) + np.abs(x) / np.sqrt(3) <= q)
    if shape == "star":
        theta = np.arctan2(y, x)
        rad = np.sqrt(x**2 + y**2)
        # 5-point star: radius modulated between inner and outer radius
        k = 0.5 * (1 + np.cos(5 * (theta - np.pi / 2)))
        bound = (0.45 + 0.68 * k) * r
        return rad <= bound
    raise ValueError(f"invalid attribute shape: {shape!r}")


def _texture_weight(texture, size, rng_phase):
    """Per-pixel brightness factor (1.0 = full color, lower = darkened color)."""
    yy, xx = np.mgrid[0:size, 0:size]
    dark = 0.55
    if texture == "solid":
        return np.ones((size, size))
    if texture == "stripes":
        period = max(4, size // 8)
        band = ((yy + rng_phase) // (period // 2)) % 2
        return np.where(band == 0, 1.0, dark)
    if texture == "checker":
        cell = max(4, size // 8)
        par = ((xx // (cell // 2)) + (yy // (cell // 2))) % 2
        return np.where(par == 0, 1.0, dark)
    if texture == "dots":
        period = max(4, size // 8)
        cyc_x = (xx + rng_phase) % period
        cyc_y = (yy + rng_phase) % period
        c = period / 2.0 - 0.5
        dot = (cyc_x - c) ** 2 + (cyc_y - c) ** 2 <= (period / 4.0) ** 2
        return np.where(dot, dark, 1.0)
    raise ValueError(f"invalid attribute texture: {texture!r}")


def render_concept(concept, background_id, nuisance_seed, size=32):
    """Deterministically render a concept on a grayscale background.

    The nuisance seed controls position jitter, texture phase and a touch of
    pixel noise; nuisance_seed == 0 renders the canonical clean view (centered,
    noise free). The background level depends only on background_id, so
    background 0 is pure black.
    """
    # backgrounds are dark so foreground value/saturation stay distinctive
    img = np.broadcast_to(background_rgb(background_id), (size, size, 3)).copy()

    if nuisance_seed == 0:
        jx = jy = 0
        phase = 0
        noise = None
    else:
        rng = np.random.Generator(
            np.random.PCG64([concept.identity_id, background_id, nuisance_seed]))
        max_jitter = max(1, int(size * (1 - concept.scale) / 2) - 1)
        jx = int(rng.integers(-max_jitter, max_jitter + 1))
        jy = int(rng.integers(-max_jitter, max_jitter + 1))
        phase = int(rng.integers(0, 4))
        noise = rng.normal(0, 0.01, img.shape)

    cx = size / 2.0 + jx
    cy = size / 2.0 + jy
    mask = shape_mask(concept.shape, size, concept.scale, cx, cy)

    weight = _texture_weight(concept.texture, size, phase)
    color = concept.rgb
    img[mask] = weight[mask, None] * color[None, :]

    if noise is not None:
        img += noise
    return RenderedSample(np.clip(img, 0.0, 1.0), concept, background_id, nuisance_seed)


def make_concepts(n_concepts, seed):
    """Sample n distinct (shape, color, texture) identities; id <-> tuple is a bijection."""
    combos = [(s, c, t) for s in SHAPES for c in COLORS for t in TEXTURES]
    if n_concepts > len(combos):
        raise ValueError(f"at most {len(combos)} distinct concepts available")
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.permutation(len(combos))[:n_concepts]
    concepts = []
    for i, k in enumerate(picks):
        s, c, t = combos[k]
        concepts.append(ConceptSpec(i, s, c, t, scale=float(rng.uniform(0.4, 0.65))))
    return concepts


@dataclass
class CorpusSplit:
    train_ids: list
    test_ids: list


def make_split(n_concepts, n_train, seed):
    if not 0 <= n_train <= n_concepts:
        raise ValueError("n_train must be in [0, n_concepts]")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n_concepts)
    return CorpusSplit(sorted(int(i) for i in order[:n_train]),
                       sorted(int(i) for i in order[n_train:]))


def caption(name, template):
    if template.count(PLACEHOLDER) != 1:
        raise ValueError("template must contain exactly one '{}' slot")
    return template.replace(PLACEHOLDER, name)


def build_vocabulary():
    """Closed, sorted vocabulary: pad + placeholder + anchor + every caption word."""
    words = set()
    for t in TEMPLATES:
        words.update(w for w in t.lower().split() if w != PLACEHOLDER)
    words.update(COLORS)
    words.update(TEXTURE_WORDS.values())
    words.update(SHAPES)
    words.update(["on", "background", "black", "object"])
    vocab = ["<pad>", "*"] + sorted(words)
    assert len(vocab) <= 128
    return vocab


class Corpus:
    """In-memory corpus: concepts, rendered samples, split."""

    def __init__(self, concepts, samples, split, canvas):
        self.concepts = concepts
        self.samples = samples  # list of RenderedSample
        self.split = split
        self.canvas = canvas

    @classmethod
    def generate(cls, cfg):
        seed = cfg.stage_seed("corpus")
        concepts = make_concepts(cfg.n_concepts, seed)
        split = make_split(cfg.n_concepts, cfg.n_train, seed + 1)
        samples = []
        for concept in concepts:
            for j in range(cfg.images_per_concept):
                samples.append(render_concept(concept, background_id=j % N_BACKGROUNDS,
                                              nuisance_seed=seed * 1000 + j + 1, size=cfg.canvas))
        return cls(concepts, samples, split, cfg.canvas)

    def samples_of(self, identity_id):
        return [s for s in self.samples if s.concept.identity_id == identity_id]

    def images_array(self):
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def save(self, root):
        os.makedirs(os.path.join(root, "images"), exist_ok=True)
        records = []
        for i, s in enumerate(self.samples):
            fname = f"images/{i:05d}.png"
            arr = np.round(s.image * 255).astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(root, fname))
            records.append({
                "identity_id": s.concept.identity_id,
                "shape": s.concept.shape,
                "color": s.concept.color,
                "texture": s.concept.texture,
                "scale": s.concept.scale,
                "background_id": s.background_id,
                "nuisance_seed": s.nuisance_seed,
                "path": fname,
            })
        manifest = {"canvas": self.canvas, "samples": records}
        with open(os.path.join(root, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
        with open(os.path.join(root, "split.json"), "w") as f:
            json.dump(asdict(self.split), f)

    @classmethod
    def load(cls, root):
        with open(os.path.join(root, "manifest.json")) as f:
            manifest = json.load(f)
        with open(os.path.join(root, "split.json")) as f:
            split = CorpusSplit(**json.load(f))
        concepts = {}
        samples = []
        for rec in manifest["samples"]:
            cid = rec["identity_id"]
            if cid not in concepts:
                concepts[cid] = ConceptSpec(cid, rec["shape"], rec["color"], rec["texture"], rec["scale"])
            img = np.asarray(Image.open(os.path.join(root, rec["path"])), dtype=np.float64) / 255.0
            samples.append(RenderedSample(img, concepts[cid], rec["background_id"], rec["nuisance_seed"]))
        concept_list = [concepts[i] for i in sorted(concepts)]
        return cls(concept_list, samples, split, manifest["canvas"])
