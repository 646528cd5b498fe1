"""A tour of the synthetic corpus: concepts, renders, captions, vocabulary.

Writes a contact sheet of a few concepts under different backgrounds and
nuisance seeds to demos/out/corpus_sheet.png.
"""

import os

import numpy as np
from PIL import Image

from snapdiff.config import make_config
from snapdiff.corpus import (Corpus, TEMPLATES, build_vocabulary, caption,
                             caption_with_background, render_concept)

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

cfg = make_config("desk")
corpus = Corpus.generate(cfg)

print(f"{len(corpus.concepts)} concepts, {len(corpus.samples)} images, "
      f"{len(corpus.split.train_ids)} train / {len(corpus.split.test_ids)} test")
print()

print("first five concepts:")
for c in corpus.concepts[:5]:
    print(f"  id={c.identity_id:3d}  {c.name}  (scale {c.scale:.2f})")
print()

c = corpus.concepts[0]
print("caption templates applied to", repr(c.name))
for t in TEMPLATES[:5]:
    print("  ", caption(c.name, t))
print("  ", caption_with_background(c.name, TEMPLATES[0], background_id=3))
print(f"({len(TEMPLATES)} templates total)")
print()

vocab = build_vocabulary()
print(f"vocabulary: {len(vocab)} tokens (closed, whitespace-delimited)")
print(" ", " ".join(vocab[:20]), "...")
print()

# contact sheet: 4 concepts x 6 variations
rows = []
for c in corpus.concepts[:4]:
    row = []
    for k in range(6):
        s = render_concept(c, background_id=k % 8, nuisance_seed=k * 37 + 1)
        row.append(np.round(s.image * 255).astype(np.uint8))
    rows.append(np.concatenate(row, axis=1))
sheet = np.concatenate(rows, axis=0)
path = os.path.join(out_dir, "corpus_sheet.png")
Image.fromarray(sheet).resize((sheet.shape[1] * 4, sheet.shape[0] * 4),
                              Image.NEAREST).save(path)
print("wrote", path)
