"""
Write an untrained checkpoint so the inference API can start before any training run.
Uses the vocabulary at VOCABULARY_PATH, or the default shapes-world vocabulary when it is missing.
"""
import argparse
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from decola.config import ModelConfig, settings
from decola.ml.model import DecolaDetector, save_checkpoint, seed_everything
from decola.ml.vocabulary import Vocabulary
from decola.utils.shapes import ShapesWorldSpec

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--out", default=settings.CHECKPOINT_PATH)
parser.add_argument("--phase", type=int, choices=[1, 2], default=2)
parser.add_argument("--seed", type=int, default=7)
parser.add_argument("--embed-dim", type=int, default=64)
args = parser.parse_args()

seed_everything(args.seed)
config = ModelConfig(embed_dim=args.embed_dim)
if os.path.exists(settings.VOCABULARY_PATH):
    vocabulary = Vocabulary.from_file(settings.VOCABULARY_PATH, dim=config.embed_dim)
else:
    vocabulary = ShapesWorldSpec().vocabulary(args.seed, config.embed_dim)

model = DecolaDetector(config, vocabulary, phase=args.phase)
header = save_checkpoint(model, args.out, step=0, seed=args.seed)

print("Checkpoint created successfully!")
print(f"Checkpoint path: {args.out}")
print(f"Phase: {args.phase}  classes: {len(vocabulary.classes)}  parameters: {len(header.variables)} tensors")
print(f"Parameter digest: {header.param_digest[:16]}")
