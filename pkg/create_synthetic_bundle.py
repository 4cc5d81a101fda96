"""
Script to create the synthetic example bundles.

Writes two bundles under examples_data/ (or the directory given as the
first argument):
  oracle/        perfect two-view predictions plus a held-out target camera
  disagreement/  per-view argmax disagreement resolved by aggregation
"""

import os
import sys

from src.bundle_io import write_bundle
from src.synthetic import disagreement_scene, oracle_scene

output_root = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(os.path.abspath(__file__)), 'examples_data')

scenes = {
    'oracle': oracle_scene(),
    'disagreement': disagreement_scene(),
}

for name, bundle in scenes.items():
    path = write_bundle(bundle, os.path.join(output_root, name))
    print(f"Bundle created: {path}")
    print(f"  Gaussians: {bundle.field.count}")
    print(f"  Views: {len(bundle.cams)}, targets: {len(bundle.target_cams)}")
    print(f"  Tensors: {', '.join(sorted(bundle.tensors))}")

edit_plan = os.path.join(output_root, 'remove_chair.yaml')
with open(edit_plan, 'w') as f:
    f.write("edits:\n  - kind: remove\n    ins_id: 1\n")
print(f"Edit plan created: {edit_plan}")

print("\nTry:")
print(f"  python -m src.main lift {os.path.join(output_root, 'oracle')} --out output/lift")
print(f"  python -m src.main edit {os.path.join(output_root, 'oracle')} {edit_plan} --out output/edit")
