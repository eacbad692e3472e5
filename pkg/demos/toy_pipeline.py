"""End-to-end run on the articulated toy chain: data, training, metrics and the applications.

Run: python3 demos/toy_pipeline.py [work_dir] [steps]
The default 5000 steps take roughly half an hour on one CPU core; 300 steps show the
mechanics in a couple of minutes but give a blurry template.
"""
import json
import sys
from pathlib import Path

import numpy as np

from deformcorr import cli, training as T

work = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run")
steps = sys.argv[2] if len(sys.argv) > 2 else "5000"
data, ck = work / "data", work / "model.bin"


def run(*args):
    print("$ deformcorr", " ".join(map(str, args)))
    rc = cli.main([str(a) for a in args])
    if rc:
        sys.exit(rc)


# Twenty poses of a three-segment capsule chain with exact SDF and correspondence oracles.
run("gen", "--out", data)
run("train", "--data", data, "--checkpoint", ck, "--steps", steps)

# Training-set reconstruction and template-space correspondence against the oracle.
run("eval", "--checkpoint", ck, "--data", data, "--out", work / "eval", "--poses", "0,5,10,15", "--corr-points", "200")
run("template", "--checkpoint", ck, "--out", work / "template")

# Fit a latent to an observation rotated by 30 degrees; the fit undoes the rotation.
run("fit", "--checkpoint", ck, "--data", data, "--pose", "5", "--out", work / "fit", "--rotate-deg", "30")
run("texture", "--checkpoint", ck, "--data", data, "--src", "0", "--dst", "10", "--out", work / "texture")

# Drag the template point with the largest x a little further out.
mesh = T.extract_template(T.load_checkpoint(ck), 64)
if mesh.n_vertices:
    p1 = mesh.vertices[np.argmax(mesh.vertices[:, 0])]
    cons = work / "constraints.json"
    cons.write_text(json.dumps([[p1.tolist(), (p1 + [0.08, 0, 0]).tolist()]]))
    run("edit", "--checkpoint", ck, "--out", work / "edit", "--constraints", cons)
print(f"outputs under {work}/")
