"""Smoke test for the patchmoe_py extension.

Build the extension first (see README), then run:
    python3 python/smoke.py
"""

import json
import sys
import tempfile

import patchmoe_py as pm

SPEC = """
num_classes = 4
families = 2
image_size = 16
glyph_patches = 1
samples_per_class = 6
seed = 3
"""

CONFIG = """
seed = 1

[model]
image_size = 16
patch_size = 8
pixels_per_patch = 4
dim = 8
ffn_dim = 16
layers = 2
heads = 2
num_classes = 4
moe_layers = [1]
experts = 2

[router_init]
k = 4
samples_per_class = 2

[pretrain]
epochs = 2

[optim]
epochs = 1
batch_size = 8
"""


def main():
    # clustering primitives
    points = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.0, 5.2]]
    merges = pm.ward_cluster(points)
    assert len(merges) == 3 and merges[0][:2] == (0, 1), merges
    labels = pm.ward_labels(points, 2)
    assert labels == [0, 0, 1, 1], labels
    assert pm.adjusted_rand_index(labels, [1, 1, 0, 0]) == 1.0
    picked = pm.select_representative_patches([[[1, 0]], [[1, 0]], [[1, 0]], [[0, 1]]], 2, 1)
    assert picked == [0, 1], picked
    ones = [[1.0] * 4]
    assert all(v > 0 for v in pm.figure_d_variant(ones * 16, [ones])[0])
    assert all(v == 0 for v in pm.figure_d_variant(ones * 64, [ones])[0])

    # pipeline
    data = pm.Dataset.synthetic(SPEC)
    assert len(data) == 24 and data.class_counts() == [6] * 4
    config = pm.RunConfig(CONFIG)
    dense, log = pm.pretrain(config, data)
    assert dense.stage == "dense" and log.startswith("epoch")
    moe = pm.moefy(dense, data, config)
    assert moe.stage == "moe"
    report = json.loads(moe.inspect())
    layer = report["layers"][0]
    assert layer["per_expert_walked"] == [layer["per_expert_closed_form"]] * 2
    tuned, _ = pm.finetune(moe, data, config)
    print(tuned.evaluate(data), end="")
    affinity = tuned.affinity_post(data, 1)
    assert all(abs(sum(row) - 1.0) < 1e-6 for row in affinity)

    with tempfile.TemporaryDirectory() as tmp:
        tuned.save(tmp)
        again = pm.Checkpoint.load(tmp)
        assert again.evaluate(data) == tuned.evaluate(data)

    try:
        pm.finetune(dense, data, config)
    except OSError as err:
        assert "stage" in str(err)
    else:
        sys.exit("finetuning a dense checkpoint should fail")

    print("smoke test passed")


if __name__ == "__main__":
    main()
