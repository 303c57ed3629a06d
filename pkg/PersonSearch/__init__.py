"""
PersonSearch is a Python library for person search: finding a query person, given as a
box in one image, among the people of a set of uncropped gallery images.

A single convolutional backbone serves both tasks. Its first stages are shared; the
detection head finishes the backbone and proposes boxes, while a re-identification branch
pools every box from the shared maps and runs its own copy of the remaining stages to
produce a unit-norm embedding. Where the backbone splits (`J2`, `J3` or `J4`) trades runtime for
accuracy, and training happens in two steps so that detection data without identity labels
can be used:

```python
from PersonSearch.Dataset import ImageStore, load_manifest
from PersonSearch.Networks.Backbone import split_config
from PersonSearch.Training import build_feature_cache, train_detection, train_reid
from PersonSearch.ValidationModels.Pipeline import TrainConfig

config = TrainConfig.desk()
split = split_config("J3")
store = ImageStore("data")
detection = load_manifest("data/domA-detection.jsonl")
reid = load_manifest("data/domA-reid.jsonl")

model, _ = train_detection([detection], split, config, store)
cache = build_feature_cache(model, reid, split, store)
model, _ = train_reid(model, cache, split, config)
```

A trained model is searched through a `JointSearcher`, which returns every detection of an
image with its embedding; the disjoint baseline (a detector followed by a standalone
extractor on resized crops) shares the same interface:

```python
from PersonSearch.Inference import JointSearcher

searcher = JointSearcher(model)
results = searcher.search(store.load("domA/test/00000.png"))
```

`PersonSearch.Evaluation` scores searchers under the gallery-size and boxes-per-image
protocols, `PersonSearch.Bench` times the joint pipelines against the baseline, and
`PersonSearch.Synth` generates the two-domain synthetic benchmark everything runs on. The
`person-search` command (see `PersonSearch.Cli`) chains these steps into reproducible runs.

Tensors are CHW float images in [0, 1] on the CPU; boxes are `BoundingBox` models in pixel
coordinates.
"""
