import numpy as np
import pytest

from classfool import DenseClassifier, SampleBatch, make_blobs, split_test


def make_glyphs(per_class=150, seed=0):
    """Synthetic 28x28 bar-pattern images in 5 classes, range (0, 255)."""
    rng = np.random.default_rng(seed)
    specs = [("h", 4), ("h", 12), ("h", 20), ("v", 4), ("v", 18)]
    imgs, labels = [], []
    for c, (kind, p) in enumerate(specs):
        for _ in range(per_class):
            img = np.full((28, 28), 30.0)
            a = int(np.clip(p + rng.integers(-2, 3), 0, 23))
            if kind == "h":
                img[a:a + 5, 3:25] = 200.0
            else:
                img[3:25, a:a + 5] = 200.0
            img += rng.uniform(-25, 25, size=(28, 28))
            imgs.append(np.clip(img, 0, 255).ravel())
            labels.append(c)
    return SampleBatch(np.array(imgs), np.array(labels), (0.0, 255.0))


@pytest.fixture(scope="session")
def blob_problem():
    """Small 3-class blob dataset with a fully trained dense victim."""
    batch, centroids = make_blobs(3, 12, 200, spread=0.25, scale=0.03,
                                  value_range=(0.0, 1.0), seed=7)
    train, test = split_test(batch, 30, seed=8)
    model = DenseClassifier(hidden=32, epochs=25, lr=0.2, batch_size=32,
                            seed=0, value_range=(0.0, 1.0))
    model.fit(train.data, train.labels)
    assert model.score(test.data, test.labels) == 1.0
    return {"batch": batch, "train": train, "test": test, "model": model,
            "centroids": centroids}


@pytest.fixture(scope="session")
def glyph_batch():
    return make_glyphs(per_class=60, seed=9)
