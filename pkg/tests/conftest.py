import numpy as np
import pytest

from agnomap import datagen, micronet, pipeline

# Pinned desk-scale setup shared by the heavier tests and the acceptance suite.
DESK_CLASSES = 4
DESK_TRAIN = dict(n_per_class=1000, seed=1)
DESK_TEST = dict(n_per_class=250, seed=2)
SOURCE_SEED = 0
TARGET_SEED = 5


def tiny_net(seed=0, input_shape=(6, 6, 1), num_classes=3, padding="same"):
    """conv-relu-pool-conv-relu-flatten-dense with random biases, small enough for exhaustive finite differences."""
    c = input_shape[2]
    body = [micronet.Conv2d(c, 3, 3, padding), micronet.ReLU(), micronet.MaxPool2d(),
            micronet.Conv2d(3, 4, 3, padding), micronet.ReLU(), micronet.Flatten()]
    shape = input_shape
    for layer in body:
        shape = layer.output_shape(shape)
    model = micronet.Classifier(body + [micronet.Dense(shape[0], num_classes)], input_shape, num_classes)
    micronet.he_uniform_init(model, seed)
    rng = np.random.default_rng(seed + 1000)
    for layer in model.layers:
        if "bias" in layer.params:
            layer.params["bias"] = rng.uniform(-0.1, 0.1, layer.params["bias"].shape).astype(np.float32)
    return model


@pytest.fixture(scope="session")
def desk_data():
    specs = datagen.default_specs(DESK_CLASSES)
    train = datagen.generate(specs, DESK_TRAIN["n_per_class"], DESK_TRAIN["seed"])
    test = datagen.generate(specs, DESK_TEST["n_per_class"], DESK_TEST["seed"])
    return train, test


@pytest.fixture(scope="session")
def desk_model(desk_data):
    train, test = desk_data
    init = micronet.build_classifier(train.image_shape, DESK_CLASSES, (8, 16), SOURCE_SEED)
    return micronet.train(init, train, epochs=10, lr=3e-3, seed=SOURCE_SEED, test=test)


@pytest.fixture(scope="session")
def small_data():
    specs = datagen.default_specs(DESK_CLASSES)
    return datagen.generate(specs, 150, seed=11), datagen.generate(specs, 50, seed=12)


@pytest.fixture(scope="session")
def small_model(small_data):
    """Quick 4-class model for tests that need a trained network but no accuracy floor."""
    train, test = small_data
    init = micronet.build_classifier(train.image_shape, DESK_CLASSES, (8, 16), 3)
    return micronet.train(init, train, epochs=4, lr=3e-3, seed=3, test=test).model


class RunCache:
    """Memoised desk-profile pipeline runs keyed by (concept, run_seed)."""

    def __init__(self, model, dataset):
        self.model, self.dataset = model, dataset
        self.cfg = pipeline.PipelineConfig.desk()
        self._runs = {}

    def get(self, concept, seed):
        key = (concept, seed)
        if key not in self._runs:
            self._runs[key] = pipeline.run_pipeline(self.model, self.dataset, concept, self.cfg, seed)
        return self._runs[key]


@pytest.fixture(scope="session")
def desk_runs(desk_model, desk_data):
    return RunCache(desk_model.model, desk_data[0])


@pytest.fixture(scope="session")
def target_models(desk_data):
    """Independently seeded classifiers trained like the source; call with a seed, results are cached."""
    train, test = desk_data
    cache = {}

    def get(seed):
        if seed not in cache:
            init = micronet.build_classifier(train.image_shape, DESK_CLASSES, (8, 16), seed)
            cache[seed] = micronet.train(init, train, epochs=10, lr=3e-3, seed=seed, test=test)
        return cache[seed]

    return get


def desk_maps(runs, seeds=range(10)):
    return [runs.get(c, s).map for c in range(DESK_CLASSES) for s in seeds]


# one pass/fail line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
