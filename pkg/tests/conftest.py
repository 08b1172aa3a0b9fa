import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plma import tensor as T

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_default():
    """Tests run at 64-bit unless they ask otherwise."""
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# Synthetic motif benchmark shared by the acceptance and protocol tests

import time  # noqa: E402
from dataclasses import dataclass, field  # noqa: E402

from plma.data import LabCatalog  # noqa: E402
from plma.grouping import group_lab_sequences, split_grouped  # noqa: E402
from plma.model import AttributionModel  # noqa: E402
from plma.synthetic import make_motif_dataset  # noqa: E402
from plma.tokenizer import bpe_train  # noqa: E402
from plma.training import TrainConfig, fit  # noqa: E402

BENCH_EPOCHS = 30


def bench_config(head: str, **kw) -> TrainConfig:
    base = dict(head=head, kernel_sizes=tuple(range(1, 7)), filters=32, embed_dim=32, metric_dim=32, margin=0.2,
                epochs=BENCH_EPOCHS, batch_size=16, max_lr=1e-2, seed=0, restore_best=False)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class Benchmark:
    records: list
    motifs: dict
    groups: list
    plan: object
    bpe: object
    catalog: LabCatalog
    models: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def side(self, which):
        return [r for r in self.records if self.plan.assignment[r.sequence_id] == which]


@pytest.fixture(scope="session")
def benchmark():
    """20 labs x 30 plasmids, 80/20 group split, both heads trained at the reduced size."""
    t0 = time.perf_counter()
    T.set_default_dtype(np.float32)
    records, motifs = make_motif_dataset(n_labs=20, per_lab=30, motif_len=30, backbone_len=2000, seed=0)
    groups = group_lab_sequences(records, 0.1)
    plan = split_grouped(groups, 0.2, seed=0)
    bench = Benchmark(records, motifs, groups, plan, None, LabCatalog.from_records(records))
    bench.bpe = bpe_train([r.sequence for r in bench.side("train")])
    bench.seconds["prepare"] = time.perf_counter() - t0
    for head in ("triplet", "softmax"):
        t = time.perf_counter()
        cfg = bench_config(head)
        model = AttributionModel.initialize(cfg.encoder_config(bench.bpe.vocab_size, len(bench.catalog)),
                                            seed=cfg.seed)
        res = fit(model, records, plan, bench.bpe, bench.catalog, cfg)
        bench.models[head] = res.model
        bench.logs[head] = res.log
        bench.seconds[head] = time.perf_counter() - t
    T.set_default_dtype(np.float64)
    return bench


# ---------------------------------------------------------------------------
# One line per acceptance criterion in the terminal summary

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
