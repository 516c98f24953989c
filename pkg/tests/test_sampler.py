import numpy as np
import pytest

from tripletvol.errors import ConfigError
from tripletvol.sampler import MPerClassSampler, SamplerConfig, batches_per_epoch, epoch_plan


def cfg_for(n0, n1, m=4, batch=32, seed=0):
    return SamplerConfig(m=m, batch_size=batch, class_indices={0: list(range(n0)), 1: list(range(n0, n0 + n1))},
                         seed=seed)


def test_balanced_batches_with_group_structure():
    for batch in epoch_plan(cfg_for(50, 37), 20):
        labels = np.array([y for _, y in batch])
        assert len(batch) == 32
        assert np.sum(labels == 0) == 16 and np.sum(labels == 1) == 16
        for chunk in labels.reshape(-1, 8):
            assert chunk.tolist() == [0] * 4 + [1] * 4


def test_forced_composition():
    cfg = SamplerConfig(m=1, batch_size=2, class_indices={0: [0], 1: [1]}, seed=5)
    for batch in epoch_plan(cfg, 10):
        assert sorted(i for i, _ in batch) == [0, 1]


def test_pool_pass_repeats_only_after_exhaustion():
    # class pool of 10, 16 drawn per class per batch
    batches = epoch_plan(cfg_for(10, 12), 5)
    draws = [i for b in batches for i, y in b if y == 0]
    for start in range(0, len(draws) - 9, 10):
        assert sorted(draws[start : start + 10]) == list(range(10))
    counts = np.bincount(draws, minlength=10)
    assert counts.max() - counts.min() <= 1


def test_labels_match_pools():
    cfg = cfg_for(20, 20)
    for b in epoch_plan(cfg, 4):
        for i, y in b:
            assert i in cfg.class_indices[y]


def test_deterministic_under_seed():
    assert epoch_plan(cfg_for(30, 30, seed=3), 3) == epoch_plan(cfg_for(30, 30, seed=3), 3)
    assert epoch_plan(cfg_for(30, 30, seed=3), 3) != epoch_plan(cfg_for(30, 30, seed=4), 3)


def test_next_batch_counts_and_end_of_epoch():
    s = MPerClassSampler(cfg_for(20, 20))
    plan = s.epoch(6)
    got = []
    while True:
        try:
            got.append(s.next_batch())
        except StopIteration:
            break
    assert got == plan and len(got) == 6
    assert list(MPerClassSampler(cfg_for(20, 20)).epoch(2)) == list(iter(MPerClassSampler(cfg_for(20, 20)).epoch(2)))


def test_epochs_continue_pool_state():
    s = MPerClassSampler(cfg_for(8, 8, m=2, batch=8))
    a = s.epoch(1)
    b = s.epoch(1)
    # the second epoch draws the remaining half of each pool pass
    assert sorted(i for batch in a + b for i, y in batch if y == 0) == list(range(8))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(m=0, batch_size=32, class_indices={0: [0], 1: [1]}),
        dict(m=4, batch_size=30, class_indices={0: [0], 1: [1]}),
        dict(m=4, batch_size=32, class_indices={0: [], 1: [1]}),
        dict(m=4, batch_size=32, class_indices={0: [0]}),
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        SamplerConfig(**kwargs)


def test_batches_per_epoch_drops_partial():
    assert batches_per_epoch(160, 32) == 5
    assert batches_per_epoch(170, 32) == 5
    assert batches_per_epoch(10, 32) == 1
