import time

import numpy as np
import pytest

from srma import (
    NetworkConfig,
    TrainConfig,
    default_domain_pair,
    evaluate,
    generate_domain,
    neutral_pretrain,
    train,
)

NUM_CATEGORIES = 4
IMAGE_SIZE = 32
TRAIN_STEPS = 300
PRETRAIN_STEPS = 300
BATCH = 4
ABLATION_SEEDS = (0, 1, 2, 3, 4)

# ablation switches per configuration
ABLATION_CONFIGS = {
    "baseline": dict(
        use_srm=False,
        use_pc=False,
        use_mla_global=False,
        use_mla_regional=False,
        use_mla_local=False,
        style_elim=False,
    ),
    "srm_only": dict(
        use_pc=False,
        use_mla_global=False,
        use_mla_regional=False,
        use_mla_local=False,
        style_elim=False,
    ),
    "full": {},
    "no_mla_global": dict(use_mla_global=False),
    "no_mla_regional": dict(use_mla_regional=False),
    "no_mla_local": dict(use_mla_local=False),
}


@pytest.fixture(scope="session")
def paired_domains():
    """Paired source/target datasets: same layouts, shifted per-region styles."""
    src_spec, tgt_spec = default_domain_pair(NUM_CATEGORIES, layout_seed=0, size=IMAGE_SIZE)
    source = generate_domain(src_spec, 24, np.random.default_rng(1))
    target = generate_domain(tgt_spec, 24, np.random.default_rng(2))
    return source, target


@pytest.fixture(scope="session")
def ablation_grid(paired_domains):
    """Target/source mIoU for every ablation configuration over five seeds.

    Shared by the trend acceptance criteria; the heaviest fixture in the
    suite (a few minutes of CPU training).
    """
    source, target = paired_domains
    t_start = time.time()
    init_states = {}
    for seed in ABLATION_SEEDS:
        nc = NetworkConfig(num_classes=NUM_CATEGORIES, seed=seed)
        tc = TrainConfig(seed=seed, max_steps=TRAIN_STEPS, batch=BATCH, pretrain_steps=PRETRAIN_STEPS)
        init_states[seed] = neutral_pretrain(nc, tc)

    results = {}
    for name, switches in ABLATION_CONFIGS.items():
        switches = dict(switches)
        style_elim = switches.pop("style_elim", True)
        src_mious, tgt_mious = [], []
        for seed in ABLATION_SEEDS:
            nc = NetworkConfig(num_classes=NUM_CATEGORIES, seed=seed, style_elim=style_elim)
            tc = TrainConfig(seed=seed, max_steps=TRAIN_STEPS, batch=BATCH, **switches)
            result = train(source, nc, tc, init_state=init_states[seed])
            _, src_m = evaluate(result.model, source)
            _, tgt_m = evaluate(result.model, target)
            src_mious.append(src_m)
            tgt_mious.append(tgt_m)
        results[name] = {"source": src_mious, "target": tgt_mious}
    results["elapsed_seconds"] = time.time() - t_start
    return results


# one-line PASS/FAIL report per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
