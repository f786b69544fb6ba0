"""Quick end-to-end check of the compiled module."""

import math
import sys
import tempfile
from pathlib import Path

import prefix_sampling as ps


def main() -> int:
    assert ps.reward_entropy(0.5) == 1.0
    assert math.isclose(ps.group_survival_probability(0.5, 8), 1 - 2 / 256)
    assert ps.contrastive_pair_count(4, 8) == 16
    assert ps.classify_bucket(2, 8) == "hard2"
    assert ps.replay_boundary(0.5, 10) == 5
    assert ps.replay_boundary(0.5, 1) is None

    adv = ps.rloo_advantages([True, False, False, False])
    assert math.isclose(sum(adv), 0.0, abs_tol=1e-12)

    try:
        ps.reward_entropy(2.0)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    ctl = ps.BucketController(1)
    for _ in range(2):
        ctl.update(1.0)
    assert math.isclose(ctl.ratio, 0.45)

    sim = ps.simulate("steps = 20\nbatch_size = 16\npopulation.size = 64\n")
    assert sim.steps == 20
    print("mean valid groups:", round(sim.mean_valid_groups(), 3))
    print("final controllers:", sim.final_controllers())
    with tempfile.TemporaryDirectory() as d:
        sim.emit(d)
        names = sorted(p.name for p in Path(d).iterdir())
        assert names == ["controller.csv", "metrics.csv", "run.jsonl", "transitions.csv"], names

    failed = [c for c in ps.run_checks(quick=True) if not c[1]]
    assert not failed, failed
    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
