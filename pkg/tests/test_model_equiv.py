"""Randomized model-equivalence runs (the full criterion lives in acceptance)."""

import pytest

from shieldfs.deploy import DeployConfig, Deployment
from shieldfs.workload import WorkloadRunner


def run_seed(tmp_path, seed, ops=800):
    config = DeployConfig(data_dir=str(tmp_path / f"wl{seed}"), devices=2,
                          device_capacity=768, inode_count=192,
                          rpc_timeout=1.0, cache_enabled=False)
    Deployment.mkfs(config)
    dep = Deployment.open(config)
    try:
        runner = WorkloadRunner(dep, seed=seed)
        report = runner.run(ops)
        assert report.ok, report.mismatches[:3]
        assert dep.core.fsck() == []
        assert dep.alarms.count() == 0, dep.alarms.all()[:3]
        problems = runner.compare_tree()
        assert problems == [], problems[:3]
    finally:
        dep.shutdown()
    return report


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_randomized_equivalence(tmp_path, seed):
    report = run_seed(tmp_path, seed)
    assert report.ops >= 450  # steps without a usable target are skipped
    # the mix should exercise error paths too
    assert report.errors_seen, "expected some POSIX errors in the mix"


def test_error_codes_exercised(tmp_path):
    report = run_seed(tmp_path, seed=99, ops=1500)
    import errno
    seen = set(report.errors_seen)
    assert errno.ENOENT in seen or errno.EACCES in seen
