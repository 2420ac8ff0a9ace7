"""Attack suite and audits."""

import pytest

from shieldfs import audit
from shieldfs.attacks import run_attack_suite, run_baseline
from shieldfs.host import AttackMode


def test_full_attack_suite(tmp_path):
    report = run_attack_suite(str(tmp_path))
    assert report.passed
    assert len(report.results) == 16
    modes = {r.mode for r in report.results}
    assert modes == set(AttackMode) - {AttackMode.NONE}
    for line in report.lines():
        assert line.endswith("pass")


def test_baseline_no_alarms(tmp_path):
    report = run_baseline(str(tmp_path))
    assert report.passed


def test_audits_clean():
    findings = audit.run_all_audits()
    assert all(not v for v in findings.values()), findings


def test_boundary_functions_exactly_four():
    assert len(audit.boundary_surface()) == 4
    assert audit.boundary_functions_used() == {
        "send_file_msg", "recv_file_msg", "send_block_msg", "recv_block_msg"}
