"""One test per acceptance criterion; each prints a PASS/FAIL line at its stated tolerance."""

from drfpn.harness import verify
from drfpn.harness.config import RunConfig


def report(capsys, result):
    with capsys.disabled():
        print("\n" + result.line().splitlines()[0])
    assert result.passed, result.detail


def test_gradient_suite(capsys):
    # every op < 1e-6 (linear < 1e-10), composites < 1e-4, whole suite < 10 min
    report(capsys, verify.gradient_suite(seed=0, limit_s=600.0))


def test_oracle_equivalence(capsys):
    # 100 instances per conv configuration at 1e-12; adjoint identity at 1e-10
    report(capsys, verify.oracle_equivalence(seed=0))


def test_fuse_exactness(capsys):
    report(capsys, verify.fuse_exactness(seed=0))


def test_degeneracy_chain(capsys):
    report(capsys, verify.degeneracy_chain(seed=0))


def test_offset_normalization(capsys):
    report(capsys, verify.offset_shift(seed=0))


def test_structural_ablation_parity(capsys):
    report(capsys, verify.ablation_parity(channels=32))


def test_training_smoke(capsys):
    # default RunConfig, 500 steps: final <= 0.5 x initial for FPN and DRFPN, bitwise repeatable, < 30 min
    report(capsys, verify.training_smoke(RunConfig(), limit_s=1800.0))


def test_persistence(capsys):
    report(capsys, verify.persistence(seed=0))
