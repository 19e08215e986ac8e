import pytest

from snislm.criteria import CriterionKind
from snislm.gradcheck import check_criterion


def test_report_fields():
    report = check_criterion(CriterionKind.of("is"), instances=3, seed=1)
    assert report.instances == 3
    assert report.entries_checked > 0
    assert report.max_rel_error < 1e-5


def test_deterministic_given_seed():
    a = check_criterion(CriterionKind.of("nce"), instances=4, seed=9)
    b = check_criterion(CriterionKind.of("nce"), instances=4, seed=9)
    assert a.max_rel_error == b.max_rel_error
    assert a.entries_checked == b.entries_checked


def test_detects_a_broken_gradient(monkeypatch):
    # sanity: corrupting the analytic gradient must blow the check up
    import snislm.gradcheck as gc

    original = gc.backward

    def corrupted(params, batch, loss):
        grads = original(params, batch, loss)
        grads.output_grads *= 1.01
        return grads

    monkeypatch.setattr(gc, "backward", corrupted)
    report = check_criterion(CriterionKind.of("is"), instances=2, seed=0)
    assert report.max_rel_error > 1e-4
