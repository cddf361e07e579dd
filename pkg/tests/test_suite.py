from stprompt import suite


def test_every_criterion_has_one_check():
    assert sorted(suite.CHECKS) == list(range(1, 12))
    assert {level for _, _, level in suite.CHECKS.values()} == {"fast", "full"}


def test_fast_level_passes_and_skips_the_pilots():
    res = suite.run_suite("fast")
    status = {c.criterion: c.status for c in res.checks}
    assert res.ok, "\n".join(res.lines())
    assert [k for k, s in status.items() if s == "skip"] == [k for k, (_, _, lvl) in suite.CHECKS.items()
                                                           if lvl == "full"]
    assert len(res.lines()) == 12


def test_result_line_is_tab_separated():
    line = suite.CheckResult(4, "parameter_budget", "pass", 0.001, "<=0.02", "x").line()
    assert line.split("\t")[:3] == ["4", "parameter_budget", "pass"]


def test_repeat_runs_agree():
    for fn in (suite.check_identity, suite.check_metrics, suite.check_graph_algebra, suite.check_wasserstein,
               suite.check_budget):
        a, b = fn(), fn()
        assert (a.status, a.value, a.detail) == (b.status, b.value, b.detail)
