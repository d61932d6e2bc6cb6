import random
from fractions import Fraction

import pytest
from plankit import benchmark_observations

from dcaiflow.costmodel import FitError, OperationKind, Plan, fit_link_model, parse_plan_query, plan_cost_exact
from dcaiflow.costmodel.model import transfer_time
from dcaiflow.costmodel.model import LinkModel
from dcaiflow.kvconfig import ConfigError, KVDocument

TRUE = LinkModel(rate_v=1.25e9, startup_s=0.8)


def synthetic(noise=0.0, seed=5, n=40):
    rng = random.Random(seed)
    obs = []
    for _ in range(n):
        nbytes = rng.randint(10**6, 5 * 10**10)
        t = transfer_time(nbytes, 1, TRUE)
        obs.append((nbytes, 1, t * (1 + rng.gauss(0, noise)) if noise else t))
    return obs


def rel(a, b):
    return abs(float(a) - float(b)) / abs(float(b))


def test_noiseless_fit_recovers_rate_and_startup():
    fit = fit_link_model(synthetic())
    assert rel(fit.link.rate_v, TRUE.rate_v) < 1e-9
    assert rel(fit.link.startup_s, TRUE.startup_s) < 1e-6
    assert fit.rms < 1e-9


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_noisy_fit_is_close(seed):
    fit = fit_link_model(benchmark_observations(TRUE, 0.05, seed))
    assert rel(fit.link.rate_v, TRUE.rate_v) < 0.05
    assert rel(fit.link.startup_s, TRUE.startup_s) < 0.05
    assert len(fit.residuals) == 200


def test_uniform_sizes_cannot_pin_down_a_small_startup():
    # With every transfer tens of seconds long, 5% noise swamps a 0.8 s constant.
    fit = fit_link_model(synthetic(noise=0.05, n=40))
    assert rel(fit.link.rate_v, TRUE.rate_v) < 0.05
    assert rel(fit.link.startup_s, TRUE.startup_s) > 0.05


def test_per_file_term():
    link = LinkModel(rate_v=1e9, startup_s=0.5, per_file_overhead=0.01)
    obs = [(b, f, transfer_time(b, f, link)) for b in (10**8, 10**9, 4 * 10**9) for f in (1, 10, 100)]
    fit = fit_link_model(obs, fit_per_file=True)
    assert rel(fit.link.per_file_overhead, 0.01) < 1e-6
    assert rel(fit.link.startup_s, 0.5) < 1e-6


def test_fit_needs_three_points():
    with pytest.raises(FitError):
        fit_link_model([(1, 1, 1.0), (2, 1, 2.0)])


def test_fit_rejects_constant_sizes():
    with pytest.raises(FitError):
        fit_link_model([(100, 1, 1.0)] * 5)


def test_per_file_fit_needs_distinct_file_counts():
    with pytest.raises(FitError):
        fit_link_model(synthetic(), fit_per_file=True)


def test_fit_rejects_negative_slope():
    with pytest.raises(FitError):
        fit_link_model([(1, 1, 3.0), (2, 1, 2.0), (3, 1, 1.0)])


def test_negative_intercept_clamps_to_zero():
    fit = fit_link_model([(1000, 1, 0.9e-6), (2000, 1, 1.9e-6), (3000, 1, 2.9e-6)])
    assert fit.link.startup_s == 0.0


# --- key/value documents ---------------------------------------------------------------

CONFIG = """\
dataset.datum_bytes = 100
dataset.result_bytes = 10
dataset.model_bytes = 1000
dataset.count_n = 50
link.rate_v = 1000         # bytes/s
link.startup_s = 1/2
plan.training_fraction_p = 0.2
cost.analyze.dc = 10
cost.train.dc.fixed = 2000000
cost.estimate.ex.per_datum = 1
"""


def test_plan_config_parses_exact_values():
    q = parse_plan_query(CONFIG)
    assert q.link.startup_s == Fraction(1, 2)
    assert q.p == Fraction(1, 5)
    assert q.costs.lookup(OperationKind.TRAIN, "dc").fixed_us == 2_000_000
    # 5000 B data + 5000 B results over 1 kB/s, two startups, 500 us of analysis
    assert plan_cost_exact(q, Plan.CONVENTIONAL) == Fraction(5) + Fraction(1, 2) + Fraction(1, 2000) + Fraction(1, 2) + Fraction(1, 2)


@pytest.mark.parametrize(
    "line, lineno, fragment",
    [
        ("link.rate_v = fast", 5, "expected Fraction"),
        ("link.rate_v = 0", 5, "rate_v"),
        ("cost.analyse.dc = 1", 8, "unknown operation kind"),
        ("cost.analyze.dc.min = 1", 8, "cost keys look like"),
        ("plan.training_fraction_p = 2", 7, "training_fraction_p"),
    ],
)
def test_plan_config_errors_carry_line_numbers(line, lineno, fragment):
    lines = CONFIG.splitlines()
    lines[lineno - 1] = line
    with pytest.raises(ConfigError) as info:
        parse_plan_query("\n".join(lines), "q.conf")
    assert info.value.line == lineno
    assert fragment in str(info.value)
    assert str(info.value).startswith(f"q.conf:{lineno}:")


def test_unknown_owned_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown key 'link.speed'") as info:
        parse_plan_query(CONFIG + "link.speed = 9\n")
    assert info.value.line == 11


def test_foreign_keys_are_left_alone():
    parse_plan_query(CONFIG + "ui.colour = blue\n")


def test_missing_required_key():
    text = "\n".join(l for l in CONFIG.splitlines() if not l.startswith("link.rate_v"))
    with pytest.raises(ConfigError, match="missing required key 'link.rate_v'"):
        parse_plan_query(text)


@pytest.mark.parametrize(
    "text, lineno",
    [("a = 1\nno equals here\n", 2), ("a = 1\n\n9x = 2\n", 3), ("a =\n", 1), ("a = 1\n# c\na = 2\n", 3)],
)
def test_kv_syntax_errors(text, lineno):
    with pytest.raises(ConfigError) as info:
        KVDocument.parse(text)
    assert info.value.line == lineno


def test_kv_comments_and_whitespace():
    doc = KVDocument.parse("  x.y = 3   # three\n\n# nothing\nz=hello\n")
    assert doc.number("x.y", kind=int) == 3
    assert doc.get("z") == "hello"
    assert doc.get("missing", "d") == "d"


def test_kv_integer_rejects_fractions():
    doc = KVDocument.parse("n = 2.5\n")
    with pytest.raises(ConfigError, match="expected int"):
        doc.number("n", kind=int)
    assert KVDocument.parse("n = 2e7\n").number("n", kind=int) == 20_000_000
