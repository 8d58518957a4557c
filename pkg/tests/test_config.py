import pytest
from hypothesis import given, settings, strategies as st

from clusterwalk.config import (ConfigError, ExperimentConfig, parse_config, serialize_config)

MINIMAL = """
[lattice]
d = 2
L = 32
p = 0.7
seed = 4
"""


def test_minimal_config_defaults():
    c = parse_config(MINIMAL)
    assert (c.N, c.t_max, c.tol) == (1000, 1000.0, 1e-10)
    assert c.max_iter is None and c.preconditioner == "diagonal"
    r = c.resolved()
    assert r.eps_list == (8 / 32, 4 / 32, 2 / 32)
    assert len(r.rectangles) == 5 and r.rectangles[-1] == ((-1.0, 1.0), (-1.0, 1.0))


def test_range_error_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("p = 0.7", "p = 1.5"))
    assert info.value.field == "p" and "p" in str(info.value)


@pytest.mark.parametrize("text, line", [
    ("[lattice]\nd = 2\nthis line is broken\n", 3),
    ("d = 2\n", 1),
    ("[lattice]\nd = 2\nd = 3\n", 3),
])
def test_syntax_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + "[walk]\nsteps = 10\n")
    assert info.value.field == "steps" and info.value.line == 8
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "[plot]\ncolor = red\n")
    with pytest.raises(ConfigError):
        parse_config("[lattice]\nd = 2\n")


def test_keys_case_insensitive_and_lists():
    c = parse_config(MINIMAL + """
[walk]
n = 50
[estimate]
EPS_LIST = 0.25, 0.125
rectangles = -1:0, 0:1; 0:1,0:1
[output]
stages = sample, solve
""")
    assert c.N == 50 and c.eps_list == (0.25, 0.125)
    assert c.rectangles == (((-1.0, 0.0), (0.0, 1.0)), ((0.0, 1.0), (0.0, 1.0)))
    assert c.stages == ("sample", "solve")


@pytest.mark.parametrize("extra", [
    "[walk]\nN = 0\n", "[walk]\nt_max = -1\n", "[solver]\ntol = 2\n",
    "[solver]\npreconditioner = ilu\n", "[estimate]\neps_list = 0.01\n",
    "[estimate]\ndelta_list = 0.9\nM = 3\n", "[estimate]\nrectangles = -2:0, 0:1\n",
    "[estimate]\nheat_N = 10\n", "[output]\nstages = plot\n", "[walk]\nstart = corner\n",
    "[estimate]\nb0 = 2\n",
])
def test_validation_rejections(extra):
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + extra)


def test_full_round_trip():
    full = parse_config(MINIMAL + """
[walk]
N = 300
t_max = 2.5
eps = 0.1
start = 17
trajectories = 3
[solver]
tol = 1e-9
max_iter = 400
preconditioner = none
[estimate]
eps_list = 0.25, 0.125
delta_list = 0.5
M = 3
rectangles = -1:0, 0:1
b0 = 1
poincare_eps = 0.5
poincare_trials = 4
heat_t = 1, 10, 100
heat_N = 2000
bootstrap = 50
[output]
dir = somewhere/else
stages = sample, walk
""")
    again = parse_config(serialize_config(full))
    assert again == full
    assert parse_config(serialize_config(parse_config(MINIMAL))) == parse_config(MINIMAL)


@given(st.integers(2, 3), st.integers(2, 40).map(lambda k: 2 * k), st.floats(0, 1),
       st.integers(0, 2 ** 64 - 1), st.floats(1e-3, 1e4, allow_subnormal=False),
       st.floats(1e-12, 0.5))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(d, L, p, seed, t_max, tol):
    c = ExperimentConfig(d, L, p, seed, t_max=t_max, tol=tol)
    assert parse_config(serialize_config(c)) == c
