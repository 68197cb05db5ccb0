import pytest

from whittlesched import ChannelClass, ClassMix, build_index_table, solve_relaxed


@pytest.fixture(scope="session")
def single_mix():
    """One class (p=0.8, r=0.2), budget 0.75: hand-solvable end to end."""
    return ClassMix(classes=(ChannelClass(0.8, 0.2),), gamma=(1.0,), alpha=0.75)


@pytest.fixture(scope="session")
def two_mix():
    """Two classes (0.9, 0.45) and (0.8, 0.3), gamma (0.45, 0.55), alpha 0.6."""
    return ClassMix(
        classes=(ChannelClass(0.9, 0.45), ChannelClass(0.8, 0.3)),
        gamma=(0.45, 0.55),
        alpha=0.6,
    )


@pytest.fixture(scope="session")
def single_table(single_mix):
    return build_index_table(single_mix)


@pytest.fixture(scope="session")
def two_table(two_mix):
    return build_index_table(two_mix)


@pytest.fixture(scope="session")
def single_solution(single_mix, single_table):
    return solve_relaxed(single_mix, single_table)


@pytest.fixture(scope="session")
def two_solution(two_mix, two_table):
    return solve_relaxed(two_mix, two_table)
