"""Session fixtures for the trained desk-scale models.

The heavy artifacts (pretrained generator stack, trained watermark models,
budget studies) are deterministic, so deskbuild caches them on disk; a warm
cache and a cold rebuild produce byte-identical checkpoints. Set
CONCEPTMARK_TEST_CACHE to relocate the cache.
"""

import pytest

import deskbuild


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_record(request):
    """Record one PASS/FAIL line per criterion; echoed in the summary."""

    def record(criterion, description, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        line = f"[criterion {criterion:>2}] {status}: {description}"
        if detail:
            line += f" ({detail})"
        request.config._acceptance_lines.append(line)
        print(line)
        return passed

    return record


@pytest.fixture(scope="session")
def desk_stack():
    """(table, backend, backbone) at full desk scale, 32x32 images."""
    return deskbuild.desk_stack()


@pytest.fixture(scope="session")
def desk_models(desk_stack):
    """Three independently seeded 8-bit desk models:
    seed -> (state, object_ids, style_ids, checkpoint_dir)."""
    return {seed: deskbuild.desk_model(desk_stack, seed)
            for seed in deskbuild.DESK_SEEDS}


@pytest.fixture(scope="session")
def desk_model16(desk_stack):
    """One 16-bit desk model for the false-positive-rate protocol."""
    return deskbuild.desk_model(desk_stack, 0, n_bits=16)
