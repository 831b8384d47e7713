import numpy as np
import pytest

from morphevo.morphology import EnvClass, JointSpec, JointType, LimbNode, MorphologyTree


def arm_chain(lengths, ranges=None, gear=80.0, radius=0.05, tree_id=0):
    """Hand-built arm: a chain of x-extent limbs, base joint at the origin."""
    ranges = ranges or [120.0] * len(lengths)
    nodes = tuple(LimbNode(i, i - 1 if i else None, radius, (float(L), 0.0, 0.0), 1) for i, L in enumerate(lengths))
    joints = tuple(
        JointSpec(i, JointType.HINGE_Z, 0.0 if i == 0 else 1.0, float(r), float(gear))
        for i, r in enumerate(ranges)
    )
    return MorphologyTree(nodes, joints, EnvClass.ARM, tree_id)


def crawler(children, extents, ranges=None, gear=80.0, radius=0.05, tree_id=0, attach=None):
    """Hand-built 2D body. ``children`` maps parent index -> child indices; node 0 is the root."""
    parent = {c: p for p, cs in children.items() for c in cs}
    nodes = tuple(
        LimbNode(i, parent.get(i), radius, tuple(float(v) for v in e), 2) for i, e in enumerate(extents)
    )
    ranges = ranges or [50.0] * len(extents)
    attach = attach or {}
    joints = tuple(
        JointSpec(i, JointType.HINGE_Y, float(attach.get(i, 1.0)), float(ranges[i]), float(gear))
        for i in range(1, len(extents))
    )
    return MorphologyTree(nodes, joints, EnvClass.LOCOMOTION2D, tree_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary -----------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    """Record one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
