import numpy as np
import pytest

from surfel_odometry.lie import exp_so3

# criterion number -> (title, outcome, detail); filled by acceptance tests
ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n, title = mark.args
    entry = ACCEPTANCE.setdefault(n, [title, "PASS", ""])
    if rep.failed:
        entry[1] = "FAIL"
    elif rep.skipped and rep.when != "teardown":
        entry[1] = "SKIP"
    detail = getattr(item, "acceptance_detail", None)
    if detail:
        entry[2] = detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        line = f"criterion {n:2d} {status}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0, max_angle))


def plane_points(rng, n, normal=(0, 0, 1), offset=0.0, extent=1.0):
    normal = np.asarray(normal, float)
    normal /= np.linalg.norm(normal)
    u = np.cross(normal, [1.0, 0, 0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(normal, [0, 1.0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    ab = rng.uniform(-extent, extent, size=(n, 2))
    return offset * normal + ab[:, :1] * u + ab[:, 1:] * v


def sample_patch(origin, e1, e2, step):
    a = np.arange(0, 1 + 1e-9, step / np.linalg.norm(e1))
    b = np.arange(0, 1 + 1e-9, step / np.linalg.norm(e2))
    A, B = np.meshgrid(a, b)
    return origin + A.reshape(-1, 1) * e1 + B.reshape(-1, 1) * e2


def sample_scene(scene, step):
    """Points on a regular grid over every scene surface (no beam pattern)."""
    pts = [sample_patch(p.origin, p.edge1, p.edge2, step) for p in scene.patches]
    for b in scene.boxes:
        d = b.hi - b.lo
        for ax in range(3):
            for side in (b.lo, b.hi):
                o = b.lo.copy()
                o[ax] = side[ax]
                e = [np.eye(3)[i] * d[i] for i in range(3) if i != ax]
                pts.append(sample_patch(o, e[0], e[1], step))
    return np.vstack(pts)
