from pathlib import Path

import pytest

from tbakit.scene_io import scene_path, write_points, write_scene
from tbakit.simulate import SceneScript, generate_scene


def write_dataset(root: Path, seeds, num_frames=12, **script):
    scenes = []
    for seed in seeds:
        scene, clouds = generate_scene(SceneScript(rng_seed=seed, num_frames=num_frames, **script))
        write_scene(scene, scene_path(root / "scenes", scene.scene_id))
        for rel, cloud in clouds.items():
            write_points(cloud, root / "scenes" / rel)
        scenes.append(scene)
    return scenes


@pytest.fixture(scope="session")
def sim_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    scenes = write_dataset(root, range(1, 5))
    return root / "scenes", scenes


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")
