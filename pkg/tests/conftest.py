import math
from pathlib import Path

import numpy as np
import pytest

from madl.config import PipelineConfig, parse_config
from madl.geometry import LidarGeometry, PoseSE3
from madl.synthetic import SceneSpec, bundled_sequence_spec, generate_scene, write_sequence


@pytest.fixture(scope="session")
def geom():
    return LidarGeometry.default()


@pytest.fixture(scope="session")
def straight_truth():
    return generate_scene(SceneSpec(road_width=8.0, curb_height=0.15, length=120.0, num_frames=5, frame_spacing=5.0))


@pytest.fixture(scope="session")
def curved_truth():
    return generate_scene(SceneSpec(road_width=8.0, curb_height=0.15, curvature=1 / 50, length=120.0, num_frames=5,
                                    frame_spacing=5.0))


@pytest.fixture(scope="session")
def bundled_truth():
    return generate_scene(bundled_sequence_spec())


@pytest.fixture(scope="session")
def bundled_root(tmp_path_factory):
    """The bundled 50-frame sequence on disk (noise off)."""
    root = tmp_path_factory.mktemp("bundled")
    write_sequence(root, bundled_sequence_spec())
    return root


def make_config(input_dir: Path, output_dir: Path, extra: str = "") -> PipelineConfig:
    return parse_config(f"[run]\ninput = {input_dir}\noutput = {output_dir}\n{extra}")


@pytest.fixture(scope="session")
def pipeline_run(bundled_root, tmp_path_factory):
    """One full pipeline run over the bundled sequence: (config, manifest, seconds)."""
    import time

    from madl.pipeline import run_pipeline

    out = tmp_path_factory.mktemp("run")
    cfg = make_config(bundled_root, out)
    t0 = time.perf_counter()
    manifest = run_pipeline(cfg)
    return cfg, manifest, time.perf_counter() - t0


def random_pose(rng: np.random.Generator, trans: float = 10.0) -> PoseSE3:
    from madl.geometry import rotvec_to_matrix

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return PoseSE3(rotvec_to_matrix(axis * rng.uniform(-math.pi, math.pi)), rng.uniform(-trans, trans, 3))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one acceptance line; it is echoed now and repeated in the terminal summary."""

    def _record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
