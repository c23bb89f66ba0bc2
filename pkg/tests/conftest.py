import numpy as np
import pytest

from components.dose_engine import DoseKernelConfig
from components.dvi import Direction, DviKind, DviSpec, VolumeUnit
from components.moea_core import OptimizerConfig, build_evaluator
from components.objective_model import AimGroup, AimProtocol, AimSpec, ProtocolConfig, default_protocol
from components.patient_model import (ApplicatorAxis, Channel, ChannelKind, DwellPosition, Ellipsoid, EllipsoidShell,
                                      PatientCase, ReferencePoint, Roi, RoiKind, RoiShape, generate_phantom,
                                      validate_case)
from utils.config_utils import load_phantom_presets

TANDEM_Z = tuple(2.5 * k for k in range(9))
NEEDLE_Z = (8.0, 12.0)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def _roi(name: str, kind: RoiKind, primitive) -> Roi:
    shape = RoiShape((primitive,))
    return Roi(name, kind, shape, shape.volume_cm3())


def make_toy_case(with_needle: bool = True) -> PatientCase:
    """
    Tandem of 9 dwells inside the hollow of a shell-shaped CTV_HR, an optional
    2-dwell needle beside it and a distant bladder. Every shape is analytic.
    """
    dwells = [DwellPosition(k, 0, (0.0, 0.0, z)) for k, z in enumerate(TANDEM_Z)]
    channels = [Channel(0, ChannelKind.INTRACAVITARY_TANDEM, tuple(range(len(TANDEM_Z))))]
    if with_needle:
        first = len(dwells)
        dwells += [DwellPosition(first + k, 1, (20.0, 0.0, z)) for k, z in enumerate(NEEDLE_Z)]
        channels.append(Channel(1, ChannelKind.NEEDLE, (first, first + 1)))
    rois = (
        _roi("CTV_HR", RoiKind.TARGET, EllipsoidShell((0.0, 0.0, 10.0), (15.0, 15.0, 20.0), (4.0, 4.0, 16.0))),
        _roi("bladder", RoiKind.OAR, Ellipsoid((0.0, 40.0, 10.0), (10.0, 8.0, 8.0))),
    )
    case = PatientCase(
        prescribed_dose_gy=7.0,
        channels=tuple(channels),
        dwell_positions=tuple(dwells),
        rois=rois,
        reference_points=(ReferencePoint("ICRU_RV", (0.0, -20.0, 0.0)),),
        applicator_axis=ApplicatorAxis((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        name="toy",
    )
    return validate_case(case)


def make_toy_protocol() -> ProtocolConfig:
    up, down = Direction.MAXIMIZE, Direction.MINIMIZE
    cov, spa = AimGroup.COVERAGE, AimGroup.SPARING
    base, added = AimProtocol.EMBRACE, AimProtocol.ADDED
    aims = (
        AimSpec(DviSpec(DviKind.D_V, "CTV_HR", 0.90, up), cov, base, 1, 30.0, 30.0, False),
        AimSpec(DviSpec(DviKind.V_D, "CTV_HR", 50.0, up), cov, added, 2, 95.0, 80.0, True),
        AimSpec(DviSpec(DviKind.D_V, "CTV_HR", 0.90, down), spa, base, 1, 60.0, 60.0, False),
        AimSpec(DviSpec(DviKind.D_V, "bladder", 2.0, down, VolumeUnit.CM3), spa, base, 1, 20.0, 20.0, False),
        AimSpec(DviSpec(DviKind.D_POINT, "ICRU_RV", None, down), spa, base, 1, 20.0, 20.0, False),
        AimSpec(DviSpec(DviKind.V_D, "bladder", 50.0, down), spa, added, 3, 0.5, 5.0, True),
    )
    return ProtocolConfig(aims, 7.0)


@pytest.fixture(scope="session")
def toy_case() -> PatientCase:
    return make_toy_case()


@pytest.fixture(scope="session")
def toy_case_without_needles() -> PatientCase:
    return make_toy_case(with_needle=False)


@pytest.fixture(scope="session")
def toy_protocol() -> ProtocolConfig:
    return make_toy_protocol()


@pytest.fixture(scope="session")
def protocol() -> ProtocolConfig:
    return default_protocol()


@pytest.fixture(scope="session")
def kernel() -> DoseKernelConfig:
    return DoseKernelConfig()


@pytest.fixture
def small_config() -> OptimizerConfig:
    return OptimizerConfig(population_size=12, selection_fraction=0.5, n_clusters=3, archive_capacity=200,
                           init_low=0.0, init_high=20.0, generations=4, seed=0)


@pytest.fixture
def toy_evaluator(toy_case, toy_protocol, kernel):
    return build_evaluator(toy_case, toy_protocol, 300, seed=11, kernel=kernel)


@pytest.fixture(scope="session")
def phantom_presets():
    presets = load_phantom_presets()
    assert presets is not None
    return presets


@pytest.fixture(scope="session")
def easy_phantom(phantom_presets) -> PatientCase:
    return generate_phantom(phantom_presets["easy"], seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def medium_phantom(phantom_presets) -> PatientCase:
    return generate_phantom(phantom_presets["medium"], seed=1)
