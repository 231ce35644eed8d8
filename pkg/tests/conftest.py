"""Shared desk-scale fixtures: 16x16 synthetic images, T=50 scaled linear schedule."""

import time
from dataclasses import dataclass, field

import pytest
import torch

from daedkit import schedule as S
from daedkit import training as TR
from daedkit.data import DatasetSpec, gen_synthetic
from daedkit.network import build_unet, flat_parameters
from daedkit.numerics import Rng

DESK_T = 50
FRECHET_CHECKPOINTS = (200, 1000, 2000)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class Trained:
    schedule: S.NoiseSchedule | None
    net: torch.nn.Module
    state: TR.TrainState
    seconds: float
    snapshots: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def desk_schedule():
    return S.build_linear_scaled(DESK_T)


@pytest.fixture(scope="session")
def blobs_train():
    return gen_synthetic(DatasetSpec("synthetic:blobs", count=2048)).tensor


@pytest.fixture(scope="session")
def blobs_eval():
    return gen_synthetic(DatasetSpec("synthetic:blobs", count=256, split="eval")).tensor


@pytest.fixture(scope="session")
def stripes_eval():
    return gen_synthetic(DatasetSpec("synthetic:stripes", count=256, split="eval")).tensor


@pytest.fixture(scope="session")
def simple_ddgm(desk_schedule, blobs_train):
    """eps-objective model; parameter vectors kept at the Frechet checkpoints."""
    net = build_unet(seed=1)
    snaps = {}

    def keep(update, state):
        if update in FRECHET_CHECKPOINTS:
            snaps[update] = flat_parameters(net).clone()

    t0 = time.perf_counter()
    state = TR.train_ddgm(TR.TrainConfig(steps=2000), desk_schedule, net, blobs_train, Rng(0), on_update=keep)
    return Trained(desk_schedule, net, state, time.perf_counter() - t0, snaps)


@pytest.fixture(scope="session")
def vlb_ddgm(desk_schedule, blobs_train):
    net = build_unet(seed=2)
    t0 = time.perf_counter()
    state = TR.train_ddgm(TR.TrainConfig(objective="vlb", steps=2000), desk_schedule, net, blobs_train, Rng(1))
    return Trained(desk_schedule, net, state, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def blobs_dae(blobs_train):
    dae = build_unet(kind="dae", time_dim=0, seed=3)
    t0 = time.perf_counter()
    state = TR.train_dae(TR.TrainConfig(steps=1000), dae, blobs_train, Rng(4), 0.1)
    return Trained(None, dae, state, time.perf_counter() - t0)
