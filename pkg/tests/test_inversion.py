import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddpm_inversion_lab import noise
from ddpm_inversion_lab.denoiser import draw_sources, random_linear, toy_gmm
from ddpm_inversion_lab.errors import ConfigurationError, IntegrityError, ShapeError
from ddpm_inversion_lab.inversion import (
    InversionRecord, clip_correction, invert, noised_state, on_the_fly_correction,
)
from ddpm_inversion_lab.sampler import mu
from ddpm_inversion_lab.schedule import build_schedule, plan_timesteps

vectors = arrays(np.float64, st.integers(1, 16), elements=st.floats(-1e6, 1e6))


@given(vectors, st.floats(1e-3, 1e3))
def test_clip_bounds_norm_and_is_idempotent(v, max_norm):
    out = clip_correction(v, max_norm)
    assert np.linalg.norm(out) <= max_norm
    again = clip_correction(out, max_norm)
    assert np.array_equal(again, out)
    if np.linalg.norm(v) <= max_norm:
        assert out is v or np.array_equal(out, v)


def test_clip_preserves_direction():
    v = np.zeros(4)
    v[1], v[3] = 31.0 * 0.6, 31.0 * 0.8
    out = clip_correction(v, 15.5)
    assert np.linalg.norm(out) == pytest.approx(15.5, rel=1e-15)
    assert np.dot(out, v) / (np.linalg.norm(out) * np.linalg.norm(v)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ConfigurationError):
        clip_correction(v, 0.0)


def test_corrections_solve_the_step(schedule, default_plan):
    den = toy_gmm(schedule)
    x0 = draw_sources(den, 1, 3)[0]
    rec = invert(schedule, den, default_plan, x0, 1, 3)
    for step in rec.steps:
        assert np.array_equal(step.x_t, noised_state(schedule, x0, step.t, 3))
        pred = mu(schedule, den, step.x_t, step.t, step.s, 1, default_plan.delta)
        assert np.allclose(pred + step.v, step.x_s, atol=1e-14)
    assert np.array_equal(rec.steps[-1].x_s, x0)


def test_only_final_correction_is_clipped(schedule):
    den = random_linear(schedule, 16, 5)
    plan = plan_timesteps(schedule, K=4, t_start=599, delta=200)
    x0 = 20.0 * noise.gaussian(5, noise.Stream.DATA, 0, 16)
    raw = invert(schedule, den, plan, x0, 1, 5)
    final_norm = float(np.linalg.norm(raw.steps[-1].v))
    clipped = invert(schedule, den, plan, x0, 1, 5, clip_max=final_norm / 2)
    for a, b in zip(raw.steps[:-1], clipped.steps[:-1]):
        assert np.array_equal(a.v, b.v) and not b.clipped
    assert clipped.steps[-1].clipped
    assert np.linalg.norm(clipped.steps[-1].v) <= final_norm / 2


def test_record_json_roundtrip(schedule, default_plan, tmp_path):
    den = toy_gmm(schedule)
    rec = invert(schedule, den, default_plan, draw_sources(den, 1, 0)[0], 1, 0, clip_max=15.5)
    path = tmp_path / "record.json"
    path.write_text(json.dumps(rec.to_json(), sort_keys=True))
    back = InversionRecord.from_json(json.loads(path.read_text()))
    back.verify(schedule, den)
    assert back.plan == rec.plan and back.clip_max == 15.5
    for a, b in zip(rec.steps, back.steps):
        assert np.array_equal(a.v, b.v) and np.array_equal(a.x_t, b.x_t) and np.array_equal(a.x_s, b.x_s)


def test_record_integrity_checks(schedule, default_plan):
    den = toy_gmm(schedule)
    rec = invert(schedule, den, default_plan, np.zeros(8), 1, 0)
    with pytest.raises(IntegrityError):
        rec.verify(build_schedule(T=900), den)
    with pytest.raises(IntegrityError):
        rec.verify(schedule, toy_gmm(schedule, separation=3.0))
    with pytest.raises(IntegrityError):
        InversionRecord.from_json({"x0": [0.0]})


def test_invert_rejects_wrong_shape(schedule, default_plan):
    with pytest.raises(ShapeError):
        invert(schedule, toy_gmm(schedule), default_plan, np.zeros(3), 1, 0)


@given(st.integers(0, 2**20), st.integers(2, 12), st.sampled_from([1, 3, 4, 8]),
       st.sampled_from([0, 200]))
def test_on_the_fly_matches_record(seed, dim, K, delta):
    sched = build_schedule()
    den = random_linear(sched, dim, seed)
    plan = plan_timesteps(sched, K=K, t_start=599, delta=delta)
    x0 = noise.gaussian(seed, noise.Stream.DATA, 0, dim)
    rec = invert(sched, den, plan, x0, 1, seed, clip_max=1.0)
    for step in rec.steps:
        x_t, v = on_the_fly_correction(sched, den, x0, 1, (step.t, step.s), delta, seed, clip_max=1.0)
        assert np.array_equal(x_t, step.x_t) and np.array_equal(v, step.v)
