import numpy as np
import pytest

import specdiff as sd
from specdiff.fileio import read_psf


class PixelProbe:
    """Perfect denoiser whose clean target is the conditioning value at one
    fixed pixel, broadcast over the patch. The deterministic rollout then
    lands exactly on that target, so saliency is analytic."""

    bands = 2

    def __init__(self, schedule, probe=(2, 3)):
        self.schedule = schedule
        self.probe = probe

    def predict_eps(self, x_t, t, y_cond):
        ab = self.schedule.alpha_bar(t)
        x0 = np.full(x_t.shape, y_cond[self.probe[0], self.probe[1], 0])
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


class TestSaliencyMap:
    def test_rejects_stochastic_schedules(self):
        schedule = sd.make_schedule(ddim_steps=3, eta=0.5)
        denoiser = sd.GaussianPriorDenoiser(0.0, 4, 2, schedule)
        with pytest.raises(ValueError, match="deterministic"):
            sd.saliency_map(denoiser, np.ones((4, 4, 1)), (0, 0), schedule)

    def test_unconditional_denoiser_gives_zero_map(self):
        schedule = sd.make_schedule(ddim_steps=3)
        denoiser = sd.GaussianPriorDenoiser(0.0, 4, 2, schedule)
        out = sd.saliency_map(denoiser, np.ones((4, 4, 1)), (1, 1), schedule)
        np.testing.assert_array_equal(out, 0.0)

    def test_localizes_the_driving_pixel(self):
        schedule = sd.make_schedule(ddim_steps=4)
        denoiser = PixelProbe(schedule, probe=(2, 3))
        # constant conditioning keeps the patch peak at 1 under any single
        # zeroing, so only the probed pixel can move the output
        out = sd.saliency_map(denoiser, np.ones((4, 4, 1)), (0, 0), schedule)
        want = np.zeros((4, 4))
        # zeroing (2, 3): normalized value swings 1 -> -1, the clean target
        # follows, and the physical output moves by 1 in each of 2 bands
        want[2, 3] = 2.0
        np.testing.assert_allclose(out, want, atol=1e-10)

    def test_stack_averages_patch_maps(self):
        schedule = sd.make_schedule(ddim_steps=4)
        denoiser = PixelProbe(schedule, probe=(2, 3))
        stack = np.stack([np.ones((4, 4, 1)), 2.0 * np.ones((4, 4, 1))])
        out = sd.saliency_map(denoiser, stack, (0, 0), schedule)
        # per-patch scores at the probe are 2/1 and 2/2
        assert out[2, 3] == pytest.approx(1.5, rel=1e-12)
        mask = np.ones((4, 4), dtype=bool)
        mask[2, 3] = False
        np.testing.assert_allclose(out[mask], 0.0, atol=1e-10)

    def test_zero_measurement_pixel_scores_zero(self):
        schedule = sd.make_schedule(ddim_steps=3)
        denoiser = sd.ToyDenoiser(4, 2, 1, hidden=3, emb_dim=2, seed=0)
        y = np.ones((4, 4, 1))
        y[1, 1, 0] = 0.0
        out = sd.saliency_map(denoiser, y, (0, 0), schedule)
        assert out[1, 1] == 0.0

    def test_seeded_and_thread_invariant(self):
        schedule = sd.make_schedule(ddim_steps=3)
        denoiser = sd.ToyDenoiser(4, 2, 1, hidden=3, emb_dim=2, seed=1)
        y = np.random.default_rng(2).random((4, 4, 1)) + 0.5
        a = sd.saliency_map(denoiser, y, (1, 2), schedule, seed=5)
        b = sd.saliency_map(denoiser, y, (1, 2), schedule, seed=5)
        c = sd.saliency_map(denoiser, y, (1, 2), schedule, seed=6)
        d = sd.saliency_map(denoiser, y, (1, 2), schedule, seed=5, workers=3)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        np.testing.assert_array_equal(a, d)

    def test_input_validation(self):
        schedule = sd.make_schedule(ddim_steps=3)
        denoiser = sd.ToyDenoiser(4, 2, 1, hidden=3, emb_dim=2, seed=0)
        with pytest.raises(ValueError, match="outside the patch"):
            sd.saliency_map(denoiser, np.ones((4, 4, 1)), (4, 0), schedule)
        with pytest.raises(ValueError, match="conditioning patches"):
            sd.saliency_map(denoiser, np.ones((4, 4)), (0, 0), schedule)


class TestSaveSaliency:
    def test_round_trips_through_psf_container(self, tmp_path):
        smap = np.random.default_rng(0).random((6, 6))
        path = tmp_path / "saliency.psf"
        sd.save_saliency(path, smap, pixel_pitch_um=2.5)
        psf = read_psf(path)
        np.testing.assert_array_equal(psf.kernels[:, :, 0],
                                      smap.astype(np.float32))
        np.testing.assert_array_equal(psf.grid.wavelengths, [550.0])
        assert psf.pixel_pitch_um == 2.5
