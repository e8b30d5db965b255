import math

import numpy as np
import pytest

from gazetarget import synth
from gazetarget.synth import Disk, GazeSegment, SceneGenerationError, SyntheticSceneSpec


def simple_spec(target=0, theta=0.0, length=1, noise=0.0):
    head = Disk(16.0, 32.0, 6.0, synth.HEAD_COLOR)
    objects = (Disk(48.0, 32.0, 4.0, synth.PALETTE[0]), Disk(32.0, 56.0, 4.0, synth.PALETTE[1]))
    return SyntheticSceneSpec(3, 64, head, objects, (GazeSegment(0, target, theta),), length, noise=noise)


def shift_count(track):
    targets = [a.gaze for a in track.frames]
    return sum(1 for a, b in zip(targets, targets[1:]) if a != b)


class TestSpec:
    def test_single_object_on_ray(self):
        frames, track = synth.generate_clip(simple_spec())
        a = track.frames[0]
        assert a.inframe
        assert a.gaze == (48 / 64, 32 / 64)
        assert frames.shape == (1, 64, 64, 3)

    def test_out_of_frame(self):
        # looking straight left, away from both objects
        _, track = synth.generate_clip(simple_spec(target=None, theta=math.pi))
        assert not track.frames[0].inframe and track.frames[0].gaze is None

    def test_target_outside_cone_rejected(self):
        with pytest.raises(SceneGenerationError, match="cone"):
            synth.validate_spec(simple_spec(theta=math.radians(40)))

    def test_distractor_on_ray_rejected(self):
        with pytest.raises(SceneGenerationError, match="ray"):
            synth.validate_spec(SyntheticSceneSpec(
                3, 64, Disk(16.0, 32.0, 6.0, synth.HEAD_COLOR),
                (Disk(48.0, 32.0, 4.0, synth.PALETTE[0]), Disk(32.0, 33.0, 4.0, synth.PALETTE[1])),
                (GazeSegment(0, 0, 0.0),), 1))

    def test_head_box(self):
        _, track = synth.generate_clip(simple_spec())
        np.testing.assert_allclose(track.frames[0].bbox, (10 / 64, 26 / 64, 22 / 64, 38 / 64))

    def test_object_centroid(self):
        frames, _ = synth.generate_clip(simple_spec())
        mask = np.all(frames[0] == synth.PALETTE[0], axis=-1)
        ys, xs = np.nonzero(mask)
        assert abs(xs.mean() + 0.5 - 48.0) <= 0.5 and abs(ys.mean() + 0.5 - 32.0) <= 0.5

    def test_notch_points_along_orientation(self):
        frames, _ = synth.generate_clip(simple_spec())
        ys, xs = np.nonzero(np.all(frames[0] == synth.NOTCH_COLOR, axis=-1))
        assert xs.mean() + 0.5 > 16.0 + 2.0
        assert abs(ys.mean() + 0.5 - 32.0) <= 0.5


class TestRandomScenes:
    @pytest.mark.parametrize("difficulty", synth.DIFFICULTIES)
    def test_validator_sweep(self, difficulty):
        for seed in range(500):
            synth.validate_spec(synth.random_scene_spec(seed, difficulty))

    def test_hard_clips_shift(self):
        for seed in range(200):
            _, track = synth.generate_clip(synth.random_scene_spec(seed, "hard"))
            assert shift_count(track) >= 1

    def test_easy_clips_single_target(self):
        for seed in range(100):
            _, track = synth.generate_clip(synth.random_scene_spec(seed, "easy"))
            assert shift_count(track) == 0

    def test_inframe_balance(self):
        rate = np.mean([synth.random_scene_spec(seed).segments[0].target is not None for seed in range(1000)])
        assert 0.55 <= rate <= 0.75

    def test_forced_inframe(self):
        assert synth.random_scene_spec(5, inframe=False).segments[0].target is None
        assert synth.random_scene_spec(5, inframe=True).segments[0].target is not None

    def test_same_seed_same_clip(self):
        a = synth.generate_clip(synth.random_scene_spec(11, "hard"))
        b = synth.generate_clip(synth.random_scene_spec(11, "hard"))
        assert a[0].tobytes() == b[0].tobytes()
        assert a[1].frames == b[1].frames


class TestDataset:
    def test_identical_reruns(self, tmp_path):
        synth.make_dataset(tmp_path / "a", 5, "easy", seed=4)
        synth.make_dataset(tmp_path / "b", 5, "easy", seed=4)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_split_and_load(self, tmp_path):
        info = synth.make_dataset(tmp_path, 10, "hard", seed=1)
        assert len(info.splits["train"]) == 8 and len(info.splits["test"]) == 2
        clips = synth.load_dataset(tmp_path, "test")
        assert [c.clip_id for c in clips] == info.splits["test"]
        assert clips[0].frames.shape == (8, 64, 64, 3)
        assert not set(info.clip_seeds[c] for c in info.splits["train"]) & set(
            info.clip_seeds[c] for c in info.splits["test"])
