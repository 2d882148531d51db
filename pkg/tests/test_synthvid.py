import json
import os

import numpy as np
import pytest

from src.synthvid import (SceneSpec, build_benchmark, export_dataset, generate_sequence, load_dataset, mix_counts,
                          read_manifest)
from src.synthvid.dataset_io import read_ppm, write_ppm
from src.synthvid.generator import disk_kernel, line_kernel, sequence_seeds
from src.utils.errors import ConfigError, DatasetError


def gradient_energy(frames):
    return float((np.diff(frames, axis=-1) ** 2).sum() + (np.diff(frames, axis=-2) ** 2).sum())


class TestSceneSpec:
    def test_infeasible_motion_is_rejected(self):
        with pytest.raises(ConfigError, match="cannot keep objects in frame"):
            SceneSpec(speed_range=(0.5, 5.0))

    def test_too_few_frames(self):
        with pytest.raises(ConfigError, match="num_frames"):
            SceneSpec(num_frames=10)

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            SceneSpec(scenario="fog")

    def test_reversed_range(self):
        with pytest.raises(ConfigError, match="size_range"):
            SceneSpec(size_range=(12.0, 8.0))


class TestGenerateSequence:
    def test_same_seed_same_sequence(self):
        spec = SceneSpec(scenario="blur", seed=11)
        a, b = generate_sequence(spec), generate_sequence(spec)
        assert np.array_equal(a.frames.data, b.frames.data)
        assert a.boxes == b.boxes

    def test_different_seeds_differ(self):
        a = generate_sequence(SceneSpec(seed=1))
        b = generate_sequence(SceneSpec(seed=2))
        assert not np.array_equal(a.frames.data, b.frames.data)

    def test_shapes_and_range(self):
        sample = generate_sequence(SceneSpec(seed=4))
        assert sample.frames.shape == (21, 3, 64, 64)
        assert sample.num_frames == len(sample.boxes) == 21
        assert sample.frames.data.min() >= 0.0 and sample.frames.data.max() <= 1.0

    def test_objects_stay_in_frame(self):
        for seed in range(30):
            spec = SceneSpec(seed=seed, scenario="clean")
            for frame_boxes in generate_sequence(spec).boxes:
                for box in frame_boxes:
                    assert box.cx - box.w / 2 >= -1e-9 and box.cx + box.w / 2 <= spec.width + 1e-9
                    assert box.cy - box.h / 2 >= -1e-9 and box.cy + box.h / 2 <= spec.height + 1e-9

    def test_static_scene_is_constant(self):
        spec = SceneSpec(speed_range=(0.0, 0.0), jitter_px=0.0, noise_level=0.0, seed=3)
        sample = generate_sequence(spec)
        assert all(boxes == sample.boxes[0] for boxes in sample.boxes)
        assert np.array_equal(sample.frames.data[0], sample.frames.data[-1])

    def test_constant_velocity(self):
        spec = SceneSpec(height=128, width=128, speed_range=(3.0, 3.0), heading_range=(0.0, 0.0),
                         jitter_px=0.0, object_count=(1, 1), seed=5)
        boxes = [frame_boxes[0] for frame_boxes in generate_sequence(spec).boxes]
        np.testing.assert_allclose([b.cx - boxes[0].cx for b in boxes], 3.0 * np.arange(21), atol=1e-9)
        np.testing.assert_allclose([b.cy for b in boxes], boxes[0].cy, atol=1e-9)

    def test_jitter_is_bounded(self):
        spec = SceneSpec(height=128, width=128, speed_range=(2.0, 2.0), heading_range=(90.0, 90.0),
                         jitter_px=0.5, object_count=(1, 1), seed=8)
        boxes = [frame_boxes[0] for frame_boxes in generate_sequence(spec).boxes]
        expected = boxes[0].cy + 2.0 * np.arange(21)
        assert np.all(np.abs(np.array([b.cy for b in boxes]) - expected) <= 1.0 + 1e-9)

    def test_boxes_match_rendered_rectangle(self):
        spec = SceneSpec(object_count=(1, 1), noise_level=0.0, seed=12)
        sample = generate_sequence(spec)
        for t in (0, 10, 20):
            box = sample.boxes[t][0]
            x1, x2 = int(np.ceil(box.cx - box.w / 2)), int(np.floor(box.cx + box.w / 2))
            y1, y2 = int(np.ceil(box.cy - box.h / 2)), int(np.floor(box.cy + box.h / 2))
            interior = sample.frames.data[t][:, y1:y2, x1:x2]
            assert interior.size > 0
            assert np.all(interior.std(axis=(1, 2)) < 1e-6)

    def test_motion_blur_softens_edges(self):
        clean = generate_sequence(SceneSpec(speed_range=(1.5, 1.5), noise_level=0.0, seed=21))
        blurred = generate_sequence(SceneSpec(speed_range=(1.5, 1.5), noise_level=0.0, scenario="blur", seed=21))
        assert blurred.boxes == clean.boxes
        assert gradient_energy(blurred.frames.data) < gradient_energy(clean.frames.data)

    def test_defocus_softens_edges(self):
        clean = generate_sequence(SceneSpec(noise_level=0.0, seed=22))
        soft = generate_sequence(SceneSpec(noise_level=0.0, scenario="defocus", seed=22))
        assert gradient_energy(soft.frames.data) < gradient_energy(clean.frames.data)

    def test_dark_scales_intensity(self):
        clean = generate_sequence(SceneSpec(noise_level=0.0, seed=23))
        dark = generate_sequence(SceneSpec(noise_level=0.0, scenario="dark", seed=23))
        np.testing.assert_allclose(dark.frames.data, clean.frames.data * 0.35, atol=1e-6)

    def test_kernels_are_normalized(self):
        assert line_kernel((1.0, 1.0), 5.0).sum() == pytest.approx(1.0)
        assert disk_kernel(2.0).sum() == pytest.approx(1.0)
        assert line_kernel((0.0, 0.0), 5.0).shape == (1, 1)


class TestBenchmark:
    def test_mix_counts_largest_remainder(self):
        assert mix_counts(10, "standard") == {"clean": 3, "blur": 3, "defocus": 2, "dark": 2}
        assert mix_counts(7, "blur_heavy") == {"clean": 1, "blur": 4, "defocus": 1, "dark": 1}
        assert sum(mix_counts(13, {"clean": 1, "dark": 2}).values()) == 13

    def test_unknown_mix(self):
        with pytest.raises(ConfigError):
            mix_counts(10, "rainy")

    def test_seeds_depend_only_on_master_seed(self):
        assert sequence_seeds(5, 4) == sequence_seeds(5, 6)[:4]
        assert sequence_seeds(5, 4) != sequence_seeds(6, 4)

    def test_worker_count_does_not_change_output(self):
        spec = SceneSpec()
        one = build_benchmark(6, master_seed=2, base_spec=spec, workers=1, progress=False)
        many = build_benchmark(6, master_seed=2, base_spec=spec, workers=3, progress=False)
        assert [s.seq_id for s in many] == list(range(6))
        for a, b in zip(one, many):
            assert a.scenario == b.scenario and a.seed == b.seed
            assert np.array_equal(a.frames.data, b.frames.data)

    @pytest.mark.slow
    def test_full_benchmark_mix(self):
        samples = build_benchmark(200, master_seed=0, progress=False, workers=4)
        scenarios = [s.scenario for s in samples]
        assert {s: scenarios.count(s) for s in set(scenarios)} == {"clean": 50, "blur": 50, "defocus": 50, "dark": 50}


class TestDatasetIO:
    def test_ppm_round_trip_quantizes(self, tmp_path, rng):
        image = rng.uniform(size=(3, 5, 7))
        path = str(tmp_path / "f.ppm")
        write_ppm(path, image)
        np.testing.assert_allclose(read_ppm(path), image, atol=0.5 / 255 + 1e-6)

    def test_ppm_header_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        image = read_ppm(str(path))
        assert image.shape == (3, 1, 2)
        np.testing.assert_allclose(image[:, 0, 0], [1.0, 0.0, 0.0])

    def test_truncated_ppm(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(DatasetError, match="truncated"):
            read_ppm(str(path))

    def test_export_and_load(self, tmp_path):
        samples = build_benchmark(3, master_seed=1, progress=False)
        directory = str(tmp_path / "bench")
        export_dataset(samples, directory, metadata={"mix": "standard", "master_seed": 1})
        manifest = read_manifest(directory)
        assert manifest["master_seed"] == 1 and len(manifest["sequences"]) == 3
        assert os.path.exists(os.path.join(directory, "seq_002", "frame_020.ppm"))

        loaded = load_dataset(directory)
        for original, restored in zip(samples, loaded):
            assert restored.seq_id == original.seq_id and restored.scenario == original.scenario
            assert restored.boxes == original.boxes
            np.testing.assert_allclose(restored.frames.data, original.frames.data, atol=0.5 / 255 + 1e-6)

    def test_sequence_without_annotations(self, tmp_path):
        directory = str(tmp_path / "bench")
        export_dataset(build_benchmark(2, progress=False), directory)
        path = os.path.join(directory, "annotations.jsonl")
        with open(path, "r", encoding="utf-8") as f:
            records = [json.loads(line) for line in f]
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                if record["seq"] != 1:
                    f.write(json.dumps(record) + "\n")
        with pytest.raises(DatasetError, match="seq_001"):
            load_dataset(directory)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(str(tmp_path))
