"""
On-disk dataset layout:

    <dir>/manifest.json         format, version, per-sequence scenario/seed/extents, extra metadata
    <dir>/annotations.jsonl     {"seq": id, "frame": i, "boxes": [{"cx", "cy", "w", "h", "class"}]}
    <dir>/seq_XXX/frame_YYY.ppm binary PPM (P6, 8-bit) frames
"""
import json
import logging
import os

import numpy as np

from src.geometry.boxes import GroundTruthBox
from src.synthvid.generator import SequenceSample
from src.tensor.core import Tensor
from src.utils.errors import DatasetError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.jsonl"
FORMAT = "detnet-synthvid"
VERSION = 1


def sequence_dir(directory, seq_id):
    return os.path.join(directory, f"seq_{seq_id:03d}")


def frame_path(directory, seq_id, frame):
    return os.path.join(sequence_dir(directory, seq_id), f"frame_{frame:03d}.ppm")


def write_ppm(path, image):
    """image: [3, H, W] floats in [0, 1]."""
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def _header_tokens(raw, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    """Returns a [3, H, W] float32 array in [0, 1]."""
    if not os.path.exists(path):
        raise DatasetError(f"frame file missing: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    tokens, offset = _header_tokens(raw, path)
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    if len(raw) - offset < w * h * 3:
        raise DatasetError(f"{path}: pixel data truncated")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=offset)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def export_dataset(samples, directory, metadata=None):
    """
    Writes sequences as PPM frames plus a JSONL annotation file and a manifest.

    Args:
        samples (list): SequenceSample objects.
        directory (str): Output directory (created if missing).
        metadata (dict, optional): Extra manifest fields such as mix and master seed.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    with open(os.path.join(directory, ANNOTATIONS), "w", encoding="utf-8") as ann:
        for sample in samples:
            os.makedirs(sequence_dir(directory, sample.seq_id), exist_ok=True)
            t, _, h, w = sample.frames.shape
            for i in range(t):
                write_ppm(frame_path(directory, sample.seq_id, i), sample.frames.data[i])
                record = {"seq": sample.seq_id, "frame": i, "boxes": [b.to_dict() for b in sample.boxes[i]]}
                ann.write(json.dumps(record) + "\n")
            entries.append({"seq": sample.seq_id, "scenario": sample.scenario, "seed": sample.seed,
                            "frames": t, "height": h, "width": w})
    manifest = {"format": FORMAT, "version": VERSION, "sequences": entries}
    manifest.update(metadata or {})
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info("exported %d sequences to %s", len(entries), directory)
    return directory


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise DatasetError(f"dataset manifest missing: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from e
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path}: not a {FORMAT} manifest")
    return manifest


def read_annotations(path):
    """Parses an annotations.jsonl file into {seq: {frame: [GroundTruthBox]}}."""
    if not os.path.exists(path):
        raise DatasetError(f"annotation file missing: {path}")
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                boxes = [GroundTruthBox.from_dict(b) for b in record["boxes"]]
                table.setdefault(int(record["seq"]), {})[int(record["frame"])] = boxes
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{line_no}: malformed annotation ({e})") from e
    return table


def load_dataset(directory):
    """
    Reads a dataset written by export_dataset.

    Returns:
        list: SequenceSample per manifest entry, frames quantized to 1/255.
    """
    manifest = read_manifest(directory)
    annotations = read_annotations(os.path.join(directory, ANNOTATIONS))
    samples = []
    for entry in manifest["sequences"]:
        seq_id = int(entry["seq"])
        per_frame = annotations.get(seq_id)
        if per_frame is None:
            raise DatasetError(f"{directory}: sequence seq_{seq_id:03d} has no annotations")
        missing = [i for i in range(entry["frames"]) if i not in per_frame]
        if missing:
            raise DatasetError(f"{directory}: sequence seq_{seq_id:03d} lacks annotations for frames {missing[:5]}")
        frames = np.stack([read_ppm(frame_path(directory, seq_id, i)) for i in range(entry["frames"])])
        samples.append(SequenceSample(Tensor.wrap(frames), [per_frame[i] for i in range(entry["frames"])],
                                      entry["scenario"], int(entry["seed"]), seq_id))
    logger.info("loaded %d sequences from %s", len(samples), directory)
    return samples
