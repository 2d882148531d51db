from src.synthvid.dataset_io import export_dataset, load_dataset, read_annotations, read_manifest
from src.synthvid.generator import (MIXES, SCENARIOS, SceneSpec, SequenceSample, build_benchmark,
                                    generate_sequence, mix_counts)
