"""Train the dual-CNN extractor on a small source domain, then run a
short born-again distillation lineage and pick the best generation.

Scaled down from the full recipe (fewer classes, segments, epochs and
generations) so it finishes in a few minutes on a laptop CPU; the full
recipe lives in configs/e2e_small.json and the defaults of TrainConfig /
DistillConfig.
"""

from pathlib import Path

from dasecount.convnet import TrainConfig, save_checkpoint, train_extractor
from dasecount.csidata import load_manifest
from dasecount.distill import DistillConfig, distill_lineage, save_lineage, select_generation
from dasecount.preprocess import SegmentationConfig, preprocess_dataset
from dasecount.synth import CrowdMotionConfig, GenerationSpec, SceneConfig, generate_dataset

out = Path("demo_output")

scene = SceneConfig(
    scenario_id="src", n_static_paths=12, los_gain=1.0, nsc=64, nr=2, nt=1,
    snr_db=25.0, bandwidth=20e6,
)
spec = GenerationSpec(
    scenes=(scene,),
    motion=CrowdMotionConfig(),
    motion_types=("dynamic",),
    crowd_counts=(0, 2, 4, 6, 8),
    duration_frames=128 + 19 * 32,  # 20 segments per class
    base_seed=1,
)
manifest = generate_dataset(spec, out / "src_data")
store = preprocess_dataset(manifest, SegmentationConfig(tw=128, ts=32))
print(f"{len(store)} samples, {store.num_classes} classes")

cfg = TrainConfig(batch_size=16, epochs=8, seed=5, val_curve=True)
extractor, curves = train_extractor(store, cfg)
print(f"val accuracy: amp {curves['amp'].final_val_acc:.3f}  phd {curves['phd'].final_val_acc:.3f}")
print(f"amp loss curve: {[round(l, 3) for l in curves['amp'].train_loss]}")
save_checkpoint(extractor, out / "gen0.ckpt", train_config=cfg)

distill_cfg = DistillConfig(generations=2, epochs=6, batch_size=32, seed=5)
lineage = distill_lineage(extractor, store, distill_cfg, split_seed=cfg.seed)
for g, acc in enumerate(lineage.val_accuracy):
    print(f"generation {g}: amp {acc['amp']:.3f}  phd {acc['phd']:.3f}  combined {acc['combined']:.3f}")
chosen = select_generation(lineage, "source_val")
print(f"selected generation {lineage.chosen}")
save_lineage(lineage, out / "lineage")
