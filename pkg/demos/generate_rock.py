"""Train a small two-stage model and grow a volume from a single slice.

This is the whole pipeline at toy scale: a synthetic two-class dataset, a
VQ-VAE that compresses 8-slice sequences to 32 codes, a conditional GPT over
those codes, and slice stacking. The iteration counts are far too low for good
samples; the point is the data flow. Takes a few minutes on one core.

    python3 demos/generate_rock.py [workdir]
"""

import sys
from pathlib import Path

from rockgpt.cgpt import GptConfig
from rockgpt.io import VoxelVolume, write_rvox
from rockgpt.morphology import morph_report
from rockgpt.pipeline import RockGPT, build_sequences, load_manifest, train_stage1, train_stage2
from rockgpt.synth import ClassSpec, make_dataset
from rockgpt.vqvae import VqVaeConfig


def main(work: Path):
    classes = [ClassSpec("fine", 1.0, 12, shape=(32, 16, 16)), ClassSpec("coarse", 2.5, 12, shape=(32, 16, 16))]
    make_dataset(classes, seed=0, out_dir=work / "data", test_fraction=0.25)
    manifest = work / "data" / "manifest.json"

    ck1 = train_stage1(manifest, VqVaeConfig(), iterations=300, batch_size=8, out_path=work / "s1", log_every=0)
    print(f"stage 1: loss {ck1.meta['history'][0]:.3f} -> {ck1.meta['history'][-1]:.3f}")
    ck2 = train_stage2(manifest, work / "s1", GptConfig(n_classes=2), iterations=300, batch_size=8,
                       out_path=work / "s2", log_every=0)
    print(f"stage 2: token nll {ck2.meta['history'][0]:.3f} -> {ck2.meta['history'][-1]:.3f}")

    model = RockGPT.load(work / "s2")
    seed_slice = build_sequences(load_manifest(manifest), "test").x[0, 0]
    for label, name in enumerate(("fine", "coarse")):
        vol = model.stack_volume(seed_slice, n_iters=3, label=label, porosity=0.3, seed=1)
        write_rvox(work / f"{name}.rvox", VoxelVolume(vol))
        rep = morph_report(vol, name)
        print(f"{name}: {vol.shape[0]} slices, phi={rep.porosity:.3f}, mean lambda={rep.mean_length:.2f}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run"))
