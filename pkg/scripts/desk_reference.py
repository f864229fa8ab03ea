"""Reference run of the desk-scale distillation fixture.

Prints the teacher NMI profile, the selected target layer, the held-out KL
trajectory and the final student NMI. Used to validate the fixture before the
acceptance thresholds were pinned.
"""

import argparse
import time

import numpy as np

from nmidistill.desk import build_desk_fixture
from nmidistill.distill import run_distillation, teacher_layer_nmi


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t0 = time.time()
    fx = build_desk_fixture(seed=args.seed)
    print(f"teacher trained in {time.time() - t0:.0f}s")
    nmi = teacher_layer_nmi(fx.teacher_config, fx.teacher_params, fx.train_images[: fx.plan.selection_images])
    print("teacher layer NMI:", np.round(nmi, 4).tolist())
    res = run_distillation(fx.teacher_config, fx.teacher_params, fx.student_config,
                           fx.train_images, fx.heldout_images, fx.plan,
                           progress=lambda e, h, n: print(f"epoch {e:2d} heldout KL {h:.5f} student NMI {n:.4f}"))
    log = res.log
    print("target layer:", log.target_layers, "teacher target NMI:", round(log.teacher_target_nmi, 4))
    print("initial heldout KL:", round(log.initial_heldout, 5))
    print("final/initial KL ratio:", round(log.epoch_heldout[-1] / log.initial_heldout, 4))
    print("student NMI gap:", round(abs(log.epoch_student_nmi[-1] - log.teacher_target_nmi), 4))
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
