"""Sparsity against low rank: sweep tau = w_s / w_lr.

tau is measured relative to the default weight pair (tau = 1).  tau = 0
keeps only the low-rank prior and tau = inf only the sparse one.  With
random missing pixels the best result sits between the two extremes.

    python3 demos/tau_sweep.py
"""
import numpy as np

from hsinpaint import PatchLayout, SolverConfig, SynthSpec, gen_lowrank_cube, gen_mask, mpsnr, run
from hsinpaint.dictionary import learn_dictionary, training_patches, training_weights
from hsinpaint.synth import observe

taus = [0.0, 0.5, 1.0, 2.0, np.inf]
layout = PatchLayout.sliding(8, 4)
clean = gen_lowrank_cube(SynthSpec(32, 32, 16, 4, seed=1))

print("missing  " + "".join(f"tau={t:<6g}" for t in taus))
for frac in (0.25, 0.5):
    mask = gen_mask(clean.shape, "random-pixels", fraction=frac, seed=101)
    observed = observe(clean, mask, 0.12, seed=1001)
    # no patch is fully observed, so the fit ignores the missing entries
    phi, _ = learn_dictionary(training_patches(observed, mask, layout), 96, epochs=10, seed=1,
                              weights=training_weights(mask, layout))
    scores = [mpsnr(run(observed, mask, phi, SolverConfig().with_tau(t), layout)[0], clean)
              for t in taus]
    best = int(np.argmax(scores))
    print(f"{int(frac * 100):>5d}%   " + "".join(
        f"{s:6.2f}{'*' if i == best else ' '}   " for i, s in enumerate(scores)))
print("(* best; MPSNR in dB)")
