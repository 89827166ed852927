"""Overfit one fixed batch and watch the noise and anchor losses fall.

Run: python3 demos/overfit.py
"""

from drdiff.denoiser import AnchorSpec, ModelConfig, OptimConfig, init_params, init_state, random_batch, train_step
from drdiff.diffusion import make_schedule
from drdiff.numerics import Rng

sched = make_schedule("sqrt", 1000)
cfg = ModelConfig(vocab=64, d=16, layers=2, heads=2, d_ff=32, n_experts=4, k=2)
state = init_state(init_params(cfg, Rng(11)), Rng(12), OptimConfig(lr=3e-3, warmup=20, weight_decay=0.0))
z0, _, eps = random_batch(state.params, [Rng(13).integers(0, 64, size=64)], sched, Rng(14))[0]
batch = [(z0, 500, eps)]
anchors = [AnchorSpec([250, 500, 750], [0.5] * 3).build(z0, sched, Rng(15))]

for step in range(1, 501):
    _, m = train_step(state, batch, sched, anchors)
    if step == 1 or step % 50 == 0:
        print(f"step {step:>3}  l_diff {m['l_diff']:.4f}  l_sas {m['l_sas']:.4f}  l_aux {m['l_aux']:.5f}  "
              f"dispatch {' '.join(f'{x:.2f}' for x in m['dispatch'])}")
