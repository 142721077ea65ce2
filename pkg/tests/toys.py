"""Small pinned toy setups shared by the unit and acceptance suites."""
import numpy as np

from admp.domdata import DatasetSpec, generate
from admp.masking import MaskPair, taylor_importance
from admp.micronet import Network, forward, mlp_spec
from admp.objectives import Batch, channel_search_objective

from oracles import spearman


def taylor_fidelity(seed: int, batch_size: int = 64) -> float:
    """Spearman rank agreement between Taylor importance and exhaustive single-channel ablation.

    The net is 2-6-2 on moons; the student is a copy of the frozen teacher whose soft masks have
    drifted into [0.5, 1], the regime the channel search sees after warm-up.
    """
    rng = np.random.default_rng(seed)
    pair = generate(DatasetSpec("moons", 45.0, n=256, n_val=50, seed=seed))
    spec = mlp_spec([2, 6, 2])
    teacher = Network.init(spec, rng).frozen_copy()
    student = teacher.copy()
    for p in student.parameters():
        p.requires_grad = True
    soft = {0: rng.uniform(0.5, 1.0, 6)}
    masks = MaskPair(soft, {})
    i = rng.integers(0, 256, batch_size)
    batch = Batch(pair.source_x[i], pair.source_y[i], pair.target_x[rng.integers(0, 256, batch_size)])
    teacher_t = forward(teacher, batch.target_x).data

    def objective(gates):
        return channel_search_objective(student, masks, batch, teacher_t, gates).total

    imp = taylor_importance(student, masks, objective)[0]
    base = channel_search_objective(student, masks, batch, teacher_t).value
    loo = []
    for c in range(6):
        hard = np.ones(6)
        hard[c] = 0.0
        loo.append(channel_search_objective(student, MaskPair(soft, {0: hard}), batch, teacher_t).value - base)
    return spearman(imp, loo)
