"""Block-level gradient verification against central finite differences.

Each block is rebuilt with fresh random parameters and inputs per trial;
analytic gradients from the tape are compared entry by entry with an
independent central-difference estimate of the same scalar loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone, fusion, pipeline
from .io_formats import Config
from .params import ParamStore
from .rng import RngState
from .tensor import Tensor, max_rel_error, named_gradients

DEFAULT_TOLERANCE = 1e-4
COMPOSED_TOLERANCE = 1e-3
FD_EPS = 1e-5


@dataclass
class BlockResult:
    block: str
    max_err: float
    tolerance: float
    worst: str  # parameter name and flat index of the worst entry

    @property
    def ok(self) -> bool:
        return self.max_err <= self.tolerance


def _fd_entry(loss_fn, tensor: Tensor, flat_idx: int, eps: float = FD_EPS) -> float:
    flat = tensor.data.reshape(-1)
    orig = flat[flat_idx]
    flat[flat_idx] = orig + eps
    f_plus = loss_fn().item()
    flat[flat_idx] = orig - eps
    f_minus = loss_fn().item()
    flat[flat_idx] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def _check_entries(loss_fn, tensors: dict, entries: dict) -> tuple[float, str]:
    """Compare tape gradients of loss_fn against FD on the chosen entries."""
    grads = named_gradients(loss_fn(), tensors)
    worst_err, worst_name = 0.0, "-"
    for name, idxs in entries.items():
        t = tensors[name]
        analytic = grads[name].reshape(-1)
        for i in idxs:
            numeric = _fd_entry(loss_fn, t, i)
            err = max_rel_error(analytic[i], numeric)
            if err > worst_err:
                worst_err, worst_name = err, f"{name}[{i}]"
    return worst_err, worst_name


def _all_entries(tensors: dict) -> dict:
    return {name: range(t.size) for name, t in tensors.items()}


def _randomize(store: ParamStore, rng: RngState, scale: float = 0.6):
    for name, p in store.items():
        p.data = rng.derive("randomize", name).fill_uniform(p.data.shape, -scale, scale)


def _input(rng: RngState, key, shape) -> Tensor:
    keys = key if isinstance(key, tuple) else (key,)
    return Tensor(rng.derive(*keys).fill_uniform(shape, -1.0, 1.0), requires_grad=True)


def _projection_loss(rng: RngState, key, *outputs) -> Tensor:
    """Weighted sum with a fixed random projection, so gradients stay generic."""
    total = None
    for i, out in enumerate(outputs):
        w = Tensor(rng.derive(key, i).fill_uniform(out.shape, -1.0, 1.0))
        term = (out * w).sum()
        total = term if total is None else total + term
    return total


def check_fem(seed: int, trials: int) -> BlockResult:
    worst = BlockResult("fem", 0.0, DEFAULT_TOLERANCE, "-")
    for trial in range(trials):
        rng = RngState(seed).derive("gradcheck", "fem", trial)
        mode = fusion.FEM_MODES[trial % len(fusion.FEM_MODES)]
        store = ParamStore()
        fem = fusion.build_fem(store, rng, "fem", c=4, mode=mode)
        _randomize(store, rng)
        fx = _input(rng, "fx", (4, 3, 3))
        fy = _input(rng, "fy", (4, 3, 3))
        tensors = dict(store.items()) | {"input.fx": fx, "input.fy": fy}

        def loss_fn():
            ox, oy = fusion.fem_forward(fx, fy, fem)
            return _projection_loss(rng, "proj", ox, oy)

        err, name = _check_entries(loss_fn, tensors, _all_entries(tensors))
        if err > worst.max_err:
            worst.max_err, worst.worst = err, f"{name} (mode={mode})"
    return worst


def check_tem(seed: int, trials: int) -> BlockResult:
    worst = BlockResult("tem", 0.0, DEFAULT_TOLERANCE, "-")
    for trial in range(trials):
        rng = RngState(seed).derive("gradcheck", "tem", trial)
        store = ParamStore()
        tem = fusion.build_tem(store, rng, "tem", c=4, n_adapters=2 if trial % 3 else 0)
        _randomize(store, rng)
        tx = _input(rng, "tx", (3, 4))
        ty = _input(rng, "ty", (3, 4))
        tensors = dict(store.items()) | {"input.tx": tx, "input.ty": ty}

        def loss_fn():
            ox, oy = fusion.tem_forward(tx, ty, tem)
            return _projection_loss(rng, "proj", ox, oy)

        err, name = _check_entries(loss_fn, tensors, _all_entries(tensors))
        if err > worst.max_err:
            worst.max_err, worst.worst = err, name
    return worst


def check_agf(seed: int, trials: int) -> BlockResult:
    worst = BlockResult("agf", 0.0, DEFAULT_TOLERANCE, "-")
    heads_cycle = (1, 2, 4)
    for trial in range(trials):
        rng = RngState(seed).derive("gradcheck", "agf", trial)
        store = ParamStore()
        agf = fusion.build_agf(store, rng, "agf", c=4, heads=heads_cycle[trial % 3])
        _randomize(store, rng)
        fx = _input(rng, "fx", (4, 2, 2))
        fy = _input(rng, "fy", (4, 2, 2))
        tensors = dict(store.items()) | {"input.fx": fx, "input.fy": fy}

        def loss_fn():
            return _projection_loss(rng, "proj", fusion.agf_forward(fx, fy, agf))

        err, name = _check_entries(loss_fn, tensors, _all_entries(tensors))
        if err > worst.max_err:
            worst.max_err, worst.worst = err, name
    return worst


def _small_config() -> Config:
    return Config(
        backbone_base_width=8,
        head_width=8,
        head_classes=3,
        data_image_size=32,
    )


def check_head(seed: int, trials: int, entries_per_trial: int = 48) -> BlockResult:
    worst = BlockResult("seg_head", 0.0, DEFAULT_TOLERANCE, "-")
    cfg = _small_config()
    base = 8  # scale-1 spatial size for a 32x32 input
    shapes = [(c, base // 2**i, base // 2**i) for i, c in enumerate(cfg.widths())]
    for trial in range(trials):
        rng = RngState(seed).derive("gradcheck", "head", trial)
        store = ParamStore()
        head = pipeline.build_head(store, rng, cfg)
        _randomize(store, rng)
        fused = [_input(rng, ("fused", i), shape) for i, shape in enumerate(shapes)]
        feats = backbone.MultiScaleFeatures(pairs=[], fused=fused)
        tensors = dict(store.items()) | {f"input.fused{i}": f for i, f in enumerate(fused)}

        def loss_fn():
            return _projection_loss(rng, "proj", pipeline.seg_forward(feats, head))

        pick = rng.derive("pick")
        names = sorted(tensors)
        entries: dict = {}
        for _ in range(entries_per_trial):
            name = names[pick.randint(len(names))]
            entries.setdefault(name, set()).add(pick.randint(tensors[name].size))
        err, name = _check_entries(loss_fn, tensors, {k: sorted(v) for k, v in entries.items()})
        if err > worst.max_err:
            worst.max_err, worst.worst = err, name
    return worst


def check_end_to_end(seed: int, trials: int) -> BlockResult:
    """Composed loss through head + fusion blocks + backbone at 32x32."""
    worst = BlockResult("end_to_end", 0.0, COMPOSED_TOLERANCE, "-")
    cfg = _small_config()
    groups = ("x.", "y.", "fem", "tem", "agf", "head.")
    for trial in range(trials):
        rng = RngState(seed).derive("gradcheck", "e2e", trial)
        model = pipeline.build_model(cfg, seed=seed * 1000 + trial)
        size = cfg.data_image_size
        ir = Tensor(rng.derive("ir").fill_uniform((3, size, size)), requires_grad=True)
        vis = Tensor(rng.derive("vis").fill_uniform((3, size, size)), requires_grad=True)
        mask = (rng.derive("mask").fill_uniform((size, size), 0, cfg.head_classes)).astype(np.int64)
        tensors = dict(model.store.items()) | {"input.ir": ir, "input.vis": vis}

        def loss_fn():
            _, logits = pipeline.model_forward(model, ir, vis)
            return pipeline.cross_entropy(logits, mask)

        pick = rng.derive("pick")
        entries: dict = {}
        for prefix in groups:
            names = sorted(n for n in tensors if n.startswith(prefix))
            name = names[pick.randint(len(names))]
            entries.setdefault(name, set()).add(pick.randint(tensors[name].size))
        entries.setdefault("input.ir", set()).add(pick.randint(ir.size))
        err, name = _check_entries(loss_fn, tensors, {k: sorted(v) for k, v in entries.items()})
        if err > worst.max_err:
            worst.max_err, worst.worst = err, name
    return worst


def run_suite(seed: int = 0, trials: int = 20) -> list[BlockResult]:
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    return [
        check_fem(seed, trials),
        check_tem(seed, trials),
        check_agf(seed, trials),
        check_head(seed, trials),
        check_end_to_end(seed, trials),
    ]
