"""Portable checkpoint container.

A checkpoint is a ``.npz`` archive with a documented key layout:

    format_version      int64 scalar, currently 1
    config_json         the full run config plus the boolean-token prior
    iteration           int64 scalar
    rng_state           uint8 array, trainer RNG stream
    torch_rng_state     uint8 array, global torch RNG
    net/<name>          one array per named network parameter, in module order
    opt/<i>/exp_avg     Adam first moment of parameter i (same order as net/)
    opt/<i>/exp_avg_sq  Adam second moment
    opt/<i>/step        Adam step count

Weights are stored exactly as trained (float32 or float64).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import (
    ConfigError,
    RunConfig,
    run_config_from_dict,
    run_config_to_dict,
)
from .denoiser import CascadeNets
from .kernels import EmpiricalPrior, TransitionSchedule, make_schedule

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    run_config: RunConfig
    prior: EmpiricalPrior | None
    iteration: int
    rng_state: np.ndarray
    torch_rng_state: np.ndarray
    weights: dict[str, np.ndarray]
    opt_state: dict[int, dict[str, np.ndarray]]

    def build_nets(self) -> CascadeNets:
        dtype = torch.float64 if self.run_config.train.dtype == "float64" else torch.float32
        nets = CascadeNets(self.run_config.net, seed=0, dtype=dtype)
        named = dict(nets.named_parameters())
        missing = set(named) - set(self.weights)
        extra = set(self.weights) - set(named)
        if missing or extra:
            raise CheckpointError(f"weight mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        with torch.no_grad():
            for name, arr in self.weights.items():
                tensor = torch.from_numpy(arr.copy())
                if tensor.shape != named[name].shape:
                    raise CheckpointError(f"shape mismatch for {name}")
                named[name].copy_(tensor)
        for name, p in nets.named_parameters():
            if not torch.all(torch.isfinite(p)):
                raise CheckpointError(f"non-finite weights in {name}")
        return nets

    def build_schedule(self) -> TransitionSchedule:
        return make_schedule(self.run_config.schedule, prior=self.prior)

    def restore_optimizer(self, nets: CascadeNets,
                          optimizer: torch.optim.Optimizer) -> None:
        if not self.opt_state:
            return
        params = [p for group in optimizer.param_groups for p in group["params"]]
        state: dict = {}
        for i, moments in self.opt_state.items():
            if i >= len(params):
                raise CheckpointError(f"optimizer state index {i} out of range")
            state[i] = {
                "step": torch.tensor(float(moments["step"])),
                "exp_avg": torch.from_numpy(moments["exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(moments["exp_avg_sq"].copy()),
            }
        sd = optimizer.state_dict()
        sd["state"] = state
        optimizer.load_state_dict(sd)


def save_checkpoint(path: str | Path, run_config: RunConfig,
                    prior: EmpiricalPrior | None, nets: CascadeNets,
                    optimizer: torch.optim.Optimizer | None,
                    iteration: int, rng_state: np.ndarray) -> None:
    arrays: dict[str, np.ndarray] = {
        "format_version": np.int64(FORMAT_VERSION),
        "iteration": np.int64(iteration),
        "rng_state": np.asarray(rng_state, dtype=np.uint8),
        "torch_rng_state": torch.get_rng_state().numpy(),
    }
    doc = run_config_to_dict(run_config)
    doc["prior"] = (
        {"valid_set": list(prior.valid_set), "probs": list(prior.probs)}
        if prior is not None else None
    )
    arrays["config_json"] = np.frombuffer(
        json.dumps(doc).encode("utf-8"), dtype=np.uint8
    ).copy()
    for name, p in nets.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise CheckpointError(f"refusing to save non-finite weights in {name}")
        arrays[f"net/{name}"] = p.detach().numpy().copy()
    if optimizer is not None:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        for i, p in enumerate(params):
            st = optimizer.state.get(p)
            if not st:
                continue
            arrays[f"opt/{i}/step"] = np.float64(float(st["step"]))
            arrays[f"opt/{i}/exp_avg"] = st["exp_avg"].numpy().copy()
            arrays[f"opt/{i}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if "format_version" not in data or int(data["format_version"]) != FORMAT_VERSION:
        raise CheckpointError("unknown checkpoint format version")
    doc = json.loads(bytes(data["config_json"].tolist()).decode("utf-8"))
    prior_doc = doc.pop("prior", None)
    try:
        run_config = run_config_from_dict(doc)
    except ConfigError as exc:
        raise CheckpointError(f"bad embedded config: {exc}") from exc
    prior = None
    if prior_doc is not None:
        prior = EmpiricalPrior(
            tuple(int(v) for v in prior_doc["valid_set"]),
            tuple(float(p) for p in prior_doc["probs"]),
        )
    weights = {
        k[len("net/"):]: data[k] for k in data.files if k.startswith("net/")
    }
    opt_state: dict[int, dict[str, np.ndarray]] = {}
    for k in data.files:
        if k.startswith("opt/"):
            _, idx, field = k.split("/")
            opt_state.setdefault(int(idx), {})[field] = data[k]
    return Checkpoint(
        run_config=run_config,
        prior=prior,
        iteration=int(data["iteration"]),
        rng_state=np.asarray(data["rng_state"], dtype=np.uint8),
        torch_rng_state=np.asarray(data["torch_rng_state"], dtype=np.uint8),
        weights=weights,
        opt_state=opt_state,
    )
