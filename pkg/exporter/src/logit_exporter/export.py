"""Batch inference over an ordered model list, dumped as a UQC1 score table.

Models are the cascade stages, in order. Logits are written raw (no softmax,
no temperature); every post-processing decision belongs to the evaluation
engine. Inference runs in eval mode without augmentation, so the output is
deterministic given the weights and the dataset order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .macs import count_macs
from .uqc1 import DOMAIN_ID, DOMAIN_OOD, OOD_LABEL, write_uqc1


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    models: list  # model identifiers (paths or torchvision names), stage order
    data: str  # dataset path: .npz file or an image directory
    domain: str  # "id" or "ood"
    out: str
    batch_size: int = 64
    mac_override: list | None = None
    device: str = "cpu"
    limit: int | None = None  # cap on the number of samples

    def __post_init__(self):
        if self.domain not in ("id", "ood"):
            raise ExportError(f"domain must be 'id' or 'ood', got {self.domain!r}")
        if not self.models:
            raise ExportError("need at least one model")
        if self.mac_override is not None and len(self.mac_override) != len(self.models):
            raise ExportError("one MAC override per model required")


def load_model(identifier: str, device: str = "cpu") -> nn.Module:
    """Load a stage model: a .pt/.pth checkpoint or a torchvision model name.

    Checkpoints may be TorchScript archives or pickled nn.Module objects.
    Names are resolved through torchvision with their default weights.
    """
    path = Path(identifier)
    if path.suffix in (".pt", ".pth") or path.exists():
        if not path.exists():
            raise ExportError(f"model checkpoint not found: {path}")
        try:
            model = torch.load(str(path), map_location=device, weights_only=False)
        except Exception:
            import warnings

            with warnings.catch_warnings():  # legacy TorchScript archives
                warnings.simplefilter("ignore", DeprecationWarning)
                model = torch.jit.load(str(path), map_location=device)
        if not isinstance(model, nn.Module):
            raise ExportError(f"{path} did not contain a torch module")
        return model.to(device)
    try:
        from torchvision import models as tvm
    except ImportError:
        raise ExportError(
            f"{identifier!r} is not a checkpoint path and torchvision is unavailable"
        ) from None
    try:
        model = tvm.get_model(identifier, weights="DEFAULT")
    except Exception as e:
        raise ExportError(f"cannot load torchvision model {identifier!r}: {e}") from None
    return model.to(device)


def load_dataset(path: str, limit: int | None = None):
    """(inputs [N, ...] float32 tensor, labels [N] int64 or None).

    .npz files must hold ``x`` and optionally ``y``. Directories are read
    as torchvision ImageFolder trees.
    """
    p = Path(path)
    if not p.exists():
        raise ExportError(f"dataset not readable: {p}")
    if p.is_file() and p.suffix == ".npz":
        blob = np.load(p)
        if "x" not in blob:
            raise ExportError(f"{p} has no array named 'x'")
        x = torch.from_numpy(np.ascontiguousarray(blob["x"], dtype=np.float32))
        y = None
        if "y" in blob:
            y = torch.from_numpy(np.ascontiguousarray(blob["y"], dtype=np.int64))
            if y.shape[0] != x.shape[0]:
                raise ExportError("x and y lengths differ")
        if limit is not None:
            x = x[:limit]
            y = y[:limit] if y is not None else None
        return x, y
    if p.is_dir():
        try:
            from torchvision import transforms
            from torchvision.datasets import ImageFolder
        except ImportError:
            raise ExportError("image-directory datasets require torchvision") from None
        tfm = transforms.Compose([transforms.ToTensor()])
        ds = ImageFolder(str(p), transform=tfm)
        n = len(ds) if limit is None else min(limit, len(ds))
        xs, ys = [], []
        for i in range(n):
            img, label = ds[i]
            xs.append(img)
            ys.append(label)
        return torch.stack(xs), torch.tensor(ys, dtype=torch.int64)
    raise ExportError(f"unsupported dataset path: {p}")


def _forward_logits(model: nn.Module, inputs: torch.Tensor, batch_size: int) -> np.ndarray:
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            out = model(inputs[start : start + batch_size])
            if isinstance(out, (tuple, list)):
                out = out[0]
            chunks.append(out.detach().cpu().to(torch.float32).numpy())
    return np.concatenate(chunks, axis=0)


def export(job: ExportJob) -> Path:
    """Run every stage over the dataset and write the UQC1 table."""
    inputs, labels = load_dataset(job.data, job.limit)
    if inputs.shape[0] == 0:
        raise ExportError("dataset is empty")
    inputs = inputs.to(job.device)

    stage_logits = []
    stage_cost = []
    k = None
    for ident in job.models:
        model = load_model(ident, job.device)
        logits = _forward_logits(model, inputs, job.batch_size)
        if logits.ndim != 2:
            raise ExportError(f"model {ident!r} emitted shape {logits.shape}, want [N, K]")
        if k is None:
            k = logits.shape[1]
        elif logits.shape[1] != k:
            raise ExportError(
                f"label-space mismatch: {ident!r} has K={logits.shape[1]}, expected {k}"
            )
        stage_logits.append(logits)
        stage_cost.append(count_macs(model, inputs[:1]))

    if job.mac_override is not None:
        stage_cost = [float(c) for c in job.mac_override]

    n = inputs.shape[0]
    if job.domain == "ood":
        out_labels = np.full(n, OOD_LABEL, dtype=np.int32)
        domain = np.full(n, DOMAIN_OOD, dtype=np.uint8)
    else:
        if labels is None:
            raise ExportError("ID export needs labels ('y' array or class folders)")
        out_labels = labels.numpy().astype(np.int32)
        if out_labels.min() < 0 or out_labels.max() >= k:
            raise ExportError(f"labels outside [0, {k})")
        domain = np.full(n, DOMAIN_ID, dtype=np.uint8)

    out = Path(job.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_uqc1(out, np.stack(stage_logits, axis=0), out_labels, domain, stage_cost)
    return out
