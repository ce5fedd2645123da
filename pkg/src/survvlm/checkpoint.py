"""Checkpoint file: one line of JSON header, then a little-endian float64 payload.

The payload holds every parameter array in declared group order
(:data:`~survvlm.model.GROUP_ORDER`, then insertion order within a group),
followed by the optimizer moments for the groups listed in the header.
Loading and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import GROUP_ORDER, ModelConfig, ModelParams
from .optim import AdamWState

FORMAT = "survvlm-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: list[str]
    questions: list[str]
    stage: str = "Init"
    step: int = 0
    seed: int = 0
    train_config: dict | None = None
    optimizer: AdamWState | None = None
    time_grid: list[float] | None = None
    sigma: float | None = None
    extra: dict = field(default_factory=dict)

    def _header(self, opt_groups: list[str]) -> dict:
        p = self.params
        # lists, not maps: the payload order must survive sorted-key JSON
        shapes = {g: [[n, list(a.shape)] for n, a in p.groups[g].items()] for g in GROUP_ORDER}
        return {
            "format": FORMAT,
            "version": VERSION,
            "model_config": p.config.to_dict(),
            "shapes": shapes,
            "frozen": {g: bool(p.frozen[g]) for g in GROUP_ORDER},
            "stage": self.stage,
            "step": int(self.step),
            "seed": int(self.seed),
            "train_config": self.train_config,
            "vocab": list(self.vocab),
            "questions": list(self.questions),
            "time_grid": None if self.time_grid is None else [float(x) for x in self.time_grid],
            "sigma": None if self.sigma is None else float(self.sigma),
            "optimizer": None if self.optimizer is None else {
                "groups": opt_groups,
                "t": {g: int(self.optimizer.t.get(g, 0)) for g in opt_groups},
            },
            "extra": self.extra,
        }

    def to_bytes(self) -> bytes:
        opt_groups = []
        if self.optimizer is not None:
            opt_groups = [g for g in GROUP_ORDER if g in self.optimizer.m]
        header = json.dumps(self._header(opt_groups), sort_keys=True, separators=(",", ":"))
        chunks = [header.encode("utf-8"), b"\n"]
        for g in GROUP_ORDER:
            for a in self.params.groups[g].values():
                chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        for g in opt_groups:
            for moments in (self.optimizer.m[g], self.optimizer.v[g]):
                for name in self.params.groups[g]:
                    chunks.append(np.ascontiguousarray(moments[name], dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        nl = blob.index(b"\n")
        header = json.loads(blob[:nl].decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError("not a checkpoint file")
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_dict(header["model_config"])
        offset = nl + 1

        def take(shape):
            nonlocal offset
            n = int(np.prod(shape)) * 8
            if offset + n > len(blob):
                raise ValueError("truncated checkpoint payload")
            arr = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(np.float64)
            offset += n
            return arr

        groups = {g: {n: take(tuple(s)) for n, s in header["shapes"][g]} for g in GROUP_ORDER}
        params = ModelParams(config, groups, {g: bool(header["frozen"][g]) for g in GROUP_ORDER})
        optimizer = None
        if header["optimizer"] is not None:
            optimizer = AdamWState()
            for g in header["optimizer"]["groups"]:
                optimizer.m[g] = {n: take(a.shape) for n, a in groups[g].items()}
                optimizer.v[g] = {n: take(a.shape) for n, a in groups[g].items()}
                optimizer.t[g] = int(header["optimizer"]["t"][g])
        if offset != len(blob):
            raise ValueError("trailing bytes after checkpoint payload")
        return cls(
            params=params,
            vocab=header["vocab"],
            questions=header["questions"],
            stage=header["stage"],
            step=header["step"],
            seed=header["seed"],
            train_config=header["train_config"],
            optimizer=optimizer,
            time_grid=header["time_grid"],
            sigma=header["sigma"],
            extra=header.get("extra") or {},
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
