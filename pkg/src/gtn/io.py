"""Persistence: checkpoints, run configs, CSV reports, PGM/PPM images, manifests.

Checkpoint layout (all integers little-endian u32)::

    b"GTNC" | version | tensor count
    per tensor: name length | name (utf-8) | rank | extents... | float32 values
    state length | state (utf-8 JSON, sorted keys)

The JSON state holds the iteration counter, the outer optimizer step count,
the run configuration and the seed; every random draw in a run is derived
from ``(seed, iteration, purpose)`` so that is all the rng state there is.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .meta import Adam, ExperimentRecord, InnerHyper, MetaTrainer, OuterConfig, build_source
from .teacher import DistilledTensorBank, TeacherState

MAGIC = b"GTNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# files

def atomic_write(path, data: bytes | str):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_csv(path, rows, columns):
    atomic_write(path, csv_text(rows, columns))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(directory, name="manifest.csv"):
    """List every file under ``directory`` (except the manifest) with its sha256."""
    directory = Path(directory)
    rows = [dict(file=p.relative_to(directory).as_posix(), bytes=p.stat().st_size, sha256=sha256(p))
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != name]
    write_csv(directory / name, rows, ("file", "bytes", "sha256"))
    return rows


# ---------------------------------------------------------------------------
# tensor container

def encode_tensors(tensors: dict, state: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        values = tensors[name].detach().to(torch.float32).contiguous().numpy()
        encoded = name.encode()
        out.append(struct.pack("<I", len(encoded)) + encoded)
        out.append(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        out.append(values.astype("<f4").tobytes())
    blob = json.dumps(state, sort_keys=True, separators=(",", ":")).encode()
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def decode_tensors(data: bytes):
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint schema version {version} is not supported (expected {VERSION})")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            tensors[name] = torch.from_numpy(values.astype(np.float32).reshape(shape))
            pos += 4 * size
        (n,) = struct.unpack_from("<I", data, pos)
        state = json.loads(data[pos + 4:pos + 4 + n].decode())
    except (struct.error, ValueError) as err:
        raise CheckpointError(f"truncated or corrupt checkpoint at byte {pos}: {err}") from None
    if pos + 4 + n != len(data):
        raise CheckpointError(f"trailing bytes after checkpoint state at byte {pos + 4 + n}")
    return tensors, state


def save_tensors(path, tensors, state):
    atomic_write(path, encode_tensors(tensors, state))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# trainer checkpoints

def trainer_state(trainer: MetaTrainer):
    tensors = dict(trainer.meta_params())
    for name, m in trainer.adam.m.items():
        tensors[f"adam.m.{name}"] = m
    for name, v in trainer.adam.v.items():
        tensors[f"adam.v.{name}"] = v
    state = dict(iteration=trainer.iteration, adam_step=trainer.adam.t, seed=trainer.config.seed,
                 config=trainer.config.to_dict(), source=getattr(trainer.source, "kind", "teacher"))
    return tensors, state


def save_checkpoint(path, trainer: MetaTrainer):
    tensors, state = trainer_state(trainer)
    save_tensors(path, tensors, state)


@dataclass
class Checkpoint:
    tensors: dict
    state: dict

    @property
    def config(self) -> OuterConfig:
        return OuterConfig.from_dict(self.state["config"])

    @property
    def iteration(self):
        return self.state["iteration"]

    def hyper(self) -> InnerHyper:
        return InnerHyper(self.tensors["hyper.log_lr"].clone().requires_grad_(),
                          self.tensors["hyper.logit_momentum"].clone().requires_grad_())

    def source(self, splits=None):
        """Rebuild the data source with the stored parameters."""
        cfg = self.config
        if cfg.source == "real":
            if splits is None:
                raise CheckpointError("a real-data source needs the dataset splits")
            return build_source(cfg, splits)
        template = build_source(cfg, None)
        params = {}
        for name in template.params:
            if name not in self.tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            if tuple(self.tensors[name].shape) != tuple(template.params[name].shape):
                raise CheckpointError(f"tensor {name!r} has shape {tuple(self.tensors[name].shape)}, "
                                      f"expected {tuple(template.params[name].shape)}")
            params[name] = self.tensors[name].clone().requires_grad_()
        if isinstance(template, TeacherState):
            return TeacherState(template.generator, params, template.variant, template.n_batches,
                                template.batch_size)
        return DistilledTensorBank(params, template.n_batches, template.batch_size)

    def trainer(self, splits, config=None) -> MetaTrainer:
        """Resume a run; ``config`` may extend the iteration budget, nothing else."""
        cfg = self.config if config is None else config
        source = self.source(splits)
        hyper = self.hyper()
        adam = Adam(cfg.outer_lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        adam.t = self.state["adam_step"]
        for name in {**source.params, **hyper.params}:
            if f"adam.m.{name}" in self.tensors:
                adam.m[name] = self.tensors[f"adam.m.{name}"].clone()
                adam.v[name] = self.tensors[f"adam.v.{name}"].clone()
        return MetaTrainer(cfg, splits, source, hyper, adam, self.iteration)


def load_checkpoint(path) -> Checkpoint:
    tensors, state = load_tensors(path)
    for key in ("iteration", "adam_step", "config"):
        if key not in state:
            raise CheckpointError(f"checkpoint state lacks {key!r}")
    return Checkpoint(tensors, state)


def write_record(path, record: ExperimentRecord):
    write_csv(path, record.rows, ExperimentRecord.COLUMNS)


def read_record(path, config=None) -> ExperimentRecord:
    rows = []
    for r in read_csv(path):
        rows.append(dict(iteration=int(r["iteration"]), meta_loss=float(r["meta_loss"]),
                         val_few_step_acc=float(r["val_few_step_acc"]), alpha=float(r["alpha"]),
                         beta=float(r["beta"]), wall_time=float(r["wall_time"])))
    return ExperimentRecord(config or {}, rows)


# ---------------------------------------------------------------------------
# run configuration

CONFIG_SCHEMA = 1


def _convert(value: str, kind):
    if kind in (bool, "bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def read_config(path) -> dict:
    """Sections of an INI file as ``{section: {key: str}}``; checks the schema version."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        parser.read_file(fh)
    sections = {s: dict(parser[s]) for s in parser.sections()}
    version = int(sections.get("run", {}).get("schema", CONFIG_SCHEMA))
    if version != CONFIG_SCHEMA:
        raise ValueError(f"config schema {version} is not supported (expected {CONFIG_SCHEMA})")
    return sections


def outer_config_from(values: dict, base: OuterConfig) -> OuterConfig:
    """Apply string-valued overrides to an OuterConfig, converting by field type."""
    types = {f.name: f.type for f in fields(OuterConfig)}
    data = base.to_dict()
    for key, value in values.items():
        if key not in types:
            raise ValueError(f"unknown training setting {key!r}")
        data[key] = _convert(value, types[key]) if isinstance(value, str) else value
    return OuterConfig.from_dict(data)


def write_config(path, sections: dict):
    parser = configparser.ConfigParser(interpolation=None)
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# images

def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] to [0, 255] with clipping."""
    x = images.detach().to(torch.float64).clamp(-1, 1)
    return torch.round((x + 1) * 127.5).to(torch.uint8).numpy()


def pnm_bytes(image: np.ndarray) -> bytes:
    """Binary PGM for 1xHxW / HxW images, PPM for 3xHxW."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim == 2:
        h, w = image.shape
        return f"P5\n{w} {h}\n255\n".encode() + image.tobytes()
    if image.ndim == 3 and image.shape[0] == 3:
        _, h, w = image.shape
        return f"P6\n{w} {h}\n255\n".encode() + image.transpose(1, 2, 0).tobytes()
    raise ValueError(f"cannot write an image of shape {image.shape}")


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    kind, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PNM files are supported")
    pixels = np.frombuffer(parts[4], dtype=np.uint8)
    if kind == b"P5":
        return pixels[:h * w].reshape(1, h, w)
    if kind == b"P6":
        return pixels[:h * w * 3].reshape(h, w, 3).transpose(2, 0, 1)
    raise ValueError(f"unsupported PNM type {kind!r}")


def grid(images: np.ndarray, columns=16, pad=1) -> np.ndarray:
    """Tile an N x C x H x W uint8 array into one C x H' x W' image."""
    n, c, h, w = images.shape
    rows = -(-n // columns)
    canvas = np.zeros((c, rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        canvas[:, y:y + h, x:x + w] = images[i]
    return canvas


def write_image(path, image):
    atomic_write(path, pnm_bytes(image))


def image_suffix(channels):
    return ".pgm" if channels == 1 else ".ppm"


# ---------------------------------------------------------------------------
# curricula

def generate_curriculum(source, n_batches=None, seed=0):
    """All batches a source emits for one episode, in order: (x, y, batch index)."""
    n_batches = getattr(source, "n_batches", None) if n_batches is None else n_batches
    if n_batches is None:
        raise ValueError("number of batches is required for an unbounded source")
    plan = source.plan(seed, n_batches)
    xs, ys, batch = [], [], []
    with torch.no_grad():
        for t in range(n_batches):
            x, y = source.batch(plan, t)
            xs.append(x.detach())
            ys.append(y.detach())
            batch += [t] * len(x)
    return torch.cat(xs), torch.cat(ys), batch


def export_curriculum(directory, source, n_batches=None, seed=0, columns=16):
    """Write curriculum.bin (lossless), one image grid per batch and a label manifest."""
    directory = Path(directory)
    x, y, batch = generate_curriculum(source, n_batches, seed)
    n_batches = batch[-1] + 1 if batch else 0
    save_tensors(directory / "curriculum.bin", {"images": x, "labels": y},
                 dict(batches=n_batches, images=len(x), seed=seed, source=getattr(source, "kind", "")))
    pixels = to_uint8(x)
    suffix = image_suffix(x.shape[1])
    rows = []
    labels = y.argmax(1).tolist()
    for t in range(n_batches):
        idx = [i for i, b in enumerate(batch) if b == t]
        name = f"batch_{t:03d}{suffix}"
        write_image(directory / name, grid(pixels[idx], columns))
        for pos, i in enumerate(idx):
            rows.append(dict(index=i, batch=t, position=pos, label=labels[i],
                             label_weight=f"{float(y[i].max()):.6f}", grid=name))
    write_csv(directory / "labels.csv", rows, ("index", "batch", "position", "label", "label_weight", "grid"))
    return len(x)


def import_curriculum(path):
    """Read back ``(images, labels)`` written by :func:`export_curriculum`."""
    path = Path(path)
    if path.is_dir():
        path = path / "curriculum.bin"
    tensors, state = load_tensors(path)
    return tensors["images"], tensors["labels"], state
