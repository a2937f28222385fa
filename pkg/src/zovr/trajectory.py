"""Seed-replay trajectory logs: constant bytes per step, any checkpoint back.

A run of MeZO or MeZO-SVRG is fully determined by its master seed, its
configuration, and the loss-difference coefficient(s) each step
produced. This module records exactly that: the header carries the
master seed, dimension, optimizer id and config, and a SHA-256 digest
of theta0; each step record carries its coefficient scalars (one for a
MeZO or anchor step, two for a MeZO-SVRG minibatch step, times p).
Learning-rate annealing events are stored as explicit records so replay
never needs loss values.

Replay reconstructs theta at any step with zero objective queries by
re-deriving each step's perturbation seed from the master seed and
re-applying the live run's exact in-place arithmetic: the probe wobble
(+mu, -2mu, +mu) followed by the update axpys. Because the floating-
point operation sequence on theta is identical, replayed checkpoints
match the live run bit for bit.

File layout (little endian, CRC-32 at the end):

    magic "ZOTRJ" | u32 version | u64 master_seed | u64 d
    u8 tag_len | optimizer tag | u32 cfg_len | "key=value\\n"... (sorted)
    32-byte theta0 SHA-256 | u64 record count
    records: u32 step | u8 kind | u8 coeff count | f64 coeffs...
    u32 CRC-32 of everything above
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .estimators import GradientEstimate, apply_probe_sequence, \
    axpy_estimate_in_place
from .optimizers import (
    KIND_FULLBATCH,
    KIND_MINIBATCH,
    anchor_perturb_seed,
    step_perturb_seed,
)

MAGIC = b"ZOTRJ"
FORMAT_VERSION = 1

REC_FULLBATCH = 1
REC_MINIBATCH = 2
REC_LR_EVENT = 3

_KIND_TO_CODE = {KIND_FULLBATCH: REC_FULLBATCH, KIND_MINIBATCH: REC_MINIBATCH}


class TrajectoryError(ValueError):
    """Corrupt, truncated, or mismatched trajectory data."""


@dataclass(frozen=True)
class StepRecord:
    step: int
    kind: int
    coeffs: tuple[float, ...]


def theta_digest(theta: np.ndarray) -> bytes:
    """Canonical SHA-256 of a parameter vector (little-endian float64)."""
    buf = np.ascontiguousarray(theta, dtype="<f8")
    return hashlib.sha256(buf.tobytes()).digest()


@dataclass
class TrajectoryLog:
    master_seed: int
    d: int
    optimizer: str
    config: dict[str, str]
    theta0_sha256: bytes
    records: list[StepRecord] = field(default_factory=list)
    _next_step: int = 0

    @classmethod
    def for_run(cls, master_seed: int, theta0: np.ndarray, optimizer: str,
                config: dict) -> "TrajectoryLog":
        cfg = {str(k): str(v) for k, v in config.items()}
        cfg["optimizer"] = optimizer
        return cls(master_seed, int(theta0.shape[0]), optimizer, cfg,
                   theta_digest(theta0))

    def steps(self) -> int:
        return self._next_step

    def record_step(self, step: int, kind: str, coeffs: tuple[float, ...]) -> None:
        """Append one optimizer step; steps must arrive contiguously from 0."""
        if step != self._next_step:
            raise TrajectoryError(
                f"out-of-order append: got step {step}, expected {self._next_step}")
        code = _KIND_TO_CODE.get(kind)
        if code is None:
            raise TrajectoryError(f"unknown step kind {kind!r}")
        self.records.append(StepRecord(step, code, tuple(float(c) for c in coeffs)))
        self._next_step = step + 1

    def record_lr_event(self, effective_step: int, eta1: float, eta2: float) -> None:
        """New learning rates, effective from `effective_step` onwards."""
        if effective_step != self._next_step:
            raise TrajectoryError(
                f"LR event for step {effective_step}, expected {self._next_step}")
        self.records.append(StepRecord(effective_step, REC_LR_EVENT,
                                       (float(eta1), float(eta2))))


def save(log: TrajectoryLog, path: str) -> None:
    """Serialize canonically; save -> load -> save is byte-identical."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<QQ", log.master_seed & (2**64 - 1), log.d)
    tag = log.optimizer.encode("ascii")
    out += struct.pack("<B", len(tag)) + tag
    cfg_text = "".join(f"{k}={log.config[k]}\n" for k in sorted(log.config))
    cfg_bytes = cfg_text.encode("utf-8")
    out += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    if len(log.theta0_sha256) != 32:
        raise TrajectoryError("theta0 digest must be 32 bytes")
    out += log.theta0_sha256
    out += struct.pack("<Q", len(log.records))
    for rec in log.records:
        out += struct.pack("<IBB", rec.step, rec.kind, len(rec.coeffs))
        out += struct.pack(f"<{len(rec.coeffs)}d", *rec.coeffs)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load(path: str) -> TrajectoryLog:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + 4:
        raise TrajectoryError("trajectory file is truncated")
    body, crc_bytes = blob[:-4], blob[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise TrajectoryError("trajectory checksum mismatch (corrupt or truncated file)")
    view = memoryview(body)
    at = 0

    def take(n):
        nonlocal at
        if at + n > len(body):
            raise TrajectoryError("trajectory file is truncated")
        chunk = view[at:at + n]
        at += n
        return chunk

    if bytes(take(5)) != MAGIC:
        raise TrajectoryError("bad trajectory magic")
    version = struct.unpack("<I", take(4))[0]
    if version != FORMAT_VERSION:
        raise TrajectoryError(f"unsupported trajectory version {version}")
    master_seed, d = struct.unpack("<QQ", take(16))
    tag_len = struct.unpack("<B", take(1))[0]
    optimizer = bytes(take(tag_len)).decode("ascii")
    cfg_len = struct.unpack("<I", take(4))[0]
    config = {}
    for line in bytes(take(cfg_len)).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        config[key] = value
    digest = bytes(take(32))
    count = struct.unpack("<Q", take(8))[0]
    log = TrajectoryLog(master_seed, d, optimizer, config, digest)
    for _ in range(count):
        step, kind, n_coeffs = struct.unpack("<IBB", take(6))
        coeffs = struct.unpack(f"<{n_coeffs}d", take(8 * n_coeffs))
        if kind == REC_LR_EVENT:
            log.records.append(StepRecord(step, kind, coeffs))
        else:
            log.record_step(step, _code_to_kind(kind), coeffs)
    if at != len(body):
        raise TrajectoryError("trailing bytes after trajectory records")
    return log


def _code_to_kind(code: int) -> str:
    for kind, c in _KIND_TO_CODE.items():
        if c == code:
            return kind
    raise TrajectoryError(f"unknown record kind code {code}")


def replay(log: TrajectoryLog, theta0: np.ndarray, upto: int) -> np.ndarray:
    """Reconstruct theta after `upto` recorded steps, bit-identical to live.

    Performs zero objective queries: perturbation vectors are
    regenerated from the master seed and the recorded coefficients drive
    the same in-place update arithmetic the live run executed.
    """
    if upto < 0 or upto > log.steps():
        raise TrajectoryError(f"replay step {upto} outside recorded range "
                              f"[0, {log.steps()}]")
    if theta0.shape[0] != log.d:
        raise TrajectoryError(f"theta0 has dimension {theta0.shape[0]}, log has {log.d}")
    if theta_digest(theta0) != log.theta0_sha256:
        raise TrajectoryError("theta0 digest does not match the trajectory header")
    if log.optimizer not in ("mezo", "mezo-svrg"):
        raise TrajectoryError(f"cannot replay optimizer {log.optimizer!r}")

    mu = float(log.config["mu"])
    p = int(log.config.get("p", "1"))
    if log.optimizer == "mezo":
        eta1 = float(log.config["eta"])
        eta2 = 0.0
    else:
        eta1 = float(log.config["eta1"])
        eta2 = float(log.config["eta2"])

    theta = np.array(theta0, dtype=np.float64, copy=True)
    d = log.d
    anchor_est: GradientEstimate | None = None
    applied = 0
    for rec in log.records:
        if rec.kind == REC_LR_EVENT:
            eta1, eta2 = rec.coeffs
            continue
        if applied >= upto:
            break
        t = rec.step
        if log.optimizer == "mezo":
            seed = step_perturb_seed(log.master_seed, t)
            apply_probe_sequence(theta, seed, mu, p)
            est = GradientEstimate(seed, rec.coeffs, d, 0)
            axpy_estimate_in_place(theta, est, -eta1)
        elif rec.kind == REC_FULLBATCH:
            seed = anchor_perturb_seed(log.master_seed, t)
            apply_probe_sequence(theta, seed, mu, p)
            anchor_est = GradientEstimate(seed, rec.coeffs, d, 0)
            axpy_estimate_in_place(theta, anchor_est, -eta1)
        else:
            if anchor_est is None:
                raise TrajectoryError(f"minibatch record at step {t} before any anchor")
            if len(rec.coeffs) != 2 * p:
                raise TrajectoryError(
                    f"minibatch record at step {t} has {len(rec.coeffs)} coefficients, "
                    f"expected {2 * p}")
            seed = step_perturb_seed(log.master_seed, t)
            apply_probe_sequence(theta, seed, mu, p)
            est_theta = GradientEstimate(seed, rec.coeffs[:p], d, 0)
            est_anchor = GradientEstimate(seed, rec.coeffs[p:], d, 0)
            axpy_estimate_in_place(theta, est_theta, -eta2)
            axpy_estimate_in_place(theta, est_anchor, eta2)
            axpy_estimate_in_place(theta, anchor_est, -eta2)
        applied += 1
    if applied < upto:
        raise TrajectoryError(f"log ends after {applied} steps, wanted {upto}")
    return theta
