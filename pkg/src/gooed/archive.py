"""Binary container for offline eigenfactors.

Layout (all little-endian)::

    magic        4 bytes  b"GOED"
    version      u32      (1)
    d, k, l      u32 x 3
    eps_zeta     f64
    eps_lambda   f64
    seed         u64
    config hash  32 bytes (sha256)
    sigma        f64 x d  noise standard deviations
    U_k          f64 x d*k  row-major
    zeta         f64 x k
    V_l          f64 x d*l  row-major
    lambda       f64 x l
    n_zeta_ext   u32, then f64 x n_zeta_ext   (solver spectrum, for tail estimates)
    n_lam_ext    u32, then f64 x n_lam_ext
    exact flags  u8 x 2  (extended spectra complete for zeta, lambda)
    crc32        u32 over every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DimensionMismatch, GooedError
from .lowrank import SpectralFactor
from .model import LowRankOffline, NoiseModel

MAGIC = b"GOED"
VERSION = 1
_HEAD = struct.Struct("<4sI3I2dQ32s")


class ArchiveError(GooedError, ValueError):
    """Corrupt, truncated or incompatible archive."""


@dataclass(frozen=True)
class FactorArchive:
    sigma: np.ndarray
    u_k: np.ndarray
    zeta: np.ndarray
    v_l: np.ndarray
    lam: np.ndarray
    eps_zeta: float = 0.0
    eps_lambda: float = 0.0
    seed: int = 0
    config_digest: bytes = bytes(32)
    zeta_extended: np.ndarray = None
    lambda_extended: np.ndarray = None
    zeta_exact: bool = False
    lambda_exact: bool = False

    def __post_init__(self):
        d = self.sigma.shape[0]
        if self.u_k.shape != (d, self.zeta.shape[0]) or self.v_l.shape != (d, self.lam.shape[0]):
            raise DimensionMismatch("factor shapes disagree with d and the spectra")
        if len(self.config_digest) != 32:
            raise DimensionMismatch("config digest must be 32 bytes")

    @property
    def d(self):
        return self.sigma.shape[0]

    @property
    def k(self):
        return self.zeta.shape[0]

    @property
    def l(self):
        return self.lam.shape[0]

    @classmethod
    def from_offline(cls, offline: LowRankOffline, noise: NoiseModel, eps_zeta=0.0,
                     eps_lambda=0.0, seed=0, config_digest=bytes(32)):
        rho, delta = offline.rho, offline.delta
        return cls(np.sqrt(noise.variances), rho.basis, rho.eigenvalues, delta.basis,
                   delta.eigenvalues, eps_zeta, eps_lambda, seed, config_digest,
                   rho.spectrum, delta.spectrum, rho.exact_spectrum, delta.exact_spectrum)

    def noise(self) -> NoiseModel:
        return NoiseModel(self.sigma ** 2)

    def offline(self) -> LowRankOffline:
        d = self.d
        rho = SpectralFactor(self.u_k, self.zeta, d, extended=self.zeta_extended,
                             exact_spectrum=self.zeta_exact)
        delta = SpectralFactor(self.v_l, self.lam, d, extended=self.lambda_extended,
                               exact_spectrum=self.lambda_exact)
        return LowRankOffline(rho, delta)

    def to_bytes(self) -> bytes:
        f8 = lambda a: np.ascontiguousarray(a, dtype="<f8").tobytes()
        zext = self.zeta if self.zeta_extended is None else self.zeta_extended
        lext = self.lam if self.lambda_extended is None else self.lambda_extended
        parts = [
            _HEAD.pack(MAGIC, VERSION, self.d, self.k, self.l, float(self.eps_zeta),
                       float(self.eps_lambda), int(self.seed), bytes(self.config_digest)),
            f8(self.sigma), f8(self.u_k), f8(self.zeta), f8(self.v_l), f8(self.lam),
            struct.pack("<I", len(zext)), f8(zext),
            struct.pack("<I", len(lext)), f8(lext),
            struct.pack("<2B", int(self.zeta_exact), int(self.lambda_exact)),
        ]
        payload = b"".join(parts)
        return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FactorArchive":
        if len(blob) < _HEAD.size + 4:
            raise ArchiveError("archive is truncated")
        payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ArchiveError("checksum mismatch")
        magic, version, d, k, l, ez, el, seed, digest = _HEAD.unpack_from(payload, 0)
        if magic != MAGIC:
            raise ArchiveError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        pos = _HEAD.size

        def take(count):
            nonlocal pos
            end = pos + 8 * count
            if end > len(payload):
                raise ArchiveError("archive is truncated")
            out = np.frombuffer(payload[pos:end], dtype="<f8").astype(float)
            pos = end
            return out

        def take_count():
            nonlocal pos
            if pos + 4 > len(payload):
                raise ArchiveError("archive is truncated")
            (n,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            return n

        sigma = take(d)
        u_k = take(d * k).reshape(d, k)
        zeta = take(k)
        v_l = take(d * l).reshape(d, l)
        lam = take(l)
        zext = take(take_count())
        lext = take(take_count())
        if pos + 2 != len(payload):
            raise ArchiveError("archive length does not match its header")
        zx, lx = struct.unpack_from("<2B", payload, pos)
        return cls(sigma, u_k, zeta, v_l, lam, ez, el, seed, digest, zext, lext, bool(zx), bool(lx))

    def write(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "FactorArchive":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
        return cls.from_bytes(blob)
