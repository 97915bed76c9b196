"""Seeded synthetic multi-echo volumes standing in for knee MR data.

A subject is a set of soft-edged random ellipsoids ("tissues") over a smooth
background, modulated by band-limited texture, plus a few thin bright
shells. Echoes share geometry; each tissue decays as ``exp(-TE / T2*)`` so
contrast changes from echo to echo. Optional Rician noise is applied last.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .volgrid import Volume, write_volume

ECHO_TIMES_MS = (1.81, 6.43, 11.05)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 32)
    spacing: tuple[float, float, float] = (0.802, 0.802, 2.5)
    echoes: int = 3
    ellipsoids: tuple[int, int] = (5, 15)
    texture_bandwidth: float = 0.4  # fraction of Nyquist; 0 disables texture
    texture_amplitude: float = 0.15
    shells: tuple[int, int] = (1, 3)
    shell_thickness: float = 2.0  # voxels, measured along the local surface normal
    edge_width: float = 0.6  # voxels; tanh transition half-width
    noise_sigma: float = 0.01  # Rician sigma as a fraction of the noiseless range

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or any(n < 2 or n % 2 for n in dims):
            raise ValidationError(f"phantom dims must be three even integers >= 2, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "ellipsoids", tuple(int(v) for v in self.ellipsoids))
        object.__setattr__(self, "shells", tuple(int(v) for v in self.shells))
        if self.echoes < 1:
            raise ValidationError("echo count must be >= 1")
        if not 0 <= self.ellipsoids[0] <= self.ellipsoids[1]:
            raise ValidationError(f"bad ellipsoid count range {self.ellipsoids}")
        if not 0 <= self.shells[0] <= self.shells[1]:
            raise ValidationError(f"bad shell count range {self.shells}")
        if not 0.0 <= self.texture_bandwidth <= 1.0:
            raise ValidationError("texture bandwidth must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def echo_times(n: int) -> list[float]:
    step = ECHO_TIMES_MS[1] - ECHO_TIMES_MS[0]
    return [ECHO_TIMES_MS[i] if i < 3 else ECHO_TIMES_MS[-1] + (i - 2) * step for i in range(n)]


def _coords(spec: PhantomSpec) -> np.ndarray:
    """Physical coordinates (mm) of voxel centres, origin at the volume centre."""
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(spec.dims, spec.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _surface_distance(coords, centre, axes, rot, spacing) -> np.ndarray:
    """Approximate signed distance to the ellipsoid surface in voxel units (> 0 inside).

    First-order: ``(1 - r) / |grad r|`` with the gradient taken in voxel
    coordinates, so edge sharpness is the same on every axis of an
    anisotropic grid.
    """
    d = coords.reshape(3, -1) - centre[:, None]
    u = (rot.T @ d) / axes[:, None]
    r = np.sqrt(np.sum(u * u, axis=0))
    grad = rot @ (u / axes[:, None]) / np.maximum(r, 1e-12)
    grad_vox = np.sqrt(np.sum((grad * np.asarray(spacing)[:, None]) ** 2, axis=0))
    return ((1.0 - r) / np.maximum(grad_vox, 1e-12)).reshape(coords.shape[1:])


def _soft_step(dist, width) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(dist / max(width, 1e-6)))


def bandlimited_field(rng, dims, bandwidth) -> np.ndarray:
    """Unit-variance Gaussian field with spectrum zero above ``bandwidth`` x Nyquist."""
    white = rng.standard_normal(dims)
    if bandwidth <= 0:
        return np.zeros(dims)
    k = np.fft.fftn(white)
    freqs = np.meshgrid(*[np.abs(np.fft.fftfreq(n)) * 2.0 for n in dims], indexing="ij")
    mask = np.ones(dims, dtype=bool)
    for f in freqs:
        mask &= f <= bandwidth
    mask[0, 0, 0] = False
    field = np.fft.ifftn(k * mask).real
    sd = field.std()
    return field / sd if sd > 0 else field


def generate_subject(spec: PhantomSpec, seed: int) -> list[Volume]:
    """One volume per echo; deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    coords = _coords(spec)
    extent = np.array([n * s for n, s in zip(spec.dims, spec.spacing)])

    smooth = bandlimited_field(rng, spec.dims, 0.08)
    background = (0.08 + 0.06 * rng.random(), rng.uniform(20.0, 40.0))  # (rho, T2*)

    tissues = []  # (membership, rho, t2star)
    for _ in range(int(rng.integers(spec.ellipsoids[0], spec.ellipsoids[1] + 1))):
        centre = (rng.random(3) - 0.5) * 0.7 * extent
        axes = rng.uniform(0.06, 0.3, size=3) * extent.min()
        rot = _random_rotation(rng)
        m = _soft_step(_surface_distance(coords, centre, axes, rot, spec.spacing), spec.edge_width)
        tissues.append((m, rng.uniform(0.2, 1.0), rng.uniform(8.0, 60.0)))

    shells = []
    for _ in range(int(rng.integers(spec.shells[0], spec.shells[1] + 1))):
        centre = (rng.random(3) - 0.5) * 0.6 * extent
        axes = rng.uniform(0.1, 0.3, size=3) * extent.min()
        rot = _random_rotation(rng)
        dist = np.abs(_surface_distance(coords, centre, axes, rot, spec.spacing))
        m = _soft_step(0.5 * spec.shell_thickness - dist, spec.edge_width)
        shells.append((m, rng.uniform(1.1, 1.4), rng.uniform(15.0, 40.0)))

    texture = bandlimited_field(rng, spec.dims, spec.texture_bandwidth)
    noise_draws = [(rng.standard_normal(spec.dims), rng.standard_normal(spec.dims)) for _ in range(spec.echoes)]

    volumes = []
    for e, te in enumerate(echo_times(spec.echoes)):
        rho, t2 = background
        v = rho * np.exp(-te / t2) * (1.0 + 0.3 * smooth)
        for m, rho, t2 in tissues:
            v = v * (1.0 - m) + rho * np.exp(-te / t2) * m
        v = v * (1.0 + spec.texture_amplitude * texture)
        for m, rho, t2 in shells:
            v = v * (1.0 - m) + rho * np.exp(-te / t2) * m
        v = np.maximum(v, 0.0)
        if spec.noise_sigma > 0:
            sigma = spec.noise_sigma * float(v.max() - v.min())
            n1, n2 = noise_draws[e]
            v = np.sqrt((v + sigma * n1) ** 2 + (sigma * n2) ** 2)
        volumes.append(Volume(v.astype(np.float32), spec.spacing))
    return volumes


@dataclass(frozen=True)
class PhantomRecord:
    subject: int
    echo: int
    seed: int
    volume: Volume

    @property
    def filename(self) -> str:
        return f"subject{self.subject}_echo{self.echo}.vol"


def subject_seeds(master_seed: int, subjects: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(subjects)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def generate_dataset(spec: PhantomSpec, subjects: int = 13, master_seed: int = 0) -> list[PhantomRecord]:
    if subjects < 3:
        raise ValidationError(f"need at least 3 subjects, got {subjects}")
    records = []
    for s, seed in enumerate(subject_seeds(master_seed, subjects)):
        for e, vol in enumerate(generate_subject(spec, seed)):
            records.append(PhantomRecord(s, e, seed, vol))
    return records


def dataset_manifest(spec: PhantomSpec, records, master_seed: int) -> dict:
    subjects = sorted({r.subject for r in records})
    return {
        "subjects": subjects,
        "echoes": spec.echoes,
        "seeds": {str(r.subject): r.seed for r in records if r.echo == 0},
        "master_seed": master_seed,
        "spec": asdict(spec),
        "files": [{"subject": r.subject, "echo": r.echo, "file": r.filename} for r in records],
    }


def write_dataset(out_dir, spec: PhantomSpec, records, master_seed: int) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        write_volume(r.volume, out / r.filename)
    manifest = dataset_manifest(spec, records, master_seed)
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
