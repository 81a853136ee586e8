"""Beam-steering codebook, synthetic street scene and dual-band channels.

All channel arithmetic is complex128. Channel grids are indexed
``[subcarrier, antenna]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .config import DataConfig, ExperimentConfig, SceneConfig

SPEED_OF_LIGHT = 299_792_458.0
THERMAL_NOISE_DBM_HZ = -174.0

NORTH = "north"
SOUTH = "south"


# --------------------------------------------------------------------------
# Codebook
# --------------------------------------------------------------------------


def steering_vector(num_antennas: int, cos_angle) -> np.ndarray:
    """Half-wavelength ULA response ``exp(-i*pi*m*cos(theta))``.

    ``cos_angle`` may be an array; the antenna axis is appended last.
    """
    m = np.arange(num_antennas)
    c = np.asarray(cos_angle, dtype=np.float64)
    return np.exp(-1j * np.pi * c[..., None] * m)


@dataclass(frozen=True, eq=False)
class Codebook:
    """Columns are unit-norm beam-steering vectors, shape ``(M, B)``."""

    entries: np.ndarray

    @property
    def num_antennas(self) -> int:
        return self.entries.shape[0]

    @property
    def num_beams(self) -> int:
        return self.entries.shape[1]

    @property
    def beam_angles(self) -> np.ndarray:
        return np.pi * np.arange(self.num_beams) / self.num_beams

    def beam(self, b: int) -> np.ndarray:
        return self.entries[:, b]


def build_codebook(num_antennas: int = 64, num_beams: int = 64) -> Codebook:
    if num_antennas < 1 or num_beams < 1:
        raise ValueError(
            f"codebook needs at least one antenna and one beam, got "
            f"M={num_antennas}, B={num_beams}"
        )
    theta = np.pi * np.arange(num_beams) / num_beams
    entries = steering_vector(num_antennas, np.cos(theta)).T / np.sqrt(num_antennas)
    entries.setflags(write=False)
    return Codebook(entries)


def steering_response(codebook: Codebook, angle: float) -> np.ndarray:
    """Gain ``|a(angle)^H f(b)|`` of every beam toward ``angle`` (radians)."""
    if not 0.0 <= angle <= np.pi:
        raise ValueError(f"angle must lie in [0, pi], got {angle}")
    a = steering_vector(codebook.num_antennas, math.cos(angle))
    return np.abs(a.conj() @ codebook.entries)


# --------------------------------------------------------------------------
# Capacity and labels
# --------------------------------------------------------------------------


def beamformed_gain(h_dl: np.ndarray, codebook: Codebook) -> np.ndarray:
    """``|h[l]^H f(b)|^2`` for every subcarrier and beam, shape ``(..., L, B)``."""
    h_dl = np.asarray(h_dl)
    if h_dl.shape[-1] != codebook.num_antennas:
        raise ValueError(
            f"channel has {h_dl.shape[-1]} antennas, codebook expects "
            f"{codebook.num_antennas}"
        )
    return np.abs(h_dl.conj() @ codebook.entries) ** 2


def beam_capacities(
    h_dl: np.ndarray, codebook: Codebook, subcarrier_bandwidth: float = 1.0
) -> np.ndarray:
    """Mean capacity of every beam, shape ``(..., B)``."""
    gain = beamformed_gain(h_dl, codebook)
    num_sc = gain.shape[-2]
    return subcarrier_bandwidth / num_sc * np.log2(1.0 + gain).sum(axis=-2)


def capacity(
    h_dl: np.ndarray, beam: int, codebook: Codebook, subcarrier_bandwidth: float = 1.0
) -> float:
    """Mean capacity of one beam over the subcarriers of ``h_dl`` (L x M)."""
    if not 0 <= beam < codebook.num_beams:
        raise ValueError(f"beam {beam} outside [0, {codebook.num_beams})")
    h_dl = np.asarray(h_dl)
    if h_dl.ndim != 2:
        raise ValueError("h_dl must be a (subcarrier, antenna) grid")
    f = codebook.beam(beam)
    if h_dl.shape[1] != f.shape[0]:
        raise ValueError(
            f"channel has {h_dl.shape[1]} antennas, codebook expects {f.shape[0]}"
        )
    proj = h_dl.conj() @ f
    return float(subcarrier_bandwidth / h_dl.shape[0] * np.log2(1.0 + np.abs(proj) ** 2).sum())


def label_optimal_beam(h_dl: np.ndarray, codebook: Codebook) -> int:
    """Beam with the highest mean capacity; ties go to the lowest index."""
    return int(np.argmax(beam_capacities(h_dl, codebook)))


# --------------------------------------------------------------------------
# Noise
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """UL AWGN model and DL SNR normalization.

    ``mode`` is ``"physics"`` (thermal noise from powers and noise figure),
    ``"fixed_snr"`` (every UL sample gets ``snr_db``) or ``"none"``.
    """

    mode: str = "physics"
    snr_db: float = 80.0
    ue_tx_power_dbm: float = 23.0
    bs_tx_power_dbm: float = 34.0
    noise_figure_db: float = 5.0
    subcarrier_bandwidth_hz: float | None = None

    def __post_init__(self):
        if self.mode not in ("physics", "fixed_snr", "none"):
            raise ValueError(f"unknown noise mode {self.mode!r}")

    @classmethod
    def from_config(cls, data: DataConfig) -> "NoiseModel":
        return cls(
            mode=data.add_noise,
            snr_db=data.snr,
            ue_tx_power_dbm=data.ue_tx_power_dBm,
            bs_tx_power_dbm=data.bs_tx_power_dBm,
            noise_figure_db=data.noise_figure_dB,
        )

    def noise_power_dbm(self, subcarrier_bandwidth_hz: float) -> float:
        bw = self.subcarrier_bandwidth_hz or subcarrier_bandwidth_hz
        return THERMAL_NOISE_DBM_HZ + self.noise_figure_db + 10.0 * math.log10(bw)

    def dl_scale(self, subcarrier_bandwidth_hz: float) -> float:
        """Amplitude factor turning a DL gain into sqrt(SNR) units.

        The bandwidth override only applies to the UL, so the DL noise always
        uses the DL subcarrier spacing.
        """
        noise_dbm = THERMAL_NOISE_DBM_HZ + self.noise_figure_db + 10.0 * math.log10(
            subcarrier_bandwidth_hz
        )
        return 10.0 ** ((self.bs_tx_power_dbm - noise_dbm) / 20.0)


# --------------------------------------------------------------------------
# Scene
# --------------------------------------------------------------------------


def _rot90(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


@dataclass(frozen=True, eq=False)
class BaseStation:
    position: np.ndarray
    boresight: np.ndarray
    side: str

    @property
    def array_axis(self) -> np.ndarray:
        """Element-ordering axis of the array: boresight turned 90 degrees CCW."""
        return _rot90(self.boresight)


@dataclass(frozen=True, eq=False)
class Reflector:
    start: np.ndarray
    end: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass(frozen=True, eq=False)
class Scene:
    base_stations: tuple[BaseStation, ...]
    ue_positions: np.ndarray
    reflectors: tuple[Reflector, ...]
    street_length: float
    street_width: float
    carrier_dl: float = 28e9
    carrier_ul: float = 3.5e9
    bandwidth_dl: float = 0.5e9
    bandwidth_ul: float = 0.02e9
    subcarriers_dl: int = 64
    subcarriers_ul: int = 64
    antennas_dl: int = 64
    antennas_ul: int = 4
    num_beams: int = 64
    num_paths_dl: int = 5
    num_paths_ul: int = 15
    ul_frame: str = "global"
    seed: int | None = None

    @property
    def num_bs(self) -> int:
        return len(self.base_stations)

    @property
    def num_ue(self) -> int:
        return len(self.ue_positions)

    @property
    def subcarrier_bandwidth_dl(self) -> float:
        return self.bandwidth_dl / self.subcarriers_dl

    @property
    def subcarrier_bandwidth_ul(self) -> float:
        return self.bandwidth_ul / self.subcarriers_ul

    def ul_axis(self, bs: BaseStation) -> np.ndarray:
        if self.ul_frame == "global":
            return np.array([1.0, 0.0])
        return bs.array_axis

    def codebook(self) -> Codebook:
        return build_codebook(self.antennas_dl, self.num_beams)

    def to_dict(self) -> dict:
        return {
            "base_stations": [
                {"position": bs.position.tolist(), "boresight": bs.boresight.tolist(),
                 "side": bs.side}
                for bs in self.base_stations
            ],
            "ue_positions": self.ue_positions.tolist(),
            "reflectors": [[r.start.tolist(), r.end.tolist()] for r in self.reflectors],
            "street_length": self.street_length,
            "street_width": self.street_width,
            "carrier_dl": self.carrier_dl,
            "carrier_ul": self.carrier_ul,
            "bandwidth_dl": self.bandwidth_dl,
            "bandwidth_ul": self.bandwidth_ul,
            "subcarriers_dl": self.subcarriers_dl,
            "subcarriers_ul": self.subcarriers_ul,
            "antennas_dl": self.antennas_dl,
            "antennas_ul": self.antennas_ul,
            "num_beams": self.num_beams,
            "num_paths_dl": self.num_paths_dl,
            "num_paths_ul": self.num_paths_ul,
            "ul_frame": self.ul_frame,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        d = dict(d)
        bss = tuple(
            BaseStation(np.array(b["position"], float), np.array(b["boresight"], float), b["side"])
            for b in d.pop("base_stations")
        )
        refl = tuple(Reflector(np.array(a, float), np.array(b, float)) for a, b in d.pop("reflectors"))
        ue = np.array(d.pop("ue_positions"), dtype=float).reshape(-1, 2)
        return cls(base_stations=bss, ue_positions=ue, reflectors=refl, **d)


def generate_scene(config: ExperimentConfig | SceneConfig, rng_seed: int) -> Scene:
    """Lay out a street with base stations alternating between the two sides.

    Base station ``i`` sits on the north side when ``i`` is even. North
    stations face south and vice versa, so facing pairs have mirrored arrays.
    Building facades along both walls and a few scatterers act as reflectors.
    """
    sc = config.scene if isinstance(config, ExperimentConfig) else config
    length, width = float(sc.street_length), float(sc.street_width)
    if length <= 0 or width <= 0:
        raise ValueError(f"street must have positive area, got {length} x {width}")
    if 2 * sc.ue_margin >= width or 2 * sc.ue_margin >= length:
        raise ValueError("UE margin leaves no room for users inside the street")
    if sc.num_bs < 2:
        raise ValueError("a scene needs at least two base stations")
    if sc.ue_rows < 1 or sc.ue_cols < 1:
        raise ValueError("UE grid must have at least one row and column")
    if not 0 <= sc.bs_setback < sc.wall_gap:
        raise ValueError("base stations must sit between the street and the wall")
    if sc.ul_frame not in ("global", "boresight"):
        raise ValueError(f"unknown ul_frame {sc.ul_frame!r}")

    rng = np.random.default_rng([rng_seed, 0x5CE7E])
    n_pairs = math.ceil(sc.num_bs / 2)
    bss = []
    for i in range(sc.num_bs):
        pair = i // 2
        x = (pair + 0.5) * length / n_pairs
        x += sc.bs_jitter * rng.uniform(-1.0, 1.0)
        x = float(np.clip(x, 0.0, length))
        if i % 2 == 0:
            bss.append(BaseStation(np.array([x, width + sc.bs_setback]), np.array([0.0, -1.0]), NORTH))
        else:
            bss.append(BaseStation(np.array([x, -sc.bs_setback]), np.array([0.0, 1.0]), SOUTH))

    xs = np.linspace(sc.ue_margin, length - sc.ue_margin, sc.ue_cols)
    ys = np.linspace(sc.ue_margin, width - sc.ue_margin, sc.ue_rows)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    ue = np.column_stack([gx.ravel(), gy.ravel()])

    reflectors = []
    for y_wall in (width + sc.wall_gap, -sc.wall_gap):
        cuts = np.sort(rng.uniform(0.0, length, size=max(sc.facades_per_side - 1, 0)))
        edges = np.concatenate([[0.0], cuts, [length]])
        for a, b in zip(edges[:-1], edges[1:]):
            gap = min(1.0, 0.25 * (b - a))
            if b - a - gap <= 0:
                continue
            reflectors.append(Reflector(np.array([a + gap / 2, y_wall]), np.array([b - gap / 2, y_wall])))
    for _ in range(sc.num_scatterers):
        north = rng.uniform() < 0.5
        cx = rng.uniform(0.0, length)
        cy = rng.uniform(width, width + sc.wall_gap) if north else rng.uniform(-sc.wall_gap, 0.0)
        ang = rng.uniform(0.0, np.pi)
        half = 0.5 * rng.uniform(2.0, 5.0)
        d = half * np.array([math.cos(ang), math.sin(ang)])
        reflectors.append(Reflector(np.array([cx, cy]) - d, np.array([cx, cy]) + d))

    return Scene(
        base_stations=tuple(bss),
        ue_positions=ue,
        reflectors=tuple(reflectors),
        street_length=length,
        street_width=width,
        carrier_dl=sc.carrier_dl,
        carrier_ul=sc.carrier_ul,
        bandwidth_dl=sc.bandwidth_dl,
        bandwidth_ul=sc.bandwidth_ul,
        subcarriers_dl=sc.subcarriers_dl,
        subcarriers_ul=sc.subcarriers_ul,
        antennas_dl=sc.antennas_dl,
        antennas_ul=sc.antennas_ul,
        num_beams=sc.num_beams,
        num_paths_dl=sc.num_paths_dl,
        num_paths_ul=sc.num_paths_ul,
        ul_frame=sc.ul_frame,
        seed=rng_seed,
    )


# --------------------------------------------------------------------------
# Rays and channels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Paths:
    """Ray set between one BS and one UE, strongest first."""

    length: np.ndarray       # meters
    direction: np.ndarray    # (P, 2) unit departure vectors from the BS
    loss_db: np.ndarray      # reflection loss, 0 for LOS


def trace_paths(bs_pos: np.ndarray, ue_pos: np.ndarray, reflectors: Sequence[Reflector],
                reflection_loss_db: np.ndarray) -> Paths:
    """LOS plus first-order specular reflections (image method)."""
    lengths = [float(np.linalg.norm(ue_pos - bs_pos))]
    dirs = [(ue_pos - bs_pos) / max(lengths[0], 1e-9)]
    losses = [0.0]
    for refl, loss in zip(reflectors, reflection_loss_db):
        seg = refl.end - refl.start
        seg_len = float(np.linalg.norm(seg))
        if seg_len == 0.0:
            continue
        d = seg / seg_len
        n = _rot90(d)
        s_bs = float((bs_pos - refl.start) @ n)
        s_ue = float((ue_pos - refl.start) @ n)
        if s_bs * s_ue <= 0.0:
            continue
        image = ue_pos - 2.0 * s_ue * n
        ray = image - bs_pos
        denom = float(ray @ n)
        if denom == 0.0:
            continue
        t = -s_bs / denom
        if not 0.0 < t < 1.0:
            continue
        hit = bs_pos + t * ray
        along = float((hit - refl.start) @ d)
        if not 0.0 <= along <= seg_len:
            continue
        dist = float(np.linalg.norm(ray))
        lengths.append(dist)
        dirs.append(ray / dist)
        losses.append(float(loss))
    length = np.array(lengths)
    loss_db = np.array(losses)
    # free-space amplitude ranking is identical in both bands
    order = np.argsort(20 * np.log10(length) + loss_db, kind="stable")
    return Paths(length[order], np.array(dirs)[order], loss_db[order])


def multipath_channel(gains: np.ndarray, delays: np.ndarray, cos_angles: np.ndarray,
                      frequencies: np.ndarray, num_antennas: int) -> np.ndarray:
    """``h[l, m] = sum_p a_p exp(-i 2pi f_l tau_p) exp(-i pi m cos(theta_p))``."""
    gains = np.asarray(gains)
    phase = np.exp(-2j * np.pi * np.outer(frequencies, delays))      # (L, P)
    steer = steering_vector(num_antennas, cos_angles)                # (P, M)
    return (phase * gains) @ steer


def _band_channel(paths: Paths, keep: int, axis: np.ndarray, carrier: float,
                  bandwidth: float, num_sc: int, num_ant: int) -> np.ndarray:
    p = min(keep, len(paths.length))
    length = paths.length[:p]
    lam = SPEED_OF_LIGHT / carrier
    gains = lam / (4 * np.pi * length) * 10.0 ** (-paths.loss_db[:p] / 20.0)
    freqs = carrier + np.arange(num_sc) * (bandwidth / num_sc)
    cos_angles = np.clip(paths.direction[:p] @ axis, -1.0, 1.0)
    return multipath_channel(gains, length / SPEED_OF_LIGHT, cos_angles, freqs, num_ant)


@dataclass(frozen=True)
class ChannelSample:
    h_ul: np.ndarray
    h_dl: np.ndarray
    label: int
    client_id: int
    ue_index: int
    ul_snr_db: float


@dataclass(eq=False)
class ChannelSet:
    """Column store of channel samples; indexing yields ``ChannelSample``.

    ``h_dl`` is in sqrt(SNR) units; ``dl_capacity`` caches per-beam capacity
    with unit subcarrier bandwidth.
    """

    h_ul: np.ndarray
    h_dl: np.ndarray
    label: np.ndarray
    client_id: np.ndarray
    ue_index: np.ndarray
    ul_snr_db: np.ndarray
    dl_capacity: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.label)

    def __getitem__(self, i: int) -> ChannelSample:
        return ChannelSample(self.h_ul[i], self.h_dl[i], int(self.label[i]),
                             int(self.client_id[i]), int(self.ue_index[i]),
                             float(self.ul_snr_db[i]))

    def __iter__(self) -> Iterator[ChannelSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "ChannelSet":
        idx = np.asarray(idx)
        return ChannelSet(
            self.h_ul[idx], self.h_dl[idx], self.label[idx], self.client_id[idx],
            self.ue_index[idx], self.ul_snr_db[idx],
            None if self.dl_capacity is None else self.dl_capacity[idx],
        )

    @classmethod
    def concatenate(cls, parts: Sequence["ChannelSet"]) -> "ChannelSet":
        cap = None
        if parts and all(p.dl_capacity is not None for p in parts):
            cap = np.concatenate([p.dl_capacity for p in parts])
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("h_ul", "h_dl", "label", "client_id", "ue_index", "ul_snr_db")),
                   dl_capacity=cap)


def _sample_stream(seed: int, ue_index: int, bs_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, ue_index, bs_index])


def synthesize_pair(scene: Scene, noise: NoiseModel, rng_seed: int, ue_index: int,
                    bs_index: int, codebook: Codebook | None = None) -> ChannelSample:
    """Channel sample between one UE position and one base station.

    Pure function of its arguments; the random draws come from a substream
    keyed by ``(rng_seed, ue_index, bs_index)``.
    """
    codebook = codebook or scene.codebook()
    rng = _sample_stream(rng_seed, ue_index, bs_index)
    bs = scene.base_stations[bs_index]
    ue = scene.ue_positions[ue_index]
    loss = rng.uniform(6.0, 12.0, size=len(scene.reflectors))
    paths = trace_paths(bs.position, ue, scene.reflectors, loss)

    h_dl = _band_channel(paths, scene.num_paths_dl, bs.array_axis, scene.carrier_dl,
                         scene.bandwidth_dl, scene.subcarriers_dl, scene.antennas_dl)
    h_dl = h_dl * noise.dl_scale(scene.subcarrier_bandwidth_dl)
    h_ul = _band_channel(paths, scene.num_paths_ul, scene.ul_axis(bs), scene.carrier_ul,
                         scene.bandwidth_ul, scene.subcarriers_ul, scene.antennas_ul)

    sig = float(np.mean(np.abs(h_ul) ** 2))
    if noise.mode == "physics":
        noise_dbm = noise.noise_power_dbm(scene.subcarrier_bandwidth_ul)
        snr_db = noise.ue_tx_power_dbm + 10.0 * math.log10(sig) - noise_dbm
        var = 10.0 ** ((noise_dbm - noise.ue_tx_power_dbm) / 10.0)
    elif noise.mode == "fixed_snr":
        snr_db = noise.snr_db
        var = sig * 10.0 ** (-snr_db / 10.0)
    else:
        snr_db, var = math.inf, 0.0
    if var > 0.0:
        w = rng.standard_normal(h_ul.shape + (2,))
        h_ul = h_ul + math.sqrt(var / 2.0) * (w[..., 0] + 1j * w[..., 1])

    return ChannelSample(h_ul, h_dl, label_optimal_beam(h_dl, codebook), bs_index,
                         ue_index, snr_db)


def synthesize_channels(scene: Scene, noise: NoiseModel, rng_seed: int,
                        ue_indices: Sequence[int] | None = None,
                        bs_indices: Sequence[int] | None = None) -> ChannelSet:
    """Candidate samples for every (UE position, base station) pair.

    Rows are ordered UE-major then BS. Strongest-BS association happens in
    :func:`beamfed.data.partition_by_strongest_bs`.
    """
    codebook = scene.codebook()
    ues = range(scene.num_ue) if ue_indices is None else ue_indices
    bss = range(scene.num_bs) if bs_indices is None else bs_indices
    samples = [synthesize_pair(scene, noise, rng_seed, u, b, codebook) for u in ues for b in bss]
    return stack_samples(samples, codebook)


def stack_samples(samples: Sequence[ChannelSample], codebook: Codebook) -> ChannelSet:
    if not samples:
        raise ValueError("no samples to stack")
    h_dl = np.stack([s.h_dl for s in samples])
    return ChannelSet(
        h_ul=np.stack([s.h_ul for s in samples]),
        h_dl=h_dl,
        label=np.array([s.label for s in samples], dtype=np.int64),
        client_id=np.array([s.client_id for s in samples], dtype=np.int64),
        ue_index=np.array([s.ue_index for s in samples], dtype=np.int64),
        ul_snr_db=np.array([s.ul_snr_db for s in samples], dtype=np.float64),
        dl_capacity=beam_capacities(h_dl, codebook),
    )
