"""Seeded synthetic two-domain lung-sound corpus, plus CSV metadata ingestion.

Every patient gets a fixed acoustic profile (breathing rate, spectral tilt,
gain); mobile recordings pass through a band-limited, noisy channel. Patient
and device differences are therefore real, controllable confounds.
"""

from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.fft import next_fast_len

from pdscl.core import FINE_LABELS, SAMPLE_RATE, SampleMeta, coarse_label, validate_dataset
from pdscl.frontend import Waveform, write_wav

CSV_HEADER = ("sample_id", "path", "fine_label", "label", "patient_id", "domain")
ABNORMAL_KINDS = ("crackle", "wheeze", "both")


@dataclass(frozen=True)
class Acoustics:
    """Knobs of the signal model. Amplitudes are in dB relative to the breath noise RMS."""

    base_rms: float = 0.02
    lowpass_hz: float = 800.0
    tilt_range_db_per_oct: tuple = (-4.0, 2.0)
    gain_range_db: tuple = (-6.0, 6.0)
    wheeze_db: tuple = (-10.0, 0.0)
    wheeze_hz: tuple = (200.0, 800.0)
    crackle_rate_hz: tuple = (4.0, 12.0)
    crackle_db: tuple = (14.0, 24.0)
    crackle_ms: float = 1.0
    crackle_hz: tuple = (300.0, 6000.0)
    mobile_band_hz: tuple = (100.0, 4000.0)
    mobile_snr_db: float = 20.0
    mobile_gain_db: float = -6.0
    resonance_hz: tuple = (150.0, 1500.0)
    resonance_db: tuple = (0.0, 0.0)
    resonance_q: float = 4.0


@dataclass(frozen=True)
class CorpusConfig:
    n_patients: int = 40
    mobile_fraction: float = 0.5
    clips_per_patient_per_domain: int = 6
    abnormal_fraction: float = 0.5
    seed: int = 0
    duration_range_s: tuple = (3.0, 12.0)
    label_coherence: float = 0.5
    acoustics: Acoustics = field(default_factory=Acoustics)

    def __post_init__(self):
        if self.n_patients < 1 or self.clips_per_patient_per_domain < 1:
            raise ValueError("need at least one patient and one clip per patient")
        if not all(0.0 <= v <= 1.0 for v in (self.mobile_fraction, self.abnormal_fraction, self.label_coherence)):
            raise ValueError("fractions must lie in [0, 1]")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi:
            raise ValueError("invalid duration range")

    @property
    def n_mobile_patients(self) -> int:
        return int(round(self.n_patients * self.mobile_fraction))


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    breath_rate_hz: float
    spectral_tilt: float
    gain_db: float
    resonance_hz: float = 500.0
    resonance_db: float = 0.0


def derived_rng(seed: int, *keys: str) -> np.random.Generator:
    """Independent stream per (seed, keys); stable across runs and processes."""
    words = [int(seed)] + [zlib.crc32(k.encode("utf-8")) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


def make_profile(patient_id: str, seed: int, ac: Acoustics = Acoustics()) -> PatientProfile:
    rng = derived_rng(seed, "profile", patient_id)
    return PatientProfile(
        patient_id,
        breath_rate_hz=float(rng.uniform(0.2, 0.5)),
        spectral_tilt=float(rng.uniform(*ac.tilt_range_db_per_oct)),
        gain_db=float(rng.uniform(*ac.gain_range_db)),
        resonance_hz=float(rng.uniform(*ac.resonance_hz)),
        resonance_db=float(rng.uniform(*ac.resonance_db)),
    )


def _db(x):
    return 10.0 ** (x / 20.0)


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _breath_noise(n, prof: PatientProfile, ac: Acoustics, rng) -> np.ndarray:
    m = next_fast_len(n, real=True)
    spec = np.fft.rfft(rng.standard_normal(m))
    f = np.fft.rfftfreq(m, 1.0 / SAMPLE_RATE)
    f_ref = 500.0
    fc = np.maximum(f, 20.0)
    shape = (fc / f_ref) ** (prof.spectral_tilt / (20.0 * np.log10(2.0)))
    shape /= np.sqrt(1.0 + (f / ac.lowpass_hz) ** 4)
    # chest resonance: Gaussian bump on a log-frequency axis
    width = np.log(1.0 + 1.0 / ac.resonance_q)
    shape *= _db(prof.resonance_db * np.exp(-0.5 * (np.log(fc / prof.resonance_hz) / width) ** 2))
    x = np.fft.irfft(spec * shape, m)[:n]
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.25 + 0.75 * np.sin(np.pi * prof.breath_rate_hz * t + phase) ** 2
    x = x * envelope
    return x / _rms(x)


def _wheeze(n, ac: Acoustics, rng) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for _ in range(int(rng.integers(1, 4))):
        f0 = rng.uniform(*ac.wheeze_hz)
        out += _db(rng.uniform(*ac.wheeze_db)) * np.sqrt(2.0) * np.sin(
            2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    return out


def _crackles(n, ac: Acoustics, rng) -> np.ndarray:
    out = np.zeros(n)
    count = rng.poisson(rng.uniform(*ac.crackle_rate_hz) * n / SAMPLE_RATE)
    length = int(ac.crackle_ms * 4e-3 * SAMPLE_RATE)
    tt = np.arange(length) / SAMPLE_RATE
    for start in rng.integers(0, max(n - length, 1), size=count):
        f0 = rng.uniform(*ac.crackle_hz)
        click = np.sin(2 * np.pi * f0 * tt) * np.exp(-tt / (ac.crackle_ms * 1e-3))
        click *= _db(rng.uniform(*ac.crackle_db)) * rng.choice((-1.0, 1.0))
        seg = out[start:start + length]
        seg += click[: len(seg)]
    return out


def mobile_channel(x, ac: Acoustics, rng) -> np.ndarray:
    """Band-pass, gain offset, then white noise at the configured SNR."""
    sos = signal.butter(4, ac.mobile_band_hz, btype="bandpass", fs=SAMPLE_RATE, output="sos")
    y = signal.sosfilt(sos, x) * _db(ac.mobile_gain_db)
    noise = rng.standard_normal(len(y))
    return y + noise * (_rms(y) / _db(ac.mobile_snr_db))


def synth_clip(cls, prof: PatientProfile, domain: str, rng, ac: Acoustics = Acoustics(),
               duration_range_s=(3.0, 12.0)) -> tuple[Waveform, str]:
    """One recording. ``cls`` is a coarse or fine label; returns (waveform, fine label)."""
    if cls in ("abnormal", 1):
        fine = ABNORMAL_KINDS[int(rng.integers(0, 3))]
    elif cls in ("normal", 0):
        fine = "normal"
    elif cls in FINE_LABELS:
        fine = cls
    else:
        raise ValueError(f"unknown class {cls!r}")
    if domain not in ("stethoscope", "mobile"):
        raise ValueError(f"unknown domain {domain!r}")
    n = int(round(rng.uniform(*duration_range_s) * SAMPLE_RATE))
    x = _breath_noise(n, prof, ac, rng)
    if fine in ("wheeze", "both"):
        x = x + _wheeze(n, ac, rng)
    if fine in ("crackle", "both"):
        x = x + _crackles(n, ac, rng)
    x = x * ac.base_rms * _db(prof.gain_db)
    if domain == "mobile":
        x = mobile_channel(x, ac, rng)
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x = x * (0.99 / peak)
    return Waveform(x), fine


@dataclass(frozen=True)
class PlannedClip:
    sample_id: str
    patient_id: str
    domain: str
    label: str


def plan_corpus(cfg: CorpusConfig) -> list[PlannedClip]:
    """Deterministic clip list: which patient, domain and coarse label each clip gets.

    Per domain, exactly ``round(abnormal_fraction * n_clips)`` clips are abnormal.
    Slots are ranked by ``coherence * patient_severity + (1 - coherence) * noise``
    and the top ones become abnormal, so ``label_coherence=0`` scatters abnormal
    clips uniformly while values near 1 make each patient mostly one class.
    Severity is per patient and shared by both devices.
    """
    patients = [f"P{i:03d}" for i in range(cfg.n_patients)]
    rng = derived_rng(cfg.seed, "plan")
    mobile = set(np.array(patients)[rng.permutation(cfg.n_patients)[: cfg.n_mobile_patients]])
    severity = dict(zip(patients, rng.uniform(size=cfg.n_patients)))
    c = cfg.label_coherence
    plan = []
    for domain, members in (("stethoscope", patients), ("mobile", [p for p in patients if p in mobile])):
        slots = [(p, j) for p in members for j in range(cfg.clips_per_patient_per_domain)]
        n_abn = int(round(cfg.abnormal_fraction * len(slots)))
        rank = np.array([c * severity[p] for p, _ in slots]) + (1 - c) * rng.uniform(size=len(slots))
        abnormal = set(np.argsort(-rank, kind="stable")[:n_abn].tolist())
        tag = "S" if domain == "stethoscope" else "M"
        for i, (p, j) in enumerate(slots):
            label = "abnormal" if i in abnormal else "normal"
            plan.append(PlannedClip(f"{p}_{tag}{j:02d}", p, domain, label))
    return plan


def iter_corpus(cfg: CorpusConfig):
    """Yield (PlannedClip, waveform, fine_label) in plan order without touching disk."""
    profiles = {}
    for clip in plan_corpus(cfg):
        prof = profiles.get(clip.patient_id)
        if prof is None:
            prof = profiles[clip.patient_id] = make_profile(clip.patient_id, cfg.seed, cfg.acoustics)
        rng = derived_rng(cfg.seed, "clip", clip.sample_id)
        w, fine = synth_clip(clip.label, prof, clip.domain, rng, cfg.acoustics, cfg.duration_range_s)
        yield clip, w, fine


def generate_corpus(cfg: CorpusConfig, out_dir) -> tuple[Path, Path]:
    """Write WAVs under ``out_dir/wav`` and ``out_dir/metadata.csv``; returns both paths."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create corpus directory {wav_dir}: {e}") from e
    if not os.access(wav_dir, os.W_OK):
        raise PermissionError(f"corpus directory {wav_dir} is not writable")
    rows = []
    for clip, w, fine in iter_corpus(cfg):
        rel = f"wav/{clip.sample_id}.wav"
        write_wav(out_dir / rel, w)
        rows.append((clip.sample_id, rel, fine, clip.label, clip.patient_id, clip.domain))
    csv_path = out_dir / "metadata.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)
    return wav_dir, csv_path


def load_metadata(csv_path, check_files: bool = True) -> list[SampleMeta]:
    """Parse and validate a metadata CSV. Relative paths resolve against the CSV's folder."""
    csv_path = Path(csv_path)
    base = csv_path.parent
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            missing = sorted(set(CSV_HEADER) - set(header or ()))
            detail = f"missing column(s) {missing}" if missing else f"header must be {','.join(CSV_HEADER)}"
            raise ValueError(f"{csv_path}: row 1: {detail}")
        index = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{csv_path}: row {lineno}: expected {len(CSV_HEADER)} fields")
            rec = dict(zip(CSV_HEADER, row))
            try:
                path = rec["path"] if os.path.isabs(rec["path"]) else str(base / rec["path"])
                meta = SampleMeta(rec["sample_id"], path, rec["label"], rec["fine_label"],
                                  rec["patient_id"], rec["domain"])
            except ValueError as e:
                raise ValueError(f"{csv_path}: row {lineno}: {e}") from None
            if check_files and not os.path.isfile(meta.path):
                raise ValueError(f"{csv_path}: row {lineno}: missing file {meta.path}")
            index.append(meta)
    if not index:
        raise ValueError(f"{csv_path}: empty dataset")
    report = validate_dataset(index, check_files=check_files)
    if not report.passed:
        raise ValueError(f"{csv_path}: {report.summary()}")
    return index


def coarse_of(fine: str) -> str:
    return coarse_label(fine)
