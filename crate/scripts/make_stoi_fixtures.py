"""Regenerates the STOI cross-check fixtures with pystoi."""
import json
import os
import sys

import numpy as np
from scipy.io import wavfile
from pystoi import stoi

FS = 16000
out = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/stoi"
os.makedirs(out, exist_ok=True)
rng = np.random.default_rng(20240611)


def speechlike(n):
    t = np.arange(n) / FS
    f0 = rng.uniform(90, 220)
    syll = rng.uniform(2.0, 5.0)
    env = np.clip(np.sin(2 * np.pi * syll * t + rng.uniform(0, 6)), 0, None) ** 1.5
    tone = sum(np.sin(2 * np.pi * f0 * h * t * (1 + 0.03 * np.sin(2 * np.pi * 0.7 * t))) / h for h in range(1, 12))
    x = env * tone
    x[: n // 10] *= 0.001  # leading near-silence exercises frame removal
    return 0.25 * x / np.max(np.abs(x))


def pcm16(x):
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    return q, q.astype(np.float64) / 32768.0


refs = {}
for k in range(10):
    n = int(FS * rng.uniform(1.5, 3.0))
    clean = speechlike(n)
    snr = [-5, 0, 5, 10, 20][k % 5]
    noise = rng.standard_normal(n)
    if k % 2:
        noise = np.convolve(noise, np.ones(8) / 8, mode="same")
    noise *= np.sqrt(np.mean(clean**2) / np.mean(noise**2) / 10 ** (snr / 10))
    deg = clean + noise
    if k == 9:
        deg = 0.5 * clean  # pure gain
    cq, cf = pcm16(clean)
    dq, df = pcm16(deg)
    wavfile.write(os.path.join(out, f"clean_{k}.wav"), FS, cq)
    wavfile.write(os.path.join(out, f"degraded_{k}.wav"), FS, dq)
    refs[str(k)] = stoi(cf, df, FS, extended=False)

with open(os.path.join(out, "reference.json"), "w") as f:
    json.dump(refs, f, indent=1, sort_keys=True)
print(refs)
