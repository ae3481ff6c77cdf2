"""Exact simulation of the variable-speed walk X among dynamical conductances.

At state (t, x) each incident edge gets a fresh Exponential(1) target and its
next ring time is obtained by inverting the integrated rate; the earlier ring
wins.  Fresh draws after every jump are legitimate because the ring processes
have independent increments.
"""

from __future__ import annotations

import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from . import _envcore as core
from ._rng import derive, exponential, TAG_ENV, TAG_PATH, TAG_ENV_PER_PATH, TAG_STATIC, TAG_CELL
from .env import EnvSpec, EnvironmentWindow, build_env
from .errors import ConfigError, WindowExhausted

DEFAULT_MAX_STEPS = 10_000_000
FAR = np.int64(1) << np.int64(60)

ST_DONE = 0
ST_TRUNCATED = 1
ST_LEFT_WINDOW = 2
ST_BUFFER_FULL = 3


@njit(cache=True, nogil=True)
def _walk_kernel(envp, x, t, t_end, key, counter, steps, max_steps, e_lo, e_hi,
                 sample_times, sample_out, s_idx, record, jt, jp, njump):
    buf_t = np.empty(core.BUF)
    buf_u = np.empty(core.BUF)
    ns = sample_times.shape[0]
    while True:
        if x - 1 < e_lo or x > e_hi:
            return ST_LEFT_WINDOW, x, t, counter, steps, s_idx, njump
        if record and njump >= jt.shape[0]:
            return ST_BUFFER_FULL, x, t, counter, steps, s_idx, njump
        if envp[0] == 0:
            # static field: ring times are plain exponentials, skip the call overhead
            r_left = t + exponential(key, counter) / core.static_rate(envp, x - 1)
            r_right = t + exponential(key, counter + 1) / core.static_rate(envp, x)
        else:
            r_left = core.ring_forward(envp, x - 1, t, exponential(key, counter), t_end, buf_t, buf_u)
            r_right = core.ring_forward(envp, x, t, exponential(key, counter + 1), t_end, buf_t, buf_u)
        r = min(r_left, r_right)
        if r > t_end:
            while s_idx < ns:
                sample_out[s_idx] = x
                s_idx += 1
            return ST_DONE, x, t_end, counter, steps, s_idx, njump
        while s_idx < ns and sample_times[s_idx] < r:
            sample_out[s_idx] = x
            s_idx += 1
        if steps >= max_steps:
            while s_idx < ns:
                sample_out[s_idx] = x
                s_idx += 1
            return ST_TRUNCATED, x, t, counter, steps, s_idx, njump
        counter += 2
        steps += 1
        t = r
        x = x - 1 if r_left < r_right else x + 1
        if record:
            jt[njump] = t
            jp[njump] = x
            njump += 1


@njit(cache=True, nogil=True)
def _walk_batch(envp, static_keys, cell_keys, path_keys, x0, t0, t_end, sample_times,
                max_steps, out, truncated, n_jumps):
    dummy_t = np.empty(0)
    dummy_p = np.empty(0, dtype=np.int64)
    for i in range(path_keys.shape[0]):
        ep = (envp[0], envp[1], envp[2], static_keys[i], cell_keys[i], envp[5], envp[6],
              envp[7], envp[8], envp[9], envp[10])
        st, x, t, c, steps, s_idx, nj = _walk_kernel(
            ep, x0, t0, t_end, path_keys[i], 0, 0, max_steps, -FAR, FAR,
            sample_times, out[i], 0, False, dummy_t, dummy_p, 0)
        truncated[i] = st == ST_TRUNCATED
        n_jumps[i] = steps


@njit(cache=True, nogil=True)
def _walk_endpoints(envp, static_keys, cell_keys, path_keys, end_times, max_steps, out, truncated):
    dummy_t = np.empty(0)
    dummy_p = np.empty(0, dtype=np.int64)
    smp = np.zeros(1)
    smp_out = np.zeros(1, dtype=np.int64)
    for i in range(path_keys.shape[0]):
        ep = (envp[0], envp[1], envp[2], static_keys[i], cell_keys[i], envp[5], envp[6],
              envp[7], envp[8], envp[9], envp[10])
        smp[0] = end_times[i]
        st, x, t, c, steps, s_idx, nj = _walk_kernel(
            ep, 0, 0.0, end_times[i], path_keys[i], 0, 0, max_steps, -FAR, FAR,
            smp, smp_out, 0, False, dummy_t, dummy_p, 0)
        out[i] = x
        truncated[i] = st == ST_TRUNCATED


def default_half_width(spec: EnvSpec, horizon: float) -> int:
    mb = spec.mean_rate()
    if not math.isfinite(mb):
        mb = max(1.0, spec.level_law.scale)
    return int(6.0 * math.sqrt(2.0 * mb * max(horizon, 0.0)) + 64)


@dataclass
class PathRecord:
    start_vertex: int
    jump_times: np.ndarray
    positions: np.ndarray
    horizon: float
    seed: int
    truncated: bool = False

    def position_at(self, t: float) -> int:
        if not 0.0 <= t <= self.horizon:
            raise ConfigError(f"time {t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        return int(self.start_vertex if k == 0 else self.positions[k - 1])

    def positions_at(self, times) -> np.ndarray:
        times = np.asarray(times, float)
        k = np.searchsorted(self.jump_times, times, side="right")
        full = np.concatenate(([self.start_vertex], self.positions)).astype(np.int64)
        return full[k]

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)


def simulate_x(env: EnvironmentWindow, x0: int, horizon: float, seed: int,
               max_steps: int = DEFAULT_MAX_STEPS, extend: bool = True) -> PathRecord:
    """Simulate X from (0, x0) to time ``horizon`` in view coordinates."""
    if horizon < 0:
        raise ConfigError("negative horizon")
    if env.t_min > 0 or horizon > env.t_max:
        raise ConfigError("the window must cover [0, horizon]")
    if not env.x_min < x0 < env.x_max:
        raise ConfigError("start vertex outside the window")
    s_off, y_off = env.shift_offset
    t0, t_end = 0.0 + s_off, horizon + s_off
    key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    cap = 1024
    jt, jp = np.empty(cap), np.empty(cap, dtype=np.int64)
    x, t, counter, steps, nj = x0 + y_off, t0, 0, 0, 0
    empty_s = np.empty(0)
    empty_o = np.empty(0, dtype=np.int64)
    win = env
    while True:
        st, x, t, counter, steps, _, nj = _walk_kernel(
            win.core, x, t, t_end, key, counter, steps, max_steps,
            win.x_min + y_off, win.x_max - 1 + y_off, empty_s, empty_o, 0, True, jt, jp, nj)
        if st == ST_BUFFER_FULL:
            cap *= 2
            jt = np.concatenate((jt, np.empty(cap - len(jt))))
            jp = np.concatenate((jp, np.empty(cap - len(jp), dtype=np.int64)))
        elif st == ST_LEFT_WINDOW:
            if not extend:
                raise WindowExhausted(
                    f"walk reached vertex {x - y_off} at time {t - s_off}, outside "
                    f"[{win.x_min}, {win.x_max}]")
            w = win.x_max - win.x_min
            win = win.extended(x_min=win.x_min - w, x_max=win.x_max + w)
        else:
            break
    return PathRecord(int(x0), jt[:nj] - s_off, jp[:nj] - y_off, float(horizon), int(seed),
                      st == ST_TRUNCATED)


@dataclass
class EnsembleSummary:
    mode: str
    n_paths: int
    sample_times: np.ndarray
    positions: np.ndarray
    env_descriptor: dict
    truncated: np.ndarray = field(default=None)
    n_jumps: np.ndarray = field(default=None)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("path_id,time,position\n")
        times = [repr(float(t)) for t in self.sample_times]
        for i in range(self.n_paths):
            row = self.positions[i]
            for j, ts in enumerate(times):
                out.write(f"{i},{ts},{int(row[j])}\n")
        return out.getvalue()

    def to_binary(self) -> bytes:
        return encode_trace(self.sample_times, self.positions)


TRACE_MAGIC = b"CSIMTRC\x00"
TRACE_VERSION = 1


def encode_trace(sample_times: np.ndarray, positions: np.ndarray) -> bytes:
    """Binary trace: magic, version, n_paths, n_times (u64 LE), times (f64 LE), positions (i64 LE)."""
    positions = np.asarray(positions, dtype="<i8")
    n_paths, n_times = positions.shape
    head = TRACE_MAGIC + struct.pack("<QQQ", TRACE_VERSION, n_paths, n_times)
    return head + np.asarray(sample_times, dtype="<f8").tobytes() + positions.tobytes()


def decode_trace(blob: bytes):
    if blob[:8] != TRACE_MAGIC:
        raise ConfigError("not a trace file")
    ver, n_paths, n_times = struct.unpack("<QQQ", blob[8:32])
    if ver != TRACE_VERSION:
        raise ConfigError(f"unsupported trace version {ver}")
    off = 32
    times = np.frombuffer(blob, dtype="<f8", count=n_times, offset=off)
    off += 8 * n_times
    pos = np.frombuffer(blob, dtype="<i8", count=n_paths * n_times, offset=off)
    return times.copy(), pos.reshape(n_paths, n_times).copy()


def _chunks(n: int, workers: int):
    workers = max(1, int(workers))
    size = max(1, -(-n // (4 * workers)))
    return [(a, min(n, a + size)) for a in range(0, n, size)]


def run_chunked(fn, n: int, workers: int) -> None:
    """Run fn(a, b) over index chunks; results must be written by index."""
    parts = _chunks(n, workers)
    if workers <= 1:
        for a, b in parts:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for fut in [pool.submit(fn, a, b) for a, b in parts]:
            fut.result()


def env_keys(mode: str, n_paths: int, master_seed: int):
    """Environment seeds and their compiled keys for each path."""
    if mode == "quenched":
        seeds = [derive(master_seed, TAG_ENV)] * n_paths
    elif mode == "annealed":
        seeds = [derive(master_seed, TAG_ENV_PER_PATH, i) for i in range(n_paths)]
    else:
        raise ConfigError(f"unknown ensemble mode {mode!r}")
    sk = np.array([derive(s, TAG_STATIC) for s in seeds], dtype=np.uint64)
    ck = np.array([derive(s, TAG_CELL) for s in seeds], dtype=np.uint64)
    return seeds, sk, ck


def ensemble_x(spec: EnvSpec, mode: str, n_paths: int, sample_times: Sequence[float],
               master_seed: int, workers: int = 1, x0: int = 0,
               max_steps: int = DEFAULT_MAX_STEPS, env_seed: Optional[int] = None
               ) -> EnsembleSummary:
    """Positions of ``n_paths`` walks at ``sample_times``.

    Path i uses the key derive(master_seed, TAG_PATH, i); the environment seed
    is shared (quenched) or derived per path (annealed).
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    times = np.asarray(sample_times, dtype=np.float64)
    if times.ndim != 1 or len(times) == 0 or np.any(times <= 0) or np.any(np.diff(times) < 0):
        raise ConfigError("sample_times must be positive and nondecreasing")
    seeds, sk, ck = env_keys(mode, n_paths, master_seed)
    if env_seed is not None:
        if mode != "quenched":
            raise ConfigError("an explicit environment seed implies quenched mode")
        seeds = [int(env_seed)] * n_paths
        sk = np.full(n_paths, derive(env_seed, TAG_STATIC), dtype=np.uint64)
        ck = np.full(n_paths, derive(env_seed, TAG_CELL), dtype=np.uint64)
    pk = np.array([derive(master_seed, TAG_PATH, i) for i in range(n_paths)], dtype=np.uint64)
    envp = spec.core(0)
    out = np.zeros((n_paths, len(times)), dtype=np.int64)
    trunc = np.zeros(n_paths, dtype=np.bool_)
    nj = np.zeros(n_paths, dtype=np.int64)
    horizon = float(times[-1])

    def work(a, b):
        _walk_batch(envp, sk[a:b], ck[a:b], pk[a:b], x0, 0.0, horizon, times, max_steps,
                    out[a:b], trunc[a:b], nj[a:b])

    run_chunked(work, n_paths, workers)
    desc = {"spec": spec.to_dict(), "master_seed": int(master_seed), "mode": mode,
            "env_seed": int(seeds[0]) if mode == "quenched" else None}
    return EnsembleSummary(mode, n_paths, times, out, desc, trunc, nj)


def walk_endpoints(spec: EnvSpec, mode: str, end_times: Sequence[float], master_seed: int,
                   workers: int = 1, max_steps: int = DEFAULT_MAX_STEPS):
    """X at a separate end time for each path, started from (0, 0).

    Returns (positions, truncated flags).  Keys follow ensemble_x.
    """
    ends = np.asarray(end_times, dtype=np.float64)
    if ends.ndim != 1 or np.any(ends < 0):
        raise ConfigError("end times must be nonnegative")
    n = len(ends)
    _, sk, ck = env_keys(mode, n, master_seed)
    pk = np.array([derive(master_seed, TAG_PATH, i) for i in range(n)], dtype=np.uint64)
    envp = spec.core(0)
    out = np.zeros(n, dtype=np.int64)
    trunc = np.zeros(n, dtype=np.bool_)

    def work(a, b):
        _walk_endpoints(envp, sk[a:b], ck[a:b], pk[a:b], ends[a:b], max_steps, out[a:b], trunc[a:b])

    run_chunked(work, n, workers)
    return out, trunc


def rescale_paths(summary: EnsembleSummary, n: float, t_grid: Optional[Sequence[float]] = None,
                  rtol: float = 1e-9) -> np.ndarray:
    """X_{n t}/sqrt(n) for each t in ``t_grid`` (default: every sample time / n)."""
    if n <= 0:
        raise ConfigError("n must be positive")
    st = summary.sample_times
    if t_grid is None:
        cols = np.arange(len(st))
    else:
        cols = []
        for t in t_grid:
            hit = np.nonzero(np.isclose(st, n * t, rtol=rtol, atol=0.0))[0]
            if len(hit) == 0:
                raise ConfigError(f"time n*t = {n * t} is not a sample time")
            cols.append(hit[0])
        cols = np.asarray(cols)
    return summary.positions[:, cols] / math.sqrt(n)
