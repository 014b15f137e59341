"""Shared fixture builders and independent oracles for the test suite."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from tpfp.arch_map import ProjectionKind
from tpfp.synth import SynthSpec, generate_checkpoint

ATTN = (ProjectionKind.Q, ProjectionKind.K, ProjectionKind.V, ProjectionKind.O)


def make_spec(**overrides) -> SynthSpec:
    """Small dense attention-only model; override any field."""
    base = dict(
        model_id="fixture",
        num_layers=4,
        hidden_size=16,
        num_heads=4,
        num_kv_heads=4,
        head_dim=4,
        ffn_size=32,
        dtype_name="F32",
        seed=0,
        kinds=ATTN,
    )
    base.update(overrides)
    from tpfp.tensor_store import DType

    dtype = DType(base.pop("dtype_name")) if "dtype_name" in base else base.pop("dtype")
    return SynthSpec(dtype=dtype, **base)


def build_checkpoint(tmp: Path, name: str = "ckpt", **overrides):
    """Generate a checkpoint under tmp/name; returns (dir, spec, targets)."""
    spec = make_spec(**overrides)
    out = tmp / name
    targets = generate_checkpoint(spec, out)
    return out, spec, targets


# --- independent oracles ------------------------------------------------------


def two_pass_std(values: np.ndarray) -> float:
    """Naive mean-then-sum-of-squares sample std, straight off the definition."""
    x = np.asarray(values, dtype=np.float64).ravel()
    mean = x.mean()
    return math.sqrt(float(np.sum((x - mean) ** 2)) / (x.size - 1))


def exact_std(values) -> float:
    """Compensated-summation sample std for small inputs."""
    xs = [float(v) for v in values]
    mean = math.fsum(xs) / len(xs)
    m2 = math.fsum((v - mean) ** 2 for v in xs)
    return math.sqrt(m2 / (len(xs) - 1))


def pearson_oracle(a, b) -> float:
    """Definition-level correlation with compensated sums."""
    xs = [float(v) for v in a]
    ys = [float(v) for v in b]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    num = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    dx = math.sqrt(math.fsum((x - mx) ** 2 for x in xs))
    dy = math.sqrt(math.fsum((y - my) ** 2 for y in ys))
    return num / (dx * dy)


def t_density(x: float, df: int) -> float:
    coeff = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return coeff * (1.0 + x * x / df) ** (-(df + 1) / 2)


def p_value_oracle(r: float, n: int) -> float:
    """Two-tailed p by numerical integration of the t density."""
    from scipy.integrate import quad

    if abs(r) == 1.0:
        return 0.0
    df = n - 2
    t = abs(r) * math.sqrt(df) / math.sqrt(1.0 - r * r)
    tail, _ = quad(t_density, t, np.inf, args=(df,))
    return 2.0 * tail


def interp_oracle(values, target_len: int) -> list[float]:
    """Pointwise piecewise-linear evaluation at the linspace targets."""
    vals = [float(v) for v in values]
    n = len(vals)
    out = []
    for j in range(target_len):
        t = j * (n - 1) / (target_len - 1)
        k = int(math.floor(t))
        if k >= n - 1:
            out.append(vals[-1])
            continue
        frac = t - k
        out.append(vals[k] * (1.0 - frac) + vals[k + 1] * frac)
    return out


def correlated_pair(rng: np.random.Generator, length: int, target_r: float):
    """Two centered unit-std sequences whose correlation is exactly target_r.

    Gram-Schmidt construction: y = r*x + sqrt(1-r^2)*u with u orthogonal to x.
    """

    def unit_centered(v):
        v = v - v.mean()
        return v / math.sqrt(float(np.sum(v * v)) / (len(v) - 1))

    x = unit_centered(rng.standard_normal(length))
    z = rng.standard_normal(length)
    z = z - z.mean()
    u = z - (float(np.dot(z, x)) / float(np.dot(x, x))) * x
    u = unit_centered(u)
    y = target_r * x + math.sqrt(1.0 - target_r * target_r) * u
    return x, y
