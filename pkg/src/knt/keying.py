"""Key-derived deterministic randomness.

Every random quantity in this package is derived from a 256-bit master key
(or a bare 64-bit seed) together with an ASCII purpose label, so independent
subsystems never share or race on generator state.  The generator family is
fixed and normative: splitmix64 for seed derivation and state expansion,
xoshiro256** for streams, Box-Muller for Gaussian variates, and Fisher-Yates
for permutations.  The exact bit-level rules live in ``docs/determinism.md``;
outputs are reproducible across platforms, runs, and thread counts.

These generators carry no cryptographic claim.  The key is treated as an
opaque secret; protecting it is the deployment's job, not this module's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    from numba import njit as _njit
except ImportError:  # pragma: no cover - numba is a hard dep, but degrade gracefully
    _njit = None

__all__ = [
    "MasterKey",
    "PUBLIC_KEY",
    "Xoshiro256StarStar",
    "derive_seed",
    "fold_seed",
    "uniform_stream",
    "gaussian_stream",
    "key_permutation",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB

#: Longest accepted purpose label, in bytes.
MAX_LABEL_BYTES = 64


def _mix64(x: int) -> int:
    # One splitmix64 step: advance state x by the Weyl constant, finalize.
    z = (x + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def _le_words(data: bytes) -> list[int]:
    # Split into 8-byte little-endian words, zero-padding the tail.
    padded = data + b"\x00" * (-len(data) % 8)
    return [
        int.from_bytes(padded[i : i + 8], "little") for i in range(0, len(padded), 8)
    ]


@dataclass(frozen=True)
class MasterKey:
    """A 32-byte secret from which all transform parameters are derived.

    Construct with :meth:`from_hex` (64 hex chars) or :meth:`from_seed`
    (deterministic expansion of a small integer, for experiment grids).
    ``repr`` and logs only ever show the :meth:`fingerprint`, never the key.
    """

    data: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes) or len(self.data) != 32:
            raise ValueError("master key must be exactly 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "MasterKey":
        text = text.strip()
        if len(text) != 64:
            raise ValueError("key hex string must be exactly 64 characters")
        return cls(bytes.fromhex(text))

    @classmethod
    def from_seed(cls, seed: int) -> "MasterKey":
        """Expand a 64-bit integer into a key via four splitmix64 outputs."""
        state = seed & _MASK64
        words = []
        for _ in range(4):
            words.append(_mix64(state))
            state = (state + _GAMMA) & _MASK64
        return cls(b"".join(w.to_bytes(8, "little") for w in words))

    def to_hex(self) -> str:
        return self.data.hex()

    def fingerprint(self) -> str:
        """First 8 hex chars; safe to put in reports and filenames."""
        return self.data.hex()[:8]

    def __repr__(self) -> str:  # never leak the key through repr/str
        return f"MasterKey(fingerprint={self.fingerprint()!r})"

    __str__ = __repr__


#: Fixed, published key used by the "keyed but not secret" ablation.
PUBLIC_KEY = MasterKey(b"PUBLIC-" + b"0" * 25)


def derive_seed(key: MasterKey, label: str) -> int:
    """Derive the 64-bit stream seed for one purpose label.

    The absorption rule (normative, see docs/determinism.md): starting from
    state 0, for each 8-byte little-endian word of the 32 key bytes and then
    of the zero-padded label bytes, xor the word into the state and apply one
    splitmix64 step; finally xor in the unpadded label length and apply one
    more step.  Distinct labels give independent streams under the same key.
    """
    try:
        raw = label.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ValueError(f"label must be ASCII: {label!r}") from exc
    if not raw:
        raise ValueError("label must be non-empty")
    if len(raw) > MAX_LABEL_BYTES:
        raise ValueError(f"label longer than {MAX_LABEL_BYTES} bytes: {label!r}")
    state = 0
    for word in _le_words(key.data) + _le_words(raw):
        state = _mix64(state ^ word)
    return _mix64(state ^ len(raw))


def fold_seed(seed: int, *parts: int | str) -> int:
    """Derive a child seed from a parent seed and a path of ints / labels.

    Integers are absorbed as single 64-bit words; strings as in
    :func:`derive_seed` (padded words, then length).  Used to pre-derive
    per-sample / per-position / per-restart seeds so that results do not
    depend on scheduling order.
    """
    state = seed & _MASK64
    for part in parts:
        if isinstance(part, str):
            raw = part.encode("ascii")
            for word in _le_words(raw):
                state = _mix64(state ^ word)
            state = _mix64(state ^ len(raw))
        else:
            state = _mix64(state ^ (int(part) & _MASK64))
    return state


if _njit is not None:

    @_njit(cache=True)
    def _xoshiro_block_jit(s0, s1, s2, s3, out):  # pragma: no cover - jitted
        for i in range(out.shape[0]):
            x = s1 * np.uint64(5)
            r = (x << np.uint64(7)) | (x >> np.uint64(57))
            out[i] = r * np.uint64(9)
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        return s0, s1, s2, s3

else:  # pragma: no cover
    _xoshiro_block_jit = None


class Xoshiro256StarStar:
    """The package's one stream generator (xoshiro256**).

    State is expanded from a 64-bit seed with four splitmix64 outputs.
    Instances are cheap value-like state machines; create one per purpose
    and never share a single instance across concurrent consumers.
    """

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        s = []
        for _ in range(4):
            s.append(_mix64(state))
            state = (state + _GAMMA) & _MASK64
        self._s = s

    def next_u64(self) -> int:
        """Next raw 64-bit output."""
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _MASK64
        result = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def __iter__(self) -> "Xoshiro256StarStar":
        return self

    def __next__(self) -> int:
        return self.next_u64()

    def next_block(self, n: int) -> np.ndarray:
        """Next ``n`` raw outputs as a uint64 array.

        Bitwise identical to ``n`` calls of :meth:`next_u64`; large blocks go
        through a compiled kernel when numba is importable.
        """
        if n < 0:
            raise ValueError("block size must be >= 0")
        out = np.empty(n, dtype=np.uint64)
        if _xoshiro_block_jit is not None and n >= 64:
            s = [np.uint64(v) for v in self._s]
            s0, s1, s2, s3 = _xoshiro_block_jit(s[0], s[1], s[2], s[3], out)
            self._s = [int(s0), int(s1), int(s2), int(s3)]
        else:
            for i in range(n):
                out[i] = self.next_u64()
        return out

    # -- Derived variates --------------------------------------------------

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) at 53-bit resolution (one draw each)."""
        block = self.next_block(n)
        return (block >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussians(self, n: int, std: float = 1.0) -> np.ndarray:
        """``n`` single-precision N(0, std^2) variates via Box-Muller.

        Each output pair consumes exactly two raw draws (x1, x2):
        u1 = ((x1 >> 11) + 1) * 2^-53 in (0, 1], u2 = (x2 >> 11) * 2^-53 in
        [0, 1), then (r*cos(2*pi*u2), r*sin(2*pi*u2)) with r = sqrt(-2 ln u1).
        The standard normal is rounded to float32 once; scaling by ``std``
        multiplies in double and rounds once more, so
        ``gaussians(n, c) == float32(c * float64(gaussians(n, 1)))`` exactly.
        """
        if n < 0:
            raise ValueError("count must be >= 0")
        if std < 0:
            raise ValueError("std must be >= 0")
        if n == 0:
            return np.zeros(0, dtype=np.float32)
        pairs = (n + 1) // 2
        raw = self.next_block(2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * np.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        z32 = z[:n].astype(np.float32)
        if std == 0.0:
            return np.zeros(n, dtype=np.float32)
        if std == 1.0:
            return z32
        return (float(std) * z32.astype(np.float64)).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        """A keyed permutation of 0..n-1 (Fisher-Yates, one draw per step).

        Swap index for position i (descending from n-1 to 1) is the next raw
        draw modulo (i+1).  Modulo bias at the sizes used here (n <= a few
        hundred) is below 2**-55 and accepted as normative.
        """
        if n < 1:
            raise ValueError("permutation length must be >= 1")
        perm = np.arange(n, dtype=np.int64)
        if n == 1:
            return perm
        draws = self.next_block(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def uniform_stream(seed: int) -> Xoshiro256StarStar:
    """Iterator of raw 64-bit uniforms for ``seed`` (see Xoshiro256StarStar)."""
    return Xoshiro256StarStar(seed)


def gaussian_stream(seed: int, n: int, std: float = 1.0) -> np.ndarray:
    """First ``n`` Gaussian variates of the stream for ``seed``."""
    return Xoshiro256StarStar(seed).gaussians(n, std)


def key_permutation(seed: int, n: int) -> np.ndarray:
    """The keyed permutation of 0..n-1 for ``seed``."""
    return Xoshiro256StarStar(seed).permutation(n)
