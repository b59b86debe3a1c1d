"""LDPC coding: alist I/O, systematic encoding, log-domain sum-product decoding, interleaving.

Bits are carried as +-1 throughout with +1 <-> GF(2) zero, and LLRs are
positive for +1, the same convention the detector uses.
"""
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import sparse


class AlistParseError(ValueError):
    pass


class CodeConstructionError(ValueError):
    pass


# 802.16e-style rate-3/4 base matrix (6 x 24, expansion factor 96 for n = 2304).
# Entries are cyclic shifts; -1 marks an all-zero block. Parity columns 18..23
# carry the usual weight-3 column plus dual diagonal.
BASE_R34 = np.array([
    [6, 38, 3, 93, -1, -1, -1, 30, 70, -1, 86, -1, 37, 38, 4, 11, -1, 46, 48, 0, -1, -1, -1, -1],
    [62, 94, 19, 84, -1, 92, 78, -1, 15, -1, -1, 92, -1, 45, 24, 32, 30, -1, -1, 0, 0, -1, -1, -1],
    [71, -1, 55, -1, 12, 66, 45, 79, -1, 78, -1, -1, 10, -1, 22, 55, 70, 82, -1, -1, 0, 0, -1, -1],
    [38, 61, -1, 66, 9, 73, 47, 64, -1, 39, 61, 43, -1, -1, -1, -1, 95, 32, 0, -1, -1, 0, 0, -1],
    [-1, -1, -1, -1, 32, 52, 55, 80, 95, 22, 6, 51, 24, 90, 44, 20, -1, -1, -1, -1, -1, -1, 0, 0],
    [-1, 63, 31, 88, 20, -1, -1, -1, 6, 40, 56, 16, 71, 53, -1, -1, 27, 26, 48, -1, -1, -1, -1, 0],
])

BUNDLED_ALIST = "wimax_2304_r34.alist"


def expand_base_matrix(base, z: int) -> np.ndarray:
    """Quasi-cyclic expansion: each entry becomes a ``z x z`` identity shifted right by the entry."""
    base = np.asarray(base)
    mb, nb = base.shape
    h = np.zeros((mb * z, nb * z), dtype=np.uint8)
    eye = np.eye(z, dtype=np.uint8)
    for i in range(mb):
        for j in range(nb):
            s = base[i, j]
            if s >= 0:
                h[i * z:(i + 1) * z, j * z:(j + 1) * z] = np.roll(eye, s % z, axis=1)
    return h


@dataclass
class ParityCheck:
    """Sparse binary parity-check matrix with a precomputed systematic encoder."""
    h: sparse.csr_matrix
    _enc: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.h = sparse.csr_matrix(self.h, dtype=np.uint8)
        coo = self.h.tocoo()
        order = np.lexsort((coo.col, coo.row))
        self.edge_chk = coo.row[order].astype(np.int64)
        self.edge_var = coo.col[order].astype(np.int64)
        self.chk_ptr = np.searchsorted(self.edge_chk, np.arange(self.h.shape[0]))

    @classmethod
    def from_dense(cls, h):
        return cls(sparse.csr_matrix(np.asarray(h, dtype=np.uint8)))

    @property
    def n(self) -> int:
        return self.h.shape[1]

    @property
    def m(self) -> int:
        return self.h.shape[0]

    @property
    def k(self) -> int:
        return self.n - self._encoder()[0].size

    @property
    def rate(self) -> float:
        return self.k / self.n

    def syndrome(self, bits) -> np.ndarray:
        """Parity of each check for +-1 ``bits`` (0 = satisfied)."""
        b01 = (np.asarray(bits) < 0).astype(np.int64)
        return np.asarray(self.h @ b01).ravel() % 2

    def _encoder(self):
        if self._enc is None:
            self._enc = _systematic_encoder(self.h.toarray())
        return self._enc


def _systematic_encoder(h: np.ndarray):
    """Row-reduce ``h`` over GF(2), pivoting on the rightmost columns first.

    Returns ``(parity_cols, info_cols, a)`` with parity bits ``= a @ info_bits mod 2``.
    """
    h = h.astype(bool).copy()
    m, n = h.shape
    pivots = []
    row = 0
    for col in range(n - 1, -1, -1):
        if row == m:
            break
        cand = np.flatnonzero(h[row:, col])
        if cand.size == 0:
            continue
        p = row + cand[0]
        if p != row:
            h[[row, p]] = h[[p, row]]
        hits = np.flatnonzero(h[:, col])
        hits = hits[hits != row]
        if hits.size:
            h[hits] ^= h[row]
        pivots.append(col)
        row += 1
    rank = row
    if rank == 0:
        raise CodeConstructionError("parity-check matrix has rank zero")
    parity_cols = np.array(pivots)
    info_mask = np.ones(n, dtype=bool)
    info_mask[parity_cols] = False
    info_cols = np.flatnonzero(info_mask)
    a = h[:rank][:, info_cols].astype(np.uint8)
    return parity_cols, info_cols, a


def encode(msg, pc: ParityCheck) -> np.ndarray:
    """Systematic codeword (+-1) for a +-1 message of length ``pc.k``."""
    msg = np.asarray(msg, dtype=float)
    parity_cols, info_cols, a = pc._encoder()
    if msg.size != info_cols.size:
        raise ValueError(f"message length {msg.size} != k = {info_cols.size}")
    m01 = (msg < 0).astype(np.int64)
    p01 = (a.astype(np.int64) @ m01) % 2
    c01 = np.zeros(pc.n, dtype=np.int64)
    c01[info_cols] = m01
    c01[parity_cols] = p01
    cw = 1.0 - 2.0 * c01
    if np.any(pc.syndrome(cw)):
        raise CodeConstructionError("encoder produced a non-codeword")
    return cw


def message_bits(codeword, pc: ParityCheck) -> np.ndarray:
    return np.asarray(codeword)[pc._encoder()[1]]


# --- alist --------------------------------------------------------------------

def load_alist(text: str) -> ParityCheck:
    """Parse MacKay alist text (1-based indices, zero padding allowed)."""
    lines = [ln for ln in text.splitlines()]

    def ints(i):
        try:
            return [int(v) for v in lines[i].split()]
        except (IndexError, ValueError) as exc:
            raise AlistParseError(f"line {i + 1}: expected integers") from exc

    dims = ints(0)
    if len(dims) != 2:
        raise AlistParseError("line 1: expected 'n m'")
    n, m = dims
    maxd = ints(1)
    if len(maxd) != 2:
        raise AlistParseError("line 2: expected max column and row degree")
    col_deg = ints(2)
    row_deg = ints(3)
    if len(col_deg) != n:
        raise AlistParseError(f"line 3: expected {n} column degrees, got {len(col_deg)}")
    if len(row_deg) != m:
        raise AlistParseError(f"line 4: expected {m} row degrees, got {len(row_deg)}")
    rows, cols = [], []
    for j in range(n):
        li = 4 + j
        idx = [v for v in ints(li) if v != 0]
        if len(idx) != col_deg[j]:
            raise AlistParseError(f"line {li + 1}: column {j + 1} lists {len(idx)} entries, degree {col_deg[j]}")
        for i in idx:
            if not 1 <= i <= m:
                raise AlistParseError(f"line {li + 1}: row index {i} out of range")
            rows.append(i - 1)
            cols.append(j)
    seen = set(zip(rows, cols))
    for i in range(m):
        li = 4 + n + i
        idx = [v for v in ints(li) if v != 0]
        if len(idx) != row_deg[i]:
            raise AlistParseError(f"line {li + 1}: row {i + 1} lists {len(idx)} entries, degree {row_deg[i]}")
        for j in idx:
            if (i, j - 1) not in seen:
                raise AlistParseError(f"line {li + 1}: row list disagrees with column lists")
    h = sparse.csr_matrix((np.ones(len(rows), dtype=np.uint8), (rows, cols)), shape=(m, n))
    return ParityCheck(h)


def dump_alist(pc: ParityCheck) -> str:
    h = pc.h.tocsc()
    hr = pc.h.tocsr()
    col_lists = [sorted(h.indices[h.indptr[j]:h.indptr[j + 1]] + 1) for j in range(pc.n)]
    row_lists = [sorted(hr.indices[hr.indptr[i]:hr.indptr[i + 1]] + 1) for i in range(pc.m)]
    max_c = max(len(c) for c in col_lists)
    max_r = max(len(r) for r in row_lists)
    out = [f"{pc.n} {pc.m}", f"{max_c} {max_r}",
           " ".join(str(len(c)) for c in col_lists),
           " ".join(str(len(r)) for r in row_lists)]
    out += [" ".join(map(str, list(c) + [0] * (max_c - len(c)))) for c in col_lists]
    out += [" ".join(map(str, list(r) + [0] * (max_r - len(r)))) for r in row_lists]
    return "\n".join(out) + "\n"


def load_bundled() -> ParityCheck:
    """The shipped rate-3/4, length-2304 code."""
    text = resources.files("phnturbo").joinpath("data").joinpath(BUNDLED_ALIST).read_text()
    return load_alist(text)


def read_alist(path) -> ParityCheck:
    with open(path) as fh:
        return load_alist(fh.read())


# --- decoding -----------------------------------------------------------------

_PHI_MIN = 1e-12
_PHI_MAX = 60.0


def _phi(x):
    """-log(tanh(x/2)), an involution on (0, inf)."""
    x = np.clip(x, _PHI_MIN, _PHI_MAX)
    return -np.log(np.tanh(0.5 * x))


@dataclass
class DecodeResult:
    posterior_llr: np.ndarray
    hard_bits: np.ndarray
    converged: bool
    iters_used: int
    extrinsic: np.ndarray   # posterior minus channel input


def decode_bp(llr, pc: ParityCheck, max_iter: int = 18) -> DecodeResult:
    """Log-domain sum-product decoding with early stop on a satisfied syndrome.

    A bit whose posterior LLR is exactly zero counts as undecided, so the
    all-zero input never reports convergence.
    """
    llr = np.asarray(llr, dtype=float)
    if llr.shape != (pc.n,):
        raise ValueError(f"expected {pc.n} LLRs, got {llr.shape}")
    if not np.all(np.isfinite(llr)):
        raise ValueError("LLRs must be finite")
    ev, ptr = pc.edge_var, pc.chk_ptr
    c2v = np.zeros(ev.size)
    post = llr.copy()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v2c = post[ev] - c2v
        mag = _phi(np.abs(v2c))
        neg = (v2c < 0).astype(np.int64)
        tot = np.add.reduceat(mag, ptr)
        nneg = np.add.reduceat(neg, ptr)
        chk = pc.edge_chk
        sign = 1.0 - 2.0 * ((nneg[chk] - neg) % 2)
        c2v = sign * _phi(tot[chk] - mag)
        post = llr + np.bincount(ev, weights=c2v, minlength=pc.n)
        if np.all(post != 0) and not np.any(pc.syndrome(post)):
            converged = True
            break
    return DecodeResult(post, np.where(post > 0, 1.0, -1.0), converged, it, post - llr)


# --- interleaving -------------------------------------------------------------

@dataclass(frozen=True)
class Permutation:
    perm: np.ndarray
    seed: int | None = None

    @classmethod
    def random(cls, n: int, seed: int):
        return cls(np.random.default_rng(seed).permutation(n), seed)

    @classmethod
    def identity(cls, n: int):
        return cls(np.arange(n), None)

    @property
    def n(self) -> int:
        return self.perm.size

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv


def interleave(x, perm: Permutation) -> np.ndarray:
    """``y[i] = x[perm[i]]``."""
    x = np.asarray(x)
    if x.shape[0] != perm.n:
        raise ValueError(f"length {x.shape[0]} != permutation length {perm.n}")
    return x[perm.perm]


def deinterleave(y, perm: Permutation) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[0] != perm.n:
        raise ValueError(f"length {y.shape[0]} != permutation length {perm.n}")
    x = np.empty_like(y)
    x[perm.perm] = y
    return x
