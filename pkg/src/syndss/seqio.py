"""Codon alignments: parsing, validation, encoding and the genetic code.

Codon states are stored as integer indices into the sense-codon list of the
alignment's genetic code.  Any triplet containing a character other than
A, C, G or T (gaps, N, IUPAC ambiguity codes) is stored as ``MISSING``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

NUCLEOTIDES = "TCAG"
TRIPLETS = tuple("".join(c) for c in itertools.product(NUCLEOTIDES, repeat=3))
STOP = "*"
MISSING = -1

_STANDARD_AA = "FFLLSSSSYY**CC*WLLLLPPPPHHQQRRRRIIIMTTTTNNKKSSRRVVVVAAAADDEEGGGG"


class AlignmentError(ValueError):
    """Base class for malformed alignment input."""


class RaggedAlignment(AlignmentError):
    pass


class NotCodonAligned(AlignmentError):
    pass


class InternalStop(AlignmentError):
    def __init__(self, taxon, codon_index, triplet):
        self.taxon = taxon
        self.codon_index = codon_index
        super().__init__(
            f"stop codon {triplet} in {taxon!r} at codon {codon_index + 1} "
            f"(nucleotide {3 * codon_index + 1})"
        )


class DuplicateTaxon(AlignmentError):
    pass


class FewerThanFourTaxa(AlignmentError):
    pass


class OutOfRange(IndexError):
    pass


@dataclass(frozen=True, eq=False)
class GeneticCode:
    """Mapping of the 64 nucleotide triplets to one-letter amino acids.

    Stop triplets map to ``"*"``.  ``sense_codons`` lists the non-stop
    triplets in TCAG order; that order defines the codon state indices used
    everywhere else in the package.
    """

    table: dict
    name: str = "standard"
    sense_codons: tuple = field(init=False, repr=False, compare=False)
    amino_acids: np.ndarray = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if set(self.table) != set(TRIPLETS):
            raise ValueError("genetic code must assign all 64 triplets exactly once")
        sense = tuple(t for t in TRIPLETS if self.table[t] != STOP)
        object.__setattr__(self, "sense_codons", sense)
        object.__setattr__(self, "amino_acids", np.array([self.table[c] for c in sense]))
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(sense)})

    def __eq__(self, other):
        if not isinstance(other, GeneticCode):
            return NotImplemented
        return self.table == other.table

    def __hash__(self):
        return hash(tuple(self.table[t] for t in TRIPLETS))

    @classmethod
    def standard(cls) -> GeneticCode:
        return _STANDARD

    @classmethod
    def from_table(cls, text: str, name: str = "custom") -> GeneticCode:
        """Load a code from 64 lines of ``TRIPLET AMINO_ACID`` (stop as ``*``)."""
        table = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            triplet, aa = line.split()[:2]
            triplet = triplet.upper().replace("U", "T")
            if triplet in table:
                raise ValueError(f"triplet {triplet} listed twice")
            table[triplet] = aa.upper()
        if len(table) != 64:
            raise ValueError(f"expected 64 triplets, got {len(table)}")
        return cls(table, name)

    @property
    def n_sense(self) -> int:
        return len(self.sense_codons)

    @property
    def stop_codons(self) -> tuple:
        return tuple(t for t in TRIPLETS if self.table[t] == STOP)

    def index(self, triplet: str) -> int:
        """Sense-codon index of ``triplet``; raises KeyError for stops."""
        return self._index[triplet]

    def is_stop(self, triplet: str) -> bool:
        return self.table.get(triplet) == STOP


_STANDARD = GeneticCode(dict(zip(TRIPLETS, _STANDARD_AA)), "standard")


@dataclass(frozen=True, eq=False)
class CodonAlignment:
    """Taxa x codon-site matrix of sense-codon indices (``MISSING`` = -1)."""

    names: tuple
    codons: np.ndarray
    code: GeneticCode = _STANDARD

    def __post_init__(self):
        codons = np.array(self.codons, dtype=np.int16)
        if codons.ndim != 2 or codons.shape[0] != len(self.names):
            raise ValueError("codons must be an n_taxa x n_codons matrix")
        codons.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "codons", codons)

    @property
    def n_taxa(self) -> int:
        return self.codons.shape[0]

    @property
    def n_codons(self) -> int:
        return self.codons.shape[1]

    @property
    def source_length(self) -> int:
        return 3 * self.n_codons

    def __len__(self):
        return self.n_codons

    def __eq__(self, other):
        if not isinstance(other, CodonAlignment):
            return NotImplemented
        return (
            self.names == other.names
            and self.code == other.code
            and np.array_equal(self.codons, other.codons)
        )

    def sequence(self, taxon) -> str:
        """Nucleotide string for a taxon (by name or row index)."""
        row = self.names.index(taxon) if isinstance(taxon, str) else taxon
        sense = self.code.sense_codons
        return "".join("---" if c == MISSING else sense[c] for c in self.codons[row])

    def require_tree_size(self):
        if self.n_taxa < 4:
            raise FewerThanFourTaxa(f"need at least 4 taxa, got {self.n_taxa}")


def encode_sequences(
    names, sequences, code: GeneticCode | None = None, min_taxa: int = 1
) -> CodonAlignment:
    """Validate nucleotide strings and encode them as a codon alignment.

    A stop codon in the final column is tolerated and stored as MISSING;
    anywhere else it raises :class:`InternalStop`.
    """
    code = code or _STANDARD
    names = list(names)
    seen = set()
    for name in names:
        if name in seen:
            raise DuplicateTaxon(f"taxon {name!r} appears more than once")
        seen.add(name)
    if len(names) < min_taxa:
        raise FewerThanFourTaxa(f"need at least {min_taxa} taxa, got {len(names)}")
    seqs = [s.upper().replace("U", "T") for s in sequences]
    lengths = {len(s) for s in seqs}
    if len(lengths) > 1:
        raise RaggedAlignment(
            "sequences differ in length: "
            + ", ".join(f"{n}={len(s)}" for n, s in zip(names, seqs))
        )
    length = lengths.pop() if lengths else 0
    if length % 3:
        raise NotCodonAligned(f"alignment length {length} is not a multiple of 3")
    n_codons = length // 3
    codons = np.full((len(seqs), n_codons), MISSING, dtype=np.int16)
    for row, (name, seq) in enumerate(zip(names, seqs)):
        for j in range(n_codons):
            triplet = seq[3 * j : 3 * j + 3]
            if code.is_stop(triplet):
                if j == n_codons - 1:
                    continue
                raise InternalStop(name, j, triplet)
            idx = code._index.get(triplet)
            if idx is not None:
                codons[row, j] = idx
    return CodonAlignment(tuple(names), codons, code)


def _read_fasta(text):
    names, seqs = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            names.append(line[1:].strip().split()[0] if line[1:].strip() else "")
            seqs.append([])
        else:
            if not names:
                raise AlignmentError(f"line {lineno}: sequence data before first '>' header")
            seqs[-1].append("".join(line.split()))
    return names, ["".join(s) for s in seqs]


def _read_phylip(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise AlignmentError("empty PHYLIP input")
    try:
        n, length = (int(x) for x in lines[0].split()[:2])
    except ValueError:
        raise AlignmentError("line 1: PHYLIP header must be '<ntaxa> <length>'") from None
    names, seqs = [], []
    it = iter(enumerate(lines[1:], 2))
    for _ in range(n):
        try:
            lineno, line = next(it)
        except StopIteration:
            raise AlignmentError(f"PHYLIP header declares {n} taxa, found {len(names)}") from None
        parts = line.split(None, 1)
        name, seq = parts[0], "".join(parts[1].split()) if len(parts) > 1 else ""
        while len(seq) < length:
            try:
                lineno, more = next(it)
            except StopIteration:
                break
            seq += "".join(more.split())
        if len(seq) != length:
            raise RaggedAlignment(
                f"line {lineno}: taxon {name!r} has {len(seq)} characters, header says {length}"
            )
        names.append(name)
        seqs.append(seq)
    return names, seqs


def parse_alignment(
    text: str, format: str = "fasta", code: GeneticCode | None = None, min_taxa: int = 1
) -> CodonAlignment:
    """Parse FASTA or sequential PHYLIP text into a validated codon alignment.

    Parameters
    ----------
    text : str
        File contents.
    format : {"fasta", "phylip"}
    code : GeneticCode, optional
        Defaults to the standard code.
    min_taxa : int
        Raise :class:`FewerThanFourTaxa` below this many sequences.  Tree
        based analyses pass 4.
    """
    if format == "fasta":
        names, seqs = _read_fasta(text)
    elif format == "phylip":
        names, seqs = _read_phylip(text)
    else:
        raise ValueError(f"unknown alignment format {format!r}")
    return encode_sequences(names, seqs, code, min_taxa=min_taxa)


def read_alignment(path, format: str | None = None, **kwargs) -> CodonAlignment:
    """Read an alignment file; format guessed from the first character if not given."""
    with open(path) as fh:
        text = fh.read()
    if format is None:
        format = "fasta" if text.lstrip().startswith(">") else "phylip"
    return parse_alignment(text, format, **kwargs)


def to_fasta(aln: CodonAlignment, width: int = 60) -> str:
    out = []
    for i, name in enumerate(aln.names):
        out.append(f">{name}")
        seq = aln.sequence(i)
        out.extend(seq[k : k + width] for k in range(0, len(seq), width))
    return "\n".join(out) + "\n"


def to_phylip(aln: CodonAlignment) -> str:
    out = [f"{aln.n_taxa} {aln.source_length}"]
    out += [f"{name} {aln.sequence(i)}" for i, name in enumerate(aln.names)]
    return "\n".join(out) + "\n"


def slice_codons(aln: CodonAlignment, start: int, end: int) -> CodonAlignment:
    """Columns ``[start, end)`` of ``aln`` (codon indices)."""
    if not 0 <= start < end <= aln.n_codons:
        raise OutOfRange(f"codon slice [{start}, {end}) outside [0, {aln.n_codons})")
    return CodonAlignment(aln.names, aln.codons[:, start:end], aln.code)


def variable_sites(aln: CodonAlignment) -> list:
    """Indices of codon columns with at least two distinct observed codons."""
    c = aln.codons.astype(np.int32)
    observed = c != MISSING
    big = np.iinfo(np.int32).max
    hi = np.where(observed, c, -1).max(axis=0)
    lo = np.where(observed, c, big).min(axis=0)
    return [int(j) for j in np.flatnonzero(observed.any(axis=0) & (hi != lo))]
