"""Three-level instruction tag taxonomy: loading, validation, and lookup.

The taxonomy is a static asset (``assets/taxonomy/instruction_tags.txt``)
with a fixed set of six level-1 categories, task families at level 2, and
sub-task leaves at level 3. A ``Taxonomy`` is immutable after load and safe
to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

LEVEL1_CATEGORIES = (
    "Coarse Perception",
    "Fine-grained Perception (single-instance)",
    "Fine-grained Perception (cross-instance)",
    "Relation Reasoning",
    "Attribute Reasoning",
    "Logic Reasoning",
)

#: Level-3 name that marks a task family acting as its own sub-task.
DIRECT_LEAF = "direct"

PATH_SEP = "/"


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy assets or unresolvable tag paths."""


@dataclass(frozen=True)
class InstructionTag:
    """One leaf of the taxonomy: category / task family / sub-task."""

    level1: str
    level2: str
    level3: str

    def __post_init__(self):
        if self.level1 not in LEVEL1_CATEGORIES:
            raise TaxonomyError(f"unknown level-1 category: {self.level1!r}")
        if not self.level2 or not self.level3:
            raise TaxonomyError("level2 and level3 must be non-empty")

    @property
    def path(self) -> str:
        return PATH_SEP.join((self.level1, self.level2, self.level3))


@dataclass(frozen=True)
class Taxonomy:
    """Validated tag tree. Ordering follows the asset file."""

    roots: tuple[str, ...]
    leaves: tuple[InstructionTag, ...]
    header_leaf_count: int | None = None
    _by_path: dict[str, InstructionTag] = field(repr=False, default_factory=dict)

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def resolve(self, path: str) -> InstructionTag:
        """Exact, case-sensitive lookup of a full tag path."""
        try:
            return self._by_path[path]
        except KeyError:
            raise TaxonomyError(f"unknown tag path: {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._by_path

    def families(self, level1: str) -> list[str]:
        """Task-family names under one category, in asset order."""
        seen = []
        for leaf in self.leaves:
            if leaf.level1 == level1 and leaf.level2 not in seen:
                seen.append(leaf.level2)
        return seen

    def leaves_under(self, level1: str) -> list[InstructionTag]:
        return [leaf for leaf in self.leaves if leaf.level1 == level1]


def _build(roots: Iterable[str], leaves: Iterable[InstructionTag],
           header_leaf_count: int | None) -> Taxonomy:
    roots = tuple(roots)
    leaves = tuple(leaves)
    by_path: dict[str, InstructionTag] = {}
    for leaf in leaves:
        if leaf.path in by_path:
            raise TaxonomyError(f"duplicate tag path: {leaf.path!r}")
        by_path[leaf.path] = leaf
    if len(roots) != len(set(roots)):
        raise TaxonomyError("duplicate level-1 category")
    return Taxonomy(roots=roots, leaves=leaves,
                    header_leaf_count=header_leaf_count, _by_path=by_path)


def parse_taxonomy(text: str) -> Taxonomy:
    """Parse taxonomy source text (the documented indented format).

    Grammar: level 1 has no indent, level 2 two spaces, level 3 four
    spaces. ``#`` comments and blank lines are skipped. A header comment
    ``# leaf-count: N`` records the asserted leaf count of the asset.
    """
    roots: list[str] = []
    leaves: list[InstructionTag] = []
    header_leaf_count: int | None = None
    cur1: str | None = None
    cur2: str | None = None
    sibling2: set[str] = set()
    sibling3: set[str] = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if body.lower().startswith("leaf-count:"):
                header_leaf_count = int(body.split(":", 1)[1].strip().split()[0])
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent == 0:
            if stripped not in LEVEL1_CATEGORIES:
                raise TaxonomyError(
                    f"line {lineno}: unknown level-1 category {stripped!r}")
            cur1, cur2 = stripped, None
            roots.append(stripped)
            sibling2 = set()
        elif indent == 2:
            if cur1 is None:
                raise TaxonomyError(f"line {lineno}: task family before any category")
            if stripped in sibling2:
                raise TaxonomyError(
                    f"line {lineno}: duplicate task family {stripped!r} under {cur1!r}")
            sibling2.add(stripped)
            cur2 = stripped
            sibling3 = set()
        elif indent == 4:
            if cur1 is None or cur2 is None:
                raise TaxonomyError(f"line {lineno}: sub-task outside a task family")
            if stripped in sibling3:
                raise TaxonomyError(
                    f"line {lineno}: duplicate sub-task {stripped!r} under "
                    f"{cur1!r}/{cur2!r}")
            sibling3.add(stripped)
            leaves.append(InstructionTag(cur1, cur2, stripped))
        else:
            raise TaxonomyError(f"line {lineno}: bad indentation ({indent} spaces)")

    if not leaves:
        raise TaxonomyError("malformed taxonomy: no tags found")
    taxonomy = _build(roots, leaves, header_leaf_count)
    if header_leaf_count is not None and header_leaf_count != taxonomy.leaf_count:
        raise TaxonomyError(
            f"asset header declares {header_leaf_count} leaves, "
            f"file contains {taxonomy.leaf_count}")
    return taxonomy


def load_taxonomy(path: str | Path | None = None) -> Taxonomy:
    """Load and validate a taxonomy asset; ``None`` loads the bundled one."""
    if path is None:
        ref = resources.files("mmforge").joinpath("assets/taxonomy/instruction_tags.txt")
        text = ref.read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_taxonomy(text)


def serialize_taxonomy(taxonomy: Taxonomy) -> str:
    """Render a Taxonomy back to the asset text format (load round-trips)."""
    out: list[str] = []
    if taxonomy.header_leaf_count is not None:
        out.append(f"# leaf-count: {taxonomy.header_leaf_count}")
    cur1 = cur2 = None
    for leaf in taxonomy.leaves:
        if leaf.level1 != cur1:
            out.append(leaf.level1)
            cur1, cur2 = leaf.level1, None
        if leaf.level2 != cur2:
            out.append(f"  {leaf.level2}")
            cur2 = leaf.level2
        out.append(f"    {leaf.level3}")
    return "\n".join(out) + "\n"


def resolve_tag(taxonomy: Taxonomy, path: str) -> InstructionTag:
    """Exact-match lookup; raises TaxonomyError on an unknown path."""
    return taxonomy.resolve(path)


def first_level_of(tag: InstructionTag) -> str:
    """Category name of a tag (its level-1 component)."""
    return tag.level1
