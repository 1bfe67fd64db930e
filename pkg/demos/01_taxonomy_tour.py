"""A tour of the three-level instruction tag taxonomy.

The taxonomy steers synthesis: every generated question is asked *as* one
of these sub-tasks. This script loads the bundled asset, walks the tree,
and shows exact-path resolution.
"""

from mmforge import first_level_of, load_taxonomy, resolve_tag
from mmforge.taxonomy import TaxonomyError

taxonomy = load_taxonomy()

print(f"categories: {len(taxonomy.roots)}")
print(f"sub-tasks:  {taxonomy.leaf_count} "
      f"(asset header records {taxonomy.header_leaf_count})")
print()

# the six top-level categories, in asset order
for category in taxonomy.roots:
    families = taxonomy.families(category)
    leaves = taxonomy.leaves_under(category)
    print(f"{category}: {len(families)} task families, {len(leaves)} sub-tasks")
    for family in families[:2]:
        example = next(l for l in leaves if l.level2 == family)
        print(f"   e.g. {family} -> {example.level3!r}")
print()

# resolution is exact and case-sensitive; paths are the canonical handle
tag = resolve_tag(taxonomy,
                  "Coarse Perception/Image Scene/Identify weather condition")
print(f"resolved: {tag.path}")
print(f"  level1 = {first_level_of(tag)}")
print(f"  level2 = {tag.level2}")
print(f"  level3 = {tag.level3}")

# some task families are their own sub-task, marked by the literal "direct"
direct = resolve_tag(
    taxonomy, "Fine-grained Perception (single-instance)/Detect presence/direct")
print(f"direct leaf: {direct.path}")

# anything else is rejected, never fuzzy-matched
try:
    resolve_tag(taxonomy, "coarse perception/image scene/identify weather condition")
except TaxonomyError as exc:
    print(f"lookup is case-sensitive: {exc}")
