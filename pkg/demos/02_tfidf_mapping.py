"""From seed examples to instruction-type selection.

Seed data pairs image tags (from the tagging service) with the instruction
tag a human-quality QA exercised. Counting tag co-occurrence per
instruction type and weighting with TF-IDF tells us, for a *new* image,
which instruction types its content supports.
"""

from mmforge import (SeedExample, compute_tfidf, count_cooccurrence,
                     load_taxonomy, select_instruction_types)
from mmforge.corpus import ImageRef

taxonomy = load_taxonomy()

WEATHER = "Coarse Perception/Image Scene/Identify weather condition"
CHARTS = "Logic Reasoning/Structuralized Image-Text Understanding/Parse charts"
COUNTING = "Fine-grained Perception (single-instance)/Object Localization/Count objects"


def seed(n, tags, unit, question, answer):
    image = ImageRef(image_id=f"{n:032x}", uri=f"images/{n}.png",
                     width=64, height=64, format="PNG")
    return SeedExample(image=image, image_tags=frozenset(tags),
                       question=question, answer=answer,
                       instruction_tag=taxonomy.resolve(unit))


seeds = [
    seed(0, {"sky", "cloud", "beach"}, WEATHER,
         "Is it going to rain?", "Yes, the clouds are dark."),
    seed(1, {"sky", "mountain"}, WEATHER,
         "What season does this look like?", "Late autumn."),
    seed(2, {"chart", "axis", "legend"}, CHARTS,
         "Which series grows fastest?", "The dashed one."),
    seed(3, {"chart", "table"}, CHARTS,
         "What is the total of the last column?", "Forty-two."),
    seed(4, {"dog", "ball", "grass"}, COUNTING,
         "How many dogs are playing?", "Three."),
]

# counting uses set semantics per example: a tag listed twice counts once
counts = count_cooccurrence(seeds)
print(f"units with data: {counts.units}")
for unit, tags in counts.counts.items():
    print(f"  {unit.level3}: {dict(sorted(tags.items()))}")
print()

# tf = count / unit_total; idf = ln((1+U)/(1+df)) + 1; w = tf * idf
mapping = compute_tfidf(counts)
weather = taxonomy.resolve(WEATHER)
print(f"w(sky, weather)   = {mapping.weight('sky', weather):.6f}")
print(f"w(cloud, weather) = {mapping.weight('cloud', weather):.6f}")
print(f"w(chart, weather) = {mapping.weight('chart', weather):.6f}  (never seen)")
print()

# a new image arrives; the tagging service says it shows a chart and a table
for tags in ({"chart", "table"}, {"sky", "beach"}, {"zebra"}):
    ranked = select_instruction_types(tags, mapping, k=2)
    print(f"image tags {sorted(tags)} ->")
    if not ranked:
        print("   no match; synthesis falls back to a uniform category draw")
    for unit, score in ranked:
        print(f"   {score:.4f}  {unit.path}")
