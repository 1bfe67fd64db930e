"""mmforge: tag-guided multimodal instruction data synthesis and curation.

A batch pipeline that unifies heterogeneous instruction sources into one
record schema, learns which instruction types suit which images via
TF-IDF over tag co-occurrences, synthesizes new instructions through
external VLM endpoints with relevance and quality gates, deduplicates
exactly and perceptually, loss-filters, and emits stage-partitioned
training manifests.
"""

from .corpus import (DataCategory, ImageRef, InstructionRecord, Provenance,
                     SourceSpec, SubType, Turn, corpus_stats, ingest,
                     normalize_record)
from .dedup import (LossScore, PHash, dedup_exact, hamming,
                    loss_percentile_filter, near_dup_filter, phash64)
from .gateway import (ChatRequest, EndpointConfig, Gateway, RetryPolicy,
                      parse_score_1_10)
from .mapping import (CountTable, MappingTable, SeedExample,
                      compute_tfidf, count_cooccurrence, load_mapping,
                      save_mapping, select_instruction_types)
from .synthesis import (CandidateQuestion, Style, SynthQA, SynthesisConfig,
                        assemble_multiturn, pick_fewshot, prioritized_select,
                        run_synthesis)
from .taxonomy import (InstructionTag, Taxonomy, first_level_of,
                       load_taxonomy, resolve_tag)

__version__ = "0.1.0"

__all__ = [
    "CandidateQuestion", "ChatRequest", "CountTable", "DataCategory",
    "EndpointConfig", "Gateway", "ImageRef", "InstructionRecord",
    "InstructionTag", "LossScore", "MappingTable", "PHash", "Provenance",
    "RetryPolicy", "SeedExample", "SourceSpec", "Style", "SubType", "SynthQA",
    "SynthesisConfig", "Taxonomy", "Turn", "assemble_multiturn",
    "compute_tfidf", "corpus_stats", "count_cooccurrence", "dedup_exact",
    "first_level_of", "hamming", "ingest", "load_mapping", "load_taxonomy",
    "loss_percentile_filter", "near_dup_filter", "normalize_record",
    "parse_score_1_10", "phash64", "pick_fewshot", "prioritized_select",
    "resolve_tag", "run_synthesis", "save_mapping",
    "select_instruction_types",
]
