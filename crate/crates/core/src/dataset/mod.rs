//! Sample types, alignment targets, tokenization, parsing and file formats.

mod alignment;
mod io;
mod parse;
mod stats;
mod types;
mod vocab;

pub use alignment::{
    build_gt_alignment, build_phrase_masks, masks_to_ranges, soft_targets, spans_to_masks, GTAlignment, PhraseMaskSet,
};
pub use io::{
    canonical_json, parse_record, read_jsonl, read_samples, read_scenes, write_jsonl, Dataset, Split, SAMPLES_FILE,
    SCENES_FILE, SPLITS_FILE,
};
pub use parse::{parse_phrases, parse_target_phrase, DETERMINERS};
pub use stats::{dataset_stats, DatasetStats};
pub use types::{validate_spans, GroundingSample, PhraseSpan, Tags, L_MAX, M_MAX};
pub use vocab::{tokenize, Vocabulary, CLS, PAD, UNK};
