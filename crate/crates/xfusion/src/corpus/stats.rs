//! Caption keyword histogram.

use std::collections::BTreeMap;

use super::CaptionedSample;

/// Fixed lexicon of defect-attribute keywords counted by [`attribute_stats`].
/// Covers the caption templates plus common defect words so externally
/// authored captions (e.g. "cable with black hole") also histogram sensibly.
pub const KEYWORD_LEXICON: &[&str] = &[
    "normal", "dark", "blob", "bright", "stripe", "thin", "scratch", "missing", "part", "wrong",
    "count", "hole", "black",
];

/// Count keyword occurrences over all captions. Tokens are lowercased,
/// whitespace-split words; only lexicon words are counted, and absent
/// keywords are omitted from the map.
pub fn attribute_stats(samples: &[CaptionedSample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for sample in samples {
        for token in sample.caption.to_lowercase().split_whitespace() {
            if KEYWORD_LEXICON.contains(&token) {
                *counts.entry(token.to_string()).or_insert(0) += 1;
            }
        }
    }
    counts
}
