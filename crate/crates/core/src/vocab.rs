//! Fixed word-level vocabulary, frozen at build time. Tokenization is
//! whitespace splitting over lowercase text; unknown words map to ⟨unk⟩.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Grammar terminals + instruction template words + specials.
pub const WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "<unk>",
    // template
    "you", "need", "to", "perform", "referring", "expression", "segmentation",
    "reasoning", "video", "object", "on", "the", "image", "according", "text",
    "prompt", ":",
    // colors
    "red", "green", "blue", "yellow", "magenta", "cyan",
    // shapes, singular and plural
    "circle", "square", "triangle", "circles", "squares", "triangles",
    // reasoning predicates
    "largest", "smallest", "leftmost", "rightmost", "topmost", "lowest",
    "moving", "left", "right", "up", "down", "fastest", "slowest",
    // connectives
    "objects", "and", "that", "is", "a", "in", "frame", "target",
];

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn token_id(word: &str) -> u32 {
    WORDS.iter().position(|&w| w == word).map(|i| i as u32).unwrap_or(UNK)
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.split_whitespace().map(|w| token_id(&w.to_lowercase())).collect()
}

pub fn detokenize(ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| WORDS.get(i as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
