//! Corpus data model: videos with frame features, captions, vocabulary.

pub mod files;
pub mod synth;

use std::collections::BTreeMap;

use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default truncation length for caption interiors.
pub const DEFAULT_MAX_CAPTION_LEN: usize = 26;

/// One video: an identifier plus an L x (d_a + d_m) frame-feature matrix.
/// The first `d_a` columns are the appearance half, the last `d_m` the
/// motion half.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: Tensor,
    pub d_appearance: usize,
    pub d_motion: usize,
}

impl Video {
    pub fn new(id: String, features: Tensor, d_appearance: usize, d_motion: usize) -> Result<Video> {
        if features.rows() < 1 {
            return Err(Error::Config(format!("video '{id}' has no frames")));
        }
        if features.cols() != d_appearance + d_motion {
            return Err(Error::Dimension(format!(
                "video '{}' features are {} wide, expected d_a + d_m = {}",
                id,
                features.cols(),
                d_appearance + d_motion
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numeric(format!("video '{id}' has non-finite features")));
        }
        Ok(Video { id, features, d_appearance, d_motion })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// A tokenized caption bound to a video: `[bos, w1, ..., wT, eos]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub video_id: String,
    pub token_ids: Vec<u32>,
}

impl Caption {
    pub fn new(video_id: String, token_ids: Vec<u32>) -> Result<Caption> {
        if token_ids.first() != Some(&BOS_ID) || token_ids.last() != Some(&EOS_ID) {
            return Err(Error::Contract(
                "caption must start with bos and end with eos".to_string(),
            ));
        }
        let interior = &token_ids[1..token_ids.len() - 1];
        if interior.iter().any(|&t| t == PAD_ID || t == BOS_ID || t == EOS_ID) {
            return Err(Error::Contract(
                "caption interior may not contain pad/bos/eos".to_string(),
            ));
        }
        Ok(Caption { video_id, token_ids })
    }

    /// Tokens between bos and eos.
    pub fn interior(&self) -> &[u32] {
        &self.token_ids[1..self.token_ids.len() - 1]
    }
}

/// Token <-> id maps with the four reserved ids 0..3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Reserved-only vocabulary.
    pub fn empty() -> Vocabulary {
        let mut v = Vocabulary { id_to_token: Vec::new(), token_to_id: BTreeMap::new() };
        for tok in [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            let id = v.id_to_token.len() as u32;
            v.id_to_token.push(tok.to_string());
            v.token_to_id.insert(tok.to_string(), id);
        }
        v
    }

    /// Rebuild from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let expected = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if tokens.len() < 4 || tokens[..4] != expected.map(String::from) {
            return Err(Error::Parse("vocabulary must start with the reserved tokens".into()));
        }
        let mut token_to_id = BTreeMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token '{tok}'")));
            }
        }
        Ok(Vocabulary { id_to_token: tokens, token_to_id })
    }

    fn push(&mut self, token: &str) {
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Map token strings (including bos/eos markers) to ids; unknown
    /// content words become unk.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Interior token ids back to a space-joined sentence.
    pub fn decode_to_text(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }
}

/// Lower-case, strip punctuation (Unicode category P*), split on
/// whitespace, truncate to `max_len` words, and wrap in bos/eos.
/// Digits are kept.
pub fn tokenize_caption(raw: &str, max_len: usize) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .filter(|c| c.general_category_group() != GeneralCategoryGroup::Punctuation)
        .collect();
    let mut tokens = vec![BOS_TOKEN.to_string()];
    tokens.extend(
        cleaned
            .split_whitespace()
            .take(max_len)
            .map(|w| w.to_lowercase()),
    );
    tokens.push(EOS_TOKEN.to_string());
    tokens
}

/// Keep tokens occurring strictly more than `min_occurrences` times across
/// the tokenized captions; everything else maps to unk. Word order in the
/// vocabulary is by descending count, then alphabetical, so builds are
/// deterministic.
pub fn build_vocabulary<S: AsRef<str>>(captions: &[Vec<S>], min_occurrences: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for caption in captions {
        for token in caption {
            let t = token.as_ref();
            if t == BOS_TOKEN || t == EOS_TOKEN || t == PAD_TOKEN || t == UNK_TOKEN {
                continue;
            }
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n > min_occurrences)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut vocab = Vocabulary::empty();
    for (token, _) in kept {
        vocab.push(token);
    }
    vocab
}

/// A loaded corpus: videos plus raw caption lines.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub videos: Vec<Video>,
    /// (video_id, raw caption text) pairs, possibly several per video.
    pub captions: Vec<(String, String)>,
}

impl Corpus {
    pub fn video_by_id(&self, id: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Raw captions grouped per video id, in corpus order.
    pub fn captions_for(&self, id: &str) -> Vec<&str> {
        self.captions
            .iter()
            .filter(|(vid, _)| vid == id)
            .map(|(_, text)| text.as_str())
            .collect()
    }

    /// Shared appearance/motion dims, validated across all videos.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let first = self
            .videos
            .first()
            .ok_or_else(|| Error::Config("corpus has no videos".to_string()))?;
        let dims = (first.d_appearance, first.d_motion);
        for v in &self.videos {
            if (v.d_appearance, v.d_motion) != dims {
                return Err(Error::Config(format!(
                    "video '{}' has dims ({}, {}), corpus uses ({}, {})",
                    v.id, v.d_appearance, v.d_motion, dims.0, dims.1
                )));
            }
        }
        Ok(dims)
    }
}
