//! Synthetic dataset plumbing: asset records, seeded manifest enumeration
//! and the `.poseq` scene document.

mod manifest;
mod poseq;

pub use manifest::{
    count_compositions, default_assets, enumerate_manifest, ClipRecord, CompositionEntity, CompositionRecord, Manifest,
    ManifestCounts, DEFAULT_LOCATIONS, MANIFEST_EXTENSION, MANIFEST_FORMAT_VERSION,
};
pub use poseq::{parse_pose_sequence, serialize_pose_sequence, POSEQ_EXTENSION, POSEQ_FORMAT_VERSION};

pub(crate) use poseq::json_error;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::EntityKind;

/// Longest entity description, in tokens.
pub const MAX_PROMPT_TOKENS: usize = 20;

/// Lower-cased alphanumeric words of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// An animated asset and the text that describes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: String,
    pub kind: EntityKind,
    pub prompt_text: String,
    pub scale_factor: f64,
}

impl AssetRecord {
    /// Scale follows from `kind`.
    pub fn new(asset_id: impl Into<String>, kind: EntityKind, prompt_text: impl Into<String>) -> Result<Self> {
        let rec = Self {
            asset_id: asset_id.into(),
            kind,
            prompt_text: prompt_text.into(),
            scale_factor: kind.scale_factor(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let what = || format!("asset {}", self.asset_id);
        if self.asset_id.is_empty() {
            return Err(Error::validation("asset_id", "must not be empty"));
        }
        let n = tokenize(&self.prompt_text).len();
        if n == 0 || n > MAX_PROMPT_TOKENS {
            return Err(Error::validation(
                what(),
                format!("prompt has {n} tokens, need 1..={MAX_PROMPT_TOKENS}"),
            ));
        }
        if self.scale_factor != self.kind.scale_factor() {
            return Err(Error::validation(
                what(),
                format!("scale {} does not match kind {:?}", self.scale_factor, self.kind),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens() {
        assert_eq!(
            tokenize("A man, in a RED coat."),
            ["a", "man", "in", "a", "red", "coat"]
        );
        assert!(tokenize("  ").is_empty());
    }

    #[test]
    fn asset_limits() {
        let ok = AssetRecord::new("a", EntityKind::Animal, "a zebra").unwrap();
        assert_eq!(ok.scale_factor, 0.6);
        let long = vec!["word"; 21].join(" ");
        assert!(AssetRecord::new("b", EntityKind::Human, long).is_err());
        let mut bad = ok.clone();
        bad.scale_factor = 1.0;
        assert!(bad.validate().is_err());
    }
}
