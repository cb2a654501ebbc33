//! Candidate decompositions: the skill grammar, a deterministic mock proposer and a remote
//! chat-completion client.

pub mod grammar;
pub mod mock;
pub mod remote;

use serde::{Deserialize, Serialize};

use crate::model::{DataError, Decomposition};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Mock,
    Remote { model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalBatch {
    pub candidates: Vec<Decomposition>,
    pub provenance: Provenance,
    /// Raw model replies, remote mode only.
    #[serde(default)]
    pub transcripts: Vec<String>,
    /// Index of the ground-truth candidate when the mock planted it.
    #[serde(default)]
    pub truth_index: Option<usize>,
}

impl ProposalBatch {
    /// Rejects batches with any grammar-invalid candidate.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.candidates.is_empty() {
            return Err(DataError::Decomposition("empty proposal batch".into()));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        Ok(())
    }

    /// Indices of candidates equal to an earlier candidate.
    pub fn duplicates(&self) -> Vec<usize> {
        (0..self.candidates.len())
            .filter(|&i| self.candidates[..i].contains(&self.candidates[i]))
            .collect()
    }

    pub fn contains(&self, d: &Decomposition) -> bool {
        self.candidates.contains(d)
    }
}
