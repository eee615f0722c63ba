//! Privacy-preserving cross-source deduplication.
//!
//! Sources never exchange raw identifiers. Each one canonicalizes its
//! primary keys, hashes them with SHA-256, and ships only the hex digests
//! to the coordinator. [`match_and_assign`] then picks, for every digest
//! seen in more sources than the configured quota, which sources keep the
//! record; everyone else is told to drop their copy. Within a single
//! source repeated digests always collapse to their first occurrence.
//!
//! The assignment is deterministic given the seed: digests are processed
//! in lexicographic order and keeper choices come from a single seeded
//! stream.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::model::SourceData;
use crate::Result;

/// Field separator for multi-field keys: ASCII unit separator.
pub const KEY_SEPARATOR: char = '\u{1f}';

/// One source's hashed identifiers, in row order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedKeyList {
    pub source_id: usize,
    pub digests: Vec<String>,
}

/// Rows a source must drop, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionList {
    pub source_id: usize,
    pub rows: Vec<usize>,
}

/// Wire envelope for the dedup exchange; newline-delimited JSON.
///
/// Only digests travel toward the coordinator and only row indices travel
/// back, so no unit-level record ever crosses the source boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DedupMessage {
    Digests(HashedKeyList),
    Exclude(ExclusionList),
}

/// Join key fields with the unit separator.
///
/// Matching is byte-exact: sources must agree on field order and
/// formatting or identical individuals hash apart.
pub fn canonical_key(fields: &[&str]) -> String {
    fields.join(&KEY_SEPARATOR.to_string())
}

/// Lowercase hex SHA-256 of a byte string.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Hash canonicalized keys to lowercase hex SHA-256 digests, preserving
/// row order. An optional shared salt is prepended (salt, separator, key);
/// all sources must use the same salt or nothing matches.
pub fn hash_keys(source_id: usize, keys: &[String], salt: Option<&str>) -> Result<HashedKeyList> {
    let mut digests = Vec::with_capacity(keys.len());
    for (row, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::EmptyKey { row });
        }
        let payload = match salt {
            Some(salt) => format!("{salt}{KEY_SEPARATOR}{key}"),
            None => key.clone(),
        };
        digests.push(sha256_hex(payload.as_bytes()));
    }
    Ok(HashedKeyList { source_id, digests })
}

/// Decide which rows each source drops so that, afterwards, every digest
/// survives in at most `k_keep` sources and at most once per source.
///
/// Within-source repeats of a digest are always dropped past the first
/// occurrence. A digest present in more than `k_keep` distinct sources
/// gets `k_keep` keeper sources chosen uniformly from the seeded stream;
/// the rest drop their copy. Digests in at most `k_keep` sources trigger
/// no cross-source exclusions.
pub fn match_and_assign(
    lists: &[HashedKeyList],
    k_keep: usize,
    seed: u64,
) -> Result<Vec<ExclusionList>> {
    if k_keep == 0 {
        return Err(Error::InvalidConfig {
            detail: "k_keep must be at least 1".into(),
        });
    }
    let mut excluded: Vec<Vec<usize>> = vec![Vec::new(); lists.len()];
    // digest -> first-occurrence row per source position, ascending.
    let mut first_rows: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (pos, list) in lists.iter().enumerate() {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (row, digest) in list.digests.iter().enumerate() {
            if seen.insert(digest.as_str(), row).is_some() {
                excluded[pos].push(row);
            } else {
                first_rows
                    .entry(digest.as_str())
                    .or_default()
                    .push((pos, row));
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for holders in first_rows.values() {
        if holders.len() <= k_keep {
            continue;
        }
        let mut order: Vec<usize> = (0..holders.len()).collect();
        for i in 0..k_keep {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        for &idx in &order[k_keep..] {
            let (pos, row) = holders[idx];
            excluded[pos].push(row);
        }
    }
    Ok(lists
        .iter()
        .zip(excluded)
        .map(|(list, mut rows)| {
            rows.sort_unstable();
            ExclusionList {
                source_id: list.source_id,
                rows,
            }
        })
        .collect())
}

/// Drop the listed rows from a source, preserving the order of the rest.
pub fn apply_exclusions(src: &SourceData, ex: &ExclusionList) -> Result<SourceData> {
    let n = src.n();
    for &row in &ex.rows {
        if row >= n {
            return Err(Error::IndexOutOfRange { index: row, len: n });
        }
    }
    let mut drop = vec![false; n];
    for &row in &ex.rows {
        drop[row] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !drop[i]).collect();
    src.select(&keep)
}
