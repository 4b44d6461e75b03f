//! Event-log ingestion, synthetic data and chronological splits.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqcore::{build_plan, Dataset, Event, SegmentationPlan, SeqError, UserHistory};

pub const TSV_HEADER: &str = "user_id\titem_id\tevent_type\ttimestamp";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("MalformedRow: line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("MissingColumn: {0}")]
    MissingColumn(String),
    #[error("EmptyAfterFilter: no user passed the event-count filter")]
    EmptyAfterFilter,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("SequenceTooShort: user {user} has {len} events, split needs {needed}")]
    SequenceTooShort { user: u64, len: usize, needed: usize },
    #[error(transparent)]
    Seq(#[from] SeqError),
}

pub fn ingest_tsv(path: &Path, min_events: usize, max_events: usize) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut ds = ingest_tsv_reader(std::io::BufReader::new(file), min_events, max_events)?;
    ds.metadata = format!("ingested from {}; {}", path.display(), ds.metadata);
    Ok(ds)
}

/// Parses a tab-separated event log with a header row naming the columns
/// `user_id`, `item_id`, `event_type` and `timestamp` (any order, extra
/// columns ignored). Each user's events are stably sorted by timestamp,
/// users with fewer than `min_events` are dropped, the rest keep their last
/// `max_events`, and item ids are re-indexed densely in ascending order of
/// the original id.
pub fn ingest_tsv_reader<R: BufRead>(input: R, min_events: usize, max_events: usize) -> Result<Dataset, DataError> {
    if max_events == 0 || min_events > max_events {
        return Err(DataError::InvalidConfig(format!(
            "need 0 < max_events and min_events <= max_events, got {min_events}/{max_events}"
        )));
    }
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or_else(|| DataError::MissingColumn("user_id".into()))?;
    let names: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let col = |name: &str| {
        names
            .iter()
            .position(|&c| c == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (cu, ci, ce, ct) = (col("user_id")?, col("item_id")?, col("event_type")?, col("timestamp")?);
    let width = names.len();

    let mut per_user: BTreeMap<u64, Vec<(i64, u64, u16)>> = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line_no = idx + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            return Err(DataError::MalformedRow {
                line: line_no,
                reason: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        fn parse<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, DataError> {
            s.parse().map_err(|_| DataError::MalformedRow {
                line,
                reason: format!("{name} {s:?} is not an integer in range"),
            })
        }
        let user: u64 = parse(fields[cu], "user_id", line_no)?;
        let item: u64 = parse(fields[ci], "item_id", line_no)?;
        let event_type: u16 = parse(fields[ce], "event_type", line_no)?;
        let ts: i64 = parse(fields[ct], "timestamp", line_no)?;
        per_user.entry(user).or_default().push((ts, item, event_type));
    }

    let mut kept: Vec<(u64, Vec<(i64, u64, u16)>)> = Vec::new();
    for (user, mut events) in per_user {
        if events.len() < min_events {
            continue;
        }
        events.sort_by_key(|e| e.0);
        let start = events.len().saturating_sub(max_events);
        kept.push((user, events.split_off(start)));
    }
    if kept.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }
    let mut originals: Vec<u64> = kept.iter().flat_map(|(_, ev)| ev.iter().map(|e| e.1)).collect();
    originals.sort_unstable();
    originals.dedup();
    let users = kept
        .into_iter()
        .map(|(user, events)| UserHistory {
            user_id: user,
            events: events
                .into_iter()
                .map(|(ts, item, event_type)| Event {
                    user_id: user,
                    item_id: encode_item(&originals, item).expect("item collected above"),
                    event_type,
                    timestamp: ts,
                })
                .collect(),
        })
        .collect::<Vec<_>>();
    Ok(Dataset {
        metadata: format!(
            "{} users, {} items, min_events {min_events}, max_events {max_events}",
            users.len(),
            originals.len()
        ),
        users,
        vocab_size: originals.len(),
        item_map: Some(originals),
    })
}

/// Dense id of an original item id under a sorted `item_map`.
pub fn encode_item(item_map: &[u64], original: u64) -> Option<u32> {
    item_map.binary_search(&original).ok().map(|i| i as u32)
}

pub fn decode_item(item_map: &[u64], dense: u32) -> Option<u64> {
    item_map.get(dense as usize).copied()
}

/// Writes the events in TSV form, translating dense ids back to original ids
/// when the dataset carries an item map.
pub fn write_tsv<W: Write>(dataset: &Dataset, mut out: W) -> Result<(), DataError> {
    writeln!(out, "{TSV_HEADER}")?;
    for user in &dataset.users {
        for e in &user.events {
            let item = match &dataset.item_map {
                Some(map) => decode_item(map, e.item_id).ok_or_else(|| {
                    DataError::InvalidConfig(format!("item {} outside the item map", e.item_id))
                })?,
                None => u64::from(e.item_id),
            };
            writeln!(out, "{}\t{}\t{}\t{}", e.user_id, item, e.event_type, e.timestamp)?;
        }
    }
    Ok(())
}

/// `new_id\toriginal_id` rows under a header.
pub fn write_item_map<W: Write>(item_map: &[u64], mut out: W) -> Result<(), DataError> {
    writeln!(out, "new_id\toriginal_id")?;
    for (new, orig) in item_map.iter().enumerate() {
        writeln!(out, "{new}\t{orig}")?;
    }
    Ok(())
}

pub fn read_item_map<R: BufRead>(input: R) -> Result<Vec<u64>, DataError> {
    let mut map = Vec::new();
    for (idx, line) in input.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || DataError::MalformedRow {
            line: idx + 1,
            reason: "expected new_id<TAB>original_id".into(),
        };
        let (a, b) = line.split_once('\t').ok_or_else(bad)?;
        let new: usize = a.parse().map_err(|_| bad())?;
        if new != map.len() {
            return Err(bad());
        }
        map.push(b.parse().map_err(|_| bad())?);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub vocab_size: usize,
    pub num_clusters: usize,
    pub seq_len: usize,
    /// Probability that an event comes from the user's preference cluster.
    pub p_long: f64,
    /// Share of uniform mass mixed into the within-cluster Zipf distribution.
    pub noise_floor: f64,
    pub zipf_exponent: f64,
    /// Per-event probability that two of the user's preference ranks swap.
    pub drift_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 2000,
            vocab_size: 2048,
            num_clusters: 16,
            seq_len: 100,
            p_long: 0.7,
            noise_floor: 0.0,
            zipf_exponent: 1.0,
            drift_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if !prob(self.p_long) || !prob(self.noise_floor) || !prob(self.drift_rate) {
            return Err(DataError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if self.num_clusters == 0 || self.vocab_size == 0 || self.vocab_size % self.num_clusters != 0 {
            return Err(DataError::InvalidConfig(format!(
                "vocab_size {} must split evenly into {} clusters",
                self.vocab_size, self.num_clusters
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(DataError::InvalidConfig("vocab_size exceeds u32".into()));
        }
        if self.num_users == 0 || self.seq_len == 0 {
            return Err(DataError::InvalidConfig("num_users and seq_len must be positive".into()));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(DataError::InvalidConfig("zipf_exponent must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn cluster_size(&self) -> usize {
        self.vocab_size / self.num_clusters
    }

    pub fn cluster_of(&self, item: u32) -> usize {
        item as usize / self.cluster_size()
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    Ok(generate_synthetic_labeled(cfg)?.0)
}

/// Synthetic histories plus each user's preference cluster. Every user owns
/// a random ranking of their cluster's items; in-cluster events follow a
/// Zipf law over that ranking, the rest are uniform over the vocabulary.
pub fn generate_synthetic_labeled(cfg: &SyntheticConfig) -> Result<(Dataset, Vec<usize>), DataError> {
    cfg.validate()?;
    let size = cfg.cluster_size();
    let zipf: Vec<f64> = (1..=size).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
    let z: f64 = zipf.iter().sum();
    let weights: Vec<f64> = zipf
        .iter()
        .map(|w| (1.0 - cfg.noise_floor) * w / z + cfg.noise_floor / size as f64)
        .collect();
    let rank_dist = WeightedIndex::new(&weights).map_err(|e| DataError::InvalidConfig(e.to_string()))?;

    let mut users = Vec::with_capacity(cfg.num_users);
    let mut clusters = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u as u64);
        let cluster = rng.random_range(0..cfg.num_clusters);
        let mut ranking: Vec<u32> = (0..size as u32).map(|i| (cluster * size) as u32 + i).collect();
        ranking.shuffle(&mut rng);
        let mut events = Vec::with_capacity(cfg.seq_len);
        for t in 0..cfg.seq_len {
            if cfg.drift_rate > 0.0 && size > 1 && rng.random::<f64>() < cfg.drift_rate {
                let a = rng.random_range(0..size);
                let b = rng.random_range(0..size);
                ranking.swap(a, b);
            }
            let item = if rng.random::<f64>() < cfg.p_long {
                ranking[rank_dist.sample(&mut rng)]
            } else {
                rng.random_range(0..cfg.vocab_size as u32)
            };
            events.push(Event {
                user_id: u as u64,
                item_id: item,
                event_type: 0,
                timestamp: 1_700_000_000 + 60 * t as i64,
            });
        }
        users.push(UserHistory {
            user_id: u as u64,
            events,
        });
        clusters.push(cluster);
    }
    let ds = Dataset {
        users,
        vocab_size: cfg.vocab_size,
        metadata: format!(
            "synthetic: users {}, vocab {}, clusters {}, seq_len {}, p_long {}, noise_floor {}, zipf {}, drift {}, seed {}",
            cfg.num_users,
            cfg.vocab_size,
            cfg.num_clusters,
            cfg.seq_len,
            cfg.p_long,
            cfg.noise_floor,
            cfg.zipf_exponent,
            cfg.drift_rate,
            cfg.seed
        ),
        item_map: None,
    };
    Ok((ds, clusters))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_len: usize,
    pub test_len: usize,
    pub pretrain_len: usize,
    pub recent_len: usize,
}

impl SplitSpec {
    pub fn new(train_len: usize, test_len: usize, pretrain_len: usize, recent_len: usize) -> Result<Self, DataError> {
        let s = SplitSpec {
            train_len,
            test_len,
            pretrain_len,
            recent_len,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.pretrain_len + self.recent_len != self.train_len {
            return Err(DataError::InvalidConfig(format!(
                "train_len {} != pretrain_len {} + recent_len {}",
                self.train_len, self.pretrain_len, self.recent_len
            )));
        }
        if self.recent_len == 0 || self.test_len == 0 {
            return Err(DataError::InvalidConfig("recent_len and test_len must be positive".into()));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.train_len + self.test_len
    }

    /// Two-segment plan compressing the pretrain part into `experts` tokens,
    /// or a single segment when there is no pretrain part.
    pub fn plan(&self, experts: usize) -> Result<SegmentationPlan, DataError> {
        if self.pretrain_len == 0 {
            return Ok(SegmentationPlan::single(self.recent_len)?);
        }
        Ok(build_plan(&[self.pretrain_len, self.recent_len], &[experts, 0])?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub spec: SplitSpec,
    pub user_ids: Vec<u64>,
    pub train: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl Split {
    pub fn pretrain(&self, user: usize) -> &[u32] {
        &self.train[user][..self.spec.pretrain_len]
    }

    pub fn recent(&self, user: usize) -> &[u32] {
        &self.train[user][self.spec.pretrain_len..]
    }

    /// Training part followed by test part.
    pub fn full_sequence(&self, user: usize) -> Vec<u32> {
        let mut s = self.train[user].clone();
        s.extend_from_slice(&self.test[user]);
        s
    }
}

/// Chronological split of each user's last `train_len + test_len` events.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split, DataError> {
    spec.validate()?;
    let needed = spec.total_len();
    let mut out = Split {
        spec: *spec,
        user_ids: Vec::with_capacity(dataset.users.len()),
        train: Vec::with_capacity(dataset.users.len()),
        test: Vec::with_capacity(dataset.users.len()),
    };
    for user in &dataset.users {
        if user.events.len() < needed {
            return Err(DataError::SequenceTooShort {
                user: user.user_id,
                len: user.events.len(),
                needed,
            });
        }
        let ids = user.item_ids();
        let tail = &ids[ids.len() - needed..];
        out.user_ids.push(user.user_id);
        out.train.push(tail[..spec.train_len].to_vec());
        out.test.push(tail[spec.train_len..].to_vec());
    }
    Ok(out)
}
