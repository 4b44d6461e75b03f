//! Core domain types: events, datasets, segmentation plans and the flattened
//! token layout that interleaves item slots with expert slots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeqError {
    #[error("MismatchedLengths: {segments} segment lengths but {experts} expert counts")]
    MismatchedLengths { segments: usize, experts: usize },
    #[error("NonPositiveSegment: segment {index} has length 0")]
    NonPositiveSegment { index: usize },
    #[error("EmptyPlan: a plan needs at least one segment")]
    EmptyPlan,
    #[error("LengthMismatch: plan covers {expected} items, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("PlanSyntax: {0}")]
    PlanSyntax(String),
}

/// One user-item interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: u64,
    pub item_id: u32,
    pub event_type: u16,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: u64,
    pub events: Vec<Event>,
}

impl UserHistory {
    pub fn item_ids(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.item_id).collect()
    }
}

/// Per-user chronological event sequences over a densely indexed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub users: Vec<UserHistory>,
    pub vocab_size: usize,
    pub metadata: String,
    /// `item_map[new_id] = original_id`, present when ids were re-indexed.
    pub item_map: Option<Vec<u64>>,
}

impl Dataset {
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        self.users.iter().map(UserHistory::item_ids).collect()
    }

    pub fn num_events(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }
}

/// Segment lengths plus the number of expert tokens appended after each
/// segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentationPlan {
    segment_lengths: Vec<usize>,
    experts_per_segment: Vec<usize>,
}

pub fn build_plan(
    segment_lengths: &[usize],
    experts_per_segment: &[usize],
) -> Result<SegmentationPlan, SeqError> {
    if segment_lengths.len() != experts_per_segment.len() {
        return Err(SeqError::MismatchedLengths {
            segments: segment_lengths.len(),
            experts: experts_per_segment.len(),
        });
    }
    if segment_lengths.is_empty() {
        return Err(SeqError::EmptyPlan);
    }
    if let Some(index) = segment_lengths.iter().position(|&l| l == 0) {
        return Err(SeqError::NonPositiveSegment { index });
    }
    Ok(SegmentationPlan {
        segment_lengths: segment_lengths.to_vec(),
        experts_per_segment: experts_per_segment.to_vec(),
    })
}

impl SegmentationPlan {
    /// Single segment without experts: the plain causal model.
    pub fn single(len: usize) -> Result<Self, SeqError> {
        build_plan(&[len], &[0])
    }

    pub fn segment_lengths(&self) -> &[usize] {
        &self.segment_lengths
    }

    pub fn experts_per_segment(&self) -> &[usize] {
        &self.experts_per_segment
    }

    pub fn num_segments(&self) -> usize {
        self.segment_lengths.len()
    }

    pub fn total_items(&self) -> usize {
        self.segment_lengths.iter().sum()
    }

    pub fn total_experts(&self) -> usize {
        self.experts_per_segment.iter().sum()
    }

    pub fn flat_len(&self) -> usize {
        self.total_items() + self.total_experts()
    }

    /// Flattened start offset of segment `i` (its first item slot).
    pub fn segment_start(&self, i: usize) -> usize {
        self.segment_lengths[..i]
            .iter()
            .zip(&self.experts_per_segment[..i])
            .map(|(l, e)| l + e)
            .sum()
    }

    /// Flattened span (items followed by experts) of segment `i`.
    pub fn segment_span(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.segment_start(i);
        start..start + self.segment_lengths[i] + self.experts_per_segment[i]
    }

    /// Items belonging to every segment except the last one.
    pub fn prefix_items(&self) -> usize {
        self.total_items() - self.last_segment_len()
    }

    pub fn last_segment_len(&self) -> usize {
        *self.segment_lengths.last().expect("plan is non-empty")
    }

    /// Number of experts produced by the non-final segments (those that can be cached).
    pub fn prefix_experts(&self) -> usize {
        self.total_experts() - self.experts_per_segment.last().copied().unwrap_or(0)
    }

    /// Flattened position where the last segment begins.
    pub fn last_segment_start(&self) -> usize {
        self.segment_start(self.num_segments() - 1)
    }

    /// CRC32 over the little-endian u32 encoding of lengths then expert counts.
    pub fn fingerprint(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&(self.num_segments() as u32).to_le_bytes());
        for &v in self.segment_lengths.iter().chain(&self.experts_per_segment) {
            hasher.update(&(v as u32).to_le_bytes());
        }
        hasher.finalize()
    }
}

impl std::fmt::Display for SegmentationPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        write!(
            f,
            "segments = [{}]; experts = [{}]",
            join(&self.segment_lengths),
            join(&self.experts_per_segment)
        )
    }
}

/// Parses `segments = [int,...]; experts = [int,...]`. Whitespace and
/// newlines are free, the separator may be `;` or a newline, and `#` starts
/// a comment.
impl std::str::FromStr for SegmentationPlan {
    type Err = SeqError;

    fn from_str(text: &str) -> Result<Self, SeqError> {
        let syntax = |m: String| SeqError::PlanSyntax(m);
        let cleaned: String = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .collect::<Vec<_>>()
            .join(";");
        let mut segments = None;
        let mut experts = None;
        for part in cleaned.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = [..]`, found {part:?}")))?;
            let value = value.trim();
            let inner = value
                .strip_prefix('[')
                .and_then(|v| v.strip_suffix(']'))
                .ok_or_else(|| syntax(format!("expected a bracketed list, found {value:?}")))?;
            let list = inner
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<usize>().map_err(|_| syntax(format!("{t:?} is not a non-negative integer"))))
                .collect::<Result<Vec<_>, _>>()?;
            let slot = match key.trim() {
                "segments" => &mut segments,
                "experts" => &mut experts,
                other => return Err(syntax(format!("unknown key {other:?}"))),
            };
            if slot.replace(list).is_some() {
                return Err(syntax(format!("duplicate key {:?}", key.trim())));
            }
        }
        let segments = segments.ok_or_else(|| syntax("missing `segments`".into()))?;
        let experts = experts.ok_or_else(|| syntax("missing `experts`".into()))?;
        build_plan(&segments, &experts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Item {
        segment: usize,
        index: usize,
    },
    Expert {
        segment: usize,
        index: usize,
        global: usize,
    },
}

impl Slot {
    pub fn is_item(&self) -> bool {
        matches!(self, Slot::Item { .. })
    }
}

/// Flattened slot sequence `[items_0, experts_0, items_1, experts_1, ...]`
/// with each item slot pointing at the slot of the chronologically next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub slots: Vec<Slot>,
    pub target_of: Vec<Option<usize>>,
}

impl TokenLayout {
    pub fn from_plan(plan: &SegmentationPlan) -> Self {
        let mut slots = Vec::with_capacity(plan.flat_len());
        let mut global = 0;
        for (segment, (&len, &experts)) in plan
            .segment_lengths
            .iter()
            .zip(&plan.experts_per_segment)
            .enumerate()
        {
            slots.extend((0..len).map(|index| Slot::Item { segment, index }));
            for index in 0..experts {
                slots.push(Slot::Expert {
                    segment,
                    index,
                    global,
                });
                global += 1;
            }
        }
        let mut target_of = vec![None; slots.len()];
        let mut prev_item: Option<usize> = None;
        for (p, slot) in slots.iter().enumerate() {
            if slot.is_item() {
                if let Some(prev) = prev_item {
                    target_of[prev] = Some(p);
                }
                prev_item = Some(p);
            }
        }
        TokenLayout { slots, target_of }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn item_positions(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&p| self.slots[p].is_item())
            .collect()
    }

    pub fn num_items(&self) -> usize {
        self.slots.iter().filter(|s| s.is_item()).count()
    }

    /// Index into the item-id list for each slot (None for expert slots).
    pub fn item_index_of(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.slots
            .iter()
            .map(|s| {
                s.is_item().then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }
}

pub fn layout_sequence(events: &[Event], plan: &SegmentationPlan) -> Result<TokenLayout, SeqError> {
    if events.len() != plan.total_items() {
        return Err(SeqError::LengthMismatch {
            expected: plan.total_items(),
            got: events.len(),
        });
    }
    Ok(TokenLayout::from_plan(plan))
}

/// Keeps the most recent `max_len` events.
pub fn truncate_user(events: &[Event], max_len: usize) -> Vec<Event> {
    let start = events.len().saturating_sub(max_len.max(1));
    events[start..].to_vec()
}
