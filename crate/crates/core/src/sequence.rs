//! Multimodal sequence layouts: role tags, next-token labels and the
//! causal-attention contract for each training stage.
//!
//! A sequence records *what* sits at each position (image patch count,
//! query blocks, token ids); the model turns it into embeddings on its own
//! tape so parameter gradients flow through the embedding lookups.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Image,
    QueryFine,
    QueryCoarse,
    TextInstr,
    TextGen,
}

impl Role {
    pub fn is_query(self) -> bool {
        matches!(self, Role::QueryFine | Role::QueryCoarse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prealign,
    Pretrain,
    Sft,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Prealign, Stage::Pretrain, Stage::Sft];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prealign => "prealign",
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown stage {s:?}; use prealign, pretrain or sft")))
    }
}

/// One query parameter block: `len` tokens supervised at `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBlock {
    pub stride: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySlot {
    pub stride: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Image { len: usize },
    Query { stride: usize, len: usize },
    Text { role: Role, ids: Vec<u32> },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Image { len } | Segment::Query { len, .. } => *len,
            Segment::Text { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledSequence {
    pub segments: Vec<Segment>,
    pub roles: Vec<Role>,
    /// Next-token target per position; −1 means no loss.
    pub lm_labels: Vec<i64>,
    pub query_slots: Vec<QuerySlot>,
    pub stage: Stage,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn first_query(&self) -> Option<usize> {
        self.query_slots.iter().map(|s| s.range.start).min()
    }

    pub fn image_positions(&self) -> Vec<usize> {
        positions_with(&self.roles, |r| r == Role::Image)
    }

    pub fn has_labels(&self) -> bool {
        self.lm_labels.iter().any(|&l| l >= 0)
    }

    pub fn slot(&self, stride: usize) -> Option<&QuerySlot> {
        self.query_slots.iter().find(|s| s.stride == stride)
    }

    fn build(segments: Vec<Segment>, stage: Stage) -> Self {
        let fine = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Query { stride, .. } => Some(*stride),
                _ => None,
            })
            .min();
        let mut roles = Vec::new();
        let mut lm_labels = Vec::new();
        let mut query_slots = Vec::new();
        for seg in &segments {
            let start = roles.len();
            match seg {
                Segment::Image { len } => {
                    roles.extend(std::iter::repeat(Role::Image).take(*len));
                    lm_labels.extend(std::iter::repeat(-1).take(*len));
                }
                Segment::Query { stride, len } => {
                    let role = if Some(*stride) == fine { Role::QueryFine } else { Role::QueryCoarse };
                    roles.extend(std::iter::repeat(role).take(*len));
                    lm_labels.extend(std::iter::repeat(-1).take(*len));
                    query_slots.push(QuerySlot {
                        stride: *stride,
                        range: start..start + len,
                    });
                }
                Segment::Text { role, ids } => {
                    roles.extend(std::iter::repeat(*role).take(ids.len()));
                    for i in 0..ids.len() {
                        let label = match (role, ids.get(i + 1)) {
                            (Role::TextGen, Some(&next)) => next as i64,
                            _ => -1,
                        };
                        lm_labels.push(label);
                    }
                }
            }
        }
        Self {
            segments,
            roles,
            lm_labels,
            query_slots,
            stage,
        }
    }
}

fn query_segments(queries: &[QueryBlock]) -> impl Iterator<Item = Segment> + '_ {
    queries.iter().map(|q| Segment::Query {
        stride: q.stride,
        len: q.len,
    })
}

fn check_generated(ids: &[u32], what: &str) -> Result<()> {
    if ids.len() < 2 {
        return Err(Error::Input(format!(
            "{what} needs at least two tokens to supply a next-token target, got {}",
            ids.len()
        )));
    }
    Ok(())
}

/// `[IMAGE…][QUERY…][TEXT_GEN…]`; the pre-align stage shares this layout.
pub fn assemble_pretrain(
    image_tokens: usize,
    queries: &[QueryBlock],
    caption_ids: &[u32],
    stage: Stage,
) -> Result<AssembledSequence> {
    check_generated(caption_ids, "caption")?;
    if stage == Stage::Sft {
        return Err(Error::Contract("the sft stage uses assemble_sft".into()));
    }
    let mut segments = vec![Segment::Image { len: image_tokens }];
    segments.extend(query_segments(queries));
    segments.push(Segment::Text {
        role: Role::TextGen,
        ids: caption_ids.to_vec(),
    });
    segments.retain(|s| !s.is_empty());
    Ok(AssembledSequence::build(segments, stage))
}

/// `[IMAGE…][TEXT_INSTR…][QUERY…][TEXT_GEN…]`; loss on the response only.
pub fn assemble_sft(
    image_tokens: usize,
    queries: &[QueryBlock],
    instr_ids: &[u32],
    resp_ids: &[u32],
) -> Result<AssembledSequence> {
    check_generated(resp_ids, "response")?;
    let mut segments = vec![
        Segment::Image { len: image_tokens },
        Segment::Text {
            role: Role::TextInstr,
            ids: instr_ids.to_vec(),
        },
    ];
    segments.extend(query_segments(queries));
    segments.push(Segment::Text {
        role: Role::TextGen,
        ids: resp_ids.to_vec(),
    });
    segments.retain(|s| !s.is_empty());
    Ok(AssembledSequence::build(segments, Stage::Sft))
}

/// A pure-text sequence; exercises the language-model path alone.
pub fn assemble_text(ids: &[u32]) -> Result<AssembledSequence> {
    check_generated(ids, "text")?;
    Ok(AssembledSequence::build(
        vec![Segment::Text {
            role: Role::TextGen,
            ids: ids.to_vec(),
        }],
        Stage::Pretrain,
    ))
}

/// Lower-triangular attention permission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub len: usize,
}

impl CausalMask {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        i < self.len && j <= i
    }
}

pub fn causal_mask(len: usize) -> Result<CausalMask> {
    if len == 0 {
        return Err(Error::Input("empty sequence has no attention mask".into()));
    }
    Ok(CausalMask { len })
}

/// `true` where the image expert runs: image and query positions.
pub fn modality_route_mask(roles: &[Role]) -> Vec<bool> {
    roles.iter().map(|&r| r == Role::Image || r.is_query()).collect()
}

pub fn positions_with(roles: &[Role], pred: impl Fn(Role) -> bool) -> Vec<usize> {
    roles.iter().enumerate().filter(|(_, &r)| pred(r)).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn blocks() -> Vec<QueryBlock> {
        vec![QueryBlock { stride: 3, len: 64 }, QueryBlock { stride: 4, len: 36 }]
    }

    fn caption(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| i + 3).collect()
    }

    #[test]
    fn pretrain_layout() {
        let seq = assemble_pretrain(144, &blocks(), &caption(10), Stage::Pretrain).unwrap();
        assert_eq!(seq.len(), 254);
        assert_eq!(seq.query_slots[0], QuerySlot { stride: 3, range: 144..208 });
        assert_eq!(seq.query_slots[1], QuerySlot { stride: 4, range: 208..244 });
        let labelled: Vec<usize> = positions_with(&seq.roles, |_| true)
            .into_iter()
            .filter(|&i| seq.lm_labels[i] >= 0)
            .collect();
        // Every caption position except the last predicts its successor.
        assert_eq!(labelled, (244..253).collect::<Vec<_>>());
        for i in 244..253 {
            assert_eq!(seq.lm_labels[i], (i - 244 + 4) as i64);
        }
        let route = modality_route_mask(&seq.roles);
        assert!(route[..244].iter().all(|&r| r));
        assert!(route[244..].iter().all(|&r| !r));
    }

    #[test]
    fn sft_layout() {
        let seq = assemble_sft(144, &blocks(), &caption(6), &caption(8)).unwrap();
        assert_eq!(seq.len(), 258);
        assert_eq!(seq.first_query(), Some(150));
        assert_eq!(seq.query_slots.last().unwrap().range.end, 250);
        let mask = causal_mask(seq.len()).unwrap();
        // Queries see the instruction that precedes them.
        for q in 150..250 {
            for i in 144..150 {
                assert!(mask.allows(q, i));
            }
        }
        let route = modality_route_mask(&seq.roles);
        assert!(route[..144].iter().all(|&r| r));
        assert!(route[144..150].iter().all(|&r| !r));
        assert!(route[150..250].iter().all(|&r| r));
        assert!(route[250..].iter().all(|&r| !r));
        assert!(seq.lm_labels[..250].iter().all(|&l| l < 0));
    }

    #[test]
    fn empty_instruction_matches_pretrain_layout() {
        let sft = assemble_sft(16, &blocks(), &[], &caption(5)).unwrap();
        let pre = assemble_pretrain(16, &blocks(), &caption(5), Stage::Pretrain).unwrap();
        assert_eq!(sft.roles, pre.roles);
        assert_eq!(sft.query_slots, pre.query_slots);
        assert_eq!(sft.lm_labels, pre.lm_labels);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(assemble_pretrain(4, &blocks(), &[], Stage::Pretrain), Err(Error::Input(_))));
        assert!(matches!(assemble_sft(4, &blocks(), &[3], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn causal_mask_shapes() {
        let one = causal_mask(1).unwrap();
        assert!(one.allows(0, 0));
        let three = causal_mask(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(three.allows(i, j), j <= i);
            }
        }
        // The first image token precedes every query.
        let seq = assemble_pretrain(4, &blocks(), &caption(3), Stage::Pretrain).unwrap();
        let mask = causal_mask(seq.len()).unwrap();
        assert!(seq.query_slots.iter().all(|s| s.range.clone().all(|q| !mask.allows(0, q))));
    }

    #[test]
    fn text_only_routes_nothing() {
        let seq = assemble_text(&caption(7)).unwrap();
        assert!(modality_route_mask(&seq.roles).iter().all(|&r| !r));
    }

    proptest! {
        #[test]
        fn role_counts_and_label_mask(
            img in 0usize..40,
            fine in 1usize..20,
            coarse in 0usize..10,
            instr in 0usize..12,
            resp in 2usize..12,
            sft in any::<bool>(),
        ) {
            let mut q = vec![QueryBlock { stride: 2, len: fine }];
            if coarse > 0 {
                q.push(QueryBlock { stride: 4, len: coarse });
            }
            let seq = if sft {
                assemble_sft(img, &q, &caption(instr), &caption(resp)).unwrap()
            } else {
                assemble_pretrain(img, &q, &caption(resp), Stage::Pretrain).unwrap()
            };
            let count = |r: Role| seq.roles.iter().filter(|&&x| x == r).count();
            prop_assert_eq!(count(Role::Image), img);
            prop_assert_eq!(count(Role::QueryFine), fine);
            prop_assert_eq!(count(Role::QueryCoarse), coarse);
            prop_assert_eq!(count(Role::TextInstr), if sft { instr } else { 0 });
            prop_assert_eq!(count(Role::TextGen), resp);
            for (i, &l) in seq.lm_labels.iter().enumerate() {
                if l >= 0 {
                    prop_assert_eq!(seq.roles[i], Role::TextGen);
                }
            }
            // Slots are contiguous, disjoint and ordered.
            for w in seq.query_slots.windows(2) {
                prop_assert_eq!(w[0].range.end, w[1].range.start);
            }
        }

        #[test]
        fn route_mask_commutes_with_permutation(roles in proptest::collection::vec(0usize..5, 1..30), a in 0usize..30, b in 0usize..30) {
            let all = [Role::Image, Role::QueryFine, Role::QueryCoarse, Role::TextInstr, Role::TextGen];
            let mut roles: Vec<Role> = roles.into_iter().map(|i| all[i]).collect();
            let (a, b) = (a % roles.len(), b % roles.len());
            let before = modality_route_mask(&roles);
            roles.swap(a, b);
            let mut expected = before.clone();
            expected.swap(a, b);
            prop_assert_eq!(modality_route_mask(&roles), expected);
        }
    }
}
