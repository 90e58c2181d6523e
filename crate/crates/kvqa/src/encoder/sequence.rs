//! Input sequence assembly: the four-segment layout
//! `[CLS] q .. [SEP] <commonsense> [SEP] [MASK] [SEP] regions [END]`.

use serde::{Deserialize, Serialize};

use crate::encoder::tokenizer::{TOKEN_CLS, TOKEN_END, TOKEN_MASK, TOKEN_SEP};
use crate::{Error, Result};

pub const SEG_QUESTION: usize = 0;
pub const SEG_COMMONSENSE: usize = 1;
pub const SEG_ANSWER: usize = 2;
pub const SEG_REGION: usize = 3;
/// Number of distinct segment embeddings.
pub const NUM_SEGMENTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Cls,
    Sep,
    Mask,
    End,
}

impl Special {
    pub fn token_id(self) -> usize {
        match self {
            Special::Cls => TOKEN_CLS,
            Special::Sep => TOKEN_SEP,
            Special::Mask => TOKEN_MASK,
            Special::End => TOKEN_END,
        }
    }
}

/// A detector-style region: class label id plus normalized geometry
/// (x1, y1, x2, y2, confidence), all in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionToken {
    pub label: usize,
    pub geometry: [f64; 5],
}

impl RegionToken {
    pub fn validate(&self) -> Result<()> {
        if self.geometry.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(
                "region geometry values must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// What a slot contributes as content before position and segment
/// embeddings are added.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotContent {
    Special(Special),
    Word(usize),
    /// A raw sentence embedding, projected into the model dimension by
    /// a learned matrix at forward time (linear fusion mode).
    Sentence(Vec<f64>),
    /// The fusion vector, already in the model dimension (mha mode).
    Fused(Vec<f64>),
    Region(RegionToken),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub content: SlotContent,
    pub segment: usize,
    pub position: usize,
}

/// Commonsense payload for assembly, one variant per fusion mode.
#[derive(Debug, Clone, PartialEq)]
pub enum CommonsenseSlots {
    None,
    Tokens(Vec<usize>),
    Linear(Vec<Vec<f64>>),
    Fused(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub slots: Vec<Slot>,
    pub mask_index: usize,
    /// Index of the fused slot, when the commonsense segment holds one.
    pub fusion_slot: Option<usize>,
    /// Set when region or question tokens had to be dropped.
    pub truncated: bool,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Number of slots the fixed skeleton needs beyond question tokens,
/// commonsense slots and regions: CLS, question SEP, MASK, answer SEP,
/// END, plus the commonsense SEP when that segment exists.
fn skeleton_len(commonsense_slots: usize, has_commonsense_segment: bool) -> usize {
    5 + commonsense_slots + usize::from(has_commonsense_segment)
}

/// Assemble the model input for one question.
///
/// When the sequence would exceed `max_len`, region tokens are dropped
/// from the end first, then question tokens, with a warning; the
/// commonsense payload is never shortened. If the skeleton alone cannot
/// fit, assembly fails.
pub fn assemble_sequence(
    question_tokens: &[usize],
    commonsense: &CommonsenseSlots,
    regions: &[RegionToken],
    max_len: usize,
) -> Result<InputSequence> {
    for r in regions {
        r.validate()?;
    }
    let (cs_slots, has_cs) = match commonsense {
        CommonsenseSlots::None => (0, false),
        CommonsenseSlots::Tokens(t) => (t.len(), true),
        CommonsenseSlots::Linear(v) => (v.len(), true),
        CommonsenseSlots::Fused(_) => (1, true),
    };
    let overhead = skeleton_len(cs_slots, has_cs);

    let mut n_question = question_tokens.len();
    let mut n_regions = regions.len();
    let mut truncated = false;
    while overhead + n_question + n_regions > max_len && n_regions > 0 {
        n_regions -= 1;
        truncated = true;
    }
    while overhead + n_question + n_regions > max_len && n_question > 1 {
        n_question -= 1;
        truncated = true;
    }
    if overhead + n_question + n_regions > max_len {
        return Err(Error::validation(format!(
            "sequence needs at least {} slots but max_len is {max_len}",
            overhead + n_question + n_regions
        )));
    }
    if truncated {
        log::warn!(
            "sequence over {max_len} slots: kept {n_question}/{} question tokens and {n_regions}/{} regions",
            question_tokens.len(),
            regions.len()
        );
    }

    let mut slots = Vec::with_capacity(overhead + n_question + n_regions);
    let push = |content: SlotContent, segment: usize, slots: &mut Vec<Slot>| {
        let position = slots.len();
        slots.push(Slot {
            content,
            segment,
            position,
        });
    };

    push(SlotContent::Special(Special::Cls), SEG_QUESTION, &mut slots);
    for &id in &question_tokens[..n_question] {
        push(SlotContent::Word(id), SEG_QUESTION, &mut slots);
    }
    push(SlotContent::Special(Special::Sep), SEG_QUESTION, &mut slots);

    match commonsense {
        CommonsenseSlots::None => {}
        CommonsenseSlots::Tokens(token_ids) => {
            for &id in token_ids {
                push(SlotContent::Word(id), SEG_COMMONSENSE, &mut slots);
            }
            push(SlotContent::Special(Special::Sep), SEG_COMMONSENSE, &mut slots);
        }
        CommonsenseSlots::Linear(embeddings) => {
            for e in embeddings {
                push(SlotContent::Sentence(e.clone()), SEG_COMMONSENSE, &mut slots);
            }
            push(SlotContent::Special(Special::Sep), SEG_COMMONSENSE, &mut slots);
        }
        CommonsenseSlots::Fused(f) => {
            push(SlotContent::Fused(f.clone()), SEG_COMMONSENSE, &mut slots);
            push(SlotContent::Special(Special::Sep), SEG_COMMONSENSE, &mut slots);
        }
    }

    let mask_index = slots.len();
    push(SlotContent::Special(Special::Mask), SEG_ANSWER, &mut slots);
    push(SlotContent::Special(Special::Sep), SEG_ANSWER, &mut slots);

    for r in &regions[..n_regions] {
        push(SlotContent::Region(r.clone()), SEG_REGION, &mut slots);
    }
    push(SlotContent::Special(Special::End), SEG_REGION, &mut slots);

    let fusion_slot = slots.iter().position(|s| matches!(s.content, SlotContent::Fused(_)));
    Ok(InputSequence {
        slots,
        mask_index,
        fusion_slot,
        truncated,
    })
}
