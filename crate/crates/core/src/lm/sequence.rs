use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::vocab::{TokenId, PAD};
use crate::error::{contract, Error, Result};
use crate::ndgrad::Var;

/// Where an injected embedding comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    /// Projected user node (user projector output).
    UserNode,
    /// Trainable per-user id embedding, used instead of the projected user node.
    UserId,
    /// Projected item node (item projector output).
    ItemNode,
    /// Embedded profile text.
    Profile,
    /// Embedded prediction text.
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    /// Row `row` of the matrix supplied for `origin` at forward time; the row
    /// bypasses the token embedding table.
    Injected {
        origin: Origin,
        row: usize,
    },
}

/// Instruction template: vocabulary tokens interleaved with injected
/// embeddings, plus the answer positions the item head is read at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MixedSequence {
    slots: Vec<Slot>,
    answers: Vec<usize>,
    supervision: Vec<(usize, usize)>,
}

impl MixedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn push_token(&mut self, id: TokenId) -> &mut Self {
        self.slots.push(Slot::Token(id));
        self
    }

    pub fn push_tokens(&mut self, ids: &[TokenId]) -> &mut Self {
        self.slots.extend(ids.iter().map(|&i| Slot::Token(i)));
        self
    }

    pub fn push_injected(&mut self, origin: Origin, row: usize) -> &mut Self {
        self.slots.push(Slot::Injected { origin, row });
        self
    }

    /// Appends an answer position (fed with `PAD`) and returns its index.
    pub fn push_answer(&mut self) -> usize {
        self.slots.push(Slot::Token(PAD));
        self.answers.push(self.slots.len() - 1);
        self.slots.len() - 1
    }

    /// Appends an answer position whose label is already known.
    pub fn push_supervised_answer(&mut self, target: usize) -> usize {
        let p = self.push_answer();
        self.supervision.push((p, target));
        p
    }

    pub fn answers(&self) -> &[usize] {
        &self.answers
    }

    /// `(position, target item)` pairs used by the item loss.
    pub fn supervision(&self) -> &[(usize, usize)] {
        &self.supervision
    }

    /// Labels the first `targets.len()` answer positions in order.
    pub fn supervise(&mut self, targets: &[usize]) -> Result<()> {
        if targets.len() > self.answers.len() {
            return Err(contract(alloc::format!(
                "{} labels for {} answer positions",
                targets.len(),
                self.answers.len()
            )));
        }
        self.supervision = self
            .answers
            .iter()
            .copied()
            .zip(targets.iter().copied())
            .collect();
        Ok(())
    }

    pub fn check_length(&self, max_len: usize) -> Result<()> {
        if self.slots.len() > max_len {
            return Err(Error::Length {
                len: self.slots.len(),
                max: max_len,
            });
        }
        Ok(())
    }

    /// Distinct rows referenced for `origin`, ascending.
    pub fn rows_for(&self, origin: Origin) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .slots
            .iter()
            .filter_map(|s| match *s {
                Slot::Injected { origin: o, row } if o == origin => Some(row),
                _ => None,
            })
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Copy truncated to the first `len` slots; answers and labels past the
    /// cut are dropped.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            slots: self.slots[..len.min(self.slots.len())].to_vec(),
            answers: self.answers.iter().copied().filter(|&p| p < len).collect(),
            supervision: self
                .supervision
                .iter()
                .copied()
                .filter(|&(p, _)| p < len)
                .collect(),
        }
    }
}

/// Source matrices for injected slots, already recorded on a tape.
#[derive(Debug, Default, Clone)]
pub struct Injections {
    sources: BTreeMap<Origin, Source>,
}

#[derive(Debug, Clone)]
struct Source {
    matrix: Var,
    /// Maps a slot's row id to the matrix row. `None` means identity.
    rows: Option<BTreeMap<usize, usize>>,
}

impl Injections {
    pub fn new() -> Self {
        Self::default()
    }

    /// Slot row `r` reads matrix row `r`.
    pub fn with(mut self, origin: Origin, matrix: Var) -> Self {
        self.sources.insert(origin, Source { matrix, rows: None });
        self
    }

    /// Slot row `ids[j]` reads matrix row `j`.
    pub fn with_rows(mut self, origin: Origin, matrix: Var, ids: &[usize]) -> Self {
        let rows = ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
        self.sources.insert(
            origin,
            Source {
                matrix,
                rows: Some(rows),
            },
        );
        self
    }

    pub fn set(&mut self, origin: Origin, matrix: Var, ids: Option<&[usize]>) {
        let rows = ids.map(|ids| ids.iter().enumerate().map(|(j, &id)| (id, j)).collect());
        self.sources.insert(origin, Source { matrix, rows });
    }

    pub(crate) fn resolve(&self, origin: Origin, row: usize) -> Result<(Var, usize)> {
        let src = self
            .sources
            .get(&origin)
            .ok_or_else(|| contract(alloc::format!("no injection source for {origin:?}")))?;
        let local = match &src.rows {
            None => row,
            Some(map) => *map.get(&row).ok_or_else(|| {
                contract(alloc::format!("row {row} of {origin:?} was not supplied"))
            })?,
        };
        Ok((src.matrix, local))
    }
}
