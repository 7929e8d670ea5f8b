use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K` semantic ids followed by four reserved ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub k: usize,
}

impl VocabLayout {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    pub fn sos(&self) -> u32 {
        self.k as u32
    }

    pub fn tot(&self) -> u32 {
        self.k as u32 + 1
    }

    pub fn eos(&self) -> u32 {
        self.k as u32 + 2
    }

    pub fn pad(&self) -> u32 {
        self.k as u32 + 3
    }

    pub fn size(&self) -> usize {
        self.k + 4
    }

    pub fn is_semantic(&self, id: u32) -> bool {
        (id as usize) < self.k
    }
}

/// One position of a packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Row `i` of the continuous prefix.
    Embedding(usize),
    Token(u32),
}

/// `[SOS][e1..en][TOT][s1..sm][EOS]` with the loss mask on `s1..sm` and `EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaslmSequence {
    pub slots: Vec<Slot>,
    pub loss_mask: Vec<bool>,
}

pub fn pack_sequence(n: usize, target_ids: &[u32], layout: &VocabLayout) -> Result<SaslmSequence> {
    if let Some(bad) = target_ids.iter().find(|&&id| !layout.is_semantic(id)) {
        return Err(Error::invalid(format!(
            "target id {bad} outside semantic range [0, {})",
            layout.k
        )));
    }
    let m = target_ids.len();
    let mut slots = Vec::with_capacity(n + m + 3);
    slots.push(Slot::Token(layout.sos()));
    slots.extend((0..n).map(Slot::Embedding));
    slots.push(Slot::Token(layout.tot()));
    slots.extend(target_ids.iter().map(|&id| Slot::Token(id)));
    slots.push(Slot::Token(layout.eos()));
    let loss_mask = (0..slots.len()).map(|p| p >= n + 2).collect();
    Ok(SaslmSequence { slots, loss_mask })
}

impl SaslmSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Embedding(_))).count()
    }

    /// Target ids between `TOT` and `EOS`.
    pub fn targets(&self) -> Vec<u32> {
        let n = self.prefix_len();
        self.slots[n + 2..self.len() - 1]
            .iter()
            .map(|s| match s {
                Slot::Token(id) => *id,
                Slot::Embedding(_) => unreachable!("embedding after TOT"),
            })
            .collect()
    }

    /// `(n, m)`.
    pub fn unpack(&self) -> (usize, usize) {
        let n = self.prefix_len();
        (n, self.len() - n - 3)
    }

    /// Id at each position, `pad` where the slot is an embedding.
    pub fn labels(&self, layout: &VocabLayout) -> Vec<u32> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Token(id) => *id,
                Slot::Embedding(_) => layout.pad(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let v = VocabLayout::new(10);
        let s = pack_sequence(5, &[0, 1, 2, 3, 4, 5, 6], &v).unwrap();
        assert_eq!(s.len(), 15);
        assert_eq!(s.loss_mask.iter().filter(|&&b| b).count(), 8);
        assert_eq!(s.unpack(), (5, 7));
        assert_eq!(s.targets(), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(s.slots[0], Slot::Token(10));
        assert_eq!(s.slots[6], Slot::Token(11));
        assert_eq!(s.slots[14], Slot::Token(12));
        assert_eq!(v.size(), 14);
        assert_eq!(v.pad(), 13);
    }

    #[test]
    fn empty_target() {
        let v = VocabLayout::new(4);
        let s = pack_sequence(3, &[], &v).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.loss_mask, vec![false, false, false, false, false, true]);
        assert_eq!(s.unpack(), (3, 0));
    }

    #[test]
    fn rejects_reserved_ids() {
        let v = VocabLayout::new(4);
        assert!(pack_sequence(2, &[1, 4], &v).is_err());
    }
}
