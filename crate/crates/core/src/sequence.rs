//! Nucleotide alphabet. Canonical order is A, U, C, G; argmax ties resolve to
//! the lowest index in that order.

use std::fmt;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Base {
    A = 0,
    U = 1,
    C = 2,
    G = 3,
}

pub const BASES: [Base; 4] = [Base::A, Base::U, Base::C, Base::G];

impl Base {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Base {
        BASES[i]
    }

    pub fn from_char(c: char) -> Option<Base> {
        match c {
            'A' => Some(Base::A),
            'U' => Some(Base::U),
            'C' => Some(Base::C),
            'G' => Some(Base::G),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Base::A => 'A',
            Base::U => 'U',
            Base::C => 'C',
            Base::G => 'G',
        }
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Parses a sequence over {A, U, C, G}; anything else is rejected.
pub fn parse_seq(s: &str) -> Result<Vec<Base>> {
    s.chars()
        .enumerate()
        .map(|(i, c)| {
            Base::from_char(c)
                .ok_or_else(|| invalid!("symbol {c:?} at position {i} is not one of A, U, C, G"))
        })
        .collect()
}

pub fn seq_to_string(seq: &[Base]) -> String {
    seq.iter().map(|b| b.as_char()).collect()
}

/// Index of the largest entry with ties broken towards the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        let s = parse_seq("AUCG").unwrap();
        assert_eq!(s, vec![Base::A, Base::U, Base::C, Base::G]);
        assert_eq!(seq_to_string(&s), "AUCG");
        assert!(parse_seq("AUTG").is_err());
        assert!(parse_seq("aucg").is_err());
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax_row(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax_row(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax_row(&[0.0, 0.0, 0.0, 1.0]), 3);
    }
}
