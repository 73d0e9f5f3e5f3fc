//! Secondary-structure oracle: pair-additive minimum-free-energy folding by
//! dynamic programming, an exhaustive verifier, and dot-bracket similarity.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::sequence::Base;

pub const DEFAULT_HAIRPIN_MIN: usize = 3;
pub const MAX_FOLD_LEN: usize = 512;
pub const MAX_BRUTE_FORCE_LEN: usize = 14;

const TIE_EPS: f64 = 1e-9;

/// Balanced, non-crossing dot-bracket string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DotBracket(String);

impl DotBracket {
    /// Parses and validates against the default minimum hairpin size.
    pub fn parse(s: &str) -> Result<Self> {
        Self::parse_with_min(s, DEFAULT_HAIRPIN_MIN)
    }

    pub fn parse_with_min(s: &str, hairpin_min: usize) -> Result<Self> {
        let mut stack = Vec::new();
        for (i, c) in s.chars().enumerate() {
            match c {
                '.' => {}
                '(' => stack.push(i),
                ')' => {
                    let open = stack
                        .pop()
                        .ok_or_else(|| invalid!("unmatched ')' at position {i}"))?;
                    if i - open - 1 < hairpin_min {
                        return Err(invalid!(
                            "pair ({open}, {i}) encloses fewer than {hairpin_min} unpaired positions"
                        ));
                    }
                }
                other => return Err(invalid!("invalid dot-bracket symbol {other:?} at {i}")),
            }
        }
        if let Some(open) = stack.pop() {
            return Err(invalid!("unmatched '(' at position {open}"));
        }
        Ok(DotBracket(s.to_string()))
    }

    pub fn unpaired(len: usize) -> Self {
        DotBracket(".".repeat(len))
    }

    /// Builds the string from a partner table (`partner[i] = Some(j)`).
    pub fn from_partners(partners: &[Option<usize>]) -> Self {
        let s = partners
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                None => '.',
                Some(j) if *j > i => '(',
                Some(_) => ')',
            })
            .collect();
        DotBracket(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Partner table; `None` for unpaired positions.
    pub fn partners(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.0.len()];
        let mut stack = Vec::new();
        for (i, c) in self.0.bytes().enumerate() {
            match c {
                b'(' => stack.push(i),
                b')' => {
                    let j = stack.pop().expect("validated dot-bracket");
                    out[i] = Some(j);
                    out[j] = Some(i);
                }
                _ => {}
            }
        }
        out
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.partners()
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.filter(|j| *j > i).map(|j| (i, j)))
            .collect()
    }
}

impl fmt::Display for DotBracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Pair-additive energy model. Implementations must keep every allowed pair
/// energy strictly negative.
pub trait EnergyModel: Sync {
    /// Energy in kcal/mol of pairing `a` with `b`, or `None` if forbidden.
    fn pair_energy(&self, a: Base, b: Base) -> Option<f64>;
    fn hairpin_min(&self) -> usize;
}

/// Canonical Watson-Crick and wobble pairs with fixed energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEnergies {
    pub gc: f64,
    pub au: f64,
    pub gu: f64,
    pub hairpin_min: usize,
}

impl Default for PairEnergies {
    fn default() -> Self {
        PairEnergies {
            gc: -3.0,
            au: -2.0,
            gu: -1.0,
            hairpin_min: DEFAULT_HAIRPIN_MIN,
        }
    }
}

impl PairEnergies {
    pub fn new(gc: f64, au: f64, gu: f64, hairpin_min: usize) -> Result<Self> {
        for (name, e) in [("GC", gc), ("AU", au), ("GU", gu)] {
            if e.is_nan() || e >= 0.0 {
                return Err(invalid!("{name} pair energy must be negative, got {e}"));
            }
        }
        Ok(PairEnergies {
            gc,
            au,
            gu,
            hairpin_min,
        })
    }
}

impl EnergyModel for PairEnergies {
    fn pair_energy(&self, a: Base, b: Base) -> Option<f64> {
        use Base::*;
        match (a, b) {
            (G, C) | (C, G) => Some(self.gc),
            (A, U) | (U, A) => Some(self.au),
            (G, U) | (U, G) => Some(self.gu),
            _ => None,
        }
    }

    fn hairpin_min(&self) -> usize {
        self.hairpin_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub structure: DotBracket,
    /// kcal/mol, never positive.
    pub energy: f64,
}

/// Minimum-free-energy structure by O(L³) dynamic programming.
///
/// Traceback prefers pairing `i` with the smallest admissible partner over
/// leaving it unpaired, so equal-energy optima resolve deterministically.
pub fn fold_mfe(seq: &[Base], em: &impl EnergyModel) -> Result<Fold> {
    let n = seq.len();
    if n == 0 {
        return Err(invalid!("cannot fold an empty sequence"));
    }
    if n > MAX_FOLD_LEN {
        return Err(invalid!("sequence length {n} exceeds {MAX_FOLD_LEN}"));
    }
    let hmin = em.hairpin_min();
    // table[i * (n + 1) + j + 1] holds E(i, j); j = i - 1 is the empty interval.
    let w = n + 1;
    let mut table = vec![0.0f64; n * w + 1];
    let idx = |i: usize, j_plus1: usize| i * w + j_plus1;
    let get = |t: &[f64], i: usize, j: isize| -> f64 {
        if j < i as isize {
            0.0
        } else {
            t[idx(i, (j + 1) as usize)]
        }
    };

    for span in 1..=n {
        for i in 0..=n - span {
            let j = i + span - 1;
            let mut best = get(&table, i + 1, j as isize);
            for k in (i + hmin + 1)..=j {
                if let Some(e) = em.pair_energy(seq[i], seq[k]) {
                    let v = e + get(&table, i + 1, k as isize - 1) + get(&table, k + 1, j as isize);
                    if v < best {
                        best = v;
                    }
                }
            }
            table[idx(i, j + 1)] = best;
        }
    }

    let mut partners = vec![None; n];
    let mut stack = vec![(0usize, n as isize - 1)];
    while let Some((i, j)) = stack.pop() {
        if j < i as isize {
            continue;
        }
        let ju = j as usize;
        let target = get(&table, i, j);
        let mut paired = false;
        for k in (i + hmin + 1)..=ju {
            if let Some(e) = em.pair_energy(seq[i], seq[k]) {
                let v = e + get(&table, i + 1, k as isize - 1) + get(&table, k + 1, j);
                if (v - target).abs() <= TIE_EPS {
                    partners[i] = Some(k);
                    partners[k] = Some(i);
                    stack.push((k + 1, j));
                    stack.push((i + 1, k as isize - 1));
                    paired = true;
                    break;
                }
            }
        }
        if !paired {
            stack.push((i + 1, j));
        }
    }

    Ok(Fold {
        structure: DotBracket::from_partners(&partners),
        energy: get(&table, 0, n as isize - 1),
    })
}

/// Sum of pair energies of `db` on `seq`.
pub fn structure_energy(seq: &[Base], db: &DotBracket, em: &impl EnergyModel) -> Result<f64> {
    if seq.len() != db.len() {
        return Err(invalid!(
            "sequence length {} differs from structure length {}",
            seq.len(),
            db.len()
        ));
    }
    db.pairs().iter().try_fold(0.0, |acc, &(i, j)| {
        em.pair_energy(seq[i], seq[j])
            .map(|e| acc + e)
            .ok_or_else(|| invalid!("pair ({i}, {j}) = {}-{} is not allowed", seq[i], seq[j]))
    })
}

/// Exhaustive optimum over every balanced, non-crossing pairing. Test oracle
/// for [`fold_mfe`]; refuses sequences longer than [`MAX_BRUTE_FORCE_LEN`].
pub fn brute_force_fold(seq: &[Base], em: &impl EnergyModel) -> Result<Fold> {
    if seq.len() > MAX_BRUTE_FORCE_LEN {
        return Err(Error::TooLarge(format!(
            "brute-force folding is limited to {MAX_BRUTE_FORCE_LEN} nt, got {}",
            seq.len()
        )));
    }
    struct Search<'a, M> {
        seq: &'a [Base],
        em: &'a M,
        partners: Vec<Option<usize>>,
        open: Vec<usize>,
        best: Option<(f64, Vec<Option<usize>>)>,
    }
    impl<M: EnergyModel> Search<'_, M> {
        fn visit(&mut self, pos: usize, energy: f64) {
            let n = self.seq.len();
            if pos == n {
                if self.open.is_empty() && self.best.as_ref().is_none_or(|(e, _)| energy < *e) {
                    self.best = Some((energy, self.partners.clone()));
                }
                return;
            }
            // Positions left must be able to close every open bracket.
            if self.open.len() > n - pos {
                return;
            }
            self.visit(pos + 1, energy);

            self.open.push(pos);
            self.visit(pos + 1, energy);
            self.open.pop();

            if let Some(&o) = self.open.last() {
                if pos - o > self.em.hairpin_min() {
                    if let Some(e) = self.em.pair_energy(self.seq[o], self.seq[pos]) {
                        self.open.pop();
                        self.partners[o] = Some(pos);
                        self.partners[pos] = Some(o);
                        self.visit(pos + 1, energy + e);
                        self.partners[o] = None;
                        self.partners[pos] = None;
                        self.open.push(o);
                    }
                }
            }
        }
    }
    let mut search = Search {
        seq,
        em,
        partners: vec![None; seq.len()],
        open: Vec::new(),
        best: None,
    };
    search.visit(0, 0.0);
    let (energy, partners) = search.best.expect("the empty structure is always valid");
    Ok(Fold {
        structure: DotBracket::from_partners(&partners),
        energy,
    })
}

/// Fraction of positions whose paired/unpaired category agrees.
pub fn ss_similarity(pred: &DotBracket, truth: &DotBracket) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid!(
            "structure lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        ));
    }
    if pred.is_empty() {
        return Err(invalid!("empty structures"));
    }
    let agree = pred
        .as_str()
        .bytes()
        .zip(truth.as_str().bytes())
        .filter(|(a, b)| (*a == b'.') == (*b == b'.'))
        .count();
    Ok(agree as f64 / pred.len() as f64)
}
