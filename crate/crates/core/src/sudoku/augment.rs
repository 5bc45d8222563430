use rand::seq::SliceRandom;
use rand::Rng;

use super::{box_size, PuzzleInstance, Result, SudokuError};

/// A validity-preserving Sudoku symmetry: digit relabelling, optional
/// transposition, and permutations of row bands and column stacks.
///
/// Output cell `(r, c)` reads input cell `P(r, c)`, where `P` first maps the
/// band of `r` through `band_perm` and the stack of `c` through `stack_perm`,
/// then swaps the coordinates when `transpose` is set. The digit found there
/// is relabelled `d -> digit_perm[d - 1]`; blanks stay blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Augmentation {
    pub digit_perm: Vec<u8>,
    pub transpose: bool,
    pub band_perm: Vec<usize>,
    pub stack_perm: Vec<usize>,
}

fn is_perm(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n
        && p.iter()
            .all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

impl Augmentation {
    pub fn identity(side: usize) -> Result<Self> {
        let b = box_size(side)?;
        Ok(Self {
            digit_perm: (1..=side as u8).collect(),
            transpose: false,
            band_perm: (0..b).collect(),
            stack_perm: (0..b).collect(),
        })
    }

    pub fn random(side: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut a = Self::identity(side)?;
        a.digit_perm.shuffle(rng);
        a.transpose = rng.random_bool(0.5);
        a.band_perm.shuffle(rng);
        a.stack_perm.shuffle(rng);
        Ok(a)
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        let b = box_size(side)?;
        let digits: Vec<usize> = self
            .digit_perm
            .iter()
            .map(|&d| (d as usize).wrapping_sub(1))
            .collect();
        if !is_perm(&digits, side) {
            return Err(SudokuError::NotPermutation {
                what: "digit permutation",
                perm: self.digit_perm.iter().map(|&d| d as usize).collect(),
            });
        }
        for (what, p) in [
            ("band permutation", &self.band_perm),
            ("stack permutation", &self.stack_perm),
        ] {
            if !is_perm(p, b) {
                return Err(SudokuError::NotPermutation {
                    what,
                    perm: p.clone(),
                });
            }
        }
        Ok(())
    }

    fn source(&self, r: usize, c: usize, b: usize) -> (usize, usize) {
        let rr = self.band_perm[r / b] * b + r % b;
        let cc = self.stack_perm[c / b] * b + c % b;
        if self.transpose {
            (cc, rr)
        } else {
            (rr, cc)
        }
    }

    pub fn apply_grid(&self, grid: &[u8], side: usize) -> Result<Vec<u8>> {
        self.validate(side)?;
        let b = box_size(side)?;
        let mut out = vec![0u8; side * side];
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = self.source(r, c, b);
                let v = grid[sr * side + sc];
                out[r * side + c] = if v == 0 { 0 } else { self.digit_perm[v as usize - 1] };
            }
        }
        Ok(out)
    }

    /// The single augmentation equal to applying `self` and then `next`.
    pub fn then(&self, next: &Self) -> Self {
        let (b1, s1) = if next.transpose {
            (&self.stack_perm, &self.band_perm)
        } else {
            (&self.band_perm, &self.stack_perm)
        };
        Self {
            digit_perm: self
                .digit_perm
                .iter()
                .map(|&d| next.digit_perm[d as usize - 1])
                .collect(),
            transpose: self.transpose ^ next.transpose,
            band_perm: next.band_perm.iter().map(|&i| b1[i]).collect(),
            stack_perm: next.stack_perm.iter().map(|&i| s1[i]).collect(),
        }
    }
}

pub fn augment(p: &PuzzleInstance, aug: &Augmentation) -> Result<PuzzleInstance> {
    PuzzleInstance::new(
        p.side,
        aug.apply_grid(&p.givens, p.side)?,
        aug.apply_grid(&p.solution, p.side)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sudoku::{check_valid, generate_dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_a_no_op() {
        let p = &generate_dataset(1, 9, 30, 2).unwrap()[0];
        assert_eq!(&augment(p, &Augmentation::identity(9).unwrap()).unwrap(), p);
    }

    #[test]
    fn transpose_is_an_involution() {
        let p = &generate_dataset(1, 9, 30, 2).unwrap()[0];
        let mut t = Augmentation::identity(9).unwrap();
        t.transpose = true;
        let once = augment(p, &t).unwrap();
        assert_ne!(&once, p);
        assert_eq!(&augment(&once, &t).unwrap(), p);
    }

    #[test]
    fn rejects_non_permutations() {
        let p = &generate_dataset(1, 4, 3, 2).unwrap()[0];
        let mut a = Augmentation::identity(4).unwrap();
        a.digit_perm = vec![1, 1, 3, 4];
        assert!(matches!(augment(p, &a), Err(SudokuError::NotPermutation { .. })));
        let mut a = Augmentation::identity(4).unwrap();
        a.band_perm = vec![0, 2];
        assert!(augment(p, &a).is_err());
        let mut a = Augmentation::identity(4).unwrap();
        a.digit_perm = vec![0, 1, 2, 3];
        assert!(augment(p, &a).is_err());
    }

    #[test]
    fn random_augmentations_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in generate_dataset(100, 9, 40, 12).unwrap() {
            let a = Augmentation::random(9, &mut rng).unwrap();
            let q = augment(&p, &a).unwrap();
            assert!(check_valid(&q.solution, 9).unwrap());
            assert_eq!(q.blanks(), p.blanks());
        }
    }
}
