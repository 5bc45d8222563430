//! Sudoku data: validity checking, a backtracking oracle solver, seeded
//! generation, symmetry augmentation, token encoding, CSV loading and the two
//! accuracy metrics.
//!
//! Grids are row-major `side × side` cell vectors with `0` marking a blank.
//! Supported sides are 4 (2×2 boxes) and 9 (3×3 boxes).

mod augment;
mod generate;
mod io;
mod solver;

pub use augment::{augment, Augmentation};
pub use generate::{generate_dataset, random_solved_grid};
pub use io::{parse_dataset_file, parse_dataset_str, write_dataset_file};
pub use solver::solve_backtracking;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SudokuError {
    #[error("unsupported side {0}; expected 4 or 9")]
    InvalidSide(usize),
    #[error("grid has {got} cells, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("cell value {value} out of range for side {side}")]
    CellOutOfRange { value: u8, side: usize },
    #[error("givens violate a row, column or box constraint")]
    InvalidGivens,
    #[error("{0}")]
    InvalidInstance(String),
    #[error("{what} is not a permutation: {perm:?}")]
    NotPermutation { what: &'static str, perm: Vec<usize> },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("blank count {blanks} must be below {cells}")]
    TooManyBlanks { blanks: usize, cells: usize },
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = SudokuError> = std::result::Result<T, E>;

/// Box edge length for a supported side.
pub fn box_size(side: usize) -> Result<usize> {
    match side {
        4 => Ok(2),
        9 => Ok(3),
        other => Err(SudokuError::InvalidSide(other)),
    }
}

fn check_cells(grid: &[u8], side: usize) -> Result<()> {
    box_size(side)?;
    if grid.len() != side * side {
        return Err(SudokuError::WrongLength {
            expected: side * side,
            got: grid.len(),
        });
    }
    if let Some(&value) = grid.iter().find(|&&v| v as usize > side) {
        return Err(SudokuError::CellOutOfRange { value, side });
    }
    Ok(())
}

/// True iff no row, column or box repeats a nonzero value.
pub fn check_valid(grid: &[u8], side: usize) -> Result<bool> {
    check_cells(grid, side)?;
    let b = box_size(side)?;
    let mut rows = vec![0u16; side];
    let mut cols = vec![0u16; side];
    let mut boxes = vec![0u16; side];
    for (i, &v) in grid.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (r, c) = (i / side, i % side);
        let bx = (r / b) * b + c / b;
        let bit = 1u16 << v;
        if rows[r] & bit != 0 || cols[c] & bit != 0 || boxes[bx] & bit != 0 {
            return Ok(false);
        }
        rows[r] |= bit;
        cols[c] |= bit;
        boxes[bx] |= bit;
    }
    Ok(true)
}

/// A puzzle and the solution it is scored against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PuzzleInstance {
    pub side: usize,
    pub givens: Vec<u8>,
    pub solution: Vec<u8>,
}

impl PuzzleInstance {
    /// Builds an instance, checking that the solution is complete, valid and
    /// extends the givens.
    pub fn new(side: usize, givens: Vec<u8>, solution: Vec<u8>) -> Result<Self> {
        let p = Self {
            side,
            givens,
            solution,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_cells(&self.givens, self.side)?;
        check_cells(&self.solution, self.side)?;
        if self.solution.contains(&0) {
            return Err(SudokuError::InvalidInstance("solution has blank cells".into()));
        }
        if !check_valid(&self.solution, self.side)? {
            return Err(SudokuError::InvalidInstance(
                "solution violates a row, column or box constraint".into(),
            ));
        }
        if let Some(i) = self
            .givens
            .iter()
            .zip(&self.solution)
            .position(|(&g, &s)| g != 0 && g != s)
        {
            return Err(SudokuError::InvalidInstance(format!(
                "given at cell {i} disagrees with the solution"
            )));
        }
        Ok(())
    }

    pub fn blanks(&self) -> usize {
        self.givens.iter().filter(|&&v| v == 0).count()
    }

    pub fn encode(&self) -> EncodedExample {
        EncodedExample {
            input: self.givens.iter().map(|&v| v as usize).collect(),
            target: self.solution.iter().map(|&v| v as usize).collect(),
        }
    }
}

/// Model-facing token sequences: ids `0..=side` for inputs (0 = blank),
/// `1..=side` for targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl EncodedExample {
    pub fn decode(&self, side: usize) -> Result<PuzzleInstance> {
        let to_cells = |v: &[usize]| -> Result<Vec<u8>> {
            v.iter()
                .map(|&t| {
                    u8::try_from(t)
                        .ok()
                        .filter(|&c| c as usize <= side)
                        .ok_or(SudokuError::CellOutOfRange {
                            value: t.min(255) as u8,
                            side,
                        })
                })
                .collect()
        };
        PuzzleInstance::new(side, to_cells(&self.input)?, to_cells(&self.target)?)
    }
}

/// Vocabulary size of the token encoding for a side.
pub fn vocab_size(side: usize) -> usize {
    side + 1
}

pub fn token_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(SudokuError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(target).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// 1 for a fully correct sequence, 0 otherwise.
pub fn exact_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(SudokuError::LengthMismatch(pred.len(), target.len()));
    }
    Ok(if pred == target { 1.0 } else { 0.0 })
}

/// Renders a grid as rows of digits with `.` for blanks.
pub fn format_grid(grid: &[u8], side: usize) -> String {
    grid.chunks(side)
        .map(|row| {
            row.iter()
                .map(|&v| if v == 0 { '.' } else { char::from(b'0' + v) })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVED_9: &str =
        "534678912672195348198342567859761423426853791713924856961537284287419635345286179";

    fn digits(s: &str) -> Vec<u8> {
        s.bytes().map(|b| b - b'0').collect()
    }

    #[test]
    fn validity_basics() {
        assert!(check_valid(&[0; 81], 9).unwrap());
        assert!(check_valid(&[0; 16], 4).unwrap());
        let mut row = vec![0u8; 81];
        row[0] = 1;
        row[1] = 1;
        assert!(!check_valid(&row, 9).unwrap());
        assert!(check_valid(&digits(SOLVED_9), 9).unwrap());
        assert!(matches!(check_valid(&[0; 25], 5), Err(SudokuError::InvalidSide(5))));
        assert!(check_valid(&[0; 80], 9).is_err());
    }

    #[test]
    fn column_and_box_duplicates_are_caught() {
        let mut col = vec![0u8; 16];
        col[0] = 3;
        col[12] = 3;
        assert!(!check_valid(&col, 4).unwrap());
        let mut bx = vec![0u8; 16];
        bx[0] = 2;
        bx[5] = 2;
        assert!(!check_valid(&bx, 4).unwrap());
    }

    #[test]
    fn accuracy_metrics() {
        let t: Vec<usize> = (0..81).map(|i| i % 9 + 1).collect();
        assert_eq!(token_accuracy(&t, &t).unwrap(), 1.0);
        assert_eq!(exact_accuracy(&t, &t).unwrap(), 1.0);
        let mut p = t.clone();
        for i in [0, 40, 80] {
            p[i] = 0;
        }
        assert!((token_accuracy(&p, &t).unwrap() - 78.0 / 81.0).abs() < 1e-12);
        assert_eq!(exact_accuracy(&p, &t).unwrap(), 0.0);
        let wrong: Vec<usize> = t.iter().map(|v| v % 9 + 1).collect();
        assert_eq!(token_accuracy(&wrong, &t).unwrap(), 0.0);
        assert!(token_accuracy(&t[..3], &t).is_err());
        assert!(exact_accuracy(&t[..3], &t).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let sol = digits(SOLVED_9);
        let mut givens = sol.clone();
        givens[3] = 0;
        givens[50] = 0;
        let p = PuzzleInstance::new(9, givens, sol).unwrap();
        let e = p.encode();
        assert_eq!(e.input[3], 0);
        assert_eq!(e.decode(9).unwrap(), p);
    }

    #[test]
    fn instance_invariants_are_enforced() {
        let sol = digits(SOLVED_9);
        let mut givens = sol.clone();
        givens[0] = 9;
        assert!(PuzzleInstance::new(9, givens, sol.clone()).is_err());
        let mut broken = sol.clone();
        broken.swap(0, 1);
        assert!(PuzzleInstance::new(9, vec![0; 81], broken).is_err());
    }

    #[test]
    fn grid_formatting() {
        let g = [1, 0, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];
        assert_eq!(format_grid(&g, 4), "1.34\n3412\n2143\n4321");
    }
}
