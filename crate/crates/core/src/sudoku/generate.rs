use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::solver::fill;
use super::{box_size, PuzzleInstance, Result, SudokuError};

/// A uniformly-shuffled backtracking fill of an empty grid.
pub fn random_solved_grid(side: usize, rng: &mut impl Rng) -> Result<Vec<u8>> {
    box_size(side)?;
    let mut grid = vec![0u8; side * side];
    let mut values: Vec<u8> = (1..=side as u8).collect();
    let solved = fill(&mut grid, side, &mut |_| {
        values.shuffle(rng);
        values.clone()
    })?;
    debug_assert!(solved, "an empty grid always has a completion");
    Ok(grid)
}

/// `count` puzzles, each a random solved grid with `blanks` random cells
/// cleared. Deterministic per `seed`.
///
/// Blanks are not chosen to keep the solution unique; the recorded grid is
/// the target.
pub fn generate_dataset(
    count: usize,
    side: usize,
    blanks: usize,
    seed: u64,
) -> Result<Vec<PuzzleInstance>> {
    box_size(side)?;
    let cells = side * side;
    if blanks >= cells {
        return Err(SudokuError::TooManyBlanks { blanks, cells });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..cells).collect();
    (0..count)
        .map(|_| {
            let solution = random_solved_grid(side, &mut rng)?;
            let mut givens = solution.clone();
            positions.shuffle(&mut rng);
            for &i in &positions[..blanks] {
                givens[i] = 0;
            }
            PuzzleInstance::new(side, givens, solution)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blanks_keeps_the_solution() {
        for p in generate_dataset(5, 4, 0, 1).unwrap() {
            assert_eq!(p.givens, p.solution);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate_dataset(10, 9, 40, 3).unwrap(),
            generate_dataset(10, 9, 40, 3).unwrap()
        );
        assert_ne!(
            generate_dataset(10, 9, 40, 3).unwrap(),
            generate_dataset(10, 9, 40, 4).unwrap()
        );
    }

    #[test]
    fn blank_count_is_exact_and_bounded() {
        for p in generate_dataset(8, 9, 50, 0).unwrap() {
            assert_eq!(p.blanks(), 50);
        }
        assert!(matches!(
            generate_dataset(1, 4, 16, 0),
            Err(SudokuError::TooManyBlanks { .. })
        ));
    }
}
