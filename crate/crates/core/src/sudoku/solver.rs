use super::{box_size, check_valid, Result, SudokuError};

struct Masks {
    side: usize,
    b: usize,
    rows: Vec<u16>,
    cols: Vec<u16>,
    boxes: Vec<u16>,
}

impl Masks {
    fn new(grid: &[u8], side: usize, b: usize) -> Self {
        let mut m = Self {
            side,
            b,
            rows: vec![0; side],
            cols: vec![0; side],
            boxes: vec![0; side],
        };
        for (i, &v) in grid.iter().enumerate() {
            if v != 0 {
                m.toggle(i, v);
            }
        }
        m
    }

    fn bx(&self, i: usize) -> usize {
        let (r, c) = (i / self.side, i % self.side);
        (r / self.b) * self.b + c / self.b
    }

    fn allows(&self, i: usize, v: u8) -> bool {
        let bit = 1u16 << v;
        (self.rows[i / self.side] | self.cols[i % self.side] | self.boxes[self.bx(i)]) & bit == 0
    }

    fn toggle(&mut self, i: usize, v: u8) {
        let bit = 1u16 << v;
        let bx = self.bx(i);
        self.rows[i / self.side] ^= bit;
        self.cols[i % self.side] ^= bit;
        self.boxes[bx] ^= bit;
    }
}

/// Depth-first fill of the blanks in row-major cell order, trying values in
/// the order produced by `order(cell)`.
pub(crate) fn fill(
    grid: &mut [u8],
    side: usize,
    order: &mut impl FnMut(usize) -> Vec<u8>,
) -> Result<bool> {
    let b = box_size(side)?;
    let mut masks = Masks::new(grid, side, b);
    let blanks: Vec<usize> = (0..grid.len()).filter(|&i| grid[i] == 0).collect();
    Ok(descend(grid, &blanks, &mut masks, order))
}

fn descend(
    grid: &mut [u8],
    blanks: &[usize],
    masks: &mut Masks,
    order: &mut impl FnMut(usize) -> Vec<u8>,
) -> bool {
    let Some((&cell, rest)) = blanks.split_first() else {
        return true;
    };
    for v in order(cell) {
        if masks.allows(cell, v) {
            grid[cell] = v;
            masks.toggle(cell, v);
            if descend(grid, rest, masks, order) {
                return true;
            }
            masks.toggle(cell, v);
            grid[cell] = 0;
        }
    }
    false
}

/// First solution in row-major cell order with ascending values, i.e. the
/// lexicographically smallest completion. `Ok(None)` means unsatisfiable;
/// givens that already conflict are a precondition error.
pub fn solve_backtracking(givens: &[u8], side: usize) -> Result<Option<Vec<u8>>> {
    if !check_valid(givens, side)? {
        return Err(SudokuError::InvalidGivens);
    }
    let mut grid = givens.to_vec();
    let ascending: Vec<u8> = (1..=side as u8).collect();
    if fill(&mut grid, side, &mut |_| ascending.clone())? {
        Ok(Some(grid))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solved_grid_is_returned_unchanged() {
        let g = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];
        assert_eq!(solve_backtracking(&g, 4).unwrap().unwrap(), g.to_vec());
    }

    #[test]
    fn empty_four_by_four_gives_first_grid() {
        let s = solve_backtracking(&[0; 16], 4).unwrap().unwrap();
        assert_eq!(s, vec![1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn contradictions() {
        let mut g = vec![0u8; 81];
        g[0] = 5;
        g[1] = 5;
        assert!(matches!(solve_backtracking(&g, 9), Err(SudokuError::InvalidGivens)));

        // valid as givens, but cell 3 has no candidate left
        let g = [1, 2, 3, 0, 0, 0, 0, 4, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(solve_backtracking(&g, 4).unwrap(), None);
    }

    #[test]
    fn solves_a_classic_nine_by_nine() {
        let puzzle: Vec<u8> =
            "530070000600195000098000060800060003400803001700020006060000280000419005000080079"
                .bytes()
                .map(|b| b - b'0')
                .collect();
        let s = solve_backtracking(&puzzle, 9).unwrap().unwrap();
        let expect: Vec<u8> =
            "534678912672195348198342567859761423426853791713924856961537284287419635345286179"
                .bytes()
                .map(|b| b - b'0')
                .collect();
        assert_eq!(s, expect);
    }
}
