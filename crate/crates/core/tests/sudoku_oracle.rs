mod common;

use std::collections::HashSet;

use common::all_solved_4x4;

use hrm_core::sudoku::{
    augment, check_valid, exact_accuracy, generate_dataset, solve_backtracking, token_accuracy,
    Augmentation, PuzzleInstance,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_enumeration_finds_288_grids() {
    let grids = all_solved_4x4();
    assert_eq!(grids.len(), 288);
    for g in &grids {
        assert!(check_valid(g, 4).unwrap());
    }
    assert_eq!(solve_backtracking(&[0; 16], 4).unwrap().unwrap(), grids[0]);
}

#[test]
fn backtracking_matches_enumeration_on_random_4x4_puzzles() {
    let grids = all_solved_4x4();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let mut givens = grids[rng.random_range(0..grids.len())].clone();
        let blanks = rng.random_range(4..=14);
        let mut pos: Vec<usize> = (0..16).collect();
        pos.shuffle(&mut rng);
        for &i in &pos[..blanks] {
            givens[i] = 0;
        }
        let expect = grids
            .iter()
            .find(|g| g.iter().zip(&givens).all(|(&s, &v)| v == 0 || v == s))
            .unwrap();
        assert_eq!(&solve_backtracking(&givens, 4).unwrap().unwrap(), expect);
    }
}

/// Independent checker for the classic fixture: each unit is a set of 1..=9.
#[test]
fn bundled_fixture_is_solved() {
    let g: Vec<u8> =
        "534678912672195348198342567859761423426853791713924856961537284287419635345286179"
            .bytes()
            .map(|b| b - b'0')
            .collect();
    let full: HashSet<u8> = (1..=9).collect();
    for i in 0..9 {
        let row: HashSet<u8> = (0..9).map(|c| g[i * 9 + c]).collect();
        let col: HashSet<u8> = (0..9).map(|r| g[r * 9 + i]).collect();
        let bx: HashSet<u8> = (0..9).map(|k| g[(i / 3 * 3 + k / 3) * 9 + i % 3 * 3 + k % 3]).collect();
        assert_eq!((&row, &col, &bx), (&full, &full, &full));
    }
    assert!(check_valid(&g, 9).unwrap());
}

#[test]
fn generated_9x9_instances_pass_the_oracle() {
    for p in generate_dataset(200, 9, 45, 99).unwrap() {
        assert!(check_valid(&p.solution, 9).unwrap());
        assert!(p.givens.iter().zip(&p.solution).all(|(&g, &s)| g == 0 || g == s));
        let s = solve_backtracking(&p.givens, 9).unwrap().unwrap();
        assert!(check_valid(&s, 9).unwrap());
        assert!(!s.contains(&0));
    }
}

#[test]
fn resolving_a_solution_is_idempotent() {
    for p in generate_dataset(20, 9, 50, 5).unwrap() {
        let s = solve_backtracking(&p.givens, 9).unwrap().unwrap();
        assert_eq!(solve_backtracking(&s, 9).unwrap().unwrap(), s);
    }
}

#[test]
fn augmentation_preserves_validity_on_1000_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let data = generate_dataset(50, 9, 40, 1).unwrap();
    for i in 0..1000 {
        let a = Augmentation::random(9, &mut rng).unwrap();
        let q = augment(&data[i % data.len()], &a).unwrap();
        assert!(check_valid(&q.solution, 9).unwrap());
        assert!(check_valid(&q.givens, 9).unwrap());
    }
}

fn puzzle_and_two_augs() -> impl Strategy<Value = (u64, u64, u64, usize)> {
    (any::<u64>(), any::<u64>(), any::<u64>(), prop::sample::select(vec![4usize, 9]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn composing_augmentations_equals_composed_permutations((ps, s1, s2, side) in puzzle_and_two_augs()) {
        let p: PuzzleInstance = generate_dataset(1, side, side, ps).unwrap().remove(0);
        let a1 = Augmentation::random(side, &mut ChaCha8Rng::seed_from_u64(s1)).unwrap();
        let a2 = Augmentation::random(side, &mut ChaCha8Rng::seed_from_u64(s2)).unwrap();
        let stepwise = augment(&augment(&p, &a1).unwrap(), &a2).unwrap();
        prop_assert_eq!(augment(&p, &a1.then(&a2)).unwrap(), stepwise);
    }

    #[test]
    fn exact_implies_full_token_accuracy(a in prop::collection::vec(1usize..5, 16), b in prop::collection::vec(1usize..5, 16)) {
        for (x, y) in [(&a, &b), (&a, &a)] {
            if exact_accuracy(x, y).unwrap() == 1.0 {
                prop_assert_eq!(token_accuracy(x, y).unwrap(), 1.0);
            }
        }
    }
}
