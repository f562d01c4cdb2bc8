//! 4×4 Sudoku with 2×2 boxes.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Payload, TaskInstance, Vocab};
use crate::error::{Result, WeftError};

pub const CELLS: usize = 16;

fn peers(cell: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (cell / 4, cell % 4);
    let (br, bc) = (r / 2 * 2, c / 2 * 2);
    (0..CELLS).filter(move |&o| {
        let (orow, ocol) = (o / 4, o % 4);
        o != cell && (orow == r || ocol == c || (orow / 2 * 2 == br && ocol / 2 * 2 == bc))
    })
}

fn allowed(grid: &[u8], cell: usize, d: u8) -> bool {
    peers(cell).all(|p| grid[p] != d)
}

/// Counts completions of `grid` (0 = blank), stopping at `limit`.
pub fn count_solutions(grid: &[u8], limit: usize) -> usize {
    let mut g = grid.to_vec();
    let mut found = 0;
    fn rec(g: &mut Vec<u8>, found: &mut usize, limit: usize) {
        let Some(cell) = g.iter().position(|&x| x == 0) else {
            *found += 1;
            return;
        };
        for d in 1..=4 {
            if allowed(g, cell, d) {
                g[cell] = d;
                rec(g, found, limit);
                g[cell] = 0;
                if *found >= limit {
                    return;
                }
            }
        }
    }
    if grid.len() != CELLS || grid.iter().any(|&x| x > 4) {
        return 0;
    }
    if (0..CELLS).any(|c| grid[c] != 0 && !allowed(grid, c, grid[c])) {
        return 0;
    }
    rec(&mut g, &mut found, limit);
    found
}

/// First completion in digit order, if any.
pub fn solve(grid: &[u8]) -> Option<Vec<u8>> {
    fn rec(g: &mut Vec<u8>) -> bool {
        let Some(cell) = g.iter().position(|&x| x == 0) else { return true };
        for d in 1..=4 {
            if allowed(g, cell, d) {
                g[cell] = d;
                if rec(g) {
                    return true;
                }
            }
        }
        g[cell] = 0;
        false
    }
    if count_solutions(grid, 1) == 0 {
        return None;
    }
    let mut g = grid.to_vec();
    rec(&mut g).then_some(g)
}

fn random_solution<R: Rng + ?Sized>(rng: &mut R) -> Vec<u8> {
    fn rec<R: Rng + ?Sized>(g: &mut Vec<u8>, rng: &mut R) -> bool {
        let Some(cell) = g.iter().position(|&x| x == 0) else { return true };
        let mut digits = [1u8, 2, 3, 4];
        digits.shuffle(rng);
        for d in digits {
            if allowed(g, cell, d) {
                g[cell] = d;
                if rec(g, rng) {
                    return true;
                }
            }
        }
        g[cell] = 0;
        false
    }
    let mut g = vec![0u8; CELLS];
    rec(&mut g, rng);
    g
}

fn encode_grid(grid: &[u8]) -> String {
    grid.iter().map(|&d| if d == 0 { '_' } else { (b'0' + d) as char }).collect()
}

pub fn instance(puzzle: Vec<u8>, solution: Vec<u8>) -> Result<TaskInstance> {
    let v = Vocab;
    let prompt_ids = v.encode(&format!("{}=", encode_grid(&puzzle)))?;
    let answer_ids = v.encode(&encode_grid(&solution))?;
    Ok(TaskInstance { prompt_ids, answer_ids, payload: Payload::Sudoku4 { puzzle, solution } })
}

/// A puzzle with exactly `n_givens` clues and a unique completion.
pub fn gen_sudoku4<R: Rng + ?Sized>(rng: &mut R, n_givens: usize) -> Result<TaskInstance> {
    if !(4..=12).contains(&n_givens) {
        return Err(WeftError::InvalidArgument(format!("n_givens {n_givens} outside 4..=12")));
    }
    loop {
        let solution = random_solution(rng);
        let mut puzzle = solution.clone();
        let mut order: Vec<usize> = (0..CELLS).collect();
        order.shuffle(rng);
        let mut givens = CELLS;
        for cell in order {
            if givens == n_givens {
                break;
            }
            let keep = puzzle[cell];
            puzzle[cell] = 0;
            if count_solutions(&puzzle, 2) == 1 {
                givens -= 1;
            } else {
                puzzle[cell] = keep;
            }
        }
        if givens == n_givens {
            return instance(puzzle, solution);
        }
    }
}

/// Accepts a complete, valid grid consistent with the clues.
pub fn verify(puzzle: &[u8], answer: &[u32]) -> bool {
    if answer.len() != CELLS || puzzle.len() != CELLS {
        return false;
    }
    let mut grid = Vec::with_capacity(CELLS);
    for &t in answer {
        if !(1..=4).contains(&t) {
            return false;
        }
        grid.push(t as u8);
    }
    if puzzle.iter().zip(&grid).any(|(&p, &g)| p != 0 && p != g) {
        return false;
    }
    (0..CELLS).all(|c| allowed(&grid, c, grid[c]))
}

/// Chance of solving by guessing every blank uniformly over four digits.
pub fn random_guess_rate(puzzle: &[u8]) -> f64 {
    0.25f64.powi(puzzle.iter().filter(|&&x| x == 0).count() as i32)
}
