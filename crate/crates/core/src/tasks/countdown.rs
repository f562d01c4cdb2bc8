//! Three-operand Countdown: reach a target with `+`, `-` and `*`.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{pad_to, strip_padding, Payload, TaskInstance, Vocab};
use crate::error::Result;

/// Longest expression is `20*20*20`.
pub const ANSWER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Num(i64),
    Op(u8),
}

fn lex(s: &str) -> Option<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let lit = &s[start..i];
            if lit.len() > 1 && lit.starts_with('0') || lit.len() > 6 {
                return None;
            }
            out.push(Tok::Num(lit.parse().ok()?));
        } else if matches!(c, b'+' | b'-' | b'*') {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Evaluates `n (op n)*` with `*` binding tighter than `+`/`-`, left to right.
/// Returns the value and the literals in order of appearance.
pub fn evaluate(expr: &str) -> Option<(i64, Vec<i64>)> {
    let toks = lex(expr)?;
    if toks.len() % 2 == 0 {
        return None;
    }
    let mut nums = Vec::new();
    let mut sum = 0i64;
    let mut sign = 1i64;
    let mut term: Option<i64> = None;
    for (k, tok) in toks.iter().enumerate() {
        match (k % 2, *tok) {
            (0, Tok::Num(n)) => {
                nums.push(n);
                term = Some(match term {
                    Some(t) => t.checked_mul(n)?,
                    None => n,
                });
            }
            (1, Tok::Op(b'*')) => {}
            (1, Tok::Op(op)) => {
                sum = sum.checked_add(sign * term.take()?)?;
                sign = if op == b'-' { -1 } else { 1 };
            }
            _ => return None,
        }
    }
    Some((sum.checked_add(sign * term?)?, nums))
}

/// Accepts an expression reaching `target` that uses each operand at most
/// once.
pub fn verify(operands: &[u32], target: i64, answer: &[u32]) -> bool {
    let Some(body) = strip_padding(answer) else { return false };
    let Ok(text) = Vocab.decode(body) else { return false };
    let Some((value, nums)) = evaluate(&text) else { return false };
    if value != target {
        return false;
    }
    let mut pool: Vec<i64> = operands.iter().map(|&o| o as i64).collect();
    for n in nums {
        match pool.iter().position(|&p| p == n) {
            Some(i) => {
                pool.swap_remove(i);
            }
            None => return false,
        }
    }
    true
}

pub fn instance(operands: [u32; 3], target: i64, expr: &str) -> Result<TaskInstance> {
    let v = Vocab;
    let prompt = format!("{},{},{}>{}=", operands[0], operands[1], operands[2], target);
    Ok(TaskInstance {
        prompt_ids: v.encode(&prompt)?,
        answer_ids: pad_to(v.encode(expr)?, ANSWER_LEN),
        payload: Payload::Countdown { operands: operands.to_vec(), target },
    })
}

/// Three operands in `1..=20` and a nonnegative target reached by a random
/// two-operator expression over all of them.
pub fn gen_countdown_mini<R: Rng + ?Sized>(rng: &mut R) -> Result<TaskInstance> {
    loop {
        let operands = [rng.random_range(1..=20u32), rng.random_range(1..=20), rng.random_range(1..=20)];
        let mut order = operands;
        order.shuffle(rng);
        let ops = [b"+-*"[rng.random_range(0..3)] as char, b"+-*"[rng.random_range(0..3)] as char];
        let expr = format!("{}{}{}{}{}", order[0], ops[0], order[1], ops[1], order[2]);
        let (target, _) = evaluate(&expr).expect("well-formed expression");
        if target >= 0 {
            return instance(operands, target, &expr);
        }
    }
}
