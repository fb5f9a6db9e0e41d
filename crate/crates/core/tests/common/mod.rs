#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LETTERS: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ";

/// Distinct templated DATIS-style sentences.
pub fn templated_sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let letter = LETTERS[rng.random_range(0..LETTERS.len())] as char;
        let rwy = rng.random_range(1..=36);
        let side = ["L", "R", "C", ""][rng.random_range(0..4)];
        let s = match rng.random_range(0..6) {
            0 => format!("RWY {rwy}{side} CLOSED."),
            1 => format!("TWY {letter} CLOSED."),
            2 => format!("WIND {:03} AT {}.", rng.random_range(0..36) * 10, rng.random_range(2..30)),
            3 => format!("ALTIMETER {}.", rng.random_range(2950..3050)),
            4 => format!("ATIS INFO {letter} {:02}{:02}Z.", rng.random_range(0..24), rng.random_range(0..6) * 10),
            _ => format!("LANDING AND DEPARTING RWY {rwy}{side}."),
        };
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Reference cosine: dot product over the product of the two norms.
pub fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    dot / (nu * nv)
}
