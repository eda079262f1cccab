//! Frozen predictors with hand-set or seeded probability tables. They
//! stand in for trained weights wherever decoding logic is checked
//! against hand computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::easyfirst::{DecodeState, ParallelPredictor, ProbTable};
use crate::teacher::AutoregressivePredictor;
use crate::vocab::{Vocab, EOS, NUM_CLASSES};
use crate::{Error, Result};

/// Row putting `p` on `class` and `(1 − p)/36` on every other class.
pub fn peaked_row(class: usize, p: f64) -> Vec<f64> {
    let rest = (1.0 - p) / (NUM_CLASSES - 1) as f64;
    (0..NUM_CLASSES)
        .map(|c| if c == class { p } else { rest })
        .collect()
}

/// Table from `(class, p)` rows.
pub fn peaked_table(rows: &[(usize, f64)]) -> ProbTable {
    let data = rows.iter().flat_map(|&(c, p)| peaked_row(c, p)).collect();
    ProbTable::new(rows.len(), data).expect("rows are 37 wide")
}

/// Parses `"c:0.9 a:0.4 #:0.7"` (`#` = EOS) into a table.
pub fn table_from_spec(spec: &str) -> Result<ProbTable> {
    let rows = spec
        .split_whitespace()
        .map(|cell| {
            let (sym, p) = cell
                .split_once(':')
                .ok_or_else(|| Error::config(format!("bad cell {cell:?}")))?;
            let class = if sym == "#" {
                EOS
            } else {
                let c = sym
                    .chars()
                    .next()
                    .ok_or_else(|| Error::config("empty symbol"))?;
                Vocab
                    .index(c)
                    .ok_or_else(|| Error::config(format!("bad symbol {sym:?}")))?
            };
            let p: f64 = p
                .parse()
                .map_err(|_| Error::config(format!("bad probability {p:?}")))?;
            Ok((class, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(peaked_table(&rows))
}

/// Returns `tables[i]` on the call for iteration `i + 1`, whatever the state.
#[derive(Debug, Clone)]
pub struct ScriptedPredictor {
    pub tables: Vec<ProbTable>,
}

impl ParallelPredictor for ScriptedPredictor {
    fn predict(&mut self, _samples: &[usize], states: &[&DecodeState]) -> Result<Vec<ProbTable>> {
        states
            .iter()
            .map(|s| {
                self.tables.get(s.iteration).cloned().ok_or_else(|| {
                    Error::config(format!(
                        "no scripted table for iteration {}",
                        s.iteration + 1
                    ))
                })
            })
            .collect()
    }
}

/// Puts a position-dependent confidence on the right symbol of every
/// position: a perfect recognizer with a nontrivial easy-first order.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    /// Label tokens padded with EOS to the decode length.
    pub targets: Vec<Vec<usize>>,
}

impl OraclePredictor {
    pub fn new(labels: &[&str], len: usize) -> Result<Self> {
        let targets = labels
            .iter()
            .map(|l| {
                let mut t = Vocab.encode(l)?;
                t.resize(len, EOS);
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok(OraclePredictor { targets })
    }
}

impl ParallelPredictor for OraclePredictor {
    fn predict(&mut self, samples: &[usize], _states: &[&DecodeState]) -> Result<Vec<ProbTable>> {
        Ok(samples
            .iter()
            .map(|&b| {
                let rows: Vec<(usize, f64)> = self.targets[b]
                    .iter()
                    .enumerate()
                    .map(|(t, &c)| (c, 0.55 + 0.04 * ((t * 7) % 10) as f64))
                    .collect();
                peaked_table(&rows)
            })
            .collect())
    }
}

/// Seeded random tables that depend on the sample, the iteration and the
/// current tokens. EOS mass is boosted on a random suffix so early EOS
/// commits occur.
#[derive(Debug, Clone)]
pub struct RandomPredictor {
    pub seed: u64,
}

impl ParallelPredictor for RandomPredictor {
    fn predict(&mut self, samples: &[usize], states: &[&DecodeState]) -> Result<Vec<ProbTable>> {
        Ok(samples
            .iter()
            .zip(states)
            .map(|(&b, s)| {
                let mut h = self.seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                for &t in &s.tokens {
                    h = h.rotate_left(7) ^ t as u64;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h ^ s.iteration as u64);
                let eos_from = rng.gen_range(0..=s.len());
                let mut data = Vec::with_capacity(s.len() * NUM_CLASSES);
                for t in 0..s.len() {
                    let mut row: Vec<f64> =
                        (0..NUM_CLASSES).map(|_| rng.gen::<f64>().powi(4)).collect();
                    if t >= eos_from {
                        row[EOS] += 2.0 * rng.gen::<f64>();
                    }
                    // Occasional exact ties exercise the index tie-break.
                    if rng.gen_bool(0.1) {
                        row.iter_mut().for_each(|v| *v = 1.0);
                    }
                    let z: f64 = row.iter().sum();
                    data.extend(row.iter().map(|v| v / z));
                }
                ProbTable::new(s.len(), data).expect("shape")
            })
            .collect())
    }
}

/// Next-symbol rows indexed by prefix length − 1.
#[derive(Debug, Clone)]
pub struct ScriptedTeacher {
    pub rows: Vec<Vec<f64>>,
}

impl AutoregressivePredictor for ScriptedTeacher {
    fn next(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.rows.get(prefix.len() - 1).cloned().ok_or_else(|| {
            Error::config(format!(
                "no scripted row for prefix length {}",
                prefix.len()
            ))
        })
    }
}
