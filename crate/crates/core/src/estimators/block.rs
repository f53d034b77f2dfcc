//! Pattern-grouped accumulation of GLS normal equations.
//!
//! Mixed-model likelihood evaluations reduce to per-subject quadratic forms
//! `[X_i | y_i]' W_i [X_i | y_i]` where `W_i` is the inverse within-subject
//! correlation matrix. Monotone missingness leaves only a handful of distinct
//! visit patterns, so `W` is factored once per pattern and applied to every
//! subject in the group with tight manual loops (no per-subject allocation).

use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

/// Design block for one subject: `n` observed rows over `p+1` columns
/// (design columns then the response), flattened row-major.
#[derive(Debug, Clone)]
pub struct SubjectBlock {
    pub pattern: u32,
    pub n: usize,
    pub xy: Vec<f64>,
}

/// Interns visit patterns (as grid-index vectors) to dense ids.
#[derive(Debug, Default)]
pub struct PatternTable {
    keys: Vec<Vec<u16>>,
    map: HashMap<Vec<u16>, u32>,
}

impl PatternTable {
    pub fn intern(&mut self, key: Vec<u16>) -> u32 {
        if let Some(&id) = self.map.get(&key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.clone());
        self.map.insert(key, id);
        id
    }

    pub fn keys(&self) -> &[Vec<u16>] {
        &self.keys
    }
}

/// Accumulated normal equations: `a = X'WX`, `b = X'Wy`, `q = y'Wy`, plus the
/// summed log-determinant of the per-subject correlation matrices.
pub struct Accumulated {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: f64,
    pub logdet: f64,
}

/// Accumulate over all subjects given one `(W, log|R|)` pair per pattern.
/// Inner loops run on flat slices and skip zero design entries (cell
/// indicators make most of each row zero).
pub fn accumulate(
    blocks: &[SubjectBlock],
    per_pattern: &[(DMatrix<f64>, f64)],
    p: usize,
) -> Accumulated {
    let m = p + 1;
    let mut g = vec![0.0f64; m * m];
    let mut scratch: Vec<f64> = Vec::new();
    // flatten each pattern's W row-major once
    let flat: Vec<(usize, Vec<f64>)> = per_pattern
        .iter()
        .map(|(w, _)| {
            let n = w.nrows();
            let mut v = vec![0.0f64; n * n];
            for a in 0..n {
                for b in 0..n {
                    v[a * n + b] = w[(a, b)];
                }
            }
            (n, v)
        })
        .collect();
    let mut logdet = 0.0;
    for blk in blocks {
        let (n, w) = &flat[blk.pattern as usize];
        let n = *n;
        logdet += per_pattern[blk.pattern as usize].1;
        scratch.clear();
        scratch.resize(n * m, 0.0);
        // t = W * xy, accumulated as axpy over xy rows
        for a in 0..n {
            let ta = &mut scratch[a * m..(a + 1) * m];
            for b2 in 0..n {
                let w_ab = w[a * n + b2];
                if w_ab == 0.0 {
                    continue;
                }
                let row = &blk.xy[b2 * m..(b2 + 1) * m];
                for (tc, &rc) in ta.iter_mut().zip(row) {
                    *tc += w_ab * rc;
                }
            }
        }
        // g += xy' * t (upper triangle), skipping zero design entries
        for a in 0..n {
            let row = &blk.xy[a * m..(a + 1) * m];
            let ta = &scratch[a * m..(a + 1) * m];
            for (r, &xar) in row.iter().enumerate() {
                if xar == 0.0 {
                    continue;
                }
                let gr = &mut g[r * m..(r + 1) * m];
                for c in r..m {
                    gr[c] += xar * ta[c];
                }
            }
        }
    }
    let mut a = DMatrix::zeros(p, p);
    for r in 0..p {
        for c in r..p {
            a[(r, c)] = g[r * m + c];
            a[(c, r)] = g[r * m + c];
        }
    }
    let b = DVector::from_fn(p, |r, _| g[r * m + p]);
    let q = g[p * m + p];
    Accumulated { a, b, q, logdet }
}
