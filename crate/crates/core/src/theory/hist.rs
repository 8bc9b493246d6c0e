use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    theory_forward, theory_forward_compressed, CompressionPolicy, Evaluator, TheoryBlock, TheoryCheckResult, TheoryHead, TheoryTransformer,
};
use crate::error::{Error, Result};

/// Empirical symbol distribution.
pub fn hist(tokens: &[usize], m_alb: usize) -> DVector<f64> {
    let mut h = DVector::zeros(m_alb);
    for &a in tokens {
        h[a] += 1.0;
    }
    h / tokens.len() as f64
}

fn unit(m: usize, a: usize) -> DVector<f64> {
    let mut e = DVector::zeros(m);
    e[a] = 1.0;
    e
}

fn concat(parts: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// Uniform-attention head: zero query and key maps.
fn uniform_head(d_in: usize, wv: DMatrix<f64>) -> TheoryHead {
    TheoryHead { wq: DMatrix::zeros(d_in, 1), wk: DMatrix::zeros(d_in, 1), wv }
}

fn check_dims(m_alb: usize, n_max: usize) -> Result<()> {
    if m_alb < 2 || n_max < 2 {
        return Err(Error::Precondition(format!("need an alphabet of at least 2 and length at least 2, got {m_alb} and {n_max}")));
    }
    Ok(())
}

/// `te(a, i) = [e_a; 0]`; an inert first block; a second block that
/// averages the symbol half into the other half; a final map reading it out.
pub fn build_hist_simple(m_alb: usize, n_max: usize) -> Result<TheoryTransformer> {
    check_dims(m_alb, n_max)?;
    let (m, d) = (m_alb, 2 * m_alb);
    let zero = DVector::zeros(m);
    let te = (0..m).map(|a| vec![concat(&[&unit(m, a), &zero]); n_max]).collect();
    let inert = TheoryBlock { heads: vec![uniform_head(d, DMatrix::zeros(d, d))], wo: DMatrix::zeros(d, d), ffn: Evaluator::identity() };
    let mut shift = DMatrix::zeros(d, d);
    for i in 0..m {
        shift[(i, m + i)] = 1.0;
    }
    let average = TheoryBlock {
        heads: vec![uniform_head(d, shift)],
        wo: DMatrix::identity(d, d),
        ffn: Evaluator::new("second half", move |x| Ok(x[m..].to_vec())),
    };
    Ok(TheoryTransformer { m_alb, n_max, te, blocks: vec![inert, average] })
}

/// `ℓ` zero-key pairs for the averaging layer whose values sum to `s` in
/// the averaged half; the inert layer's pairs are dropped.
pub struct Prop1Policy {
    pub s: DVector<f64>,
    pub slots: usize,
}

impl CompressionPolicy for Prop1Policy {
    fn compress(&self, layer: usize, _: usize, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if layer == 0 {
            return Ok((DMatrix::zeros(0, k.ncols()), DMatrix::zeros(0, v.ncols())));
        }
        let m = self.s.len();
        let l = self.slots;
        let row = concat(&[&DVector::zeros(m), &(&self.s / l as f64)]);
        Ok((DMatrix::zeros(l, k.ncols()), DMatrix::from_fn(l, v.ncols(), |_, c| row[c])))
    }
}

/// `C = (N − 1 − ℓ) / (2 N (ℓ + 1))`.
pub fn prop1_bound(n_max: usize, budget: usize) -> f64 {
    (n_max as f64 - 1.0 - budget as f64) / (2.0 * n_max as f64 * (budget as f64 + 1.0))
}

/// Searches candidate compact value-sums for the simple construction with
/// a prefix of length `N − 1` and single-token suffixes `(1)` and `(2)`.
/// Passes when every candidate has worst-case error at least the bound.
pub fn verify_prop1(m_alb: usize, n_max: usize, budget: usize) -> Result<TheoryCheckResult> {
    let tt = build_hist_simple(m_alb, n_max)?;
    let n = n_max - 1;
    if budget >= n {
        return Err(Error::Precondition(format!("budget {budget} does not compress a {n}-token prefix")));
    }
    if budget == 0 {
        return Err(Error::Precondition("the averaging layer needs at least one compact slot".into()));
    }
    let prefix: Vec<usize> = (0..n).map(|i| i % m_alb).collect();
    let counts = hist(&prefix, m_alb) * n as f64;
    let (l, nf) = (budget as f64, n as f64);
    let bound = prop1_bound(n_max, budget);
    let fulls: Vec<DVector<f64>> =
        [0usize, 1].iter().map(|&b| theory_forward(&tt, &[prefix.clone(), vec![b]].concat())).collect::<Result<_>>()?;
    let worst = |s: DVector<f64>| -> Result<f64> {
        let policy = Prop1Policy { s, slots: budget };
        let mut w: f64 = 0.0;
        for (b, full) in fulls.iter().enumerate() {
            let got = theory_forward_compressed(&tt, &policy, &prefix, &[b])?;
            w = w.max((got - full).norm());
        }
        Ok(w)
    };
    // Coordinates beyond the first two are set to their exact rescaled
    // counts; the first two are searched.
    let base = |s1: f64, s2: f64| -> DVector<f64> {
        let mut s = &counts * ((l + 1.0) / (nf + 1.0));
        s[0] = s1;
        s[1] = s2;
        s
    };
    let mid = |c: f64| (l + 1.0) * (c / (nf + 1.0) - (nf - l) / (2.0 * (nf + 1.0) * (l + 1.0)));
    let mut best = worst(base(mid(counts[0]), mid(counts[1])))?;
    let mut cases = 1;
    let span = l + 1.0;
    let steps = 120;
    for i in 0..=steps {
        for j in 0..=steps {
            let s1 = -0.5 * span + 2.0 * span * i as f64 / steps as f64;
            let s2 = -0.5 * span + 2.0 * span * j as f64 / steps as f64;
            best = best.min(worst(base(s1, s2))?);
            cases += 1;
        }
    }
    Ok(TheoryCheckResult {
        name: format!("prop1 m={m_alb} N={n_max} budget={budget}"),
        bound: Some(bound),
        achieved: best,
        epsilon: None,
        cases,
        pass: best >= bound,
    })
}

/// Positional codes: distinct points on the unit circle in the first two
/// coordinates, so all share one norm and decode by nearest match.
fn positions(m: usize, n_max: usize) -> Vec<DVector<f64>> {
    (1..=n_max)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / (n_max as f64 + 1.0);
            let mut p = DVector::zeros(m);
            p[0] = t.cos();
            p[1] = t.sin();
            p
        })
        .collect()
}

fn nearest(table: &[DVector<f64>], x: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in table.iter().enumerate() {
        let d = (p - x).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Keeps one zero-key pair holding the unnormalized prefix histogram and
/// the prefix-length code; the inert layer's pairs are dropped.
#[derive(Clone, Debug)]
pub struct HistCompressionPolicy {
    m: usize,
    pos: Vec<DVector<f64>>,
}

impl HistCompressionPolicy {
    pub fn budget(&self, _n: usize) -> usize {
        1
    }
}

impl CompressionPolicy for HistCompressionPolicy {
    fn compress(&self, layer: usize, _: usize, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if layer == 0 {
            return Ok((DMatrix::zeros(0, k.ncols()), DMatrix::zeros(0, v.ncols())));
        }
        let (m, n) = (self.m, v.nrows());
        if n == 0 || n > self.pos.len() {
            return Err(Error::Precondition(format!("cannot summarize a {n}-row prefix cache")));
        }
        let mut row = DVector::zeros(4 * m);
        for r in 0..n {
            for c in 0..m {
                row[c] += v[(r, c)];
            }
        }
        row.rows_mut(3 * m, m).copy_from(&self.pos[n - 1]);
        Ok((DMatrix::zeros(1, k.ncols()), DMatrix::from_row_slice(1, 4 * m, row.as_slice())))
    }
}

/// Representation blocks `[symbol; position; average; aux]`. The final map
/// rescales the average when the aux block carries a prefix-length code.
pub fn build_hist_compressible(m_alb: usize, n_max: usize) -> Result<(TheoryTransformer, HistCompressionPolicy)> {
    check_dims(m_alb, n_max)?;
    let m = m_alb;
    let d = 4 * m;
    let pos = positions(m, n_max);
    let sym: Vec<DVector<f64>> = (0..m).map(|a| unit(m, a) * 4.0).collect();
    let te: Vec<Vec<DVector<f64>>> = sym.iter().map(|u| pos.iter().map(|p| u + p).collect()).collect();

    let table: Vec<(usize, usize, DVector<f64>)> =
        te.iter().enumerate().flat_map(|(a, row)| row.iter().enumerate().map(move |(i, x)| (a, i, x.clone()))).collect();
    let pos1 = pos.clone();
    let rho1 = Evaluator::new("rho1", move |x| {
        let x = DVector::from_column_slice(x);
        let (a, i, _) = table.iter().min_by(|p, q| (&p.2 - &x).norm().total_cmp(&(&q.2 - &x).norm())).expect("non-empty table");
        let z = DVector::zeros(m);
        Ok(concat(&[&unit(m, *a), &pos1[*i], &z, &z]).as_slice().to_vec())
    });
    let first = TheoryBlock { heads: vec![uniform_head(m, DMatrix::zeros(m, m))], wo: DMatrix::zeros(m, m), ffn: rho1 };

    // Values keep the symbol block; the output map sends it to the average
    // block and passes the aux block through.
    let mut wv = DMatrix::zeros(d, d);
    let mut wo = DMatrix::zeros(d, d);
    for i in 0..m {
        wv[(i, i)] = 1.0;
        wo[(i, 2 * m + i)] = 1.0;
        wo[(3 * m + i, 3 * m + i)] = 1.0;
    }
    let pos2 = pos.clone();
    let rho2 = Evaluator::new("rho2", move |v| {
        let (x, y, z) = (DVector::from_column_slice(&v[m..2 * m]), &v[2 * m..3 * m], DVector::from_column_slice(&v[3 * m..]));
        let zn = z.norm();
        if zn < 1e-12 {
            return Ok(y.to_vec());
        }
        let kp1 = (1.0 / zn).round();
        if (kp1 * zn - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!("aux block of norm {zn} is not a scaled position code")));
        }
        let i = nearest(&pos2, &(z * kp1)) + 1;
        let j = nearest(&pos2, &x) + 1;
        if i > j {
            return Err(Error::Numerical(format!("prefix length {i} exceeds sequence length {j}")));
        }
        let f = (j - i + 1) as f64 / j as f64;
        Ok(y.iter().map(|v| f * v).collect())
    });
    let second = TheoryBlock { heads: vec![uniform_head(d, wv)], wo, ffn: rho2 };
    let tt = TheoryTransformer { m_alb, n_max, te, blocks: vec![first, second] };
    Ok((tt, HistCompressionPolicy { m, pos }))
}

fn all_sequences(m: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out.into_iter().flat_map(|s| (0..m).map(move |a| [s.clone(), vec![a]].concat())).collect();
    }
    out
}

/// Max output gap between full and single-slot compressed passes over
/// `trials` random pairs and every pair of total length at most
/// `exhaustive_len`. Also folds in the gap between the full pass and the
/// true histogram.
pub fn verify_prop2(
    m_alb: usize,
    n_max: usize,
    epsilon: f64,
    trials: usize,
    exhaustive_len: usize,
    seed: u64,
) -> Result<TheoryCheckResult> {
    if !(epsilon > 0.0) {
        return Err(Error::Precondition(format!("epsilon {epsilon} must be positive")));
    }
    let (tt, policy) = build_hist_compressible(m_alb, n_max)?;
    let mut pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let total = rng.random_range(2..=n_max);
        let n = rng.random_range(1..total);
        let seq: Vec<usize> = (0..total).map(|_| rng.random_range(0..m_alb)).collect();
        pairs.push((seq[..n].to_vec(), seq[n..].to_vec()));
    }
    for total in 2..=exhaustive_len.min(n_max) {
        for seq in all_sequences(m_alb, total) {
            for n in 1..total {
                pairs.push((seq[..n].to_vec(), seq[n..].to_vec()));
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (a, b) in &pairs {
        let full_tokens = [a.clone(), b.clone()].concat();
        let full = theory_forward(&tt, &full_tokens)?;
        let comp = theory_forward_compressed(&tt, &policy, a, b)?;
        worst = worst.max((&full - comp).norm()).max((full - hist(&full_tokens, m_alb)).norm());
    }
    Ok(TheoryCheckResult {
        name: format!("prop2 m={m_alb} N={n_max}"),
        bound: None,
        achieved: worst,
        epsilon: Some(epsilon),
        cases: pairs.len(),
        pass: worst < epsilon,
    })
}
