//! Unsupervised alignment of two embedding spaces: normalization, seed
//! pairs, orthogonal Procrustes, CSLS retrieval, and self-learning.
//!
//! Maps act on row vectors: a source row `x` maps to `x · W`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::subword::Vocab;

pub const DEFAULT_NEIGHBORHOOD: usize = 10;

/// Row unit-norm, per-dimension mean centering, then row unit-norm again.
pub fn normalize_embeddings(e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let d = e.dim();
    let n = e.rows();
    let mut data = e.data().to_vec();
    unit_rows(&mut data, d, e.vocab())?;
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    for row in data.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    unit_rows(&mut data, d, e.vocab())?;
    EmbeddingMatrix::new(e.vocab().clone(), d, data)
}

fn unit_rows(data: &mut [f64], d: usize, vocab: &Vocab) -> Result<()> {
    for (i, row) in data.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "row `{}` has zero norm",
                vocab.token(i as u32).unwrap_or("?")
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// Training pairs for a map, as (source row id, target row id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedPairs {
    pairs: Vec<(u32, u32)>,
}

impl SeedPairs {
    /// Pairs sorted by source id; duplicate source ids are rejected.
    pub fn new(mut pairs: Vec<(u32, u32)>) -> Result<Self> {
        pairs.sort_unstable();
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument("seed pairs repeat a source token".into()));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads `src_token<TAB>tgt_token` lines; unknown tokens are skipped.
    pub fn load(path: impl AsRef<Path>, src: &Vocab, tgt: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `src<TAB>tgt`"))?;
            if let (Some(s), Some(t)) = (src.id(s), tgt.id(t)) {
                if seen.insert(s) {
                    pairs.push((s, t));
                }
            }
        }
        Self::new(pairs)
    }
}

/// Pairs every regular token spelled identically in both vocabularies.
pub fn seed_pairs_identical(src: &Vocab, tgt: &Vocab) -> Result<SeedPairs> {
    let pairs: Vec<(u32, u32)> = src
        .regular_ids()
        .filter_map(|s| {
            let t = tgt.id(src.token(s)?)?;
            tgt.is_regular(t).then_some((s, t))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty(
            "vocabularies share no identical tokens; supply a seed-pair file".into(),
        ));
    }
    SeedPairs::new(pairs)
}

/// Grows a small seed dictionary before self-learning. Every regular token
/// is described by its cosines to the seed tokens of its own space; because
/// the seeds are the same words on both sides, these signatures are
/// comparable across spaces without any map. Mutual best matches between
/// signatures (under `retrieval`) are added to the seeds.
pub fn expand_seeds(x: &EmbeddingMatrix, y: &EmbeddingMatrix, seeds: &SeedPairs, retrieval: Retrieval) -> Result<SeedPairs> {
    let n = seeds.len();
    if n < 2 {
        return Ok(seeds.clone());
    }
    let signature = |e: &EmbeddingMatrix, anchors: Vec<u32>| -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(e.rows() * n);
        for r in 0..e.rows() {
            data.extend(anchors.iter().map(|&a| dot(e.row(r), e.row(a as usize))));
        }
        // special rows are never matched; give them a harmless constant
        for v in data[..crate::subword::NUM_SPECIALS * n].iter_mut() {
            *v = 1.0;
        }
        normalize_embeddings(&EmbeddingMatrix::new(e.vocab().clone(), n, data)?)
    };
    let sx = signature(x, seeds.pairs().iter().map(|p| p.0).collect())?;
    let sy = signature(y, seeds.pairs().iter().map(|p| p.1).collect())?;
    let retrieval = match retrieval {
        Retrieval::Csls(k) => Retrieval::Csls(k.min(sx.vocab().regular_ids().len().min(sy.vocab().regular_ids().len()) - 1).max(1)),
        r => r,
    };
    let table = score_table(&sx, &sy, regular_rows(&sx), regular_rows(&sy), retrieval, 1)?;
    let src_seeded: std::collections::HashSet<u32> = seeds.pairs().iter().map(|p| p.0).collect();
    let tgt_seeded: std::collections::HashSet<u32> = seeds.pairs().iter().map(|p| p.1).collect();
    let mut pairs = seeds.pairs().to_vec();
    pairs.extend(
        mutual_best(&table)
            .into_iter()
            .filter(|(s, t)| !src_seeded.contains(s) && !tgt_seeded.contains(t)),
    );
    SeedPairs::new(pairs)
}

/// A `d x d` orthogonal matrix applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMap {
    dim: usize,
    w: Vec<f64>,
}

impl OrthogonalMap {
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self { dim, w }
    }

    pub fn from_rows(dim: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != dim * dim {
            return Err(Error::Shape {
                expected: format!("{dim}x{dim}"),
                found: format!("{} values", w.len()),
            });
        }
        Ok(Self { dim, w })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    /// Frobenius norm of `WᵀW − I`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim;
        let mut err = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| self.w[k * d + i] * self.w[k * d + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err += (dot - target).powi(2);
            }
        }
        err.sqrt()
    }

    pub fn apply(&self, e: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let d = self.dim;
        if e.dim() != d {
            return Err(Error::Shape {
                expected: format!("dimension {d}"),
                found: format!("dimension {}", e.dim()),
            });
        }
        let mut out = vec![0.0; e.rows() * d];
        for (r, row) in e.data().chunks(d).enumerate() {
            for (k, &x) in row.iter().enumerate() {
                let wrow = &self.w[k * d..(k + 1) * d];
                for (o, w) in out[r * d..(r + 1) * d].iter_mut().zip(wrow) {
                    *o += x * w;
                }
            }
        }
        EmbeddingMatrix::new(e.vocab().clone(), d, out)
    }

    /// Same layout as embedding files: `d d` header, rows labelled by index.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{} {}\n", self.dim, self.dim);
        for (i, row) in self.w.chunks(self.dim).enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = crate::embedding::read_embedding_text(path)?;
        if raw.tokens.len() != raw.dim {
            return Err(Error::Shape {
                expected: format!("{0}x{0}", raw.dim),
                found: format!("{}x{}", raw.tokens.len(), raw.dim),
            });
        }
        Self::from_rows(raw.dim, raw.values)
    }
}

/// Orthogonal `W` maximizing `Σ cos(xᵢ·W, yᵢ)` over the pairs: with
/// `XₚᵀYₚ = U S Vᵀ`, `W = U Vᵀ`.
pub fn procrustes(x: &EmbeddingMatrix, y: &EmbeddingMatrix, pairs: &SeedPairs) -> Result<OrthogonalMap> {
    let d = x.dim();
    if y.dim() != d {
        return Err(Error::Shape {
            expected: format!("dimension {d}"),
            found: format!("dimension {}", y.dim()),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("procrustes needs at least one pair".into()));
    }
    if pairs.len() < d {
        log::warn!("procrustes with {} pairs in dimension {d}; the map is under-determined", pairs.len());
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    for &(s, t) in pairs.pairs() {
        let (xs, yt) = (x.row(s as usize), y.row(t as usize));
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += xs[i] * yt[j];
            }
        }
    }
    let svd = m.try_svd(true, true, f64::EPSILON, 1000).ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD returned no singular vectors".into())),
    };
    let w = u * vt;
    let rows = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect();
    OrthogonalMap::from_rows(d, rows)
}

/// Similarity criterion for retrieval between spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retrieval {
    /// Cross-domain similarity local scaling with the given neighborhood.
    Csls(usize),
    Cosine,
}

impl Default for Retrieval {
    fn default() -> Self {
        Retrieval::Csls(DEFAULT_NEIGHBORHOOD)
    }
}

/// Dense similarity table between selected source rows and target rows.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub src_rows: Vec<u32>,
    pub tgt_rows: Vec<u32>,
    /// Row-major `src_rows.len() x tgt_rows.len()`.
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.tgt_rows.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.tgt_rows.len();
        &self.scores[i * n..(i + 1) * n]
    }

    /// Column index of the best target for row `i` (lowest index on ties).
    pub fn argmax_row(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Row index of the best source for column `j` (lowest index on ties).
    pub fn argmax_col(&self, j: usize) -> usize {
        let n = self.tgt_rows.len();
        argmax_by((0..self.src_rows.len()).map(|i| self.scores[i * n + j]))
    }
}

fn argmax(v: &[f64]) -> usize {
    argmax_by(v.iter().copied())
}

fn argmax_by(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of the `k` largest values.
fn top_k_mean(values: &mut [f64], k: usize) -> f64 {
    let k = k.min(values.len());
    values.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    values[..k].iter().sum::<f64>() / k as f64
}

/// Computes retrieval scores between `src_rows` of `x` and `tgt_rows` of `y`.
/// Rows are assumed unit-normalized, so dot products are cosines. Work is
/// split by source rows across `workers` threads; the result does not
/// depend on the split.
pub fn score_table(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    src_rows: Vec<u32>,
    tgt_rows: Vec<u32>,
    retrieval: Retrieval,
    workers: usize,
) -> Result<ScoreTable> {
    if x.dim() != y.dim() {
        return Err(Error::Shape {
            expected: format!("dimension {}", x.dim()),
            found: format!("dimension {}", y.dim()),
        });
    }
    let (ns, nt) = (src_rows.len(), tgt_rows.len());
    if ns == 0 || nt == 0 {
        return Err(Error::Empty("retrieval over an empty row set".into()));
    }
    if let Retrieval::Csls(k) = retrieval {
        if k == 0 || k >= nt || k >= ns {
            return Err(Error::InvalidArgument(format!(
                "CSLS neighborhood {k} must be positive and below both vocabulary sizes ({ns}, {nt})"
            )));
        }
    }
    let workers = workers.max(1).min(ns);
    let chunk = ns.div_ceil(workers);
    let mut cos = vec![0.0; ns * nt];
    std::thread::scope(|scope| {
        for (c, block) in cos.chunks_mut(chunk * nt).enumerate() {
            let src_rows = &src_rows;
            let tgt_rows = &tgt_rows;
            scope.spawn(move || {
                for (r, out) in block.chunks_mut(nt).enumerate() {
                    let xs = x.row(src_rows[c * chunk + r] as usize);
                    for (o, &t) in out.iter_mut().zip(tgt_rows) {
                        *o = dot(xs, y.row(t as usize));
                    }
                }
            });
        }
    });
    if let Retrieval::Csls(k) = retrieval {
        let r_src: Vec<f64> = (0..ns).map(|i| top_k_mean(&mut cos[i * nt..(i + 1) * nt].to_vec(), k)).collect();
        let r_tgt: Vec<f64> = (0..nt)
            .map(|j| top_k_mean(&mut (0..ns).map(|i| cos[i * nt + j]).collect::<Vec<_>>(), k))
            .collect();
        for i in 0..ns {
            for j in 0..nt {
                let c = &mut cos[i * nt + j];
                *c = 2.0 * *c - r_src[i] - r_tgt[j];
            }
        }
    }
    Ok(ScoreTable {
        src_rows,
        tgt_rows,
        scores: cos,
    })
}

/// CSLS between every row of `mapped_x` and every row of `y`:
/// `2·cos(x,y) − r_T(x) − r_S(y)` with `r` the mean cosine to the
/// `neighborhood` nearest rows of the other space.
pub fn csls_scores(mapped_x: &EmbeddingMatrix, y: &EmbeddingMatrix, neighborhood: usize) -> Result<ScoreTable> {
    score_table(
        mapped_x,
        y,
        (0..mapped_x.rows() as u32).collect(),
        (0..y.rows() as u32).collect(),
        Retrieval::Csls(neighborhood),
        1,
    )
}

/// Regular (non-special, non-tag) row ids.
pub fn regular_rows(e: &EmbeddingMatrix) -> Vec<u32> {
    e.vocab().regular_ids().collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfLearnConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub retrieval: Retrieval,
    pub workers: usize,
}

impl Default for SelfLearnConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            retrieval: Retrieval::default(),
            workers: 1,
        }
    }
}

impl SelfLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if let Retrieval::Csls(0) = self.retrieval {
            return Err(Error::InvalidArgument("CSLS neighborhood must be positive".into()));
        }
        if !(self.tol >= 0.0) || self.workers == 0 {
            return Err(Error::InvalidArgument("tolerance must be non-negative and workers positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfLearnReport {
    pub iterations: usize,
    pub pair_counts: Vec<usize>,
    /// Mean cosine of induced pairs under the map that induced them.
    pub mean_similarity: Vec<f64>,
    pub converged: bool,
}

/// Pairs whose source and target are each other's best match.
pub fn mutual_best(table: &ScoreTable) -> Vec<(u32, u32)> {
    let col_best: Vec<usize> = (0..table.tgt_rows.len()).map(|j| table.argmax_col(j)).collect();
    (0..table.src_rows.len())
        .filter_map(|i| {
            let j = table.argmax_row(i);
            (col_best[j] == i).then(|| (table.src_rows[i], table.tgt_rows[j]))
        })
        .collect()
}

/// Alternates Procrustes on the current pairs with mutual-best re-induction
/// over regular tokens until the pair set stops changing, the mean pair
/// similarity stops improving by more than `tol`, or `max_iters` rounds.
pub fn self_learn(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    init: &SeedPairs,
    cfg: &SelfLearnConfig,
) -> Result<(OrthogonalMap, SelfLearnReport)> {
    cfg.validate()?;
    if init.is_empty() {
        return Err(Error::Empty("self-learning needs initial pairs".into()));
    }
    let mut pairs = init.clone();
    let mut w = procrustes(x, y, &pairs)?;
    let mut report = SelfLearnReport::default();
    let mut last_mean = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iters {
        report.iterations += 1;
        let mapped = w.apply(x)?;
        let table = score_table(&mapped, y, regular_rows(&mapped), regular_rows(y), cfg.retrieval, cfg.workers)?;
        let induced = SeedPairs::new(mutual_best(&table))?;
        if induced.is_empty() {
            return Err(Error::Numerical("self-learning induced no pairs".into()));
        }
        let mean = induced
            .pairs()
            .iter()
            .map(|&(s, t)| dot(mapped.row(s as usize), y.row(t as usize)))
            .sum::<f64>()
            / induced.len() as f64;
        report.pair_counts.push(induced.len());
        report.mean_similarity.push(mean);
        if induced == pairs {
            report.converged = true;
            break;
        }
        pairs = induced;
        w = procrustes(x, y, &pairs)?;
        if mean - last_mean < cfg.tol {
            report.converged = true;
            break;
        }
        last_mean = mean;
    }
    Ok((w, report))
}

/// Maps source ids to their best target under `retrieval` (regular rows only).
pub fn induce_translations(
    mapped_x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    retrieval: Retrieval,
) -> Result<HashMap<u32, u32>> {
    let table = score_table(mapped_x, y, regular_rows(mapped_x), regular_rows(y), retrieval, 1)?;
    Ok((0..table.src_rows.len())
        .map(|i| (table.src_rows[i], table.tgt_rows[table.argmax_row(i)]))
        .collect())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    /// Standard normal via Box-Muller.
    pub fn gaussian(rng: &mut rng::Rng) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
    pub fn random_rotation(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::rng_from(seed);
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| gaussian(&mut rng));
        let q = a.qr().q();
        (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect()
    }

    /// A normalized random embedding matrix with `v` regular tokens and the
    /// same rows rotated by `r` under a second vocabulary whose regular
    /// token `i` translates source token `i`.
    pub fn rotated_pair(v: usize, d: usize, seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix, Vec<f64>) {
        let mut rng = rng::rng_from(seed);
        let src_vocab = Vocab::from_regular((0..v).map(|i| format!("s{i}")));
        let tgt_vocab = Vocab::from_regular((0..v).map(|i| format!("t{i}")));
        let n = src_vocab.len();
        let data: Vec<f64> = (0..n * d).map(|_| gaussian(&mut rng)).collect();
        let x = normalize_embeddings(&EmbeddingMatrix::new(src_vocab, d, data).unwrap()).unwrap();
        let r = random_rotation(d, seed ^ 0xABCD);
        let y_data = OrthogonalMap::from_rows(d, r.clone()).unwrap().apply(&x).unwrap().data().to_vec();
        let y = EmbeddingMatrix::new(tgt_vocab, d, y_data).unwrap();
        (x, y, r)
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::subword::NUM_SPECIALS;

    fn toy(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let d = rows[0].len();
        let vocab = Vocab::from_regular((0..rows.len() - NUM_SPECIALS).map(|i| format!("w{i}")));
        EmbeddingMatrix::new(vocab, d, rows.concat()).unwrap()
    }

    fn random_matrix(v: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = crate::rng::rng_from(seed);
        let vocab = Vocab::from_regular((0..v).map(|i| format!("w{i}")));
        let n = vocab.len();
        EmbeddingMatrix::new(vocab, d, (0..n * d).map(|_| gaussian(&mut rng)).collect()).unwrap()
    }

    /// The three normalization steps written out directly.
    fn normalize_oracle(e: &EmbeddingMatrix) -> Vec<f64> {
        let d = e.dim();
        let mut rows: Vec<Vec<f64>> = (0..e.rows()).map(|i| e.row(i).to_vec()).collect();
        for r in rows.iter_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        for j in 0..d {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            rows.iter_mut().for_each(|r| r[j] -= m);
        }
        for r in rows.iter_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        rows.concat()
    }

    #[test]
    fn normalized_rows_are_unit() {
        let e = normalize_embeddings(&random_matrix(30, 8, 1)).unwrap();
        for i in 0..e.rows() {
            let n = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_matches_oracle() {
        let e = random_matrix(20, 5, 2);
        let got = normalize_embeddings(&e).unwrap();
        for (a, b) in got.data().iter().zip(normalize_oracle(&e)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn antipodal_rows_need_no_centering() {
        // v and -v repeated so the vocab has room for specials
        let v = vec![0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let rows: Vec<Vec<f64>> = (0..6).flat_map(|_| [v.clone(), neg.clone()]).collect();
        let e = toy(rows);
        let out = normalize_embeddings(&e).unwrap();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in out.row(0).iter().zip(&v) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_names_the_token() {
        let mut rows: Vec<Vec<f64>> = (0..7).map(|i| vec![1.0 + i as f64, 0.5]).collect();
        rows[6] = vec![0.0, 0.0];
        match normalize_embeddings(&toy(rows)) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("w1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_strings_pair_up() {
        let a = Vocab::from_regular(["london", "2020", "haus", "x"].map(String::from));
        let b = Vocab::from_regular(["2020", "maison", "london"].map(String::from));
        let p = seed_pairs_identical(&a, &b).unwrap();
        let named: Vec<(&str, &str)> =
            p.pairs().iter().map(|&(s, t)| (a.token(s).unwrap(), b.token(t).unwrap())).collect();
        assert_eq!(named, vec![("london", "london"), ("2020", "2020")]);
        let c = Vocab::from_regular(["zz"].map(String::from));
        assert!(seed_pairs_identical(&a, &c).is_err());
        assert_eq!(seed_pairs_identical(&a, &a).unwrap().len(), 4);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let (x, y, r) = rotated_pair(200, 16, 3);
        let pairs = SeedPairs::new(x.vocab().regular_ids().map(|i| (i, i)).collect()).unwrap();
        let w = procrustes(&x, &y, &pairs).unwrap();
        let err: f64 = w.matrix().iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-3, "{err}");
        assert!(w.orthogonality_error() < 1e-4);
    }

    #[test]
    fn procrustes_identity_case() {
        let x = normalize_embeddings(&random_matrix(50, 8, 4)).unwrap();
        let pairs = SeedPairs::new(x.vocab().regular_ids().map(|i| (i, i)).collect()).unwrap();
        let w = procrustes(&x, &x, &pairs).unwrap();
        let eye = OrthogonalMap::identity(8);
        assert!(w.matrix().iter().zip(eye.matrix()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn csls_self_similarity_is_zero_for_single_vectors() {
        // one-dimensional unit vectors: every cosine is 1
        let rows: Vec<Vec<f64>> = (0..8).map(|_| vec![1.0]).collect();
        let e = toy(rows);
        let t = csls_scores(&e, &e, 1).unwrap();
        assert!(t.scores.iter().all(|s| s.abs() < 1e-12));
    }

    /// O(V²) CSLS straight from the definition.
    fn csls_oracle(x: &EmbeddingMatrix, y: &EmbeddingMatrix, k: usize) -> Vec<Vec<f64>> {
        let cos = |a: &[f64], b: &[f64]| crate::embedding::cosine(a, b);
        let knn_mean = |v: &[f64], space: &EmbeddingMatrix| {
            let mut sims: Vec<f64> = (0..space.rows()).map(|j| cos(v, space.row(j))).collect();
            sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
            sims[..k].iter().sum::<f64>() / k as f64
        };
        (0..x.rows())
            .map(|i| {
                (0..y.rows())
                    .map(|j| 2.0 * cos(x.row(i), y.row(j)) - knn_mean(x.row(i), y) - knn_mean(y.row(j), x))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn csls_matches_brute_force() {
        let x = normalize_embeddings(&random_matrix(15, 8, 5)).unwrap();
        let y = normalize_embeddings(&random_matrix(15, 8, 6)).unwrap();
        assert_eq!(x.rows(), 20);
        let oracle = csls_oracle(&x, &y, 3);
        let t = csls_scores(&x, &y, 3).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert!((t.get(i, j) - oracle[i][j]).abs() < 1e-6);
            }
            let best = (0..20).max_by(|&a, &b| oracle[i][a].partial_cmp(&oracle[i][b]).unwrap()).unwrap();
            assert_eq!(t.argmax_row(i), best);
        }
    }

    #[test]
    fn csls_neighborhood_must_fit() {
        let x = normalize_embeddings(&random_matrix(5, 4, 7)).unwrap();
        assert!(csls_scores(&x, &x, 10).is_err());
    }

    #[test]
    fn partitioned_scores_equal_serial() {
        let x = normalize_embeddings(&random_matrix(40, 8, 8)).unwrap();
        let y = normalize_embeddings(&random_matrix(40, 8, 9)).unwrap();
        let rows = || (0..45u32).collect::<Vec<_>>();
        let a = score_table(&x, &y, rows(), rows(), Retrieval::Csls(5), 1).unwrap();
        let b = score_table(&x, &y, rows(), rows(), Retrieval::Csls(5), 4).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    fn precision_at_1(x: &EmbeddingMatrix, y: &EmbeddingMatrix, w: &OrthogonalMap) -> f64 {
        let tr = induce_translations(&w.apply(x).unwrap(), y, Retrieval::default()).unwrap();
        let hits = tr.iter().filter(|(s, t)| s == t).count();
        hits as f64 / tr.len() as f64
    }

    #[test]
    fn self_learning_from_ten_percent_seed() {
        let (x, y, _) = rotated_pair(1000, 32, 10);
        let seed = SeedPairs::new(x.vocab().regular_ids().step_by(10).map(|i| (i, i)).collect()).unwrap();
        let (w, report) = self_learn(&x, &y, &seed, &SelfLearnConfig::default()).unwrap();
        assert!(precision_at_1(&x, &y, &w) >= 0.99);
        assert!(w.orthogonality_error() < 1e-4);
        assert!(report.iterations >= 1);
        let (w2, _) = self_learn(&x, &y, &seed, &SelfLearnConfig::default()).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn zero_iterations_is_plain_procrustes() {
        let (x, y, _) = rotated_pair(100, 8, 11);
        let seed = SeedPairs::new(x.vocab().regular_ids().step_by(5).map(|i| (i, i)).collect()).unwrap();
        let cfg = SelfLearnConfig {
            max_iters: 0,
            ..SelfLearnConfig::default()
        };
        let (w, _) = self_learn(&x, &y, &seed, &cfg).unwrap();
        assert_eq!(w, procrustes(&x, &y, &seed).unwrap());
        assert!(self_learn(&x, &y, &SeedPairs::new(vec![]).unwrap(), &cfg).is_err());
    }

    #[test]
    fn map_file_round_trip() {
        let w = OrthogonalMap::from_rows(4, random_rotation(4, 12)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        w.save(f.path()).unwrap();
        assert_eq!(OrthogonalMap::load(f.path()).unwrap(), w);
    }

    #[test]
    fn seed_file_loads() {
        let a = Vocab::from_regular(["x", "y"].map(String::from));
        let b = Vocab::from_regular(["p", "q"].map(String::from));
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "x\tq\ny\tp\nzz\tp\n").unwrap();
        let p = SeedPairs::load(f.path(), &a, &b).unwrap();
        assert_eq!(p.pairs(), &[(5, 6), (6, 5)]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn recovered_maps_are_orthogonal(v in 100usize..300, d in 8usize..24, seed in 0u64..1000) {
            let (x, y, _) = rotated_pair(v, d, seed);
            let init = SeedPairs::new(x.vocab().regular_ids().step_by(10).map(|i| (i, i)).collect()).unwrap();
            let (w, _) = self_learn(&x, &y, &init, &SelfLearnConfig { max_iters: 5, ..Default::default() }).unwrap();
            proptest::prop_assert!(w.orthogonality_error() < 1e-4);
            proptest::prop_assert!(precision_at_1(&x, &y, &w) >= 0.99);
        }
    }
}
