//! Student-teacher alignment losses.
//!
//! Feature content alignment (FCA) is the mean L2 distance between matching
//! proposal features. Graph-based embedding relationship alignment (GERA)
//! embeds every proposal with a small MLP, builds a cosine-similarity graph
//! per model, and compares all edge pairs with a binary KL divergence weighted
//! by the proposal relationship matrix `R = I + lambda * D`.
//!
//! Teacher-side quantities are constants everywhere: gradients flow only into
//! the student features and the embedding parameters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1.0;
pub const DEFAULT_EPS_KL: f64 = 1e-4;
const MIN_EMBED_NORM: f64 = 1e-12;

/// `N_r x H x W x M` block of per-proposal features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalFeatures {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub data: Vec<f64>,
    pub rois: Vec<Box3D>,
}

impl ProposalFeatures {
    pub fn zeros(n: usize, h: usize, w: usize, m: usize, rois: Vec<Box3D>) -> Self {
        Self { n, h, w, m, data: vec![0.0; n * h * w * m], rois }
    }

    pub fn proposal_len(&self) -> usize {
        self.h * self.w * self.m
    }

    pub fn proposal(&self, i: usize) -> &[f64] {
        let len = self.proposal_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &ProposalFeatures) -> Result<()> {
        let a = (self.n, self.h, self.w, self.m);
        let b = (other.n, other.h, other.w, other.m);
        if a != b || self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")));
        }
        if self.n == 0 {
            return Err(Error::ShapeMismatch("no proposals".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean over proposals of `||f_s - f_a||_2`, with its gradient w.r.t. the
/// student block (zero where the two proposals coincide).
pub fn fca_loss(teacher: &ProposalFeatures, student: &ProposalFeatures) -> Result<LossGrad> {
    teacher.same_shape(student)?;
    let n = teacher.n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.data.len()];
    for i in 0..teacher.n {
        let fs = teacher.proposal(i);
        let fa = student.proposal(i);
        let norm = fs.iter().zip(fa).map(|(s, a)| (a - s) * (a - s)).sum::<f64>().sqrt();
        loss += norm;
        if norm > 0.0 {
            let off = i * teacher.proposal_len();
            for (k, (s, a)) in fs.iter().zip(fa).enumerate() {
                grad[off + k] = (a - s) / (n * norm);
            }
        }
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Two-layer perceptron `W2 tanh(W1 x + b1) + b2` that maps a flattened
/// proposal block to an embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmbedTrace {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl EmbeddingNet {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { input, hidden, output, params: vec![0.0; Self::param_count(input, hidden, output)] }
    }

    /// Glorot-uniform weights and small uniform biases from a fixed seed.
    pub fn seeded(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(input, hidden, output);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + output) as f64).sqrt();
        let (w1, rest) = net.params.split_at_mut(hidden * input);
        let (b1, rest) = rest.split_at_mut(hidden);
        let (w2, b2) = rest.split_at_mut(output * hidden);
        w1.iter_mut().for_each(|v| *v = rng.random_range(-a1..a1));
        b1.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        w2.iter_mut().for_each(|v| *v = rng.random_range(-a2..a2));
        b2.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        net
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64]) -> EmbedTrace {
        assert_eq!(x.len(), self.input, "embedding input width");
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &p[j * self.input..(j + 1) * self.input];
                (p[b1 + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect();
        let output = (0..self.output)
            .map(|o| {
                let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                p[b2 + o] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        EmbedTrace { hidden, output }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).output
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient w.r.t. the input.
    pub fn backward(&self, x: &[f64], trace: &EmbedTrace, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut grad_hidden = vec![0.0; self.hidden];
        for o in 0..self.output {
            let g = grad_out[o];
            if g == 0.0 {
                continue;
            }
            grad_params[b2 + o] += g;
            for j in 0..self.hidden {
                grad_params[w2 + o * self.hidden + j] += g * trace.hidden[j];
                grad_hidden[j] += g * p[w2 + o * self.hidden + j];
            }
        }
        let mut grad_x = vec![0.0; self.input];
        for j in 0..self.hidden {
            let g = grad_hidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
            if g == 0.0 {
                continue;
            }
            grad_params[b1 + j] += g;
            let row = j * self.input;
            for k in 0..self.input {
                grad_params[row + k] += g * x[k];
                grad_x[k] += g * p[row + k];
            }
        }
        grad_x
    }
}

/// Cosine-similarity graph over proposal embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix {
    pub n: usize,
    /// Cosine similarities in [-1, 1], unit diagonal.
    pub raw: Vec<f64>,
    /// `clamp((1 + raw) / 2, eps_kl, 1 - eps_kl)`.
    pub normalized: Vec<f64>,
    pub eps_kl: f64,
}

pub fn normalize_edge(e: f64, eps_kl: f64) -> f64 {
    (0.5 * (1.0 + e)).clamp(eps_kl, 1.0 - eps_kl)
}

fn unit_vectors(embeddings: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(embeddings.len());
    let mut norms = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > MIN_EMBED_NORM) {
            return Err(Error::ZeroNormEmbedding(i));
        }
        units.push(e.iter().map(|v| v / norm).collect());
        norms.push(norm);
    }
    Ok((units, norms))
}

pub fn edge_matrix(embeddings: &[Vec<f64>], eps_kl: f64) -> Result<EdgeMatrix> {
    let n = embeddings.len();
    let (units, _) = unit_vectors(embeddings)?;
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        raw[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            raw[i * n + j] = c;
            raw[j * n + i] = c;
        }
    }
    let normalized = raw.iter().map(|e| normalize_edge(*e, eps_kl)).collect();
    Ok(EdgeMatrix { n, raw, normalized, eps_kl })
}

/// Geometric discrepancy `1 / (|dc|_2 + |dd|_2 + |dr|_1 + eps)` between
/// every pair of proposals. The yaw difference is wrapped into [0, pi].
pub fn discrepancy_matrix(rois: &[Box3D], eps: f64) -> Vec<f64> {
    let n = rois.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for m in i..n {
            let a = &rois[i];
            let b = &rois[m];
            let dc = (0..3).map(|k| (a.center[k] - b.center[k]).powi(2)).sum::<f64>().sqrt();
            let ds = (0..3).map(|k| (a.size[k] - b.size[k]).powi(2)).sum::<f64>().sqrt();
            let dr = yaw_gap(a.yaw, b.yaw);
            d[i * n + m] = 1.0 / (dc + ds + dr + eps);
            d[m * n + i] = d[i * n + m];
        }
    }
    d
}

/// Absolute yaw difference wrapped into [0, pi].
pub fn yaw_gap(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs().min(PI)
}

/// `R = I + lambda * D`.
pub fn relationship_matrix(d: &[f64], n: usize, lambda: f64) -> Vec<f64> {
    assert_eq!(d.len(), n * n);
    let mut r: Vec<f64> = d.iter().map(|v| lambda * v).collect();
    for i in 0..n {
        r[i * n + i] += 1.0;
    }
    r
}

/// Binary KL divergence between Bernoulli parameters `a` and `b`.
pub fn binary_kl(a: f64, b: f64) -> f64 {
    a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
}

fn check_normalized(values: &[f64], n: usize, eps_kl: f64) -> Result<()> {
    let (lo, hi) = (eps_kl, 1.0 - eps_kl);
    for (k, v) in values.iter().enumerate() {
        if !(*v >= lo && *v <= hi) {
            return Err(Error::NotNormalized { row: k / n, col: k % n, value: *v, lo, hi });
        }
    }
    Ok(())
}

/// `sum_{i,j,m,n} kl(p_a[i,j], p_s[m,n]) R[i,m] R[j,n]` and its gradient
/// w.r.t. the student edges.
///
/// The quadruple sum separates into `r_i r_j h(a_ij) - (R ln(P_s) R^T)_ij a_ij
/// - (R ln(1-P_s) R^T)_ij (1 - a_ij)` with `r = R 1` and `h` the negative
/// binary entropy, which brings the cost down to `O(N^3)`.
pub fn gera_loss(student: &[f64], teacher: &[f64], r: &[f64], n: usize, eps_kl: f64) -> Result<LossGrad> {
    if student.len() != n * n || teacher.len() != n * n || r.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "edge matrices {} / {} and relationship {} for N_r = {n}",
            student.len(),
            teacher.len(),
            r.len()
        )));
    }
    check_normalized(student, n, eps_kl)?;
    check_normalized(teacher, n, eps_kl)?;

    let row_sums: Vec<f64> = (0..n).map(|i| r[i * n..(i + 1) * n].iter().sum()).collect();
    let log_p: Vec<f64> = teacher.iter().map(|b| b.ln()).collect();
    let log_q: Vec<f64> = teacher.iter().map(|b| (1.0 - b).ln()).collect();
    let sandwich = |l: &[f64]| -> Vec<f64> {
        // R L R^T
        let mut tmp = vec![0.0; n * n];
        for i in 0..n {
            for nn in 0..n {
                tmp[i * n + nn] = (0..n).map(|m| r[i * n + m] * l[m * n + nn]).sum();
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|nn| tmp[i * n + nn] * r[j * n + nn]).sum();
            }
        }
        out
    };
    let cross_p = sandwich(&log_p);
    let cross_q = sandwich(&log_q);

    let mut loss = 0.0;
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let a = student[k];
            let w = row_sums[i] * row_sums[j];
            let (la, lq) = (a.ln(), (1.0 - a).ln());
            loss += w * (a * la + (1.0 - a) * lq) - a * cross_p[k] - (1.0 - a) * cross_q[k];
            grad[k] = w * (la - lq) - cross_p[k] + cross_q[k];
        }
    }
    Ok(LossGrad { loss, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeraConfig {
    pub lambda: f64,
    pub eps: f64,
    pub eps_kl: f64,
}

impl Default for GeraConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, eps: DEFAULT_EPS, eps_kl: DEFAULT_EPS_KL }
    }
}

#[derive(Debug, Clone)]
struct GeraCache {
    student_inputs: Vec<Vec<f64>>,
    traces: Vec<EmbedTrace>,
    edges: EdgeMatrix,
    teacher_edges: EdgeMatrix,
    grad_edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeraGrads {
    /// Gradient w.r.t. the student feature block (same layout).
    pub features: Vec<f64>,
    /// Gradient w.r.t. the embedding parameters.
    pub params: Vec<f64>,
}

/// GERA evaluated from proposal features, keeping what the backward pass needs.
#[derive(Debug, Clone, Default)]
pub struct GeraPass {
    cache: Option<GeraCache>,
}

impl GeraPass {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs the forward pass and caches activations. The relationship matrix
    /// comes from the (shared) student ROIs.
    pub fn forward(
        &mut self,
        net: &EmbeddingNet,
        teacher: &ProposalFeatures,
        student: &ProposalFeatures,
        cfg: &GeraConfig,
    ) -> Result<f64> {
        self.cache = None;
        teacher.same_shape(student)?;
        if net.input != student.proposal_len() {
            return Err(Error::ShapeMismatch(format!(
                "embedding expects {} inputs, proposals have {}",
                net.input,
                student.proposal_len()
            )));
        }
        let n = student.n;
        let teacher_emb: Vec<Vec<f64>> = (0..n).map(|i| net.embed(teacher.proposal(i))).collect();
        let student_inputs: Vec<Vec<f64>> = (0..n).map(|i| student.proposal(i).to_vec()).collect();
        let traces: Vec<EmbedTrace> = student_inputs.iter().map(|x| net.forward(x)).collect();
        let student_emb: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();

        let teacher_edges = edge_matrix(&teacher_emb, cfg.eps_kl)?;
        let edges = edge_matrix(&student_emb, cfg.eps_kl)?;
        let d = discrepancy_matrix(&student.rois, cfg.eps);
        let r = relationship_matrix(&d, n, cfg.lambda);
        let lg = gera_loss(&edges.normalized, &teacher_edges.normalized, &r, n, cfg.eps_kl)?;
        self.cache = Some(GeraCache { student_inputs, traces, edges, teacher_edges, grad_edges: lg.grad });
        Ok(lg.loss)
    }

    pub fn student_edges(&self) -> Option<&EdgeMatrix> {
        self.cache.as_ref().map(|c| &c.edges)
    }

    pub fn teacher_edges(&self) -> Option<&EdgeMatrix> {
        self.cache.as_ref().map(|c| &c.teacher_edges)
    }

    /// Chain rule from the loss back through the normalized edges, the
    /// cosine similarities and the embedding net, scaled by `upstream`.
    pub fn backward(&self, net: &EmbeddingNet, upstream: f64) -> Result<GeraGrads> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache)?;
        let n = cache.edges.n;
        let eps_kl = cache.edges.eps_kl;
        let emb: Vec<Vec<f64>> = cache.traces.iter().map(|t| t.output.clone()).collect();
        let (units, norms) = unit_vectors(&emb)?;

        // d loss / d raw edge; the clamp kills the gradient at its bounds
        let mut grad_raw = vec![0.0; n * n];
        for k in 0..n * n {
            let half = 0.5 * (1.0 + cache.edges.raw[k]);
            if half > eps_kl && half < 1.0 - eps_kl {
                grad_raw[k] = upstream * cache.grad_edges[k] * 0.5;
            }
        }

        let dim = net.output;
        let mut grad_params = vec![0.0; net.params.len()];
        let mut features = Vec::with_capacity(n * net.input);
        for k in 0..n {
            let mut g = vec![0.0; dim];
            for j in 0..n {
                if j == k {
                    continue;
                }
                let coef = grad_raw[k * n + j] + grad_raw[j * n + k];
                if coef == 0.0 {
                    continue;
                }
                let e = cache.edges.raw[k * n + j];
                for t in 0..dim {
                    g[t] += coef * (units[j][t] - e * units[k][t]) / norms[k];
                }
            }
            let gx = net.backward(&cache.student_inputs[k], &cache.traces[k], &g, &mut grad_params);
            features.extend(gx);
        }
        Ok(GeraGrads { features, params: grad_params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_block(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, m: usize) -> ProposalFeatures {
        let rois = (0..n)
            .map(|_| {
                Box3D::new(
                    [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-1.0..0.0)],
                    [rng.random_range(3.0..5.0), rng.random_range(1.5..2.0), rng.random_range(1.3..1.8)],
                    rng.random_range(-PI..PI),
                )
            })
            .collect();
        let mut f = ProposalFeatures::zeros(n, h, w, m, rois);
        f.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        f
    }

    // quadruple-loop reference
    fn gera_brute(a: &[f64], s: &[f64], r: &[f64], n: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                for m in 0..n {
                    for nn in 0..n {
                        acc += binary_kl(a[i * n + j], s[m * n + nn]) * r[i * n + m] * r[j * n + nn];
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn fca_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_block(&mut rng, 3, 2, 2, 4);
        assert_eq!(fca_loss(&f, &f).unwrap().loss, 0.0);
        assert!(fca_loss(&f, &f).unwrap().grad.iter().all(|g| *g == 0.0));
        let mut g = f.clone();
        g.data[17] += 0.25;
        assert!((fca_loss(&f, &g).unwrap().loss - 0.25 / 3.0).abs() < 1e-15);
        let other = rand_block(&mut rng, 2, 2, 2, 4);
        assert!(matches!(fca_loss(&f, &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn fca_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = rand_block(&mut rng, 4, 2, 3, 2);
        let fa = rand_block(&mut rng, 4, 2, 3, 2);
        let g = fca_loss(&fs, &fa).unwrap().grad;
        let h = 1e-6;
        for k in 0..fa.data.len() {
            let mut p = fa.clone();
            p.data[k] += h;
            let mut q = fa.clone();
            q.data[k] -= h;
            let fd = (fca_loss(&fs, &p).unwrap().loss - fca_loss(&fs, &q).unwrap().loss) / (2.0 * h);
            assert!((fd - g[k]).abs() / g[k].abs().max(1e-3) < 1e-5, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn embedding_zero_and_identity_cases() {
        let net = EmbeddingNet::zeros(6, 3, 3);
        assert!(net.embed(&[1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).iter().all(|v| *v == 0.0));

        let mut net = EmbeddingNet::seeded(4, 3, 3, 5);
        let (b1, w2, b2) = net.offsets();
        for v in &mut net.params[w2..] {
            *v = 0.0;
        }
        for j in 0..3 {
            net.params[w2 + j * 3 + j] = 1.0;
        }
        let x = [0.3, -0.7, 1.1, 0.2];
        let y = net.embed(&x);
        for j in 0..3 {
            let pre: f64 = net.params[b1 + j] + (0..4).map(|k| net.params[j * 4 + k] * x[k]).sum::<f64>();
            assert_eq!(y[j], pre.tanh());
        }
        assert_eq!(b2 + 3, net.params.len());
    }

    #[test]
    fn embedding_jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = EmbeddingNet::seeded(12, 5, 4, 3);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let trace = net.forward(&x);
        // J v via reverse mode: (J^T e_o) . v for every output o
        let h = 1e-6;
        let plus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (yp, ym) = (net.embed(&plus), net.embed(&minus));
        for o in 0..4 {
            let mut e = vec![0.0; 4];
            e[o] = 1.0;
            let mut scratch = vec![0.0; net.params.len()];
            let gx = net.backward(&x, &trace, &e, &mut scratch);
            let jv: f64 = gx.iter().zip(&v).map(|(a, b)| a * b).sum();
            let fd = (yp[o] - ym[o]) / (2.0 * h);
            assert!((jv - fd).abs() / jv.abs().max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn edge_matrix_cases() {
        let e = edge_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]], DEFAULT_EPS_KL).unwrap();
        assert!(e.raw.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let e = edge_matrix(&[vec![1.0, 0.0], vec![0.0, 3.0]], DEFAULT_EPS_KL).unwrap();
        assert_eq!(e.raw[1], 0.0);
        assert_eq!(e.normalized[1], 0.5);
        let e = edge_matrix(&[vec![1.0, 1.0], vec![-2.0, -2.0]], DEFAULT_EPS_KL).unwrap();
        assert!((e.raw[1] + 1.0).abs() < 1e-15);
        assert_eq!(e.normalized[1], DEFAULT_EPS_KL);
        assert_eq!(e.normalized[0], 1.0 - DEFAULT_EPS_KL);
        assert!(matches!(
            edge_matrix(&[vec![1.0, 0.0], vec![0.0, 0.0]], DEFAULT_EPS_KL),
            Err(Error::ZeroNormEmbedding(1))
        ));
    }

    #[test]
    fn discrepancy_and_relationship_cases() {
        let a = Box3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.3);
        let mut b = a;
        b.center[0] = 2.0;
        let d = discrepancy_matrix(&[a, b], 1.0);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d[1], d[2]);

        assert_eq!(relationship_matrix(&d, 2, 0.0), vec![1.0, 0.0, 0.0, 1.0]);
        let r = relationship_matrix(&[1.0; 4], 2, 0.5);
        assert_eq!(r, vec![1.5, 0.5, 0.5, 1.5]);

        // yaw gap wraps across +-pi
        let c = Box3D::new([0.0; 3], [1.0; 3], PI - 0.1);
        let e = Box3D::new([0.0; 3], [1.0; 3], -PI + 0.1);
        assert!((yaw_gap(c.yaw, e.yaw) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand_block(&mut rng, 6, 1, 1, 1);
        let d = discrepancy_matrix(&f.rois, 0.7);
        for i in 0..6 {
            for m in 0..6 {
                let (a, b) = (&f.rois[i], &f.rois[m]);
                let dc = ((a.center[0] - b.center[0]).powi(2)
                    + (a.center[1] - b.center[1]).powi(2)
                    + (a.center[2] - b.center[2]).powi(2))
                .sqrt();
                let ds = ((a.size[0] - b.size[0]).powi(2)
                    + (a.size[1] - b.size[1]).powi(2)
                    + (a.size[2] - b.size[2]).powi(2))
                .sqrt();
                let mut dr = (a.yaw - b.yaw).abs();
                if dr > PI {
                    dr = 2.0 * PI - dr;
                }
                let want = 1.0 / (dc + ds + dr + 0.7);
                assert!((d[i * 6 + m] - want).abs() < 1e-14);
                assert_eq!(d[i * 6 + m], d[m * 6 + i]);
                assert!(d[i * 6 + m] > 0.0 && d[i * 6 + m] <= 1.0 / 0.7);
            }
        }
    }

    #[test]
    fn gera_small_cases() {
        let a = vec![0.3, 0.6, 0.6, 0.9];
        let r = relationship_matrix(&[0.0; 4], 2, 0.0);
        assert!(gera_loss(&a, &a, &r, 2, DEFAULT_EPS_KL).unwrap().loss.abs() < 1e-15);

        let r1 = vec![1.7];
        let lg = gera_loss(&[0.2], &[0.7], &r1, 1, DEFAULT_EPS_KL).unwrap();
        assert!((lg.loss - binary_kl(0.2, 0.7) * 1.7 * 1.7).abs() < 1e-14);

        assert!(matches!(
            gera_loss(&[1.2], &[0.7], &r1, 1, DEFAULT_EPS_KL),
            Err(Error::NotNormalized { .. })
        ));
        assert!(matches!(
            gera_loss(&[0.2, 0.3], &[0.7], &r1, 1, DEFAULT_EPS_KL),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gera_matches_quadruple_loop_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 5;
        let edges = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = if i == j { 1.0 - DEFAULT_EPS_KL } else { rng.random_range(0.01..0.99) };
                    m[i * n + j] = v;
                    m[j * n + i] = v;
                }
            }
            m
        };
        let a = edges(&mut rng);
        let s = edges(&mut rng);
        let f = rand_block(&mut rng, n, 1, 1, 1);
        let r = relationship_matrix(&discrepancy_matrix(&f.rois, 1.0), n, 0.3);
        let lg = gera_loss(&a, &s, &r, n, DEFAULT_EPS_KL).unwrap();
        assert!((lg.loss - gera_brute(&a, &s, &r, n)).abs() < 1e-10);
        let h = 1e-6;
        for k in 0..n * n {
            let mut p = a.clone();
            p[k] += h;
            let mut q = a.clone();
            q[k] -= h;
            let fd = (gera_brute(&p, &s, &r, n) - gera_brute(&q, &s, &r, n)) / (2.0 * h);
            if a[k] + h > 1.0 - DEFAULT_EPS_KL {
                continue;
            }
            assert!((fd - lg.grad[k]).abs() / lg.grad[k].abs().max(1e-2) < 1e-5, "{k}");
        }
    }

    #[test]
    fn backward_needs_a_forward_pass() {
        let net = EmbeddingNet::seeded(4, 2, 2, 0);
        assert!(matches!(GeraPass::new().backward(&net, 1.0), Err(Error::MissingCache)));
    }

    #[test]
    fn identical_inputs_give_zero_gera_without_relationships() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_block(&mut rng, 4, 2, 2, 3);
        let net = EmbeddingNet::seeded(12, 3, 3, 1);
        let cfg = GeraConfig { lambda: 0.0, ..GeraConfig::default() };
        let mut pass = GeraPass::new();
        let loss = pass.forward(&net, &f, &f, &cfg).unwrap();
        assert!(loss.abs() < 1e-12);
        let grads = pass.backward(&net, 1.0).unwrap();
        assert!(grads.params.iter().chain(&grads.features).all(|g| g.abs() < 1e-9));
        let zero = pass.backward(&net, 0.0).unwrap();
        assert!(zero.params.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn losses_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, h, w, m) = (5, 2, 2, 3);
        let fs = rand_block(&mut rng, n, h, w, m);
        let mut fa = rand_block(&mut rng, n, h, w, m);
        fa.rois = fs.rois.clone();
        let net = EmbeddingNet::seeded(h * w * m, 4, 4, 2);
        let perm = [3, 0, 4, 1, 2];
        let permute = |f: &ProposalFeatures| {
            let mut g = f.clone();
            let len = f.proposal_len();
            for (dst, src) in perm.iter().enumerate() {
                g.data[dst * len..(dst + 1) * len].copy_from_slice(f.proposal(*src));
                g.rois[dst] = f.rois[*src];
            }
            g
        };
        let (ps, pa) = (permute(&fs), permute(&fa));
        let cfg = GeraConfig::default();
        let l1 = GeraPass::new().forward(&net, &fs, &fa, &cfg).unwrap();
        let l2 = GeraPass::new().forward(&net, &ps, &pa, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
        let f1 = fca_loss(&fs, &fa).unwrap().loss;
        let f2 = fca_loss(&ps, &pa).unwrap().loss;
        assert!((f1 - f2).abs() < 1e-9);
    }
}
