//! Mixture of experts: noisy gating, top-K selection and mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::spec::BatchMode;
use crate::graph::Net;
use crate::tensor::Tensor;

/// Above this magnitude the largest logit is subtracted before `exp` so
/// that `q` neither overflows nor underflows to all zeros in `f32`.
const EXP_GUARD: f32 = 80.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    pub n_experts: usize,
    pub top_k: usize,
    /// Feature dimension `D`.
    pub dim: usize,
    /// `N x D`, row-major.
    pub w_a: Vec<f32>,
    /// `N x D`, row-major.
    pub w_b: Vec<f32>,
    pub w_c: Vec<f32>,
    pub noise: bool,
    pub seed: u64,
}

impl GatingParams {
    /// Noise-free gate with `W_b = W_c = 0`.
    pub fn plain(n_experts: usize, top_k: usize, w_a: Vec<f32>) -> Result<Self> {
        if n_experts == 0 || w_a.len() % n_experts != 0 {
            return Err(Error::ShapeMismatch(format!("W_a of {} for {n_experts} experts", w_a.len())));
        }
        let dim = w_a.len() / n_experts;
        let gp = GatingParams {
            n_experts,
            top_k,
            dim,
            w_b: vec![0.0; w_a.len()],
            w_c: vec![0.0; n_experts],
            w_a,
            noise: false,
            seed: 0,
        };
        gp.check()?;
        Ok(gp)
    }

    pub fn check(&self) -> Result<()> {
        let (n, d) = (self.n_experts, self.dim);
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::InvalidParam(format!("top_k {} not in 1..={n}", self.top_k)));
        }
        if self.w_a.len() != n * d || self.w_b.len() != n * d || self.w_c.len() != n {
            return Err(Error::ShapeMismatch(format!("gating weights do not match N={n}, D={d}")));
        }
        Ok(())
    }

    /// `(eps1, eps2)` for one sample and expert; independent of batch
    /// composition and execution order.
    pub fn noise_draw(&self, sample: u64, expert: usize) -> (f32, f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample);
        rng.set_word_pos((expert as u128) << 32);
        let e1: f32 = StandardNormal.sample(&mut rng);
        let e2 = Normal::new(0.0f32, 10.0).expect("valid sigma").sample(&mut rng);
        (e1, e2)
    }
}

/// Unnormalized gate values `q` for one sample `x` of length `D`.
pub fn gating_logits(x: &[f32], sample: u64, gp: &GatingParams) -> Result<Vec<f32>> {
    if x.len() != gp.dim {
        return Err(Error::ShapeMismatch(format!("gating features {} != D = {}", x.len(), gp.dim)));
    }
    let dot = |w: &[f32]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
    let z: Vec<f32> = (0..gp.n_experts)
        .map(|i| {
            let row = i * gp.dim..(i + 1) * gp.dim;
            let mut z = dot(&gp.w_a[row.clone()]);
            if gp.noise {
                let (e1, e2) = gp.noise_draw(sample, i);
                z += dot(&gp.w_b[row]) * e1 + gp.w_c[i] * e2;
            }
            z
        })
        .collect();
    let zmax = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let shift = if zmax.abs() > EXP_GUARD { zmax } else { 0.0 };
    Ok(z.iter().map(|v| (v - shift).exp()).collect())
}

/// `p_i = q_i / sum(q)`.
pub fn gating_probs(q: &[f32]) -> Result<Vec<f32>> {
    if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidParam("gate values must be finite and non-negative".into()));
    }
    let sum: f64 = q.iter().map(|&v| v as f64).sum();
    if sum == 0.0 {
        return Err(Error::DegenerateGating);
    }
    Ok(q.iter().map(|&v| (v as f64 / sum) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSelection {
    /// Chosen experts, most probable first.
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
}

/// The `k` most probable experts, ties toward the lower index, with their
/// probabilities renormalized to sum to one. With `k = N` the
/// probabilities are already normalized and are returned as they are.
pub fn select_topk(p: &[f32], k: usize) -> Result<ExpertSelection> {
    if k == 0 || k > p.len() {
        return Err(Error::InvalidParam(format!("top_k {k} not in 1..={}", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let weights = if k == p.len() {
        idx.iter().map(|&i| p[i]).collect()
    } else {
        let sum: f64 = idx.iter().map(|&i| p[i] as f64).sum();
        if sum == 0.0 {
            return Err(Error::DegenerateGating);
        }
        idx.iter().map(|&i| (p[i] as f64 / sum) as f32).collect()
    };
    Ok(ExpertSelection { indices: idx, weights })
}

/// Mean squared deviation of per-expert usage from the uniform rate,
/// `(1/N) * sum((K/N - c_i/B)^2)`.
pub fn load_balance_loss(counts: &[u64], n: usize, k: usize, b: usize) -> Result<f64> {
    if counts.len() != n || n == 0 || b == 0 {
        return Err(Error::InvalidParam(format!("{} counts for N={n}, B={b}", counts.len())));
    }
    let sum: u64 = counts.iter().sum();
    let expected = (k * b) as u64;
    if sum != expected {
        return Err(Error::InconsistentUsageCounts { sum, expected });
    }
    // (K/N - c/B)^2 = (K*B - N*c)^2 / (N*B)^2: sum exactly, divide once
    let (n, kb) = (n as i128, (k * b) as i128);
    let num: i128 = counts.iter().map(|&c| (kb - n * c as i128).pow(2)).sum();
    Ok(num as f64 / (n.pow(3) * (b as i128).pow(2)) as f64)
}

/// Expert usage counts over a batch of selections.
pub fn usage_counts(selections: &[ExpertSelection], n: usize) -> Vec<u64> {
    let mut c = vec![0u64; n];
    for s in selections {
        for &i in &s.indices {
            c[i] += 1;
        }
    }
    c
}

/// Result of one MOE forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub output: Tensor,
    pub selections: Vec<ExpertSelection>,
}

/// Runtime MOE layer: a gating net, `N` expert nets sharing one template,
/// and the gate weights. Everything runs in FP32.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub gating: Net,
    pub experts: Vec<Net>,
    pub gp: GatingParams,
    pub batch_mode: BatchMode,
}

fn single_output(net: &Net, x: &Tensor) -> Result<Tensor> {
    let input = net.input_names()[0].clone();
    let mut out = net.infer(&[(input, x.clone())].into_iter().collect())?;
    let name = net.output_names()[0].clone();
    out.remove(&name).ok_or_else(|| Error::InvalidGraph(format!("output '{name}' missing")))
}

fn mix(acc: &mut [f32], w: f32, y: &[f32]) {
    acc.iter_mut().zip(y).for_each(|(a, v)| *a += w * v);
}

impl MoeLayer {
    pub fn new(gating: Net, experts: Vec<Net>, gp: GatingParams, batch_mode: BatchMode) -> Result<Self> {
        gp.check()?;
        if experts.len() != gp.n_experts {
            return Err(Error::InvalidParam(format!("{} expert nets for N={}", experts.len(), gp.n_experts)));
        }
        for net in std::iter::once(&gating).chain(&experts) {
            if net.input_names().len() != 1 || net.output_names().len() != 1 {
                return Err(Error::InvalidGraph("moe subnets need one input and one output".into()));
            }
        }
        Ok(MoeLayer { gating, experts, gp, batch_mode })
    }

    fn select(&self, features: &Tensor, first_sample: u64) -> Result<Vec<ExpertSelection>> {
        let f = features.to_f32_vec();
        let d = features.sample_len();
        f.chunks(d)
            .enumerate()
            .map(|(s, x)| select_topk(&gating_probs(&gating_logits(x, first_sample + s as u64, &self.gp)?)?, self.gp.top_k))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<MoeOutput> {
        self.forward_with(x, self.batch_mode)
    }

    /// Runs in the given batch mode; both modes give bit-identical output.
    pub fn forward_with(&self, x: &Tensor, mode: BatchMode) -> Result<MoeOutput> {
        let x = if x.dtype() == crate::dtype::DataType::Fp32 {
            x.clone()
        } else {
            Tensor::from_f32(x.shape(), &x.to_f32_vec())?
        };
        let b = x.batch();
        match mode {
            BatchMode::PerSample => {
                let mut rows = Vec::with_capacity(b);
                let mut selections = Vec::with_capacity(b);
                let mut shape = None;
                for s in 0..b {
                    let xs = x.batch_slice(s, 1)?;
                    let sel = self.select(&single_output(&self.gating, &xs)?, s as u64)?.remove(0);
                    let mut acc: Option<Vec<f32>> = None;
                    for (&e, &w) in sel.indices.iter().zip(&sel.weights) {
                        let y = single_output(&self.experts[e], &xs)?;
                        check_shape(&mut shape, y.shape())?;
                        mix(acc.get_or_insert_with(|| vec![0.0; y.len()]), w, &y.to_f32_vec());
                    }
                    rows.push(Tensor::from_f32(shape.as_ref().expect("k >= 1"), &acc.expect("k >= 1"))?);
                    selections.push(sel);
                }
                Ok(MoeOutput { output: Tensor::concat_batch(&rows)?, selections })
            }
            BatchMode::AllExperts => {
                let selections = self.select(&single_output(&self.gating, &x)?, 0)?;
                let outs: Vec<Tensor> = self.experts.iter().map(|net| single_output(net, &x)).collect::<Result<_>>()?;
                let mut shape = None;
                for y in &outs {
                    let mut one = y.shape().to_vec();
                    one[0] = 1;
                    check_shape(&mut shape, &one)?;
                }
                let vals: Vec<Vec<f32>> = outs.iter().map(Tensor::to_f32_vec).collect();
                let len = outs[0].sample_len();
                let mut data = vec![0.0f32; b * len];
                for (s, sel) in selections.iter().enumerate() {
                    let acc = &mut data[s * len..(s + 1) * len];
                    for (&e, &w) in sel.indices.iter().zip(&sel.weights) {
                        mix(acc, w, &vals[e][s * len..(s + 1) * len]);
                    }
                }
                let mut out_shape = outs[0].shape().to_vec();
                out_shape[0] = b;
                Ok(MoeOutput { output: Tensor::from_f32(&out_shape, &data)?, selections })
            }
        }
    }
}

fn check_shape(seen: &mut Option<Vec<usize>>, shape: &[usize]) -> Result<()> {
    match seen {
        Some(s) if s.as_slice() != shape => {
            Err(Error::ShapeMismatch(format!("expert outputs differ: {s:?} vs {shape:?}")))
        }
        Some(_) => Ok(()),
        None => {
            *seen = Some(shape.to_vec());
            Ok(())
        }
    }
}
