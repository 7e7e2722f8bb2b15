//! Central finite-difference verification of [`Graph::backward`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Outcome of [`check`] for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries probed per tensor, evenly spaced; `None` probes every entry.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, max_entries: None }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the gradients of the scalar built by `f` against central
/// differences with step `cfg.step`, one parameter tensor at a time.
pub fn check<F>(params: &[Tensor<f64>], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| alloc::vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (index, p) in params.iter().enumerate() {
        let n = p.numel();
        let probes: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &e in &probes {
            let orig = p.data()[e];
            work[index].data_mut()[e] = orig + cfg.step;
            let plus = evaluate(&f, &work)?;
            work[index].data_mut()[e] = orig - cfg.step;
            let minus = evaluate(&f, &work)?;
            work[index].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference estimate".into()));
            }
            let a = analytic[index][e];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = libm::sqrt(a2).max(libm::sqrt(n2));
        let rel_error = if denom == 0.0 { 0.0 } else { libm::sqrt(diff2) / denom };
        tensors.push(TensorCheck { index, checked: probes.len(), rel_error });
    }
    Ok(GradCheckReport { tensors })
}

/// Deterministic inputs in `[-1, 1)` for the suite below.
fn input(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut r = rng::substream(salt, 0, 0);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Contracts `out` with fixed random weights so every output entry gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, out: Var, salt: u64) -> Result<Var> {
    let w = g.constant(input(g.shape(out), salt ^ 0xFFFF));
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

type Case = (&'static str, Vec<Tensor<f64>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

/// Finite-difference checks of every differentiable operation of [`Graph`],
/// one named report per case.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let t = |shape: &[usize], salt: u64| input(shape, salt);
    // relu is probed away from its kink.
    let away_from_zero = Tensor::from_fn([3, 4], |i| if i % 2 == 0 { 0.3 + 0.1 * i as f64 } else { -0.2 - 0.1 * i as f64 });
    let cases: Vec<Case> = vec![
        ("add", vec![t(&[2, 3], 1), t(&[2, 3], 2)], |g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o, 1)
        }),
        ("sub", vec![t(&[2, 3], 3), t(&[2, 3], 4)], |g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o, 2)
        }),
        ("mul", vec![t(&[2, 3], 5), t(&[2, 3], 6)], |g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o, 3)
        }),
        ("mul_same_operand", vec![t(&[4], 7)], |g, v| {
            let o = g.mul(v[0], v[0])?;
            project(g, o, 4)
        }),
        ("scale", vec![t(&[5], 8)], |g, v| {
            let o = g.scale(v[0], -1.7)?;
            project(g, o, 5)
        }),
        ("add_scalar", vec![t(&[5], 9)], |g, v| {
            let o = g.add_scalar(v[0], 0.4)?;
            let o = g.mul(o, o)?;
            project(g, o, 6)
        }),
        ("add_bias", vec![t(&[2, 3, 4], 10), t(&[4], 11)], |g, v| {
            let o = g.add_bias(v[0], v[1])?;
            let o = g.mul(o, o)?;
            project(g, o, 7)
        }),
        ("mul_bias", vec![t(&[2, 3, 4], 12), t(&[3, 4], 13)], |g, v| {
            let o = g.mul_bias(v[0], v[1])?;
            project(g, o, 8)
        }),
        ("matmul_shared_rhs", vec![t(&[2, 3, 4], 14), t(&[4, 5], 15)], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, 9)
        }),
        ("matmul_batched", vec![t(&[2, 2, 3, 4], 16), t(&[2, 2, 4, 3], 17)], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, 10)
        }),
        ("permute", vec![t(&[2, 3, 4], 18)], |g, v| {
            let o = g.permute(v[0], &[2, 0, 1])?;
            project(g, o, 11)
        }),
        ("transpose", vec![t(&[2, 3, 4], 19)], |g, v| {
            let o = g.transpose(v[0])?;
            project(g, o, 12)
        }),
        ("reshape", vec![t(&[2, 3, 4], 20)], |g, v| {
            let o = g.reshape(v[0], &[6, 4])?;
            let o = g.mul(o, o)?;
            project(g, o, 13)
        }),
        ("slice", vec![t(&[2, 5, 3], 21)], |g, v| {
            let o = g.slice(v[0], 1, 1, 3)?;
            project(g, o, 14)
        }),
        ("concat", vec![t(&[2, 2, 3], 22), t(&[2, 1, 3], 23)], |g, v| {
            let o = g.concat(&[v[0], v[1], v[0]], 1)?;
            project(g, o, 15)
        }),
        ("reduce_sum", vec![t(&[2, 3, 4], 24)], |g, v| {
            let o = g.reduce_sum(v[0], 1)?;
            let o = g.mul(o, o)?;
            project(g, o, 16)
        }),
        ("reduce_mean", vec![t(&[2, 3, 4], 25)], |g, v| {
            let o = g.reduce_mean(v[0], -1)?;
            let o = g.mul(o, o)?;
            project(g, o, 17)
        }),
        ("sum_all", vec![t(&[3, 3], 26)], |g, v| {
            let o = g.sum_all(v[0])?;
            g.mul(o, o)
        }),
        ("mean_all", vec![t(&[3, 3], 27)], |g, v| {
            let o = g.mean_all(v[0])?;
            g.mul(o, o)
        }),
        ("softmax_last", vec![t(&[2, 3, 5], 28)], |g, v| {
            let o = g.softmax(v[0], -1)?;
            project(g, o, 18)
        }),
        ("softmax_inner", vec![t(&[2, 3, 5], 29)], |g, v| {
            let o = g.softmax(v[0], 1)?;
            project(g, o, 19)
        }),
        ("layer_norm_last", vec![t(&[2, 3, 6], 30)], |g, v| {
            let o = g.layer_norm(v[0], -1, 1e-5)?;
            project(g, o, 20)
        }),
        ("layer_norm_inner", vec![t(&[2, 6, 3], 31)], |g, v| {
            let o = g.layer_norm(v[0], 1, 1e-5)?;
            project(g, o, 21)
        }),
        ("relu", vec![away_from_zero], |g, v| {
            let o = g.relu(v[0])?;
            project(g, o, 22)
        }),
        ("gelu", vec![t(&[3, 4], 32)], |g, v| {
            let o = g.scale(v[0], 3.0)?;
            let o = g.gelu(o)?;
            project(g, o, 23)
        }),
        ("linear", vec![t(&[2, 3, 4], 33), t(&[4, 5], 34), t(&[5], 35)], |g, v| {
            let o = g.linear(v[0], v[1], v[2])?;
            project(g, o, 24)
        }),
        ("attention_causal", vec![t(&[2, 5, 4], 36), t(&[2, 5, 4], 37), t(&[2, 5, 4], 38)], |g, v| {
            let o = g.scaled_dot_product_attention(v[0], v[1], v[2], true)?;
            project(g, o, 25)
        }),
        ("attention_full", vec![t(&[2, 5, 4], 39), t(&[2, 5, 4], 40), t(&[2, 5, 4], 41)], |g, v| {
            let o = g.scaled_dot_product_attention(v[0], v[1], v[2], false)?;
            project(g, o, 26)
        }),
    ];
    cases.into_iter().map(|(name, params, f)| Ok((name, check(&params, cfg, f)?))).collect()
}
