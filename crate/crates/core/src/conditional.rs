//! Latent-variable conditional model: prior and outcome networks, the
//! Gaussian posterior approximation, helper distributions and the overall
//! objective. All batch tensors hold one sample per row.

use ndarray::Array2;
use qvsum_autograd::{Graph, ParamStore, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::rng::{rng, Rng};

/// Lower clamp for probabilities fed to `log`.
pub const PROB_FLOOR: f64 = 1e-7;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalConfig {
    /// Width of the observed feature rows.
    pub x_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub helper_weight: f64,
}

impl ConditionalConfig {
    pub fn new(x_dim: usize) -> Self {
        Self { x_dim, z_dim: 16, hidden: 32, num_classes: 4, helper_weight: 1.0 }
    }
}

/// Prior-side heads `f_θ1..f_θ3` plus the feature decoder, posterior heads
/// `g_φ0..g_φ4` and helper heads `g_φ5..g_φ7`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalHeads {
    pub config: ConditionalConfig,
    pub f_t: Mlp,
    pub f_y1: Mlp,
    pub f_y0: Mlp,
    pub f_x: Mlp,
    pub g_trunk: Linear,
    pub g_mu0: Linear,
    pub g_var0: Linear,
    pub g_mu1: Linear,
    pub g_var1: Linear,
    pub g_t: Mlp,
    pub g_y1: Mlp,
    pub g_y0: Mlp,
}

impl ConditionalHeads {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, config: ConditionalConfig) -> Result<Self> {
        let (x, z, h, c) = (config.x_dim, config.z_dim, config.hidden, config.num_classes);
        if x == 0 || z == 0 || h == 0 || c < 2 {
            return Err(Error::Config("conditional heads need positive widths and at least two classes".into()));
        }
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            f_t: Mlp::new(store, rng, &n("f_t"), z, h, 1)?,
            f_y1: Mlp::new(store, rng, &n("f_y1"), z, h, c)?,
            f_y0: Mlp::new(store, rng, &n("f_y0"), z, h, c)?,
            f_x: Mlp::new(store, rng, &n("f_x"), z, h, x)?,
            g_trunk: Linear::new(store, rng, &n("g_trunk"), x + c, h, true)?,
            g_mu0: Linear::new(store, rng, &n("g_mu0"), h, z, true)?,
            g_var0: Linear::new(store, rng, &n("g_var0"), h, z, true)?,
            g_mu1: Linear::new(store, rng, &n("g_mu1"), h, z, true)?,
            g_var1: Linear::new(store, rng, &n("g_var1"), h, z, true)?,
            g_t: Mlp::new(store, rng, &n("g_t"), x, h, 1)?,
            g_y1: Mlp::new(store, rng, &n("g_y1"), x, h, c)?,
            g_y0: Mlp::new(store, rng, &n("g_y0"), x, h, c)?,
            config,
        })
    }
}

/// `Σ −½(z² + log 2π)`.
pub fn prior_log_density(z: &[f64]) -> f64 {
    z.iter().map(|v| -0.5 * (v * v + LN_2PI)).sum()
}

/// Graph version of [`prior_log_density`], summed over all entries.
pub fn prior_log_density_var(g: &mut Graph<'_>, z: Var) -> Var {
    let sq = g.square(z);
    let s = g.offset(sq, LN_2PI);
    let total = g.sum(s);
    g.scale(total, -0.5)
}

fn check_binary(t: &[u8]) -> Result<()> {
    match t.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::OutOfRange(format!("intervention flag {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// `N × width` matrix whose row `i` is filled with `t_i`.
fn flag_matrix(t: &[u8], width: usize) -> Array2<f64> {
    Array2::from_shape_fn((t.len(), width), |(i, _)| t[i] as f64)
}

/// `t ⊙ a + (1 − t) ⊙ b` with a per-row flag.
fn gate_rows(g: &mut Graph<'_>, t: &[u8], a: Var, b: Var) -> Result<Var> {
    check_binary(t)?;
    let (rows, width) = g.shape(a);
    if rows != t.len() || g.shape(b) != (rows, width) {
        return Err(Error::Shape(format!("{} flags for {rows} rows", t.len())));
    }
    let on = g.input(flag_matrix(t, width));
    let off = g.input(flag_matrix(t, width).mapv(|v| 1.0 - v));
    let a = g.mul(on, a);
    let b = g.mul(off, b);
    Ok(g.add(a, b))
}

fn one_hot(y: &[usize], classes: usize) -> Result<Array2<f64>> {
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::OutOfRange(format!("class {bad} >= {classes}")));
    }
    Ok(Array2::from_shape_fn((y.len(), classes), |(i, j)| if y[i] == j { 1.0 } else { 0.0 }))
}

/// `σ(f_θ1(z))`, `N × 1`.
pub fn intervention_prob(g: &mut Graph<'_>, z: Var, heads: &ConditionalHeads) -> Var {
    let l = heads.f_t.forward(g, z);
    g.sigmoid(l)
}

/// `t f_θ2(z) + (1 − t) f_θ3(z)`.
pub fn outcome_logits(g: &mut Graph<'_>, z: Var, t: &[u8], heads: &ConditionalHeads) -> Result<Var> {
    let a = heads.f_y1.forward(g, z);
    let b = heads.f_y0.forward(g, z);
    gate_rows(g, t, a, b)
}

/// Class probabilities of `p(y | z, t)`.
pub fn outcome_probs(g: &mut Graph<'_>, z: Var, t: &[u8], heads: &ConditionalHeads) -> Result<Var> {
    let l = outcome_logits(g, z, t, heads)?;
    Ok(g.softmax(l))
}

/// Gaussian posterior `(μ, σ²)` from features, observed class and flag.
pub fn posterior_params(
    g: &mut Graph<'_>,
    x: Var,
    y: &[usize],
    t: &[u8],
    heads: &ConditionalHeads,
) -> Result<(Var, Var)> {
    let onehot = g.input(one_hot(y, heads.config.num_classes)?);
    let xy = g.concat_cols(x, onehot);
    let h = heads.g_trunk.forward(g, xy);
    let h = g.gelu(h);
    let mu0 = heads.g_mu0.forward(g, h);
    let mu1 = heads.g_mu1.forward(g, h);
    let v0 = heads.g_var0.forward(g, h);
    let v0 = g.softplus(v0);
    let v1 = heads.g_var1.forward(g, h);
    let v1 = g.softplus(v1);
    let mu = gate_rows(g, t, mu1, mu0)?;
    let var = gate_rows(g, t, v1, v0)?;
    Ok((mu, var))
}

/// Standard-normal noise of the given shape.
pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// `z = μ + sqrt(σ²) ⊙ ε` with `ε` drawn from `seed`.
pub fn reparam_sample(g: &mut Graph<'_>, mu: Var, sigma2: Var, seed: u64) -> Result<Var> {
    if g.value(sigma2).iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("posterior variance must be positive".into()));
    }
    let (r, c) = g.shape(mu);
    let eps = g.input(standard_normal(&mut rng(seed), r, c));
    let sd = g.sqrt(sigma2);
    let noise = g.mul(sd, eps);
    Ok(g.add(mu, noise))
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` for one diagonal Gaussian.
pub fn gaussian_kl(mu: &[f64], sigma2: &[f64]) -> f64 {
    mu.iter().zip(sigma2).map(|(m, s)| 0.5 * (m * m + s - 1.0 - s.ln())).sum()
}

/// Graph version of [`gaussian_kl`], summed over all rows.
pub fn gaussian_kl_var(g: &mut Graph<'_>, mu: Var, sigma2: Var) -> Var {
    let m2 = g.square(mu);
    let lv = g.log(sigma2);
    let a = g.add(m2, sigma2);
    let a = g.sub(a, lv);
    let a = g.offset(a, -1.0);
    let s = g.sum(a);
    g.scale(s, 0.5)
}

/// `Σ_i log P(t_i)` under Bernoulli probabilities `p` (`N × 1`), floored.
fn bernoulli_log_lik(g: &mut Graph<'_>, p: Var, t: &[u8]) -> Result<Var> {
    let q = g.neg(p);
    let q = g.offset(q, 1.0);
    let chosen = gate_rows(g, t, p, q)?;
    let c = g.clamp(chosen, PROB_FLOOR, 1.0);
    let l = g.log(c);
    Ok(g.sum(l))
}

/// `Σ_i log P(y_i)` under row-wise class probabilities, floored.
fn categorical_log_lik(g: &mut Graph<'_>, probs: Var, y: &[usize]) -> Result<Var> {
    let classes = g.shape(probs).1;
    let onehot = g.input(one_hot(y, classes)?);
    let picked = g.mul(probs, onehot);
    let ones = g.input(Array2::ones((classes, 1)));
    let chosen = g.matmul(picked, ones);
    let c = g.clamp(chosen, PROB_FLOOR, 1.0);
    let l = g.log(c);
    Ok(g.sum(l))
}

/// Helper `q(t | x)` probabilities, `N × 1`.
pub fn helper_t_prob(g: &mut Graph<'_>, x: Var, heads: &ConditionalHeads) -> Var {
    let l = heads.g_t.forward(g, x);
    g.sigmoid(l)
}

/// Helper `q(y | x, t)` class probabilities.
pub fn helper_y_probs(g: &mut Graph<'_>, x: Var, t: &[u8], heads: &ConditionalHeads) -> Result<Var> {
    let a = heads.g_y1.forward(g, x);
    let b = heads.g_y0.forward(g, x);
    let l = gate_rows(g, t, a, b)?;
    Ok(g.softmax(l))
}

/// Observed batch: feature rows, intervention flags and classes.
#[derive(Clone, Copy, Debug)]
pub struct ConditionalBatch<'a> {
    pub x: Var,
    pub t: &'a [u8],
    pub y: &'a [usize],
}

fn check_batch(g: &Graph<'_>, b: &ConditionalBatch<'_>, heads: &ConditionalHeads) -> Result<()> {
    let (n, d) = g.shape(b.x);
    if n == 0 {
        return Err(Error::Empty("conditional batch"));
    }
    if b.t.len() != n || b.y.len() != n {
        return Err(Error::LengthMismatch(format!("{n} rows, {} flags, {} labels", b.t.len(), b.y.len())));
    }
    if d != heads.config.x_dim {
        return Err(Error::Shape(format!("feature width {d}, heads expect {}", heads.config.x_dim)));
    }
    Ok(())
}

/// `Σ_i [log q(t_i* | x_i*) + log q(y_i* | x_i*, t_i*)]`, to be maximized.
pub fn helper_loss(g: &mut Graph<'_>, batch: &ConditionalBatch<'_>, heads: &ConditionalHeads) -> Result<Var> {
    check_batch(g, batch, heads)?;
    helper_from_probs(g, batch, heads, None)
}

fn helper_from_probs(
    g: &mut Graph<'_>,
    batch: &ConditionalBatch<'_>,
    heads: &ConditionalHeads,
    probs: Option<(Var, Var)>,
) -> Result<Var> {
    let (pt, py) = match probs {
        Some(p) => p,
        None => (helper_t_prob(g, batch.x, heads), helper_y_probs(g, batch.x, batch.t, heads)?),
    };
    let lt = bernoulli_log_lik(g, pt, batch.t)?;
    let ly = categorical_log_lik(g, py, batch.y)?;
    Ok(g.add(lt, ly))
}

/// Helper term from given probabilities; used to check the term in
/// isolation from the heads.
pub fn helper_term_from_probs(g: &mut Graph<'_>, pt: Var, py: Var, t: &[u8], y: &[usize]) -> Result<Var> {
    let lt = bernoulli_log_lik(g, pt, t)?;
    let ly = categorical_log_lik(g, py, y)?;
    Ok(g.add(lt, ly))
}

/// Scalar nodes of the objective; `total` is maximized.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub helper: Var,
    pub log_px: Var,
    pub log_pt: Var,
    pub log_py: Var,
    pub kl: Var,
}

/// `L_helper·w + Σ_i E_q[log p(x_i | z) + log p(t_i | z) + log p(y_i | t_i, z)] − KL(q ‖ p(z))`
/// with one reparameterized sample. `p(x | z)` is a unit-variance Gaussian
/// over the (detached) feature rows.
pub fn conditional_objective(
    g: &mut Graph<'_>,
    batch: &ConditionalBatch<'_>,
    heads: &ConditionalHeads,
    seed: u64,
) -> Result<ObjectiveTerms> {
    check_batch(g, batch, heads)?;
    let helper = helper_loss(g, batch, heads)?;
    let (mu, var) = posterior_params(g, batch.x, batch.y, batch.t, heads)?;
    let z = reparam_sample(g, mu, var, seed)?;

    let target = g.input(g.value(batch.x).clone());
    let recon = heads.f_x.forward(g, z);
    let diff = g.sub(target, recon);
    let sq = g.square(diff);
    let sq = g.offset(sq, LN_2PI);
    let log_px = g.sum(sq);
    let log_px = g.scale(log_px, -0.5);

    let pt = intervention_prob(g, z, heads);
    let log_pt = bernoulli_log_lik(g, pt, batch.t)?;
    let py = outcome_probs(g, z, batch.t, heads)?;
    let log_py = categorical_log_lik(g, py, batch.y)?;
    let kl = gaussian_kl_var(g, mu, var);

    let weighted = g.scale(helper, heads.config.helper_weight);
    let elbo = g.add(log_px, log_pt);
    let elbo = g.add(elbo, log_py);
    let elbo = g.sub(elbo, kl);
    let total = g.add(weighted, elbo);
    Ok(ObjectiveTerms { total, helper, log_px, log_pt, log_py, kl })
}

/// Inference-time class probabilities `q(y | x, t = 0)`.
pub fn predict_probs(g: &mut Graph<'_>, x: Var, heads: &ConditionalHeads) -> Result<Var> {
    let n = g.shape(x).0;
    helper_y_probs(g, x, &vec![0; n], heads)
}
