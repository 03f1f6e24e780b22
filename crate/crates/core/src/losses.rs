//! Scalar objectives and their closed-form gradients.
//!
//! Each loss has a plain evaluator (the public contract) and a `*_grad`
//! variant returning the value together with gradients of its matrix
//! inputs; the tape in [`crate::autodiff`] calls the latter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Discriminator probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_cl: f64,
    pub l_da: f64,
    pub l_mi: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_sup: f64, l_cl: f64, l_da: f64, l_mi: f64) -> Self {
        LossReport {
            l_sup,
            l_cl,
            l_da,
            l_mi,
            total: l_sup + l_cl - l_da + l_mi,
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Row-normalizes `m`, returning unit rows and the original norms.
fn unit_rows(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let n = m.row(i).norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding(i));
        }
        out.row_mut(i).unscale_mut(n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn cosine_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (ua, _) = unit_rows(a)?;
    let (ub, _) = unit_rows(b)?;
    Ok(&ua * ub.transpose())
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-view InfoNCE: `-Σ_i log softmax_j(cos(h_i, ĥ_j)/τ)[i]`.
pub fn contrastive_loss(h: &DMatrix<f64>, h_hat: &DMatrix<f64>, tau: f64) -> Result<f64> {
    contrastive_loss_grad(h, h_hat, tau).map(|(l, _, _)| l)
}

pub fn contrastive_loss_grad(
    h: &DMatrix<f64>,
    h_hat: &DMatrix<f64>,
    tau: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    if h.shape() != h_hat.shape() {
        return Err(Error::Dimension(format!(
            "contrastive views {:?} vs {:?}",
            h.shape(),
            h_hat.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    check_finite(h, "contrastive input")?;
    check_finite(h_hat, "contrastive input")?;
    let (a, na) = unit_rows(h)?;
    let (b, nb) = unit_rows(h_hat)?;
    let n = h.nrows();

    let mut g = &a * b.transpose();
    g.unscale_mut(tau);
    let mut loss = 0.0;
    for i in 0..n {
        let mut row = g.row_mut(i);
        let m = row.max();
        let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
        loss += m + z.ln() - row[i];
        row.apply(|s| *s = (*s - m).exp() / z);
        row[i] -= 1.0;
    }
    let mut da = &g * &b;
    let mut db = g.tr_mul(&a);
    da.unscale_mut(tau);
    db.unscale_mut(tau);
    Ok((loss, unit_backward(&a, &na, da), unit_backward(&b, &nb, db)))
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows.
fn unit_backward(unit: &DMatrix<f64>, norms: &[f64], mut grad: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..unit.nrows() {
        let radial = unit.row(i).dot(&grad.row(i));
        let mut gi = grad.row_mut(i);
        gi -= unit.row(i) * radial;
        gi.unscale_mut(norms[i]);
    }
    grad
}

/// Mean negative log-likelihood over the clean set, from probabilities.
pub fn supervised_loss(probs: &DMatrix<f64>, labels: &[usize], clean: &[usize]) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::NoCleanSamples);
    }
    if labels.len() != probs.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), probs.nrows())));
    }
    let mut total = 0.0;
    for &i in clean {
        let y = *labels.get(i).ok_or(Error::IndexOutOfRange { index: i, len: labels.len() })?;
        if y >= probs.ncols() {
            return Err(Error::IndexOutOfRange { index: y, len: probs.ncols() });
        }
        total -= probs[(i, y)].ln();
    }
    Ok(total / clean.len() as f64)
}

/// Softmax cross-entropy from logits, averaged over `rows`.
pub fn softmax_cross_entropy_grad(
    logits: &DMatrix<f64>,
    labels: &[usize],
    rows: &[usize],
) -> Result<(f64, DMatrix<f64>)> {
    if rows.is_empty() {
        return Err(Error::NoCleanSamples);
    }
    if labels.len() != logits.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), logits.nrows())));
    }
    check_finite(logits, "classifier logits")?;
    let scale = 1.0 / rows.len() as f64;
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut loss = 0.0;
    for &i in rows {
        let y = labels[i];
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[y];
        for c in 0..logits.ncols() {
            grad[(i, c)] += scale * ((row[c] - lse).exp() - f64::from(u8::from(c == y)));
        }
    }
    Ok((loss * scale, grad))
}

/// `-Σ log D_src - Σ log(1 - D_tgt)` over discriminator probabilities.
pub fn domain_adversarial_loss(d_src: &[f64], d_tgt: &[f64]) -> Result<f64> {
    if let Some(&p) = d_src.iter().chain(d_tgt).find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(-d_src.iter().map(|p| p.ln()).sum::<f64>() - d_tgt.iter().map(|p| (1.0 - p).ln()).sum::<f64>())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Domain loss from discriminator logits with probabilities clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`; clamped entries carry zero gradient.
pub fn domain_adversarial_logits_grad(
    z_src: &DMatrix<f64>,
    z_tgt: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    check_finite(z_src, "discriminator logits")?;
    check_finite(z_tgt, "discriminator logits")?;
    let clamp = |z: f64| {
        let p = sigmoid(z);
        (p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP), p > PROB_CLAMP && p < 1.0 - PROB_CLAMP)
    };
    let mut loss = 0.0;
    let g_src = z_src.map(|z| {
        let (p, live) = clamp(z);
        loss -= p.ln();
        if live {
            p - 1.0
        } else {
            0.0
        }
    });
    let g_tgt = z_tgt.map(|z| {
        let (p, live) = clamp(z);
        loss -= (1.0 - p).ln();
        if live {
            p
        } else {
            0.0
        }
    });
    Ok((loss, g_src, g_tgt))
}

/// Donsker–Varadhan bound `mean(T_joint) - log mean(exp(T_product))`.
pub fn mine_lower_bound(t_joint: &[f64], t_product: &DMatrix<f64>) -> Result<f64> {
    let n = t_product.ncols();
    let joint = DMatrix::from_column_slice(t_joint.len(), 1, t_joint);
    mine_bound_grad(&joint, t_product, &vec![1.0 / n as f64; n]).map(|(b, _, _)| b)
}

/// Weighted bound: the product term is `log (1/R) Σ_i Σ_k w_k exp(M_ik)`.
///
/// With one-hot labels, `T(f_i, y_j)` depends on `j` only through the class
/// of `y_j`, so an `N×N` product matrix collapses to `N×C` scores weighted by
/// class frequency with no change in value.
pub fn mine_bound_grad(
    t_joint: &DMatrix<f64>,
    t_product: &DMatrix<f64>,
    col_weights: &[f64],
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    check_finite(t_joint, "MI statistic")?;
    check_finite(t_product, "MI statistic")?;
    if t_joint.is_empty() || t_product.is_empty() {
        return Err(Error::InvalidArgument("MI bound needs at least one sample".into()));
    }
    if col_weights.len() != t_product.ncols() {
        return Err(Error::Dimension("column weights do not match product matrix".into()));
    }
    let r = t_product.nrows() as f64;
    let m = t_product.max();
    let mut soft = DMatrix::zeros(t_product.nrows(), t_product.ncols());
    let mut z = 0.0;
    for k in 0..t_product.ncols() {
        for i in 0..t_product.nrows() {
            let e = col_weights[k] * (t_product[(i, k)] - m).exp();
            soft[(i, k)] = e;
            z += e;
        }
    }
    let log_mean = m + (z / r).ln();
    let nj = t_joint.len() as f64;
    let bound = t_joint.sum() / nj - log_mean;
    soft.unscale_mut(-z);
    Ok((bound, DMatrix::from_element(t_joint.nrows(), t_joint.ncols(), 1.0 / nj), soft))
}
