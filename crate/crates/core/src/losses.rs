//! Cosine alignment, its sum over granularities, the language-model loss
//! and their weighted combination.
//!
//! The functions here evaluate on plain arrays in 64-bit; the training path
//! builds the same quantities on a [`Tape`](crate::numcore::Tape) through
//! [`tape_losses`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Array, Real, Tape, Var, COSINE_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align_fine: f64,
    pub align_coarse: f64,
    pub align_total: f64,
    pub lm: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Component-wise mean over samples, recombined with the shared weights.
    pub fn mean(parts: &[LossBreakdown]) -> Result<LossBreakdown> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty batch".into()))?;
        let n = parts.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Ok(combined(
            avg(|p| p.align_fine),
            avg(|p| p.align_coarse),
            avg(|p| p.lm),
            first.alpha,
            first.beta,
        ))
    }
}

/// Mean over rows of `1 − cos(q_i, v_i)`.
pub fn align_loss<T: Real>(q_out: &Array<T>, target: &Array<T>) -> Result<f64> {
    if q_out.shape() != target.shape() || q_out.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "align_loss",
            lhs: q_out.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for i in 0..q_out.rows() {
        let (q, v) = (q_out.row(i), target.row(i));
        let nv = v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if nv < COSINE_EPS {
            return Err(Error::DegenerateTarget { row: i });
        }
        let nq = q.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let cos = if nq < COSINE_EPS {
            0.0
        } else {
            q.iter().zip(v).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / (nq * nv)
        };
        total += 1.0 - cos;
    }
    Ok(total / q_out.rows() as f64)
}

/// Plain sum over granularities.
pub fn total_align(per_stride: &[f64]) -> f64 {
    per_stride.iter().sum()
}

/// Mean token cross-entropy over positions with a non-negative label.
pub fn lm_loss<T: Real>(logits: &Array<T>, labels: &[i64]) -> Result<f64> {
    let (l, v) = logits.as_matrix("lm_loss")?;
    if labels.len() != l {
        return Err(Error::Dimension {
            op: "lm_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    let mut active = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 {
            continue;
        }
        if y as usize >= v {
            return Err(Error::Contract(format!("label {y} outside vocabulary of {v}")));
        }
        let row = logits.row(i);
        let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[y as usize].as_f64();
        active += 1;
    }
    if active == 0 {
        return Err(Error::Contract("lm_loss with zero active labels".into()));
    }
    Ok(total / active as f64)
}

pub fn combined(align_fine: f64, align_coarse: f64, lm: f64, alpha: f64, beta: f64) -> LossBreakdown {
    let align_total = total_align(&[align_fine, align_coarse]);
    LossBreakdown {
        align_fine,
        align_coarse,
        align_total,
        lm,
        total: alpha * align_total + beta * lm,
        alpha,
        beta,
    }
}

/// Loss nodes of one sample on a tape.
pub struct TapeLosses {
    /// `(stride, loss)` per supervised granularity.
    pub align: Vec<(usize, Var)>,
    pub lm: Option<Var>,
    pub total: Var,
}

impl TapeLosses {
    /// Read the values back as a [`LossBreakdown`]. The finest stride is
    /// reported as `align_fine`; every other stride adds into `align_coarse`.
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, alpha: f64, beta: f64) -> LossBreakdown {
        let fine = self.align.iter().map(|(s, _)| *s).min();
        let (mut f, mut c) = (0.0, 0.0);
        for &(s, v) in &self.align {
            let x = tape.scalar(v).as_f64();
            if Some(s) == fine {
                f += x;
            } else {
                c += x;
            }
        }
        let lm = self.lm.map(|v| tape.scalar(v).as_f64()).unwrap_or(0.0);
        combined(f, c, lm, alpha, beta)
    }
}

/// Build `α · Σ_s align_s + β · lm` on the tape. `aligned` pairs each
/// stride's projected query output with its pooled target tokens.
pub fn tape_losses<T: Real>(
    tape: &mut Tape<T>,
    aligned: Vec<(usize, Var, Array<T>)>,
    logits: Var,
    labels: &[i64],
    alpha: f64,
    beta: f64,
) -> Result<TapeLosses> {
    let mut align = Vec::with_capacity(aligned.len());
    for (stride, q, target) in aligned {
        align.push((stride, tape.cosine_align(q, target)?));
    }
    let lm = if labels.iter().any(|&l| l >= 0) {
        Some(tape.cross_entropy(logits, labels)?)
    } else {
        None
    };
    let mut terms = Vec::new();
    for &(_, a) in &align {
        terms.push(tape.scale(a, T::lit(alpha)));
    }
    if let Some(l) = lm {
        terms.push(tape.scale(l, T::lit(beta)));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Err(Error::Contract("sample has neither alignment targets nor labels".into())),
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(TapeLosses { align, lm, total })
}
