//! Loss terms of the decoupling objective. All functions are dtype-agnostic
//! so gradient checks can run them in double precision.

use candle_core::{DType, Tensor, D};
use candle_nn::ops::log_softmax;

use crate::error::{Error, Result};

/// Columns whose L2 norm does not exceed this are treated as having zero cosine.
pub const COLUMN_NORM_FLOOR: f64 = 1e-8;

pub struct VqLoss {
    pub rec: Tensor,
    pub embed: Tensor,
    pub commit: Tensor,
    pub total: Tensor,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Reconstruction, codebook and commitment terms.
///
/// `embed` moves the codebook toward frozen encoder outputs; `commit` moves
/// the encoder toward frozen codes, weighted by `beta`.
pub fn loss_vqvae(x: &Tensor, x_hat: &Tensor, s: &Tensor, s_quantized: &Tensor, beta: f64) -> Result<VqLoss> {
    same_shape(x, x_hat, "reconstruction")?;
    same_shape(s, s_quantized, "quantization")?;
    let rec = (x_hat - x)?.sqr()?.mean_all()?;
    let embed = (s.detach() - s_quantized)?.sqr()?.mean_all()?;
    let commit = ((s - s_quantized.detach())?.sqr()?.mean_all()? * beta)?;
    let total = ((&rec + &embed)? + &commit)?;
    Ok(VqLoss { rec, embed, commit, total })
}

/// `sum_i sum_a p log p` from row-wise log-probabilities; never positive.
pub fn entropy_from_log_probs(log_p: &Tensor) -> Result<Tensor> {
    Ok((log_p.exp()? * log_p)?.sum_all()?)
}

/// Negative summed conditional entropy of classifier outputs `(batch, classes)`.
/// Rows must be probability vectors; zero entries contribute zero.
pub fn attribute_entropy_loss(probs: &Tensor) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = probs.to_dtype(DType::F64)?.to_vec2()?;
    for (i, row) in rows.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|p| !p.is_finite() || *p < -1e-12) {
            return Err(Error::Numerical(format!(
                "classifier output row {i} is not a probability vector (sums to {total})"
            )));
        }
    }
    let safe = probs.maximum(1e-30)?;
    Ok((probs * safe.log()?)?.sum_all()?)
}

/// Entropy term straight from classifier logits, numerically stable.
pub fn attribute_entropy_from_logits(logits: &Tensor) -> Result<Tensor> {
    entropy_from_log_probs(&log_softmax(logits, D::Minus1)?)
}

/// `||D - I||_F^2` where `D_ij` is the cosine between column `i` of `s` and
/// column `j` of `s_minus`, taken over the row (sample) dimension.
pub fn bottleneck_loss(s: &Tensor, s_minus: &Tensor) -> Result<Tensor> {
    same_shape(s, s_minus, "bottleneck")?;
    let (rows, cols) = s.dims2()?;
    if cols > rows {
        log::debug!("bottleneck similarity over {cols} columns from only {rows} rows is rank deficient");
    }
    let a = unit_columns(s)?;
    let b = unit_columns(s_minus)?;
    let sim = a.t()?.matmul(&b)?;
    let eye = Tensor::eye(cols, s.dtype(), s.device())?;
    Ok((sim - eye)?.sqr()?.sum_all()?)
}

fn unit_columns(x: &Tensor) -> Result<Tensor> {
    let sumsq = x.sqr()?.sum_keepdim(0)?;
    let norms = sumsq.maximum(1e-30)?.sqrt()?;
    let mask: Vec<f64> = norms
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|n| if n > COLUMN_NORM_FLOOR { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, norms.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_div(&norms)?.broadcast_mul(&mask)?)
}

/// The combined objective; `alpha == 0` or `lambda == 0` drops the term entirely.
pub fn overall_loss(vq: &Tensor, entropy: Option<&Tensor>, alpha: f64, bottleneck: Option<&Tensor>, lambda: f64) -> Result<Tensor> {
    let mut total = vq.clone();
    if alpha != 0.0 {
        if let Some(e) = entropy {
            total = (total + (e * alpha)?)?;
        }
    }
    if lambda != 0.0 {
        if let Some(b) = bottleneck {
            total = (total + (b * lambda)?)?;
        }
    }
    Ok(total)
}
