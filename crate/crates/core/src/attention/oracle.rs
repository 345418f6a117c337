use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot_slices, Vector};

/// Exact causal softmax attention: `y_t = Σ_{i≤t} α_{ti} v_i` with
/// `α_{ti} ∝ exp(scale · q_tᵀk_i)`.
///
/// Logits are shifted by their running maximum before exponentiation.
pub fn softmax_attention_oracle(qs: &[Vector], ks: &[Vector], vs: &[Vector], scale: f64) -> Result<Vec<Vector>> {
    let n = qs.len();
    if n == 0 {
        return Err(Error::EmptyInput("softmax oracle"));
    }
    check_dim("oracle keys", n, ks.len())?;
    check_dim("oracle values", n, vs.len())?;
    let d = qs[0].dim();
    for (q, (k, v)) in qs.iter().zip(ks.iter().zip(vs)) {
        check_dim("oracle query", d, q.dim())?;
        check_dim("oracle key", d, k.dim())?;
        check_dim("oracle value", d, v.dim())?;
    }

    let mut outputs = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for t in 0..n {
        let q = qs[t].as_slice();
        logits.clear();
        logits.extend(ks[..=t].iter().map(|k| scale * dot_slices(q, k.as_slice())));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut num = vec![0.0; vs[0].dim()];
        let mut den = 0.0;
        for (l, v) in logits.iter().zip(&vs[..=t]) {
            let w = (l - max).exp();
            den += w;
            for (o, x) in num.iter_mut().zip(v.iter()) {
                *o += w * x;
            }
        }
        outputs.push(Vector::from_raw(num.into_iter().map(|x| x / den).collect()));
    }
    Ok(outputs)
}
