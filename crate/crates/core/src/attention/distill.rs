//! Gradient-descent distillation of the feature map weights.
//!
//! The student is plain causal linear attention
//! `ŷ_t = Σ_{j≤t} a_tj v_j / Σ_{j≤t} a_tj` with `a_tj = φ(q_t)ᵀφ(k_j)`, the
//! teacher is exact softmax attention, and the loss is
//! `L = Σ_seq Σ_t ‖y_t − ŷ_t‖²`.
//!
//! For the paired exponential map, `a_tj = Σ_i 2·cosh(w_iᵀ(q_t + k_j))`, so
//! `∂a_tj/∂w_i = (φ_i(q)φ_i(k) − φ_{i+D/2}(q)φ_{i+D/2}(k)) (q_t + k_j)`.
//! The chain rule through the normalized read-out gives
//! `∂L/∂a_tj = 2(ŷ_t − y_t)ᵀ(v_j − ŷ_t) / Z_t`.

use super::{softmax_attention_oracle, AttentionConfig, FeatureMapParams};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot_slices, gaussian_sample, Matrix, SeededRng, Vector};

/// Halvings tried per step before the run is declared converged.
const MAX_BACKTRACKS: usize = 40;

/// One training sequence with its cached teacher outputs.
#[derive(Clone, Debug)]
pub struct TeacherSequence {
    pub qs: Vec<Vector>,
    pub ks: Vec<Vector>,
    pub vs: Vec<Vector>,
    targets: Vec<Vector>,
}

impl TeacherSequence {
    pub fn new(qs: Vec<Vector>, ks: Vec<Vector>, vs: Vec<Vector>, scale: f64) -> Result<Self> {
        let targets = softmax_attention_oracle(&qs, &ks, &vs, scale)?;
        Ok(Self { qs, ks, vs, targets })
    }

    pub fn len(&self) -> usize {
        self.qs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qs.is_empty()
    }

    pub fn targets(&self) -> &[Vector] {
        &self.targets
    }
}

/// Gaussian q/k/v sequences; keys and queries use `key_scale` as the entry
/// standard deviation, values are standard normal.
pub fn synthetic_teacher_corpus(
    rng: &mut SeededRng,
    config: &AttentionConfig,
    sequences: usize,
    len: usize,
    key_scale: f64,
) -> Result<Vec<TeacherSequence>> {
    let d = config.head_dim;
    (0..sequences)
        .map(|_| {
            let qs = gaussian_sample(rng, len, d, key_scale)?;
            let ks = gaussian_sample(rng, len, d, key_scale)?;
            let vs = gaussian_sample(rng, len, d, 1.0)?;
            TeacherSequence::new(qs, ks, vs, config.scale)
        })
        .collect()
}

/// Result of a distillation run. `loss_history[0]` is the initial loss and
/// entry `s` the loss after step `s`.
#[derive(Clone, Debug)]
pub struct Distilled {
    pub params: FeatureMapParams,
    pub loss_history: Vec<f64>,
    pub learning_rate: f64,
}

impl Distilled {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds the initial loss")
    }
}

/// Initializes φ from `rng` and runs `steps` of backtracking gradient descent.
pub fn distill_feature_map(
    rng: &mut SeededRng,
    config: &AttentionConfig,
    sequences: &[TeacherSequence],
    steps: usize,
    learning_rate: f64,
) -> Result<Distilled> {
    let params = FeatureMapParams::init(rng, config)?;
    refine(params, sequences, steps, learning_rate)
}

/// Gradient descent from given weights. A step whose loss would increase
/// (or overflow the feature map) is retried at half the learning rate.
pub fn refine(
    mut params: FeatureMapParams,
    sequences: &[TeacherSequence],
    steps: usize,
    learning_rate: f64,
) -> Result<Distilled> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("distillation corpus"));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    let mut loss = distillation_loss(&params, sequences)?;
    if loss.is_nan() {
        return Err(Error::Divergence { step: 0, loss });
    }
    let mut history = vec![loss];
    let mut lr = learning_rate;

    'outer: for step in 1..=steps {
        let (_, grad) = distillation_gradient(&params, sequences)?;
        for _ in 0..MAX_BACKTRACKS {
            let trial = step_weights(&params, &grad, lr)?;
            match distillation_loss(&trial, sequences) {
                Ok(l) if l.is_nan() => return Err(Error::Divergence { step, loss: l }),
                Ok(l) if l <= loss => {
                    params = trial;
                    loss = l;
                    history.push(loss);
                    continue 'outer;
                }
                Ok(_) | Err(Error::FeatureOverflow { .. }) => lr *= 0.5,
                Err(e) => return Err(e),
            }
        }
        // No descent direction at representable step sizes.
        history.push(loss);
    }
    Ok(Distilled {
        params,
        loss_history: history,
        learning_rate: lr,
    })
}

fn step_weights(params: &FeatureMapParams, grad: &Matrix, lr: f64) -> Result<FeatureMapParams> {
    let w = params.weights();
    let data = w
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(x, g)| x - lr * g)
        .collect();
    FeatureMapParams::from_weights(Matrix::from_row_major(w.rows(), w.cols(), data)?)?
        .with_overflow_bound(params.overflow_bound())
}

struct Forward {
    phi_q: Vec<Vec<f64>>,
    phi_k: Vec<Vec<f64>>,
    preds: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn forward(params: &FeatureMapParams, seq: &TeacherSequence) -> Result<Forward> {
    let d = params.head_dim();
    for (q, (k, v)) in seq.qs.iter().zip(seq.ks.iter().zip(&seq.vs)) {
        check_dim("distillation query", d, q.dim())?;
        check_dim("distillation key", d, k.dim())?;
        check_dim("distillation value", d, v.dim())?;
    }
    let phi_q = seq
        .qs
        .iter()
        .map(|q| params.apply(q.as_slice()).map(Vector::into_inner))
        .collect::<Result<Vec<_>>>()?;
    let phi_k = seq
        .ks
        .iter()
        .map(|k| params.apply(k.as_slice()).map(Vector::into_inner))
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Vec::with_capacity(seq.len());
    let mut norms = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mut num = vec![0.0; d];
        let mut z = 0.0;
        for j in 0..=t {
            let a = dot_slices(&phi_q[t], &phi_k[j]);
            z += a;
            for (o, x) in num.iter_mut().zip(seq.vs[j].iter()) {
                *o += a * x;
            }
        }
        for o in &mut num {
            *o /= z;
        }
        preds.push(num);
        norms.push(z);
    }
    Ok(Forward {
        phi_q,
        phi_k,
        preds,
        norms,
    })
}

pub fn distillation_loss(params: &FeatureMapParams, sequences: &[TeacherSequence]) -> Result<f64> {
    let mut loss = 0.0;
    for seq in sequences {
        let fwd = forward(params, seq)?;
        for (p, y) in fwd.preds.iter().zip(&seq.targets) {
            loss += p.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(loss)
}

/// Loss and its gradient with respect to the `(D/2) × d` weight matrix.
pub fn distillation_gradient(params: &FeatureMapParams, sequences: &[TeacherSequence]) -> Result<(f64, Matrix)> {
    let half = params.feature_dim() / 2;
    let d = params.head_dim();
    let mut grad = Matrix::zeros(half, d);
    let mut loss = 0.0;
    for seq in sequences {
        let fwd = forward(params, seq)?;
        let n = seq.len();
        // row_acc[t][i] = Σ_j c_tj δ^i_tj and col_acc[j][i] = Σ_t c_tj δ^i_tj,
        // so that ∂L/∂w_i = Σ_t row_acc[t][i] q_t + Σ_j col_acc[j][i] k_j.
        let mut row_acc = vec![vec![0.0; half]; n];
        let mut col_acc = vec![vec![0.0; half]; n];
        for t in 0..n {
            let pred = &fwd.preds[t];
            let g: Vec<f64> = pred
                .iter()
                .zip(seq.targets[t].iter())
                .map(|(p, y)| 2.0 * (p - y))
                .collect();
            loss += g.iter().map(|x| 0.25 * x * x).sum::<f64>();
            let inv_z = 1.0 / fwd.norms[t];
            let pq = &fwd.phi_q[t];
            for j in 0..=t {
                let diff: f64 = g
                    .iter()
                    .zip(seq.vs[j].iter().zip(pred))
                    .map(|(gi, (v, p))| gi * (v - p))
                    .sum();
                let c = diff * inv_z;
                let pk = &fwd.phi_k[j];
                for i in 0..half {
                    let delta = pq[i] * pk[i] - pq[i + half] * pk[i + half];
                    let b = c * delta;
                    row_acc[t][i] += b;
                    col_acc[j][i] += b;
                }
            }
        }
        for i in 0..half {
            let row = grad.row_mut(i);
            for t in 0..n {
                let r = row_acc[t][i];
                let c = col_acc[t][i];
                for ((g, q), k) in row.iter_mut().zip(seq.qs[t].iter()).zip(seq.ks[t].iter()) {
                    *g += r * q + c * k;
                }
            }
        }
    }
    Ok((loss, grad))
}
