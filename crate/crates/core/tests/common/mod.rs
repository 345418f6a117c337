#![allow(dead_code)]

use lola_core::numerics::{dot, gaussian_sample};
use lola_core::{AttentionConfig, FeatureMapParams, SeededRng, Vector};

pub struct Stream {
    pub attention: AttentionConfig,
    pub params: FeatureMapParams,
    pub qs: Vec<Vector>,
    pub ks: Vec<Vector>,
    pub vs: Vec<Vector>,
}

/// Random map and a Gaussian `(q, k, v)` stream, keys and queries scaled by
/// `key_scale`.
pub fn stream(seed: u64, n: usize, d: usize, key_scale: f64) -> Stream {
    let attention = AttentionConfig::new(d).unwrap();
    let mut rng = SeededRng::new(seed);
    let params = FeatureMapParams::init(&mut rng, &attention).unwrap();
    let qs = gaussian_sample(&mut rng, n, d, key_scale).unwrap();
    let ks = gaussian_sample(&mut rng, n, d, key_scale).unwrap();
    let vs = gaussian_sample(&mut rng, n, d, 1.0).unwrap();
    Stream {
        attention,
        params,
        qs,
        ks,
        vs,
    }
}

/// `Σ w_j v_j / Σ w_j` where `w_j` is the exact exponential weight for
/// `exact(j)` and the feature kernel otherwise, over 1-based `j ≤ t`.
pub fn mixed_readout(s: &Stream, q: &Vector, t: usize, exact: impl Fn(usize) -> bool) -> Vec<f64> {
    let d = s.attention.head_dim;
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for j in 1..=t {
        let k = &s.ks[j - 1];
        let w = if exact(j) {
            (s.attention.scale * dot(q, k).unwrap()).exp()
        } else {
            s.params.kernel(q.as_slice(), k.as_slice()).unwrap()
        };
        den += w;
        for c in 0..d {
            num[c] += w * s.vs[j - 1][c];
        }
    }
    num.iter().map(|x| x / den).collect()
}

/// Largest entrywise error relative to the larger of `|b|` and `floor`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}
