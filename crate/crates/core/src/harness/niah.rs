//! Synthetic needle-in-a-haystack streams.
//!
//! A haystack of `n` key/value pairs carries one or more needles at uniformly
//! drawn positions. Values are entries of a shared codebook, so a read-out
//! is decoded by taking the nearest codebook entry. Codebook entries all
//! have norm `√d`. The probe is the key of
//! the first needle; recall succeeds when the decoded entry is that needle's
//! value.
//!
//! Distractor keys are either i.i.d. Gaussian with random codebook values,
//! or drawn around a few cluster centres where each cluster always carries
//! the same value. Gaussian haystacks draw needle keys from the same
//! Gaussian. Clustered haystacks place cluster centres and needle keys
//! uniformly on the sphere of radius `key_scale·√d`, so no cluster is
//! favoured by its norm alone.

use serde::{Deserialize, Serialize};

use crate::attention::{pairs_from_stream, KVPair};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, l2_distance, SeededRng, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyDistribution {
    Gaussian,
    Clustered,
}

impl KeyDistribution {
    pub fn name(self) -> &'static str {
        match self {
            KeyDistribution::Gaussian => "gaussian",
            KeyDistribution::Clustered => "clustered",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub haystack_len: usize,
    pub needle_count: usize,
    pub d: usize,
    pub key_distribution: KeyDistribution,
    pub value_codebook_size: usize,
    pub seed: u64,
    /// Standard deviation of key and query entries.
    #[serde(default = "default_key_scale")]
    pub key_scale: f64,
    /// Cluster count for the clustered distribution.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Spread of clustered keys around their centre, relative to `key_scale`.
    #[serde(default = "default_cluster_spread")]
    pub cluster_spread: f64,
    /// Standard deviation of Gaussian noise added to each distractor value.
    #[serde(default)]
    pub value_noise: f64,
    /// Standard deviation of Gaussian noise added to the probe.
    #[serde(default)]
    pub probe_noise: f64,
}

fn default_key_scale() -> f64 {
    1.0
}

fn default_clusters() -> usize {
    4
}

fn default_cluster_spread() -> f64 {
    0.1
}

impl SyntheticTaskSpec {
    pub fn new(
        haystack_len: usize,
        needle_count: usize,
        d: usize,
        key_distribution: KeyDistribution,
        value_codebook_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            haystack_len,
            needle_count,
            d,
            key_distribution,
            value_codebook_size,
            seed,
            key_scale: default_key_scale(),
            clusters: default_clusters(),
            cluster_spread: default_cluster_spread(),
            value_noise: 0.0,
            probe_noise: 0.0,
        }
    }

    /// A haystack of near-repeats of one key/value pattern: a single cluster
    /// on the sphere of radius `2√2·√d` with spread 0.1, values jittered by
    /// 0.1, a 16-entry codebook and one needle. The hidden state learns the
    /// haystack quickly, so the needle is the pair it recalls worst.
    pub fn single_topic(haystack_len: usize, d: usize, seed: u64) -> Self {
        Self {
            key_scale: 2.0 * std::f64::consts::SQRT_2,
            clusters: 1,
            cluster_spread: 0.1,
            value_noise: 0.1,
            ..Self::new(haystack_len, 1, d, KeyDistribution::Clustered, 16, seed)
        }
    }

    pub fn with_key_scale(mut self, key_scale: f64) -> Self {
        self.key_scale = key_scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.haystack_len == 0 || self.d == 0 {
            return bad("haystack length and dimension must be positive".into());
        }
        if self.needle_count == 0 || self.needle_count > self.haystack_len {
            return bad(format!(
                "needle count {} must lie in 1..={}",
                self.needle_count, self.haystack_len
            ));
        }
        if self.value_codebook_size < 2 {
            return bad("value codebook needs at least 2 entries".into());
        }
        if !(self.key_scale > 0.0 && self.key_scale.is_finite()) {
            return bad(format!("key scale must be positive, got {}", self.key_scale));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return bad(format!(
                "cluster spread must be non-negative, got {}",
                self.cluster_spread
            ));
        }
        if !(self.value_noise >= 0.0 && self.value_noise.is_finite()) {
            return bad(format!("value noise must be non-negative, got {}", self.value_noise));
        }
        if !(self.probe_noise >= 0.0 && self.probe_noise.is_finite()) {
            return bad(format!("probe noise must be non-negative, got {}", self.probe_noise));
        }
        if self.key_distribution == KeyDistribution::Clustered && self.clusters == 0 {
            return bad("clustered keys need at least one cluster".into());
        }
        Ok(())
    }
}

/// One generated haystack.
#[derive(Clone, Debug)]
pub struct NiahInstance {
    /// Pairs with 1-based indices `1..=n`.
    pub pairs: Vec<KVPair>,
    /// One query per position, drawn from the key distribution.
    pub queries: Vec<Vector>,
    pub probe: Vector,
    pub target_value_id: usize,
    pub codebook: Vec<Vector>,
    /// 1-based positions; the first entry is the probed needle.
    pub needle_positions: Vec<usize>,
}

impl NiahInstance {
    pub fn keys(&self) -> Vec<Vector> {
        self.pairs.iter().map(|p| p.key.clone()).collect()
    }

    pub fn values(&self) -> Vec<Vector> {
        self.pairs.iter().map(|p| p.value.clone()).collect()
    }
}

struct KeySource {
    centres: Vec<Vector>,
    centre_values: Vec<usize>,
}

impl KeySource {
    fn new(rng: &mut SeededRng, spec: &SyntheticTaskSpec) -> Result<Self> {
        match spec.key_distribution {
            KeyDistribution::Gaussian => Ok(Self {
                centres: Vec::new(),
                centre_values: Vec::new(),
            }),
            KeyDistribution::Clustered => {
                let centres = sphere_sample(rng, spec.clusters, spec)?;
                let centre_values = (0..spec.clusters)
                    .map(|_| rng.below(spec.value_codebook_size))
                    .collect();
                Ok(Self { centres, centre_values })
            }
        }
    }

    fn needle_key(&self, rng: &mut SeededRng, spec: &SyntheticTaskSpec) -> Result<Vector> {
        match spec.key_distribution {
            KeyDistribution::Gaussian => Ok(gaussian_sample(rng, 1, spec.d, spec.key_scale)?.remove(0)),
            KeyDistribution::Clustered => Ok(sphere_sample(rng, 1, spec)?.remove(0)),
        }
    }

    /// A key and its codebook id.
    fn draw(&self, rng: &mut SeededRng, spec: &SyntheticTaskSpec) -> Result<(Vector, usize)> {
        if self.centres.is_empty() {
            let key = gaussian_sample(rng, 1, spec.d, spec.key_scale)?.remove(0);
            return Ok((key, rng.below(spec.value_codebook_size)));
        }
        let c = rng.below(self.centres.len());
        let spread = spec.cluster_spread * spec.key_scale;
        let key = self.centres[c].iter().map(|&m| m + rng.normal(spread)).collect();
        Ok((Vector::new(key)?, self.centre_values[c]))
    }
}

/// Generates the haystack described by `spec`, deterministically in
/// `spec.seed`.
pub fn gen_niah(spec: &SyntheticTaskSpec) -> Result<NiahInstance> {
    spec.validate()?;
    let n = spec.haystack_len;
    let mut rng = SeededRng::new(spec.seed);
    let codebook = spherical_codebook(&mut rng, spec.value_codebook_size, spec.d)?;
    let needle_positions: Vec<usize> = rng.distinct(n, spec.needle_count).into_iter().map(|p| p + 1).collect();
    let source = KeySource::new(&mut rng, spec)?;

    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut needle_ids = vec![0; n + 1];
    for &p in &needle_positions {
        needle_ids[p] = rng.below(spec.value_codebook_size) + 1;
    }
    for id in needle_ids.iter().skip(1) {
        if *id > 0 {
            keys.push(source.needle_key(&mut rng, spec)?);
            values.push(codebook[id - 1].clone());
        } else {
            let (k, v) = source.draw(&mut rng, spec)?;
            keys.push(k);
            values.push(jitter(&mut rng, &codebook[v], spec.value_noise)?);
        }
    }
    let queries = (0..n)
        .map(|_| source.draw(&mut rng, spec).map(|(q, _)| q))
        .collect::<Result<Vec<_>>>()?;

    let first = needle_positions[0];
    let probe = jitter(&mut rng, &keys[first - 1], spec.probe_noise)?;
    Ok(NiahInstance {
        pairs: pairs_from_stream(&keys, &values)?,
        queries,
        probe,
        target_value_id: needle_ids[first] - 1,
        codebook,
        needle_positions,
    })
}

fn jitter(rng: &mut SeededRng, x: &Vector, std_dev: f64) -> Result<Vector> {
    if std_dev == 0.0 {
        return Ok(x.clone());
    }
    Vector::new(x.iter().map(|&a| a + rng.normal(std_dev)).collect())
}

/// Uniform directions at radius `key_scale·√d`, the typical norm of a
/// Gaussian key.
fn sphere_sample(rng: &mut SeededRng, count: usize, spec: &SyntheticTaskSpec) -> Result<Vec<Vector>> {
    let radius = spec.key_scale * (spec.d as f64).sqrt();
    gaussian_sample(rng, count, spec.d, 1.0)?
        .into_iter()
        .map(|g| {
            let scale = radius / g.norm();
            Vector::new(g.iter().map(|x| x * scale).collect())
        })
        .collect()
}

/// Gaussian directions rescaled to norm `√d`, so nearest-entry decoding is
/// not biased toward short entries.
fn spherical_codebook(rng: &mut SeededRng, size: usize, d: usize) -> Result<Vec<Vector>> {
    let target = (d as f64).sqrt();
    gaussian_sample(rng, size, d, 1.0)?
        .into_iter()
        .map(|c| {
            let scale = target / c.norm();
            Vector::new(c.iter().map(|x| x * scale).collect())
        })
        .collect()
}

/// Index of the codebook entry nearest to `output` in L2; ties go to the
/// lower index.
pub fn decode_nearest(output: &Vector, codebook: &[Vector]) -> Result<usize> {
    if codebook.is_empty() {
        return Err(Error::EmptyInput("codebook"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in codebook.iter().enumerate() {
        crate::error::check_dim("codebook entry", output.dim(), c.dim())?;
        let dist = l2_distance(output.as_slice(), c.as_slice());
        if dist < best.1 {
            best = (i, dist);
        }
    }
    Ok(best.0)
}
