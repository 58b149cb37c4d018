use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{default_anatomy_labels, FeatureBundle};
use crate::tensor::Tensor;

pub const NORMAL_TEMPLATE: &str = "no pneumothorax, or pleural effusion.";
pub const FINDING_KINDS: [&str; 4] = ["patchy atelectasis", "opacity", "consolidation", "nodular density"];

/// Scale of the view-specific offsets added to the global features.
const VIEW_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub anatomy_labels: Vec<String>,
    pub d_feature: usize,
    /// Probability that an example carries one finding.
    pub p_abn: f64,
    pub signal: f64,
    /// Per-anatomy override of `signal`, aligned with `anatomy_labels`.
    pub anatomy_signal: Option<Vec<f64>>,
    /// Noise standard deviation as a fraction of the signal strength.
    pub noise_ratio: f64,
    pub kinds: Vec<String>,
    pub normal_template: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            anatomy_labels: default_anatomy_labels(),
            d_feature: 64,
            p_abn: 0.5,
            signal: 1.0,
            anatomy_signal: None,
            noise_ratio: 0.1,
            kinds: FINDING_KINDS.iter().map(|s| s.to_string()).collect(),
            normal_template: NORMAL_TEMPLATE.into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.anatomy_labels.is_empty() {
            return bad("at least one anatomy is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.anatomy_labels.iter().find(|l| !seen.insert(l.as_str())) {
            return bad(format!("duplicate anatomy label `{dup}`"));
        }
        if self.d_feature < 4 {
            return bad(format!("feature dimension must be at least 4, got {}", self.d_feature));
        }
        if !(0.0..=1.0).contains(&self.p_abn) {
            return bad(format!("p_abn must lie in [0, 1], got {}", self.p_abn));
        }
        if !self.noise_ratio.is_finite() || self.noise_ratio < 0.0 {
            return bad(format!("noise_ratio must be non-negative, got {}", self.noise_ratio));
        }
        if let Some(s) = &self.anatomy_signal {
            if s.len() != self.anatomy_labels.len() {
                return bad(format!(
                    "{} per-anatomy signals for {} anatomies",
                    s.len(),
                    self.anatomy_labels.len()
                ));
            }
        }
        if self.signals().iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("signal strengths must be finite and non-negative".into());
        }
        if self.kinds.is_empty() {
            return bad("at least one finding kind is required".into());
        }
        Ok(())
    }

    fn signals(&self) -> Vec<f64> {
        self.anatomy_signal
            .clone()
            .unwrap_or_else(|| vec![self.signal; self.anatomy_labels.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub anatomy: String,
    pub kind: String,
}

impl Finding {
    pub fn sentence(&self) -> String {
        format!("{} in the {}.", self.kind, self.anatomy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub bundle: FeatureBundle<f32>,
    pub report: String,
    /// Ground truth behind the report; never shown to the model.
    pub latent: Vec<Finding>,
}

impl Example {
    pub fn is_abnormal(&self) -> bool {
        !self.latent.is_empty()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct World {
    base: Vec<Vec<f64>>,
    /// One direction per finding kind, shared by all anatomies.
    pattern: Vec<Vec<f64>>,
    view_offset: [Vec<f64>; 2],
}

impl World {
    fn draw(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_feature;
        let n = config.anatomy_labels.len();
        let base = (0..n).map(|_| unit_vector(&mut rng, d)).collect();
        let pattern = (0..config.kinds.len()).map(|_| unit_vector(&mut rng, d)).collect();
        let view_offset = [0, 1].map(|_| unit_vector(&mut rng, d).into_iter().map(|x| x * VIEW_OFFSET).collect());
        Self {
            base,
            pattern,
            view_offset,
        }
    }
}

/// Deterministic corpus of `config.count` examples.
///
/// Example `i` draws from its own ChaCha stream, so any example can be
/// regenerated independently of the others.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<Example>> {
    config.validate()?;
    let world = World::draw(config);
    let signals = config.signals();
    let mean_signal = signals.iter().sum::<f64>() / signals.len() as f64;
    (0..config.count)
        .map(|i| generate_one(config, &world, &signals, mean_signal, i))
        .collect()
}

fn generate_one(config: &SynthConfig, world: &World, signals: &[f64], mean_signal: f64, i: usize) -> Result<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64 + 1);
    let n = config.anatomy_labels.len();
    let d = config.d_feature;

    let finding = if rng.random::<f64>() < config.p_abn {
        Some((rng.random_range(0..n), rng.random_range(0..config.kinds.len())))
    } else {
        None
    };

    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let noise = Normal::new(0.0, config.noise_ratio * signals[k]).map_err(|e| Error::Config(e.to_string()))?;
        let mut row: Vec<f64> = world.base[k].iter().map(|b| b + noise.sample(&mut rng)).collect();
        if let Some((a, kind)) = finding {
            if a == k {
                for (r, p) in row.iter_mut().zip(&world.pattern[kind]) {
                    *r += signals[k] * p;
                }
            }
        }
        rows.push(row);
    }
    let noise = Normal::new(0.0, config.noise_ratio * mean_signal).map_err(|e| Error::Config(e.to_string()))?;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let [frontal, lateral] = [0, 1].map(|v| {
        mean.iter()
            .zip(&world.view_offset[v])
            .map(|(m, o)| (m + o + noise.sample(&mut rng)) as f32)
            .collect::<Vec<f32>>()
    });

    let to_f32 = |r: &Vec<f64>| r.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let regions = Tensor::from_rows(&rows.iter().map(to_f32).collect::<Vec<_>>())?;
    let bundle = FeatureBundle::new(
        regions,
        Tensor::row_vector(frontal),
        Tensor::row_vector(lateral),
        config.anatomy_labels.clone(),
    )?;

    let latent: Vec<Finding> = finding
        .map(|(a, kind)| Finding {
            anatomy: config.anatomy_labels[a].clone(),
            kind: config.kinds[kind].clone(),
        })
        .into_iter()
        .collect();
    let mut report = String::new();
    for f in &latent {
        report.push_str(&f.sentence());
        report.push(' ');
    }
    report.push_str(&config.normal_template);
    Ok(Example {
        id: format!("synth-{i:05}"),
        bundle,
        report,
        latent,
    })
}
