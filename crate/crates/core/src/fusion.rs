//! Self-adaptive fusion of anatomy region features with the two global views.
//!
//! Region features are pooled twice by multi-head attention, once with the
//! frontal global feature as query and once with the lateral one. The two
//! pooled vectors are summed into the fused region feature, which is stacked
//! with both globals into a short multi-granularity token sequence and run
//! through a stack of encoder layers.
//!
//! The ablation switches in [`GateConfig`] drop the region pathway, the
//! global pathway (a learned query replaces both views), or the attention
//! itself (an unweighted mean over regions).

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, AttentionRecord, EncoderLayer};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::Scalar;

/// Anatomy names used by default, in canonical order.
pub const DEFAULT_ANATOMIES: [&str; 14] = [
    "right lung",
    "right apical zone",
    "right upper lung zone",
    "right mid lung zone",
    "right lower lung zone",
    "left lung",
    "left apical zone",
    "left upper lung zone",
    "left mid lung zone",
    "left lower lung zone",
    "mediastinum",
    "upper mediastinum",
    "cardiac silhouette",
    "trachea",
];

pub fn default_anatomy_labels() -> Vec<String> {
    DEFAULT_ANATOMIES.iter().map(|s| s.to_string()).collect()
}

/// Region features `N×d` plus frontal and lateral global features `1×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    pub regions: Tensor<T>,
    pub frontal: Tensor<T>,
    pub lateral: Tensor<T>,
    pub anatomy_labels: Vec<String>,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn new(regions: Tensor<T>, frontal: Tensor<T>, lateral: Tensor<T>, anatomy_labels: Vec<String>) -> Result<Self> {
        let d = regions.cols();
        if regions.shape().len() != 2 || regions.rows() == 0 {
            return Err(Error::Dimension(format!(
                "region features must be a non-empty matrix, got {:?}",
                regions.shape()
            )));
        }
        if regions.rows() != anatomy_labels.len() {
            return Err(Error::Dimension(format!(
                "{} region rows but {} anatomy labels",
                regions.rows(),
                anatomy_labels.len()
            )));
        }
        for (name, g) in [("frontal", &frontal), ("lateral", &lateral)] {
            if g.rows() != 1 || g.cols() != d {
                return Err(Error::Dimension(format!(
                    "{name} feature has shape {:?}, expected [1, {d}]",
                    g.shape()
                )));
            }
        }
        Ok(Self {
            regions,
            frontal: Tensor::row_vector(frontal.into_data()),
            lateral: Tensor::row_vector(lateral.into_data()),
            anatomy_labels,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.regions.rows()
    }

    pub fn dim(&self) -> usize {
        self.regions.cols()
    }

    /// Rows reordered so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<&[T]> = perm.iter().map(|&i| self.regions.row(i)).collect();
        let labels = perm.iter().map(|&i| self.anatomy_labels[i].clone()).collect();
        Self::new(Tensor::from_rows(&rows)?, self.frontal.clone(), self.lateral.clone(), labels)
    }

    /// The same bundle with frontal and lateral features exchanged.
    pub fn swapped_views(&self) -> Self {
        Self {
            regions: self.regions.clone(),
            frontal: self.lateral.clone(),
            lateral: self.frontal.clone(),
            anatomy_labels: self.anatomy_labels.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureBundle<U> {
        FeatureBundle {
            regions: self.regions.cast(),
            frontal: self.frontal.cast(),
            lateral: self.lateral.cast(),
            anatomy_labels: self.anatomy_labels.clone(),
        }
    }
}

/// Named architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoRegion,
    NoGlobal,
    NoSagate,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoRegion, Ablation::NoGlobal, Ablation::NoSagate];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRegion => "no-region",
            Ablation::NoGlobal => "no-global",
            Ablation::NoSagate => "no-sagate",
        }
    }

    pub fn row_label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRegion => "w/o region",
            Ablation::NoGlobal => "w/o global",
            Ablation::NoSagate => "w/o SAGate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub use_region: bool,
    pub use_global: bool,
    pub use_sagate: bool,
    pub encoder_layers: usize,
    pub n_heads: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::for_ablation(Ablation::Full, 3, 4)
    }
}

impl GateConfig {
    pub fn for_ablation(ablation: Ablation, encoder_layers: usize, n_heads: usize) -> Self {
        let (use_region, use_global, use_sagate) = match ablation {
            Ablation::Full => (true, true, true),
            Ablation::NoRegion => (false, true, true),
            Ablation::NoGlobal => (true, false, true),
            Ablation::NoSagate => (true, true, false),
        };
        Self {
            use_region,
            use_global,
            use_sagate,
            encoder_layers,
            n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_region && !self.use_global {
            return Err(Error::Config("at least one of the region and global pathways must be enabled".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::Config("n_heads must be positive".into()));
        }
        Ok(())
    }

    fn attention_pooling(&self) -> bool {
        self.use_region && self.use_sagate
    }

    /// Number of multi-granularity tokens produced by [`FusionGate::fuse`].
    pub fn token_count(&self) -> usize {
        usize::from(self.use_region) + if self.use_global { 2 } else { 0 }
    }
}

/// Raw bundle features bound as tape nodes.
#[derive(Clone, Copy)]
pub struct BundleVars<'a, 'l, T> {
    pub regions: Var<'a, T>,
    pub frontal: Var<'a, T>,
    pub lateral: Var<'a, T>,
    pub anatomy_labels: &'l [String],
}

/// Output of [`FusionGate::fuse`].
pub struct FusedFeatures<'a, T> {
    /// Fused region feature `1×d_model`; absent without the region pathway.
    pub fused_region: Option<Var<'a, T>>,
    /// Token sequence handed to the encoder, `M×d_model`.
    pub multi_grained: Var<'a, T>,
    pub frontal_record: Option<AttentionRecord>,
    pub lateral_record: Option<AttentionRecord>,
    /// Record of the learned-query pooling used without global features.
    pub query_record: Option<AttentionRecord>,
    pub encoded: Option<Var<'a, T>>,
}

/// Parameters and wiring of the fusion gate and its post-fusion encoder.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub config: GateConfig,
    pub d_feature: usize,
    pub d_model: usize,
    pub anatomy_labels: Vec<String>,
    pub input_proj: Linear,
    pub anatomy_embed: Option<ParamId>,
    pub gate: Option<AttentionParams>,
    pub learned_query: Option<ParamId>,
    pub encoder: Vec<EncoderLayer>,
}

impl FusionGate {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        config: GateConfig,
        d_feature: usize,
        d_model: usize,
        anatomy_labels: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        let input_proj = Linear::new(store, init, "fusion.input", d_feature, d_model, true)?;
        let (anatomy_embed, gate, learned_query) = if config.attention_pooling() {
            let embed = store.add("fusion.region.anatomy_embed", Tensor::zeros(anatomy_labels.len(), d_model))?;
            let gate = AttentionParams::new(store, init, "fusion.region.gate", d_model, config.n_heads)?;
            let query = if config.use_global {
                None
            } else {
                Some(store.add("fusion.region.query", init.normal(1, d_model, 1.0))?)
            };
            (Some(embed), Some(gate), query)
        } else {
            (None, None, None)
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(store, init, &format!("fusion.encoder.{i}"), d_model, config.n_heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            d_feature,
            d_model,
            anatomy_labels,
            input_proj,
            anatomy_embed,
            gate,
            learned_query,
            encoder,
        })
    }

    fn label_ids(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.anatomy_labels
                    .iter()
                    .position(|a| a == l)
                    .ok_or_else(|| Error::UnknownLabel(l.clone()))
            })
            .collect()
    }

    /// Builds the multi-granularity tokens `[fused region; frontal; lateral]`
    /// (or the reduced sequence of the active ablation).
    pub fn fuse<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, bundle: &FeatureBundle<T>) -> Result<FusedFeatures<'a, T>> {
        let inputs = BundleVars {
            regions: ctx.constant(bundle.regions.clone()),
            frontal: ctx.constant(bundle.frontal.clone()),
            lateral: ctx.constant(bundle.lateral.clone()),
            anatomy_labels: &bundle.anatomy_labels,
        };
        self.fuse_vars(ctx, inputs)
    }

    /// [`fuse`](Self::fuse) over features already on the tape, so gradients
    /// can flow back into them.
    pub fn fuse_vars<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, inputs: BundleVars<'a, '_, T>) -> Result<FusedFeatures<'a, T>> {
        let width = [inputs.regions, inputs.frontal, inputs.lateral].map(|v| v.cols());
        if width.iter().any(|&w| w != self.d_feature) {
            return Err(Error::Dimension(format!(
                "bundle feature widths {width:?} but the gate expects {}",
                self.d_feature
            )));
        }
        if inputs.regions.rows() != inputs.anatomy_labels.len() || inputs.frontal.rows() != 1 || inputs.lateral.rows() != 1 {
            return Err(Error::Dimension(format!(
                "expected {}×d regions and 1×d views, got {:?}, {:?}, {:?}",
                inputs.anatomy_labels.len(),
                inputs.regions.shape(),
                inputs.frontal.shape(),
                inputs.lateral.shape()
            )));
        }
        let cfg = &self.config;
        let frontal = self.input_proj.forward(ctx, inputs.frontal)?;
        let lateral = self.input_proj.forward(ctx, inputs.lateral)?;

        let mut fused = FusedFeatures {
            fused_region: None,
            multi_grained: frontal,
            frontal_record: None,
            lateral_record: None,
            query_record: None,
            encoded: None,
        };

        if cfg.use_region {
            let regions = self.input_proj.forward(ctx, inputs.regions)?;
            let pooled = match (&self.gate, self.anatomy_embed) {
                (Some(gate), Some(embed)) => {
                    let ids = self.label_ids(inputs.anatomy_labels)?;
                    let regions = regions.add(ctx.param(embed)?.embedding(&ids)?)?;
                    let (k, v) = gate.project_kv(ctx, regions, regions)?;
                    let keys = inputs.anatomy_labels.to_vec();
                    if cfg.use_global {
                        let f = gate.attend(ctx, frontal, k, v, false)?;
                        let l = gate.attend(ctx, lateral, k, v, false)?;
                        fused.frontal_record =
                            Some(AttentionRecord::from_weights(&f.weights, vec!["frontal".into()], keys.clone()));
                        fused.lateral_record =
                            Some(AttentionRecord::from_weights(&l.weights, vec!["lateral".into()], keys));
                        f.output.add(l.output)?
                    } else {
                        let query = self.learned_query.ok_or_else(|| {
                            Error::Config("global pathway disabled but no learned query exists".into())
                        })?;
                        let q = gate.attend(ctx, ctx.param(query)?, k, v, false)?;
                        fused.query_record =
                            Some(AttentionRecord::from_weights(&q.weights, vec!["learned".into()], keys));
                        q.output
                    }
                }
                _ => regions.mean_rows()?,
            };
            fused.fused_region = Some(pooled);
        }

        let mut tokens = Vec::with_capacity(3);
        tokens.extend(fused.fused_region);
        if cfg.use_global {
            tokens.push(frontal);
            tokens.push(lateral);
        }
        fused.multi_grained = ctx.tape().concat_rows(&tokens)?;
        Ok(fused)
    }

    /// Applies the first `layers` encoder layers to a token sequence.
    pub fn encode<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, tokens: Var<'a, T>, layers: usize) -> Result<Var<'a, T>> {
        if layers > self.encoder.len() {
            return Err(Error::Config(format!(
                "requested {layers} encoder layers but only {} exist",
                self.encoder.len()
            )));
        }
        if tokens.rows() == 0 {
            return Err(Error::Dimension("cannot encode an empty token sequence".into()));
        }
        self.encoder[..layers]
            .iter()
            .try_fold(tokens, |x, layer| layer.forward(ctx, x))
    }

    /// [`fuse_vars`](Self::fuse_vars) followed by the full encoder stack.
    pub fn fuse_and_encode_vars<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        inputs: BundleVars<'a, '_, T>,
    ) -> Result<FusedFeatures<'a, T>> {
        let mut fused = self.fuse_vars(ctx, inputs)?;
        fused.encoded = Some(self.encode(ctx, fused.multi_grained, self.encoder.len())?);
        Ok(fused)
    }

    /// [`fuse`](Self::fuse) followed by the full encoder stack.
    pub fn fuse_and_encode<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        bundle: &FeatureBundle<T>,
    ) -> Result<FusedFeatures<'a, T>> {
        let mut fused = self.fuse(ctx, bundle)?;
        fused.encoded = Some(self.encode(ctx, fused.multi_grained, self.encoder.len())?);
        Ok(fused)
    }
}

/// Mean attention weight that a pooling record assigns to one anatomy.
pub fn gate_mass(record: &AttentionRecord, label: &str) -> Result<f64> {
    record.mass(label)
}
