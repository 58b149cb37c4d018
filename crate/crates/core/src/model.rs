//! The full report generator: fusion gate and encoder feeding the decoder.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::captioning::search::{generate_beam, generate_greedy, Generated, StepModel};
use crate::captioning::{Decoder, DecoderConfig, DecoderState, TokenSequence, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::fusion::{Ablation, BundleVars, FeatureBundle, FusedFeatures, FusionGate, GateConfig};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_feature: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub memory_slots: usize,
    /// Longest report in tokens, counting `bos` and `eos`.
    pub max_len: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feature: 64,
            d_model: 64,
            n_heads: 4,
            encoder_layers: 3,
            decoder_layers: 3,
            memory_slots: 3,
            max_len: 48,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn gate_config(&self) -> GateConfig {
        GateConfig::for_ablation(self.ablation, self.encoder_layers, self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_feature", self.d_feature),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("decoder_layers", self.decoder_layers),
            ("memory_slots", self.memory_slots),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for bos and eos".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        self.gate_config().validate()
    }
}

/// Architecture description; parameter values live in a separate
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ReportModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub gate: FusionGate,
    pub decoder: Decoder,
}

impl ReportModel {
    pub fn new<T: Scalar>(
        config: ModelConfig,
        vocab: Vocabulary,
        anatomy_labels: Vec<String>,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let gate = FusionGate::new(
            &mut store,
            &mut init,
            config.gate_config(),
            config.d_feature,
            config.d_model,
            anatomy_labels,
        )?;
        let decoder = Decoder::new(
            &mut store,
            &mut init,
            DecoderConfig {
                vocab_size: vocab.len(),
                d_model: config.d_model,
                n_heads: config.n_heads,
                layers: config.decoder_layers,
                memory_slots: config.memory_slots,
                max_len: config.max_len - 1,
            },
        )?;
        Ok((
            Self {
                config,
                vocab,
                gate,
                decoder,
            },
            store,
        ))
    }

    pub fn anatomy_labels(&self) -> &[String] {
        &self.gate.anatomy_labels
    }

    pub fn encode<'a, T: Scalar>(&self, ctx: &Ctx<'a, T>, bundle: &FeatureBundle<T>) -> Result<FusedFeatures<'a, T>> {
        self.gate.fuse_and_encode(ctx, bundle)
    }

    fn encoded<'a, T: Scalar>(fused: &FusedFeatures<'a, T>) -> Var<'a, T> {
        fused.encoded.expect("fuse_and_encode always fills the encoded tokens")
    }

    /// Teacher-forced logits for the inputs of `seq`.
    pub fn logits<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        bundle: &FeatureBundle<T>,
        seq: &TokenSequence,
    ) -> Result<Var<'a, T>> {
        let (inputs, _) = seq.shifted()?;
        let fused = self.encode(ctx, bundle)?;
        self.decoder.forward(ctx, inputs, Self::encoded(&fused))
    }

    /// Mean token cross-entropy of `seq` under teacher forcing.
    pub fn loss<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        bundle: &FeatureBundle<T>,
        seq: &TokenSequence,
    ) -> Result<Var<'a, T>> {
        let (_, targets) = seq.shifted()?;
        let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(self.logits(ctx, bundle, seq)?.cross_entropy(&targets, PAD as usize)?)
    }

    /// Teacher-forced loss with the bundle features supplied as tape nodes.
    pub fn loss_vars<'a, T: Scalar>(
        &self,
        ctx: &Ctx<'a, T>,
        inputs: BundleVars<'a, '_, T>,
        seq: &TokenSequence,
    ) -> Result<Var<'a, T>> {
        let (inputs_ids, targets) = seq.shifted()?;
        let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let fused = self.gate.fuse_and_encode_vars(ctx, inputs)?;
        let logits = self.decoder.forward(ctx, inputs_ids, Self::encoded(&fused))?;
        Ok(logits.cross_entropy(&targets, PAD as usize)?)
    }

    /// Loss and (correct, counted) teacher-forced arg-max predictions.
    pub fn score<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        bundle: &FeatureBundle<T>,
        seq: &TokenSequence,
    ) -> Result<(f64, usize, usize)> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let (_, targets) = seq.shifted()?;
        let logits = self.logits(&ctx, bundle, seq)?;
        let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let loss = logits.cross_entropy(&t, PAD as usize)?.value().item().to_f64_lossy();
        let values = logits.value();
        let mut correct = 0;
        let mut counted = 0;
        for (i, &target) in targets.iter().enumerate() {
            if target == PAD {
                continue;
            }
            let row: Vec<f64> = values.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            counted += 1;
            correct += usize::from(crate::captioning::search::argmax(&row) == target as usize);
        }
        Ok((loss, correct, counted))
    }

    /// Encoded context tokens and the pooling records, without gradients.
    pub fn context<T: Scalar>(&self, params: &ParamStore<T>, bundle: &FeatureBundle<T>) -> Result<EncodedContext<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let fused = self.encode(&ctx, bundle)?;
        Ok(EncodedContext {
            tokens: Self::encoded(&fused).value().as_ref().clone(),
            frontal: fused.frontal_record,
            lateral: fused.lateral_record,
            query: fused.query_record,
        })
    }

    pub fn generator<'m, T: Scalar>(
        &'m self,
        params: &'m ParamStore<T>,
        context: &'m Tensor<T>,
    ) -> Generator<'m, T> {
        Generator {
            decoder: &self.decoder,
            params,
            context,
        }
    }

    /// Longest number of tokens a decode may append after `bos`.
    pub fn max_new_tokens(&self) -> usize {
        self.config.max_len - 1
    }

    pub fn generate_greedy<T: Scalar>(&self, params: &ParamStore<T>, bundle: &FeatureBundle<T>) -> Result<Generated> {
        let ctx = self.context(params, bundle)?;
        generate_greedy(&self.generator(params, &ctx.tokens), self.max_new_tokens())
    }

    pub fn generate_beam<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        bundle: &FeatureBundle<T>,
        beam: usize,
        alpha: f64,
    ) -> Result<Generated> {
        let ctx = self.context(params, bundle)?;
        generate_beam(&self.generator(params, &ctx.tokens), beam, self.max_new_tokens(), alpha)
    }
}

pub struct EncodedContext<T> {
    pub tokens: Tensor<T>,
    pub frontal: Option<AttentionRecord>,
    pub lateral: Option<AttentionRecord>,
    pub query: Option<AttentionRecord>,
}

/// Incremental decoder bound to one encoded context.
pub struct Generator<'m, T> {
    decoder: &'m Decoder,
    params: &'m ParamStore<T>,
    context: &'m Tensor<T>,
}

impl<T: Scalar> StepModel for Generator<'_, T> {
    type State = DecoderState<T>;

    fn start(&self) -> Result<Self::State> {
        self.decoder.start(self.params, self.context)
    }

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        Ok(self
            .decoder
            .step(self.params, state, token)?
            .into_iter()
            .map(Scalar::to_f64_lossy)
            .collect())
    }
}
