//! The full encoder–decoder: learnable positional table, input projection,
//! graph encoder, action query graph, graph decoder, and prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDims, FeedForward, GraphSelfAttentionBlock, GraphToGraphBlock};
use crate::autodiff::{Tensor, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{
    gaussian_table, EvalNorm, Linear, NodeMask, ParamId, ParamKind, ParamStore, Session,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of each input feature row.
    pub input_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Size of the action query graph (fixed prediction-set cardinality).
    pub num_queries: usize,
    /// Rows in the positional table; longer inputs must be subsampled.
    pub max_positions: usize,
    /// Action classes, not counting the no-action class.
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Hidden width of the position-wise feed-forward sublayers.
    pub ffn_dim: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub eval_norm: EvalNorm,
    /// Multiplier on the initial weights closing each residual branch
    /// (normalization projection, attention output, feed-forward output).
    #[serde(default = "default_branch_gain")]
    pub branch_gain: f64,
}

fn default_leaky_slope() -> f64 {
    0.01
}

fn default_branch_gain() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("num_queries", self.num_queries),
            ("max_positions", self.max_positions),
            ("num_classes", self.num_classes),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(contract_err!("model.{name} must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(contract_err!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim,
                self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(contract_err!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(contract_err!(
                "leaky_slope must be a finite non-negative number"
            ));
        }
        if !(self.branch_gain.is_finite() && self.branch_gain >= 0.0) {
            return Err(contract_err!(
                "branch_gain must be a finite non-negative number"
            ));
        }
        Ok(())
    }

    /// Index of the no-action class in probability rows.
    pub fn no_action(&self) -> usize {
        self.num_classes
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            dim: self.model_dim,
            heads: self.heads,
            leaky_slope: self.leaky_slope,
            dropout: self.dropout,
            eval_norm: self.eval_norm,
        }
    }
}

/// Fixed-size set of predictions: class distributions (last column is the
/// no-action class) and normalized `(start, end)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub class_probs: Tensor,
    pub segments: Tensor,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.class_probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.cols() - 1
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        self.class_probs.row(i)
    }

    pub fn segment(&self, i: usize) -> (f64, f64) {
        (self.segments.get2(i, 0), self.segments.get2(i, 1))
    }
}

/// Prediction outputs still attached to a tape.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `N_o × (C+1)` probabilities.
    pub class_probs: Var,
    /// `N_o × 2` sigmoid outputs.
    pub segments: Var,
}

impl PredictionVars {
    pub fn read(&self, s: &Session<'_>) -> PredictionSet {
        PredictionSet {
            class_probs: s.tape.value(self.class_probs).clone(),
            segments: s.tape.value(self.segments).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: GraphSelfAttentionBlock,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attention: GraphSelfAttentionBlock,
    pub cross_attention: GraphToGraphBlock,
    pub ffn: FeedForward,
}

/// Initial logit offset of the segment head outputs.
pub const SEGMENT_BIAS: f64 = 1.5;

#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub segment: [Linear; 3],
    pub class: Linear,
}

impl PredictionHeads {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let segment = [
            Linear::new(store, rng, "heads.segment.0", d, d, true),
            Linear::new(store, rng, "heads.segment.1", d, d, true),
            Linear::new(store, rng, "heads.segment.2", d, 2, true),
        ];
        // Start below end at init; the IoU term is blind to endpoint order.
        if let Some(b) = segment[2].bias {
            store.get_mut(b).value = Tensor::vector(vec![-SEGMENT_BIAS, SEGMENT_BIAS]);
        }
        Self {
            segment,
            class: Linear::new(store, rng, "heads.class", d, cfg.num_classes + 1, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, y: Var) -> Result<PredictionVars> {
        let mut h = y;
        for layer in &self.segment[..2] {
            h = layer.forward(s, h)?;
            h = s.tape.relu(h);
        }
        let seg = self.segment[2].forward(s, h)?;
        let segments = s.tape.sigmoid(seg);
        let logits = self.class.forward(s, y)?;
        let class_probs = s.tape.softmax(logits, 1)?;
        Ok(PredictionVars {
            class_probs,
            segments,
        })
    }
}

/// The activity graph transformer and its parameters.
#[derive(Clone, Debug)]
pub struct ActivityGraphTransformer {
    config: ModelConfig,
    store: ParamStore,
    pub positional: ParamId,
    pub input_proj: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub queries: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub heads: PredictionHeads,
}

impl ActivityGraphTransformer {
    /// Builds a model with Xavier-initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let dims = cfg.attention_dims();
        let table_scale = 1.0 / (cfg.model_dim as f64).sqrt();
        let positional = store.add(
            "positional",
            ParamKind::Embedding,
            gaussian_table(&mut rng, cfg.max_positions, cfg.input_dim, table_scale),
        );
        let input_proj = Linear::new(
            &mut store,
            &mut rng,
            "input_proj",
            cfg.input_dim,
            cfg.model_dim,
            true,
        );
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let name = format!("encoder.block{l}");
                Ok(EncoderBlock {
                    attention: GraphSelfAttentionBlock::new(&mut store, &mut rng, &name, dims)?,
                    ffn: FeedForward::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.ffn"),
                        cfg.model_dim,
                        cfg.ffn_dim,
                        cfg.dropout,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let queries = store.add(
            "queries",
            ParamKind::Embedding,
            gaussian_table(&mut rng, cfg.num_queries, cfg.model_dim, table_scale),
        );
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let name = format!("decoder.block{l}");
                Ok(DecoderBlock {
                    self_attention: GraphSelfAttentionBlock::new(
                        &mut store, &mut rng, &name, dims,
                    )?,
                    cross_attention: GraphToGraphBlock::new(&mut store, &mut rng, &name, dims)?,
                    ffn: FeedForward::new(
                        &mut store,
                        &mut rng,
                        &format!("{name}.ffn"),
                        cfg.model_dim,
                        cfg.ffn_dim,
                        cfg.dropout,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = PredictionHeads::new(&mut store, &mut rng, cfg);
        let mut model = Self {
            config,
            store,
            positional,
            input_proj,
            encoder,
            queries,
            decoder,
            heads,
        };
        let gain = model.config.branch_gain;
        for id in model.branch_outputs() {
            model
                .store
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= gain);
        }
        Ok(model)
    }

    /// Last weight matrix of every residual branch, in construction order.
    pub fn branch_outputs(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.encoder {
            ids.extend([
                b.attention.post.linear.weight,
                b.attention.self_attn.output,
                b.ffn.output.weight,
            ]);
        }
        for b in &self.decoder {
            ids.extend([
                b.self_attention.post.linear.weight,
                b.self_attention.self_attn.output,
            ]);
            ids.extend([
                b.cross_attention.post.linear.weight,
                b.cross_attention.self_attn.output,
                b.ffn.output.weight,
            ]);
        }
        ids
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Context graph `N_v × d` for a feature matrix `N_v × C_in`.
    pub fn encode(&self, s: &mut Session<'_>, features: &Tensor, mask: &NodeMask) -> Result<Var> {
        let (n, c) = features.dims2()?;
        if c != self.config.input_dim {
            return Err(shape_err!(
                "features have {c} channels, model expects {}",
                self.config.input_dim
            ));
        }
        if n != mask.len() {
            return Err(shape_err!(
                "{n} feature rows but mask covers {}",
                mask.len()
            ));
        }
        if n > self.config.max_positions {
            return Err(contract_err!(
                "{n} temporal positions exceed the positional table ({})",
                self.config.max_positions
            ));
        }
        let v = s.tape.constant(features.clone());
        let table = s.param(self.positional);
        let pos = s.tape.slice(table, 0, 0, n)?;
        let x = s.tape.add(v, pos)?;
        let mut h = self.input_proj.forward(s, x)?;
        for block in &self.encoder {
            h = block.attention.forward(s, h, mask)?;
            h = block.ffn.forward(s, h)?;
        }
        Ok(h)
    }

    /// Decoder output `N_o × d` given a context graph.
    pub fn decode(&self, s: &mut Session<'_>, context: Var, mask: &NodeMask) -> Result<Var> {
        match *s.tape.shape(context) {
            [n, d] if d == self.config.model_dim && n == mask.len() => {}
            ref other => {
                return Err(shape_err!(
                    "context graph {other:?} does not match model width {}",
                    self.config.model_dim
                ))
            }
        }
        let all = NodeMask::all(self.config.num_queries);
        let mut y = s.param(self.queries);
        for block in &self.decoder {
            y = block.self_attention.forward(s, y, &all)?;
            y = block.cross_attention.forward(s, y, context, mask)?;
            y = block.ffn.forward(s, y)?;
        }
        Ok(y)
    }

    pub fn predict_heads(&self, s: &mut Session<'_>, y: Var) -> Result<PredictionVars> {
        self.heads.forward(s, y)
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        features: &Tensor,
        mask: &NodeMask,
    ) -> Result<PredictionVars> {
        let h = self.encode(s, features, mask)?;
        let y = self.decode(s, h, mask)?;
        self.predict_heads(s, y)
    }

    /// Eval-mode prediction for one feature matrix with no padding.
    pub fn predict(&self, features: &Tensor) -> Result<PredictionSet> {
        let mask = NodeMask::all(features.rows());
        self.predict_masked(features, &mask)
    }

    pub fn predict_masked(&self, features: &Tensor, mask: &NodeMask) -> Result<PredictionSet> {
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, features, mask)?;
        Ok(out.read(&s))
    }
}
