//! Finite-difference gradient checks of the model's building blocks, run on
//! small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{GraphSelfAttentionBlock, GraphToGraphBlock};
use crate::autodiff::{Tensor, Var};
use crate::error::{contract_err, Result};
use crate::matching::{
    cost_matrix, hungarian_match, loss_at_assignment, GroundTruthSet, Instance, LossWeights,
    Segment,
};
use crate::model::{ActivityGraphTransformer, ModelConfig, PredictionHeads};
use crate::nn::{param_grad_check, Mode, NodeMask, ParamKind, ParamStore, Session};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance from a non-smooth point for a draw to count.
pub const KINK_MARGIN: f64 = 1e-4;
/// Random draws tried per module before giving up on finding a smooth point.
pub const MAX_DRAWS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedModule {
    GraphSelfAttention,
    GraphToGraph,
    PredictionHeads,
    HungarianLoss,
}

impl CheckedModule {
    pub const ALL: [CheckedModule; 4] = [
        CheckedModule::GraphSelfAttention,
        CheckedModule::GraphToGraph,
        CheckedModule::PredictionHeads,
        CheckedModule::HungarianLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedModule::GraphSelfAttention => "graph_self_attention",
            CheckedModule::GraphToGraph => "graph_to_graph",
            CheckedModule::PredictionHeads => "prediction_heads",
            CheckedModule::HungarianLoss => "hungarian_loss",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleCheck {
    pub module: CheckedModule,
    /// Worst relative error over the accepted draws.
    pub max_rel_error: f64,
    /// Draws that were far enough from every kink to be compared.
    pub draws: usize,
    pub coordinates: usize,
}

impl ModuleCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.draws > 0 && self.max_rel_error < tolerance
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// `Σ w ⊙ out` for a fixed random `w`, so every output entry reaches the loss.
fn project(s: &mut Session<'_>, out: Var, weights: &[f64]) -> Result<Var> {
    let weighted = s.tape.mul_const(out, weights.to_vec())?;
    Ok(s.tape.sum(weighted))
}

fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct Draw {
    rel_error: f64,
    kink_margin: f64,
    coordinates: usize,
}

fn draw_module(module: CheckedModule, config: &ModelConfig, seed: u64) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n_v, n_o) = (config.model_dim, config.max_positions, config.num_queries);
    let dims = config.attention_dims();
    let mut store = ParamStore::new();
    // Inputs live in the store so their gradients are checked too.
    let check = match module {
        CheckedModule::GraphSelfAttention => {
            let x = store.add(
                "input",
                ParamKind::Embedding,
                random_matrix(&mut rng, n_v, d),
            );
            let block = GraphSelfAttentionBlock::new(&mut store, &mut rng, "block", dims)?;
            let w = weights(&mut rng, n_v * d);
            let mask = NodeMask::all(n_v);
            param_grad_check(&store, Mode::Train, FD_STEP, |s| {
                let x = s.param(x);
                let out = block.forward(s, x, &mask)?;
                project(s, out, &w)
            })?
        }
        CheckedModule::GraphToGraph => {
            let target = store.add(
                "target",
                ParamKind::Embedding,
                random_matrix(&mut rng, n_o, d),
            );
            let source = store.add(
                "source",
                ParamKind::Embedding,
                random_matrix(&mut rng, n_v, d),
            );
            let block = GraphToGraphBlock::new(&mut store, &mut rng, "block", dims)?;
            let w = weights(&mut rng, n_o * d);
            let mask = NodeMask::all(n_v);
            param_grad_check(&store, Mode::Train, FD_STEP, |s| {
                let (t, src) = (s.param(target), s.param(source));
                let out = block.forward(s, t, src, &mask)?;
                project(s, out, &w)
            })?
        }
        CheckedModule::PredictionHeads => {
            let y = store.add(
                "input",
                ParamKind::Embedding,
                random_matrix(&mut rng, n_o, d),
            );
            let heads = PredictionHeads::new(&mut store, &mut rng, config);
            let wp = weights(&mut rng, n_o * (config.num_classes + 1));
            let ws = weights(&mut rng, n_o * 2);
            param_grad_check(&store, Mode::Train, FD_STEP, |s| {
                let y = s.param(y);
                let out = heads.forward(s, y)?;
                let a = project(s, out.class_probs, &wp)?;
                let b = project(s, out.segments, &ws)?;
                s.tape.add(a, b)
            })?
        }
        CheckedModule::HungarianLoss => {
            let model = ActivityGraphTransformer::new(config.clone(), seed)?;
            let v = random_matrix(&mut rng, n_v, config.input_dim);
            let mask = NodeMask::all(n_v);
            let count = rng.gen_range(1..n_o.min(4));
            let gt = GroundTruthSet::new(
                (0..count)
                    .map(|_| {
                        let a = rng.gen_range(0.0..0.8);
                        let b = rng.gen_range(a + 0.05..1.0);
                        Instance {
                            class: rng.gen_range(0..config.num_classes),
                            segment: Segment::new(a, b),
                        }
                    })
                    .collect(),
            );
            let w = LossWeights::default();
            let base = {
                let mut s = Session::new(model.store(), Mode::Train, false);
                model.forward(&mut s, &v, &mask)?.read(&s)
            };
            let assignment = hungarian_match(&cost_matrix(&gt, &base, &w)?)?;
            let check = param_grad_check(model.store(), Mode::Train, FD_STEP, |s| {
                let out = model.forward(s, &v, &mask)?;
                loss_at_assignment(&mut s.tape, &gt, out, &assignment, &w)
            })?;
            return Ok(Draw {
                rel_error: check.report.max_rel_error,
                kink_margin: check.kink_margin,
                coordinates: model.store().num_scalars(),
            });
        }
    };
    Ok(Draw {
        rel_error: check.report.max_rel_error,
        kink_margin: check.kink_margin,
        coordinates: store.num_scalars(),
    })
}

/// Checks `module` on up to [`MAX_DRAWS`] seeded draws, keeping the first
/// `wanted` that sit at least [`KINK_MARGIN`] from a non-smooth point.
pub fn check_module(
    module: CheckedModule,
    config: &ModelConfig,
    seed: u64,
    wanted: usize,
) -> Result<ModuleCheck> {
    config.validate()?;
    if config.dropout != 0.0 {
        return Err(contract_err!("gradient checks need dropout 0"));
    }
    let mut report = ModuleCheck {
        module,
        max_rel_error: 0.0,
        draws: 0,
        coordinates: 0,
    };
    for k in 0..MAX_DRAWS {
        if report.draws == wanted {
            break;
        }
        let draw = draw_module(module, config, seed.wrapping_mul(MAX_DRAWS).wrapping_add(k))?;
        if draw.kink_margin <= KINK_MARGIN {
            continue;
        }
        report.max_rel_error = report.max_rel_error.max(draw.rel_error);
        report.coordinates = draw.coordinates;
        report.draws += 1;
    }
    Ok(report)
}

pub fn check_all(config: &ModelConfig, seed: u64, wanted: usize) -> Result<Vec<ModuleCheck>> {
    CheckedModule::ALL
        .iter()
        .map(|&m| check_module(m, config, seed, wanted))
        .collect()
}
