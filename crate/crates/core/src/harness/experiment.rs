use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache::PolicyKind;
use crate::engine::{validate_cross_layer, LayerCorrelation, Model, Session, ValidationOptions};
use crate::error::Result;
use crate::masks::{build_mask, mask_density, SparsityPattern};
use crate::numerics::Matrix;

use super::config::ExperimentConfig;
use super::macs::{estimate_macs, estimate_prefill_macs_layered, Phase};
use super::report::{CellMetrics, MetricsReport, MAC_MODEL};
use super::workload::{decode_inputs, generate_workload, salient_recall, Workload};

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: Model,
    workload: Workload,
    decode: Matrix,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let model = Model::new(cfg.model)?;
        let d_model = cfg.model.d_model;
        let workload = generate_workload(&cfg.workload_spec()?, d_model)?;
        let decode = decode_inputs(cfg.workload.seed, cfg.experiment.decode_steps, d_model);
        Ok(Self {
            cfg,
            model,
            workload,
            decode,
        })
    }

    fn session(&self, kind: PolicyKind, budget: f64, pattern: SparsityPattern) -> Result<Session> {
        Session::new(
            &self.cfg.model,
            self.cfg.token_layout()?,
            self.cfg.policy_for(kind, budget),
            pattern,
        )?
        .with_tile_size(self.cfg.policy.tile_size)
    }

    /// Prefill, compress, decode. Returns the session and every decode step's logits.
    fn run(&self, kind: PolicyKind, budget: f64, pattern: SparsityPattern) -> Result<(Session, Vec<Vec<f64>>)> {
        let mut session = self.session(kind, budget, pattern)?;
        self.model.prefill(&mut session, &self.workload.embeddings)?;
        session.apply_compression()?;
        let mut logits = Vec::with_capacity(self.decode.rows());
        for row in self.decode.row_iter() {
            logits.push(self.model.decode_step(&mut session, row)?);
        }
        Ok((session, logits))
    }

    fn validate(&self, session: &Session) -> Result<Vec<LayerCorrelation>> {
        let v = &self.cfg.experiment.validation;
        validate_cross_layer(
            &self.model,
            session,
            &self.workload.embeddings,
            &ValidationOptions {
                analysis_layer: v.analysis_layer,
                layers: None,
                n_perm: v.n_perm,
                seed: v.seed,
            },
        )
    }
}

/// Runs every (pattern, budget, policy) cell of the grid in that nesting order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let ctx = Context::new(cfg)?;
    let layout = cfg.token_layout()?;
    let l = layout.total_len();
    let st = cfg.policy.st_layer_index;
    // Validation depends only on the pattern and the recent window.
    let mut validations: BTreeMap<(String, usize), Vec<LayerCorrelation>> = BTreeMap::new();
    let mut cells = Vec::new();

    for pattern in cfg.patterns()? {
        let density = mask_density(&build_mask(&layout, &pattern)?)?;
        let prefill_macs = estimate_prefill_macs_layered(&layout, &pattern, st, &cfg.model)?.total();
        let (_, reference) = ctx.run(PolicyKind::Full, 1.0, pattern)?;

        for &budget in &cfg.experiment.budgets {
            for &kind in &cfg.experiment.policies {
                let (session, logits) = ctx.run(kind, budget, pattern)?;
                let retained = session.retained();
                let retained_per_head: Vec<usize> =
                    retained.iter().flatten().map(Vec::len).collect();
                let kept_total: usize = retained_per_head.iter().sum();
                let widest = retained_per_head.iter().copied().max().unwrap_or(0);

                let salient = &ctx.workload.salient_positions;
                let recall = if salient.is_empty() {
                    None
                } else {
                    let recalls = retained
                        .iter()
                        .flatten()
                        .map(|r| salient_recall(r, salient))
                        .collect::<Result<Vec<_>>>()?;
                    Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
                };

                let divergence = logits
                    .iter()
                    .flatten()
                    .zip(reference.iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);

                let layer_correlations = if cfg.experiment.validation.enabled {
                    let w = session.budget_split().map_or(0, |s| s.w);
                    let key = (pattern.name(), w);
                    if !validations.contains_key(&key) {
                        validations.insert(key.clone(), ctx.validate(&session)?);
                    }
                    validations[&key].clone()
                } else {
                    Vec::new()
                };

                // Each decode step attends the retained rows plus its own.
                let decode_macs =
                    estimate_macs(&layout, &pattern, &cfg.model, Phase::Decode, widest + 1)?.total();

                cells.push(CellMetrics {
                    policy: kind.name().to_string(),
                    pattern: pattern.name(),
                    budget,
                    prompt_len: l,
                    retained_per_head,
                    compression_ratio: (l * retained.iter().flatten().count()) as f64
                        / kept_total as f64,
                    mask_density: density,
                    estimated_prefill_macs: prefill_macs,
                    estimated_decode_macs_per_step: decode_macs,
                    output_divergence_vs_full: divergence,
                    salient_recall: recall,
                    median_rho: median_rho(&layer_correlations),
                    layer_correlations,
                });
            }
        }
    }
    Ok(MetricsReport {
        mac_model: MAC_MODEL.to_string(),
        cells,
    })
}

fn median_rho(layers: &[LayerCorrelation]) -> Option<f64> {
    let mut rhos: Vec<f64> = layers.iter().flat_map(|l| l.heads.iter().map(|h| h.rho)).collect();
    if rhos.is_empty() {
        return None;
    }
    rhos.sort_by(f64::total_cmp);
    let n = rhos.len();
    Some(if n % 2 == 1 {
        rhos[n / 2]
    } else {
        (rhos[n / 2 - 1] + rhos[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub pattern: String,
    pub budget: f64,
    pub recent_window: usize,
    pub median_rho: Option<f64>,
    pub layers: Vec<LayerCorrelation>,
}

/// Cross-layer validation for every (pattern, budget) pair, without running
/// compression or decode.
pub fn run_validation(cfg: &ExperimentConfig) -> Result<Vec<ValidationEntry>> {
    let ctx = Context::new(cfg)?;
    let mut out = Vec::new();
    for pattern in cfg.patterns()? {
        for &budget in &cfg.experiment.budgets {
            let session = ctx.session(PolicyKind::PureKv, budget, pattern)?;
            let layers = ctx.validate(&session)?;
            let l = session.layout().total_len();
            out.push(ValidationEntry {
                pattern: pattern.name(),
                budget,
                recent_window: crate::cache::budget_to_wh(budget, l, cfg.recent_window())?.w,
                median_rho: median_rho(&layers),
                layers,
            });
        }
    }
    Ok(out)
}
